//! Multi-objective evolution of natural-language task instructions.
//!
//! A population of instructions (definition + example block) is evolved with
//! NSGA-II. Offspring come from four LLM-backed operators, optionally guided by
//! the parents' objective values, and fitness is the triple
//! (1 / metric sum, character length, perplexity), all minimized.

pub mod error;
pub mod gateway;
pub mod instruction;
pub mod moea;
pub mod objectives;
pub mod operators;
pub mod runner;

pub use error::{Error, GatewayError, Result};
pub use instruction::{dominates, Individual, Instruction, InstructionId, ObjectiveVector, TaskExample};
