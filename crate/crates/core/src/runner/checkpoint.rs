//! Append-only run log and generation-boundary checkpoints.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::instruction::{
    individual_from_value, individual_to_value, instruction_from_value, instruction_to_value,
    Individual,
};

use super::archive::Archive;

pub const RUN_LOG_FILE: &str = "run.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Record-per-line event log. Lines carry no timestamps so that a seeded run
/// under mock backends reproduces the file byte for byte.
pub struct RunLog {
    path: PathBuf,
    file: File,
    bytes: u64,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            bytes: 0,
        })
    }

    /// Reopens an existing log, dropping anything written after `bytes`
    /// (events of a generation that never reached its checkpoint).
    pub fn resume(path: &Path, bytes: u64) -> Result<Self> {
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len < bytes {
            return Err(Error::Config(format!(
                "{} is shorter ({len} bytes) than its checkpoint records ({bytes})",
                path.display()
            )));
        }
        file.set_len(bytes).map_err(|e| Error::io(path, e))?;
        let mut file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            bytes,
        })
    }

    pub fn append(&mut self, event: &Value) -> Result<()> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.bytes += line.len() as u64;
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Complete engine state at a generation boundary. Random streams are derived
/// from `(seed, purpose, generation)`, so the seed and the generation counter
/// are their entire state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub population_size: usize,
    pub generation_completed: u32,
    pub next_id: u64,
    pub injection_counter: u64,
    pub run_log_bytes: u64,
    /// Evaluated seed instructions feeding the variant generator.
    pub seeds: Vec<Individual>,
    /// Current population; members injected at the last boundary are unevaluated.
    pub population: Vec<Individual>,
    pub archive: Archive,
}

fn member_to_value(ind: &Individual) -> Result<Value> {
    if ind.objectives.is_some() {
        return individual_to_value(ind);
    }
    Ok(json!({
        "instruction": instruction_to_value(&ind.instruction),
        "generation_born": ind.generation_born,
        "pending": true,
    }))
}

fn member_from_value(value: &Value, path: &str) -> Result<Individual> {
    if value.get("pending").and_then(Value::as_bool) == Some(true) {
        let instruction = instruction_from_value(&value["instruction"], &format!("{path}.instruction"))?;
        let born = value["generation_born"]
            .as_u64()
            .and_then(|g| u32::try_from(g).ok())
            .ok_or_else(|| Error::parse(format!("{path}.generation_born"), "expected u32"))?;
        return Ok(Individual::new(instruction, born));
    }
    individual_from_value(value).map_err(|e| match e {
        Error::Parse { field, reason } => Error::parse(format!("{path}.{field}"), reason),
        other => other,
    })
}

fn u64_field(obj: &Map<String, Value>, name: &str) -> Result<u64> {
    obj.get(name)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::parse(name, "expected an unsigned integer"))
}

fn array_field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Vec<Value>> {
    obj.get(name)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(name, "expected an array"))
}

impl Checkpoint {
    pub fn to_value(&self) -> Result<Value> {
        Ok(json!({
            "seed": self.seed,
            "population_size": self.population_size,
            "generation_completed": self.generation_completed,
            "next_id": self.next_id,
            "injection_counter": self.injection_counter,
            "run_log_bytes": self.run_log_bytes,
            "seeds": self.seeds.iter().map(individual_to_value).collect::<Result<Vec<_>>>()?,
            "population": self.population.iter().map(member_to_value).collect::<Result<Vec<_>>>()?,
            "archive": self.archive.to_records()?,
        }))
    }

    pub fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse("<checkpoint>", "expected an object"))?;
        let seeds = array_field(obj, "seeds")?
            .iter()
            .enumerate()
            .map(|(i, v)| member_from_value(v, &format!("seeds[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let population = array_field(obj, "population")?
            .iter()
            .enumerate()
            .map(|(i, v)| member_from_value(v, &format!("population[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: u64_field(obj, "seed")?,
            population_size: u64_field(obj, "population_size")? as usize,
            generation_completed: u32::try_from(u64_field(obj, "generation_completed")?)
                .map_err(|_| Error::parse("generation_completed", "out of range"))?,
            next_id: u64_field(obj, "next_id")?,
            injection_counter: u64_field(obj, "injection_counter")?,
            run_log_bytes: u64_field(obj, "run_log_bytes")?,
            seeds,
            population,
            archive: Archive::from_records(array_field(obj, "archive")?)?,
        })
    }

    /// Writes `checkpoint.json` atomically plus a per-generation copy.
    pub fn write(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_value()?)?;
        let dir = out.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let per_gen = dir.join(format!("gen_{:04}.json", self.generation_completed));
        write_atomic(&per_gen, &text)?;
        write_atomic(&out.join(CHECKPOINT_FILE), &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_value(&value)
    }
}

pub(crate) fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
