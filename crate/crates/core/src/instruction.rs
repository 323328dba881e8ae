//! Instructions, objective vectors and individuals, plus the one-record-per-line
//! JSON layout used by run logs, checkpoints and exports.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::operators::OperatorKind;

/// Joins the definition and the example block when rendering.
pub const SEPARATOR: char = '\n';

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionId(pub u64);

impl fmt::Display for InstructionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub operator: OperatorKind,
    pub parents: Vec<InstructionId>,
}

/// The evolvable gene: a task definition plus an example block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    definition: String,
    example: String,
    id: InstructionId,
    lineage: Vec<LineageRecord>,
}

impl Instruction {
    pub fn new(
        id: InstructionId,
        definition: impl Into<String>,
        example: impl Into<String>,
    ) -> Result<Self> {
        let definition = definition.into();
        if definition.trim().is_empty() {
            return Err(Error::Argument(
                "instruction definition must not be blank".into(),
            ));
        }
        Ok(Self {
            definition,
            example: example.into(),
            id,
            lineage: Vec::new(),
        })
    }

    pub fn with_lineage(mut self, record: LineageRecord) -> Self {
        self.lineage.push(record);
        self
    }

    pub fn definition(&self) -> &str {
        &self.definition
    }

    pub fn example(&self) -> &str {
        &self.example
    }

    pub fn id(&self) -> InstructionId {
        self.id
    }

    pub fn lineage(&self) -> &[LineageRecord] {
        &self.lineage
    }

    pub fn render(&self) -> String {
        render_parts(&self.definition, &self.example)
    }
}

/// `definition`, then the separator and `example` when the example is non-empty.
pub fn render_parts(definition: &str, example: &str) -> String {
    if example.is_empty() {
        return definition.to_owned();
    }
    let mut out = String::with_capacity(definition.len() + 1 + example.len());
    out.push_str(definition);
    out.push(SEPARATOR);
    out.push_str(example);
    out
}

/// Fitness triple; every component is minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveVector {
    /// Reciprocal of the summed task metrics.
    pub performance: f64,
    /// Character count of the rendered instruction.
    pub length: u64,
    pub perplexity: f64,
}

impl ObjectiveVector {
    pub fn new(performance: f64, length: u64, perplexity: f64) -> Result<Self> {
        if !performance.is_finite() || performance < 0.0 {
            return Err(Error::parse(
                "performance",
                format!("expected a finite non-negative number, got {performance}"),
            ));
        }
        if !perplexity.is_finite() || perplexity < 1.0 {
            return Err(Error::parse(
                "perplexity",
                format!("expected a finite number >= 1, got {perplexity}"),
            ));
        }
        Ok(Self {
            performance,
            length,
            perplexity,
        })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.performance, self.length as f64, self.perplexity]
    }
}

impl<'de> Deserialize<'de> for ObjectiveVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        objectives_from_value(&value, "objectives").map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ObjectiveVector {
    /// `(m, l, r)` with four significant digits per component.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {})",
            format_sig4(self.performance),
            format_sig4(self.length as f64),
            format_sig4(self.perplexity)
        )
    }
}

/// Plain decimal rendering rounded to four significant digits, trailing zeros trimmed.
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = 3 - magnitude;
    if decimals <= 0 {
        let scale = 10f64.powi(-decimals);
        return format!("{}", (x / scale).round() * scale);
    }
    let s = format!("{:.*}", decimals as usize, x);
    s.trim_end_matches('0').trim_end_matches('.').to_owned()
}

/// Pareto dominance under minimization.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    dominates_slice(&a.as_array(), &b.as_array())
}

pub fn dominates_slice(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// A labelled task sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub input: String,
    pub output: String,
}

impl TaskExample {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Result<Self> {
        let input = input.into();
        if input.is_empty() {
            return Err(Error::Argument("task example input is empty".into()));
        }
        Ok(Self {
            input,
            output: output.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub instruction: Instruction,
    pub objectives: Option<ObjectiveVector>,
    pub generation_born: u32,
    /// Non-domination rank from the most recent selection.
    pub rank: Option<usize>,
    /// Crowding distance from the most recent selection; may be `+inf`.
    pub crowding: Option<f64>,
}

impl Individual {
    pub fn new(instruction: Instruction, generation_born: u32) -> Self {
        Self {
            instruction,
            objectives: None,
            generation_born,
            rank: None,
            crowding: None,
        }
    }

    pub fn evaluated(mut self, objectives: ObjectiveVector) -> Self {
        self.objectives = Some(objectives);
        self
    }

    pub fn id(&self) -> InstructionId {
        self.instruction.id()
    }

    pub fn clear_sort_state(&mut self) {
        self.rank = None;
        self.crowding = None;
    }
}

pub(crate) fn instruction_to_value(instr: &Instruction) -> Value {
    json!({
        "id": instr.id,
        "definition": instr.definition,
        "example": instr.example,
        "lineage": instr.lineage,
    })
}

fn objectives_to_value(obj: &ObjectiveVector) -> Value {
    json!({
        "performance": obj.performance,
        "length": obj.length,
        "perplexity": obj.perplexity,
    })
}

/// Serializes an evaluated individual as a single-line JSON object.
pub fn serialize_individual(ind: &Individual) -> Result<String> {
    Ok(serde_json::to_string(&individual_to_value(ind)?)?)
}

pub fn individual_to_value(ind: &Individual) -> Result<Value> {
    let objectives = ind.objectives.as_ref().ok_or_else(|| {
        Error::Argument(format!(
            "individual {} has no objectives to serialize",
            ind.id()
        ))
    })?;
    let crowding = match ind.crowding {
        None => Value::Null,
        Some(c) if c.is_infinite() && c > 0.0 => Value::String("inf".into()),
        Some(c) => json!(c),
    };
    Ok(json!({
        "instruction": instruction_to_value(&ind.instruction),
        "objectives": objectives_to_value(objectives),
        "generation_born": ind.generation_born,
        "rank": ind.rank,
        "crowding": crowding,
    }))
}

pub fn deserialize_individual(record: &str) -> Result<Individual> {
    let value: Value =
        serde_json::from_str(record).map_err(|e| Error::parse("<record>", e.to_string()))?;
    individual_from_value(&value)
}

pub fn individual_from_value(value: &Value) -> Result<Individual> {
    let obj = as_object(value, "<record>")?;
    let instruction = instruction_from_value(field(obj, "instruction", "")?, "instruction")?;
    let objectives = objectives_from_value(field(obj, "objectives", "")?, "objectives")?;
    let generation_born = u32::try_from(as_u64(field(obj, "generation_born", "")?, "generation_born")?)
        .map_err(|_| Error::parse("generation_born", "out of range"))?;
    let rank = match obj.get("rank") {
        None | Some(Value::Null) => None,
        Some(v) => Some(as_u64(v, "rank")? as usize),
    };
    let crowding = match obj.get("crowding") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s == "inf" => Some(f64::INFINITY),
        Some(v) => {
            let c = as_f64(v, "crowding")?;
            if c < 0.0 {
                return Err(Error::parse("crowding", "negative crowding distance"));
            }
            Some(c)
        }
    };
    if rank.is_some() != crowding.is_some() {
        return Err(Error::parse(
            "rank",
            "rank and crowding must be present together",
        ));
    }
    Ok(Individual {
        instruction,
        objectives: Some(objectives),
        generation_born,
        rank,
        crowding,
    })
}

pub(crate) fn instruction_from_value(value: &Value, path: &str) -> Result<Instruction> {
    let obj = as_object(value, path)?;
    let id = InstructionId(as_u64(field(obj, "id", path)?, &join(path, "id"))?);
    let definition = as_str(field(obj, "definition", path)?, &join(path, "definition"))?;
    let example = as_str(field(obj, "example", path)?, &join(path, "example"))?;
    let lineage = match obj.get("lineage") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::parse(join(path, "lineage"), e.to_string()))?,
    };
    let mut instr = Instruction::new(id, definition, example)
        .map_err(|e| Error::parse(join(path, "definition"), e.to_string()))?;
    instr.lineage = lineage;
    Ok(instr)
}

fn objectives_from_value(value: &Value, path: &str) -> Result<ObjectiveVector> {
    let obj = as_object(value, path)?;
    let performance = as_f64(field(obj, "performance", path)?, &join(path, "performance"))?;
    let length = as_u64(field(obj, "length", path)?, &join(path, "length"))?;
    let perplexity = as_f64(field(obj, "perplexity", path)?, &join(path, "perplexity"))?;
    ObjectiveVector::new(performance, length, perplexity).map_err(|e| match e {
        Error::Parse { field, reason } => Error::parse(join(path, &field), reason),
        other => other,
    })
}

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_owned()
    } else {
        format!("{path}.{name}")
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, path: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::parse(join(path, name), "missing"))
}

fn as_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::parse(path, "expected an object"))
}

fn as_str<'a>(value: &'a Value, path: &str) -> Result<&'a str> {
    value
        .as_str()
        .ok_or_else(|| Error::parse(path, "expected a string"))
}

fn as_u64(value: &Value, path: &str) -> Result<u64> {
    value
        .as_u64()
        .ok_or_else(|| Error::parse(path, format!("expected a non-negative integer, got {value}")))
}

fn as_f64(value: &Value, path: &str) -> Result<f64> {
    let x = value
        .as_f64()
        .ok_or_else(|| Error::parse(path, format!("expected a number, got {value}")))?;
    if !x.is_finite() {
        return Err(Error::parse(path, "not finite"));
    }
    Ok(x)
}
