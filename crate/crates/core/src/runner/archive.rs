use std::collections::HashMap;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::instruction::{dominates, individual_from_value, individual_to_value, Individual, ObjectiveVector};
use crate::moea::{fast_nondominated_sort, hypervolume_3d};

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub individual: Individual,
    /// Generation during which the entry was first evaluated (0 = seeding).
    pub generation_added: u32,
}

/// Every evaluated individual of a run, deduplicated by rendered text, with
/// its non-dominated subset kept up to date on each insert.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<ArchiveEntry>,
    by_text: HashMap<String, usize>,
    frontier: Vec<usize>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    /// Adds an evaluated individual unless its rendered text is already
    /// present. Returns whether it was added.
    pub fn insert(&mut self, individual: &Individual, generation: u32) -> Result<bool> {
        let objectives = individual.objectives.ok_or_else(|| {
            Error::Argument(format!("archive rejects unevaluated individual {}", individual.id()))
        })?;
        let text = individual.instruction.render();
        if self.by_text.contains_key(&text) {
            return Ok(false);
        }
        let mut stored = individual.clone();
        stored.clear_sort_state();
        let index = self.entries.len();
        self.entries.push(ArchiveEntry {
            individual: stored,
            generation_added: generation,
        });
        self.by_text.insert(text, index);

        let dominated = self
            .frontier
            .iter()
            .any(|&f| dominates(&self.objectives(f), &objectives));
        if !dominated {
            let entries = &self.entries;
            self.frontier.retain(|&f| {
                !dominates(&objectives, entries[f].individual.objectives.as_ref().unwrap())
            });
            self.frontier.push(index);
        }
        Ok(true)
    }

    fn objectives(&self, index: usize) -> ObjectiveVector {
        self.entries[index].individual.objectives.expect("archive entries are evaluated")
    }

    /// Non-dominated entries in insertion order.
    pub fn frontier(&self) -> Vec<&Individual> {
        let mut idx = self.frontier.clone();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.entries[i].individual).collect()
    }

    /// Non-dominated subset of entries added up to and including `generation`.
    pub fn frontier_at(&self, generation: u32) -> Vec<&Individual> {
        let members: Vec<&Individual> = self
            .entries
            .iter()
            .filter(|e| e.generation_added <= generation)
            .map(|e| &e.individual)
            .collect();
        let objectives: Vec<ObjectiveVector> = members.iter().map(|i| i.objectives.unwrap()).collect();
        let fronts = fast_nondominated_sort(&objectives);
        fronts
            .fronts
            .first()
            .map(|f| f.iter().map(|&i| members[i]).collect())
            .unwrap_or_default()
    }

    /// Componentwise maximum over all entries, plus one.
    pub fn reference_point(&self) -> [f64; 3] {
        let mut r = [f64::NEG_INFINITY; 3];
        for e in &self.entries {
            let o = e.individual.objectives.unwrap().as_array();
            for k in 0..3 {
                r[k] = r[k].max(o[k]);
            }
        }
        r.map(|x| if x.is_finite() { x + 1.0 } else { 1.0 })
    }

    pub fn hypervolume(&self, reference: [f64; 3]) -> f64 {
        let pts: Vec<[f64; 3]> = self.frontier().iter().map(|i| i.objectives.unwrap().as_array()).collect();
        hypervolume_3d(&pts, reference)
    }

    /// Frontier hypervolume after each generation `0..=last`.
    pub fn hypervolume_history(&self, last: u32, reference: [f64; 3]) -> Vec<f64> {
        (0..=last)
            .map(|g| {
                let pts: Vec<[f64; 3]> = self
                    .frontier_at(g)
                    .iter()
                    .map(|i| i.objectives.unwrap().as_array())
                    .collect();
                hypervolume_3d(&pts, reference)
            })
            .collect()
    }

    pub fn to_records(&self) -> Result<Vec<Value>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(json!({
                    "generation_added": e.generation_added,
                    "individual": individual_to_value(&e.individual)?,
                }))
            })
            .collect()
    }

    pub fn from_records(records: &[Value]) -> Result<Self> {
        let mut archive = Archive::new();
        for (n, rec) in records.iter().enumerate() {
            let generation = rec["generation_added"]
                .as_u64()
                .ok_or_else(|| Error::parse(format!("archive[{n}].generation_added"), "missing"))?;
            let individual = individual_from_value(&rec["individual"])?;
            archive.insert(&individual, generation as u32)?;
        }
        Ok(archive)
    }

    /// One JSON line per entry, in insertion order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in self.to_records()? {
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<Value>>>()?;
        Self::from_records(&records)
    }
}
