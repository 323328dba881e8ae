//! The evolutionary run: population seeding, the generation loop, the archive,
//! checkpoints and the final Pareto export.
//!
//! All randomness is drawn on the coordinating thread from streams derived
//! from `(seed, purpose, generation)`. Operator calls and evaluations fan out to
//! a bounded worker pool, and their results are consumed in job order, so the
//! run log does not depend on thread scheduling.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod export;

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instruction::{Individual, Instruction, InstructionId};
use crate::moea::{diversity_inject, environmental_select, InstructionSource};
use crate::objectives::{Evaluation, ObjectiveCache};
use crate::operators::{apply_operator, select_operator, OperatorContext, OperatorKind, OperatorOutcome, ParentView};

pub use archive::{Archive, ArchiveEntry};
pub use checkpoint::{Checkpoint, RunLog, CHECKPOINT_DIR, CHECKPOINT_FILE, RUN_LOG_FILE};
pub use config::{Backends, RunConfig, SeedInstruction};
pub use export::{export_pareto, ExportSummary, Projection};

pub const CONFIG_FILE: &str = "config.json";
pub const CACHE_FILE: &str = "cache.jsonl";
pub const GATEWAY_LOG_FILE: &str = "gateway.jsonl";
pub const ARCHIVE_FILE: &str = "archive.jsonl";
pub const POPULATION_FILE: &str = "population.jsonl";

/// Independent random stream for one purpose within one generation.
pub fn rng_stream(seed: u64, purpose: &str, generation: u32) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(generation.to_le_bytes());
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OperatorJob {
    kind: OperatorKind,
    parent1: usize,
    parent2: usize,
    child: InstructionId,
    nonce: u64,
}

/// Kind of the `counter`-th seed variant: definition and example mutation
/// alternate, except that seeds without an example only get definition edits.
fn variant_kind(seed: &Instruction, counter: u64) -> OperatorKind {
    if counter % 2 == 1 && !seed.example().is_empty() {
        OperatorKind::ExampleMutation
    } else {
        OperatorKind::DefinitionMutation
    }
}

fn operator_event(phase: &str, generation: u32, index: usize, job: &OperatorJob, result: &Result<OperatorOutcome>) -> Value {
    match result {
        Ok(outcome) => json!({
            "event": "operator",
            "phase": phase,
            "generation": generation,
            "index": index,
            "kind": job.kind,
            "parents": outcome.child.lineage().last().map(|l| l.parents.clone()).unwrap_or_default(),
            "child": job.child,
            "nonce": job.nonce,
            "prompt": outcome.prompt.text(),
            "output": outcome.raw_output,
            "fallback": outcome.fallback,
        }),
        Err(e) => json!({
            "event": "operator_failure",
            "phase": phase,
            "generation": generation,
            "index": index,
            "kind": job.kind,
            "child": job.child,
            "nonce": job.nonce,
            "error": e.to_string(),
        }),
    }
}

fn evaluation_event(phase: &str, generation: u32, id: InstructionId, result: &Result<Evaluation>) -> Value {
    match result {
        Ok(ev) => json!({
            "event": "evaluation",
            "phase": phase,
            "generation": generation,
            "id": id,
            "objectives": ev.objectives,
            "degenerate": ev.degenerate,
        }),
        Err(e) => json!({
            "event": "evaluation_failure",
            "phase": phase,
            "generation": generation,
            "id": id,
            "error": e.to_string(),
        }),
    }
}

/// Per-generation summary returned by [`Engine::run_generation`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub generation: u32,
    pub offspring: usize,
    pub operator_failures: usize,
    pub evaluation_failures: usize,
    pub injected: usize,
    pub archive_size: usize,
    pub frontier_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub population: Vec<Individual>,
    pub archive: Archive,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed(RunOutcome),
    /// Stopped on request after the given generation; resumable.
    Stopped { generation: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this generation boundary (0 = after seeding).
    pub stop_after: Option<u32>,
}

pub struct Engine {
    config: RunConfig,
    backends: Backends,
    out: PathBuf,
    log: RunLog,
    pool: rayon::ThreadPool,
    seeds: Vec<Individual>,
    population: Vec<Individual>,
    archive: Archive,
    /// `None` until the seeded population exists.
    generation_completed: Option<u32>,
    next_id: u64,
    injection_counter: u64,
}

impl Engine {
    /// Fresh run with the given backends. Truncates any earlier run log in
    /// the output directory.
    pub fn new(config: RunConfig, backends: Backends) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let config_text = serde_json::to_string_pretty(&config)?;
        checkpoint::write_atomic(&out.join(CONFIG_FILE), &config_text)?;
        let log = RunLog::create(&out.join(RUN_LOG_FILE))?;
        Self::assemble(config, backends, log)
    }

    /// Fresh run with the backends named in the config. A stale evaluation
    /// cache in the output directory is discarded.
    pub fn create(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = &config.output_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        for stale in [CACHE_FILE, GATEWAY_LOG_FILE, CHECKPOINT_FILE] {
            let path = out.join(stale);
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        let checkpoints = out.join(CHECKPOINT_DIR);
        if checkpoints.exists() {
            std::fs::remove_dir_all(&checkpoints).map_err(|e| Error::io(&checkpoints, e))?;
        }
        let backends = Self::backends_for(&config)?;
        Self::new(config, backends)
    }

    /// Continues from `checkpoint.json` in the config's output directory.
    pub fn resume(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let backends = Self::backends_for(&config)?;
        Self::resume_with_backends(config, backends)
    }

    pub fn resume_with_backends(config: RunConfig, backends: Backends) -> Result<Self> {
        let out = config.output_dir.clone();
        let cp = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
        if cp.seed != config.seed || cp.population_size != config.population_size {
            return Err(Error::Config(format!(
                "checkpoint was written for seed {} and population {}, config has seed {} and population {}",
                cp.seed, cp.population_size, config.seed, config.population_size
            )));
        }
        let log = RunLog::resume(&out.join(RUN_LOG_FILE), cp.run_log_bytes)?;
        let mut engine = Self::assemble(config, backends, log)?;
        engine.seeds = cp.seeds;
        engine.population = cp.population;
        engine.archive = cp.archive;
        engine.generation_completed = Some(cp.generation_completed);
        engine.next_id = cp.next_id;
        engine.injection_counter = cp.injection_counter;
        log::info!("resumed after generation {}", cp.generation_completed);
        Ok(engine)
    }

    fn backends_for(config: &RunConfig) -> Result<Backends> {
        let out = &config.output_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let cache = ObjectiveCache::persistent(&out.join(CACHE_FILE))?;
        Backends::from_config(config, cache, Some(&out.join(GATEWAY_LOG_FILE)))
    }

    fn assemble(config: RunConfig, backends: Backends, log: RunLog) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            out: config.output_dir.clone(),
            config,
            backends,
            log,
            pool,
            seeds: Vec::new(),
            population: Vec::new(),
            archive: Archive::new(),
            generation_completed: None,
            next_id: 0,
            injection_counter: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn generation_completed(&self) -> Option<u32> {
        self.generation_completed
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    fn context(&self) -> OperatorContext<'_> {
        OperatorContext {
            templates: &self.backends.templates,
            gateway: self.backends.gateway.as_ref(),
            params: &self.backends.params,
            task_name: &self.config.task_name,
            guidance: self.config.guidance_enabled,
        }
    }

    /// Evaluates in parallel, retrying each failure once; results in input order.
    fn evaluate_all(&self, instructions: &[&Instruction]) -> Vec<Result<Evaluation>> {
        let evaluator = &self.backends.evaluator;
        self.pool.install(|| {
            instructions
                .par_iter()
                .map(|instr| {
                    evaluator.evaluate(instr).or_else(|e| {
                        log::warn!("evaluation of {} failed ({e}); retrying once", instr.id());
                        evaluator.evaluate(instr)
                    })
                })
                .collect()
        })
    }

    /// Evaluates every unevaluated population member; any failure is fatal
    /// because the population must stay at exactly M.
    fn evaluate_pending(&mut self, phase: &str, generation: u32) -> Result<()> {
        let pending: Vec<usize> = (0..self.population.len())
            .filter(|&i| self.population[i].objectives.is_none())
            .collect();
        let instrs: Vec<&Instruction> = pending.iter().map(|&i| &self.population[i].instruction).collect();
        let results = self.evaluate_all(&instrs);
        let mut first_error = None;
        for (&i, result) in pending.iter().zip(results) {
            let id = self.population[i].id();
            self.log.append(&evaluation_event(phase, generation, id, &result))?;
            match result {
                Ok(ev) => {
                    self.population[i].objectives = Some(ev.objectives);
                    self.archive.insert(&self.population[i], generation)?;
                }
                Err(e) => {
                    let detail = match e {
                        Error::Evaluation(msg) => msg,
                        other => other.to_string(),
                    };
                    first_error.get_or_insert(Error::Evaluation(format!("{id}: {detail}")));
                }
            }
        }
        first_error.map_or(Ok(()), Err)
    }

    /// Builds the generation-0 population: the seeds, then mutated copies of
    /// them (cycling) until there are M members; everything is evaluated.
    pub fn initialize(&mut self) -> Result<()> {
        if self.generation_completed.is_some() {
            return Err(Error::Argument("population is already initialized".into()));
        }
        let m = self.config.population_size;
        let all_seeds = self.config.seed_instructions()?;
        self.next_id = all_seeds.len() as u64;
        self.log.append(&json!({
            "event": "run_start",
            "task_name": self.config.task_name,
            "seed": self.config.seed,
            "population_size": m,
            "generations": self.config.generations,
            "guidance_enabled": self.config.guidance_enabled,
            "injection_rate": self.config.injection_rate,
            "seed_count": all_seeds.len(),
        }))?;

        self.population = all_seeds.into_iter().take(m).map(|s| Individual::new(s, 0)).collect();
        self.evaluate_pending("init", 0)?;
        self.seeds = self.population.clone();

        let k = self.seeds.len();
        let mut rng = rng_stream(self.config.seed, "init", 0);
        let jobs: Vec<OperatorJob> = (0..(m - k) as u64)
            .map(|c| {
                let parent = (c % k as u64) as usize;
                OperatorJob {
                    kind: variant_kind(&self.seeds[parent].instruction, c),
                    parent1: parent,
                    parent2: parent,
                    child: InstructionId(self.next_id + c),
                    nonce: rng.next_u64(),
                }
            })
            .collect();
        self.next_id += jobs.len() as u64;
        let results = self.run_jobs(&jobs, &self.seeds);
        let mut first_error = None;
        for (n, (job, result)) in jobs.iter().zip(results).enumerate() {
            self.log.append(&operator_event("init", 0, n, job, &result))?;
            match result {
                Ok(outcome) => self.population.push(Individual::new(outcome.child, 0)),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        self.evaluate_pending("init", 0)?;
        self.generation_completed = Some(0);
        self.close_generation(0)
    }

    fn run_jobs(&self, jobs: &[OperatorJob], parents: &[Individual]) -> Vec<Result<OperatorOutcome>> {
        let ctx = self.context();
        self.pool.install(|| {
            jobs.par_iter()
                .map(|job| {
                    apply_operator(
                        &ctx,
                        job.kind,
                        ParentView::from(&parents[job.parent1]),
                        ParentView::from(&parents[job.parent2]),
                        job.child,
                        job.nonce,
                    )
                })
                .collect()
        })
    }

    /// One generation: variation, evaluation, archive update, environmental
    /// selection, diversity injection and a checkpoint.
    pub fn run_generation(&mut self) -> Result<GenerationReport> {
        let done = self
            .generation_completed
            .ok_or_else(|| Error::Argument("initialize the population first".into()))?;
        let g = done + 1;
        let m = self.config.population_size;

        // members injected at the previous boundary
        self.evaluate_pending("injected", g)?;

        let mut rng = rng_stream(self.config.seed, "variation", g);
        let jobs: Vec<OperatorJob> = (0..m)
            .map(|j| {
                let parent2 = rng.gen_range(0..m);
                let kind = select_operator(&mut rng);
                OperatorJob {
                    kind,
                    parent1: j,
                    parent2,
                    child: InstructionId(self.next_id + j as u64),
                    nonce: rng.next_u64(),
                }
            })
            .collect();
        self.next_id += m as u64;

        let results = self.run_jobs(&jobs, &self.population);
        let mut operator_failures = 0;
        let mut children = Vec::with_capacity(m);
        for (j, (job, result)) in jobs.iter().zip(results).enumerate() {
            self.log.append(&operator_event("variation", g, j, job, &result))?;
            match result {
                Ok(outcome) => children.push(outcome.child),
                Err(e) => {
                    log::warn!("generation {g}: {e}");
                    operator_failures += 1;
                }
            }
        }

        let refs: Vec<&Instruction> = children.iter().collect();
        let evaluations = self.evaluate_all(&refs);
        let mut evaluation_failures = 0;
        let mut offspring = Vec::with_capacity(children.len());
        for (child, result) in children.into_iter().zip(evaluations) {
            self.log.append(&evaluation_event("offspring", g, child.id(), &result))?;
            match result {
                Ok(ev) => offspring.push(Individual::new(child, g).evaluated(ev.objectives)),
                Err(_) => evaluation_failures += 1,
            }
        }

        let failed = operator_failures + evaluation_failures;
        if failed as f64 > self.config.max_operator_failure_fraction * m as f64 {
            self.log.append(&json!({
                "event": "generation_aborted",
                "generation": g,
                "failed": failed,
                "total": m,
            }))?;
            return Err(Error::GenerationAborted { failed, total: m });
        }

        for ind in &offspring {
            self.archive.insert(ind, g)?;
        }

        let mut combined = std::mem::take(&mut self.population);
        combined.extend(offspring.iter().cloned());
        let pool_size = combined.len();
        let selection = environmental_select(combined, m)?;
        self.log.append(&json!({
            "event": "selection",
            "generation": g,
            "pool_size": pool_size,
            "survivors": selection.survivors.iter().map(|s| s.id()).collect::<Vec<_>>(),
            "ranks": selection.survivors.iter().map(|s| s.rank).collect::<Vec<_>>(),
            "truncated_front": selection.truncated_front_index,
        }))?;
        self.population = selection.survivors;

        let injected = self.inject(g)?;
        self.generation_completed = Some(g);
        self.close_generation(g)?;
        Ok(GenerationReport {
            generation: g,
            offspring: offspring.len(),
            operator_failures,
            evaluation_failures,
            injected,
            archive_size: self.archive.len(),
            frontier_size: self.archive.frontier().len(),
        })
    }

    fn inject(&mut self, g: u32) -> Result<usize> {
        let mut sample_rng = rng_stream(self.config.seed, "injection", g);
        let before: Vec<InstructionId> = self.population.iter().map(Individual::id).collect();
        let mut population = std::mem::take(&mut self.population);
        let ctx = self.context();
        let mut source = SeedVariants {
            ctx: &ctx,
            seeds: &self.seeds,
            counter: self.injection_counter,
            next_id: self.next_id,
            rng: rng_stream(self.config.seed, "injection-nonce", g),
            generation: g,
            events: Vec::new(),
        };
        let report = diversity_inject(
            &mut population,
            self.config.injection_rate,
            &mut source,
            g,
            &mut sample_rng,
        );
        let (counter, next_id, events) = (source.counter, source.next_id, source.events);
        self.population = population;
        let report = report?;
        self.injection_counter = counter;
        self.next_id = next_id;
        for event in &events {
            self.log.append(event)?;
        }
        for w in &report.warnings {
            log::warn!("generation {g}: {w}");
        }
        self.log.append(&json!({
            "event": "injection",
            "generation": g,
            "requested": report.requested,
            "replaced": report
                .replaced
                .iter()
                .map(|&pos| json!({
                    "position": pos,
                    "removed": before[pos],
                    "added": self.population[pos].id(),
                }))
                .collect::<Vec<_>>(),
            "warnings": report.warnings,
        }))?;
        Ok(report.replaced.len())
    }

    fn close_generation(&mut self, g: u32) -> Result<()> {
        self.log.append(&json!({
            "event": "generation_end",
            "generation": g,
            "population": self.population.iter().map(Individual::id).collect::<Vec<_>>(),
            "archive_size": self.archive.len(),
            "frontier": self.archive.frontier().iter().map(|i| i.id()).collect::<Vec<_>>(),
        }))?;
        Checkpoint {
            seed: self.config.seed,
            population_size: self.config.population_size,
            generation_completed: g,
            next_id: self.next_id,
            injection_counter: self.injection_counter,
            run_log_bytes: self.log.bytes(),
            seeds: self.seeds.clone(),
            population: self.population.clone(),
            archive: self.archive.clone(),
        }
        .write(&self.out)
    }

    /// Evaluates members injected at the last boundary, ranks the final
    /// population and writes the population, archive and Pareto export.
    pub fn finish(mut self) -> Result<RunOutcome> {
        let g = self
            .generation_completed
            .ok_or_else(|| Error::Argument("nothing to finish".into()))?;
        self.evaluate_pending("final", g)?;
        let m = self.population.len();
        let population = environmental_select(std::mem::take(&mut self.population), m)?.survivors;

        let mut lines = String::new();
        for ind in &population {
            lines.push_str(&crate::instruction::serialize_individual(ind)?);
            lines.push('\n');
        }
        checkpoint::write_atomic(&self.out.join(POPULATION_FILE), &lines)?;
        checkpoint::write_atomic(&self.out.join(ARCHIVE_FILE), &self.archive.to_jsonl()?)?;
        export_pareto(&self.archive, &self.out)?;
        self.log.append(&json!({
            "event": "run_end",
            "generations": g,
            "population": population.iter().map(Individual::id).collect::<Vec<_>>(),
            "archive_size": self.archive.len(),
            "frontier": self.archive.frontier().iter().map(|i| i.id()).collect::<Vec<_>>(),
        }))?;
        Ok(RunOutcome {
            population,
            archive: self.archive,
            output_dir: self.out,
        })
    }

    /// Runs the remaining generations, stopping early at `stop_after`.
    pub fn drive(mut self, stop_after: Option<u32>) -> Result<RunStatus> {
        if self.generation_completed.is_none() {
            self.initialize()?;
        }
        loop {
            let done = self.generation_completed.unwrap_or(0);
            if stop_after.is_some_and(|s| done >= s) && done < self.config.generations {
                return Ok(RunStatus::Stopped { generation: done });
            }
            if done >= self.config.generations {
                break;
            }
            let report = self.run_generation()?;
            log::info!(
                "generation {}: {} offspring, {} failures, {} injected, archive {} (frontier {})",
                report.generation,
                report.offspring,
                report.operator_failures + report.evaluation_failures,
                report.injected,
                report.archive_size,
                report.frontier_size
            );
        }
        self.finish().map(RunStatus::Completed)
    }
}

/// Mutated copies of the seed instructions, used for diversity injection.
struct SeedVariants<'a> {
    ctx: &'a OperatorContext<'a>,
    seeds: &'a [Individual],
    counter: u64,
    next_id: u64,
    rng: ChaCha8Rng,
    generation: u32,
    events: Vec<Value>,
}

impl InstructionSource for SeedVariants<'_> {
    fn next_instruction(&mut self) -> Option<Instruction> {
        let parent = (self.counter % self.seeds.len() as u64) as usize;
        let job = OperatorJob {
            kind: variant_kind(&self.seeds[parent].instruction, self.counter),
            parent1: parent,
            parent2: parent,
            child: InstructionId(self.next_id),
            nonce: self.rng.next_u64(),
        };
        let seed = ParentView::from(&self.seeds[parent]);
        let result = apply_operator(self.ctx, job.kind, seed, seed, job.child, job.nonce);
        self.events
            .push(operator_event("injection", self.generation, self.events.len(), &job, &result));
        self.counter += 1;
        self.next_id += 1;
        match result {
            Ok(outcome) => Some(outcome.child),
            Err(e) => {
                log::warn!("seed variant failed: {e}");
                None
            }
        }
    }
}

/// Runs (or resumes) the configured experiment end to end.
pub fn run(config: RunConfig, options: RunOptions) -> Result<RunStatus> {
    let checkpoint = config.output_dir.join(CHECKPOINT_FILE);
    let engine = if options.resume && checkpoint.exists() {
        Engine::resume(config)?
    } else {
        if options.resume {
            log::warn!("no checkpoint at {}; starting a fresh run", checkpoint.display());
        }
        Engine::create(config)?
    };
    engine.drive(options.stop_after)
}
