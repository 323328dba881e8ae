mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{log_events, offline_config, read, SEED_SHORT};
use promptevo::gateway::{ChatGateway, CompletionRequest, MockMode};
use promptevo::instruction::deserialize_individual;
use promptevo::moea::fast_nondominated_sort;
use promptevo::objectives::ObjectiveCache;
use promptevo::operators::TemplateSet;
use promptevo::runner::config::{build_evaluator, Backends};
use promptevo::runner::{
    run, Archive, Checkpoint, Engine, RunConfig, RunOptions, RunStatus, SeedInstruction,
    ARCHIVE_FILE, CHECKPOINT_FILE,
};
use promptevo::{dominates, Error, GatewayError, ObjectiveVector};

fn completed(status: RunStatus) -> promptevo::runner::RunOutcome {
    match status {
        RunStatus::Completed(o) => o,
        RunStatus::Stopped { generation } => panic!("stopped after {generation}"),
    }
}

fn one_seed(dir: &std::path::Path, m: usize, n: u32) -> RunConfig {
    let mut c = offline_config(dir, 5, m, n);
    c.seed_instructions.truncate(1);
    c
}

#[test]
fn population_equal_to_seed_count_is_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = Engine::create(offline_config(dir.path(), 1, 2, 1)).unwrap();
    engine.initialize().unwrap();
    let texts: Vec<String> = engine.population().iter().map(|i| i.instruction.definition().to_owned()).collect();
    let config = engine.config().clone();
    assert_eq!(texts[0], config.seed_instructions[0].definition);
    assert_eq!(texts[1], config.seed_instructions[1].definition);
    assert!(engine.population().iter().all(|i| i.generation_born == 0 && i.objectives.is_some()));
}

#[test]
fn population_smaller_than_seed_list_takes_first_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = offline_config(dir.path(), 1, 2, 1);
    c.seed_instructions.push(SeedInstruction {
        definition: "Third seed.".into(),
        example: String::new(),
    });
    c.population_size = 2;
    let mut engine = Engine::create(c.clone()).unwrap();
    engine.initialize().unwrap();
    let defs: Vec<&str> = engine.population().iter().map(|i| i.instruction.definition()).collect();
    assert_eq!(defs, [c.seed_instructions[0].definition.as_str(), c.seed_instructions[1].definition.as_str()]);
}

#[test]
fn seeding_one_instruction_to_four_gives_distinct_reproducible_variants() {
    let init = |dir: &std::path::Path| {
        let mut engine = Engine::create(one_seed(dir, 4, 1)).unwrap();
        engine.initialize().unwrap();
        engine.population().iter().map(|i| i.instruction.render()).collect::<Vec<_>>()
    };
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = init(a_dir.path());
    let b = init(b_dir.path());
    assert_eq!(a, b);
    assert_eq!(a[0], SEED_SHORT);
    let distinct: HashSet<&String> = a.iter().collect();
    assert_eq!(distinct.len(), 4, "{a:#?}");
    assert_eq!(read(&a_dir.path().join("run.jsonl")), read(&b_dir.path().join("run.jsonl")));
}

#[test]
fn smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = completed(run(one_seed(dir.path(), 2, 1), RunOptions::default()).unwrap());
    assert_eq!(outcome.population.len(), 2);
    for f in [
        "run.jsonl",
        "gateway.jsonl",
        "cache.jsonl",
        "config.json",
        "checkpoint.json",
        "checkpoints/gen_0000.json",
        "checkpoints/gen_0001.json",
        "archive.jsonl",
        "population.jsonl",
        "frontier.jsonl",
        "scatter_m_l.csv",
        "scatter_m_r.csv",
        "scatter_l_r.csv",
        "scatter_m_l.svg",
        "scatter_m_r.svg",
        "scatter_l_r.svg",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let events = log_events(dir.path());
    assert_eq!(events.first().unwrap()["event"], "run_start");
    assert_eq!(events.last().unwrap()["event"], "run_end");
}

#[test]
fn three_generations_beat_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline_config(dir.path(), 11, 10, 3);
    let outcome = completed(run(config, RunOptions::default()).unwrap());
    let seeds: Vec<ObjectiveVector> = outcome.archive.entries()[..2]
        .iter()
        .map(|e| e.individual.objectives.unwrap())
        .collect();
    let front0: Vec<ObjectiveVector> = {
        let objs: Vec<ObjectiveVector> = outcome.population.iter().map(|i| i.objectives.unwrap()).collect();
        let fronts = fast_nondominated_sort(&objs);
        fronts.fronts[0].iter().map(|&i| objs[i]).collect()
    };
    assert!(front0.iter().any(|f| seeds.iter().all(|s| dominates(f, s))));
}

#[test]
fn every_logged_individual_is_evaluated_or_failed() {
    let dir = tempfile::tempdir().unwrap();
    completed(run(offline_config(dir.path(), 3, 8, 3), RunOptions::default()).unwrap());
    let events = log_events(dir.path());
    let scored: HashSet<u64> = events
        .iter()
        .filter(|e| e["event"] == "evaluation" || e["event"] == "evaluation_failure")
        .map(|e| e["id"].as_u64().unwrap())
        .collect();
    for e in &events {
        if e["event"] == "run_end" {
            for id in e["population"].as_array().unwrap() {
                assert!(scored.contains(&id.as_u64().unwrap()));
            }
        }
        if e["event"] == "selection" {
            assert_eq!(e["survivors"].as_array().unwrap().len(), 8);
            for id in e["survivors"].as_array().unwrap() {
                assert!(scored.contains(&id.as_u64().unwrap()));
            }
        }
    }
}

#[test]
fn resume_after_generation_one_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let a = completed(run(offline_config(full.path(), 9, 8, 3), RunOptions::default()).unwrap());
    let stopped = run(
        offline_config(split.path(), 9, 8, 3),
        RunOptions { resume: false, stop_after: Some(1) },
    )
    .unwrap();
    assert_eq!(stopped, RunStatus::Stopped { generation: 1 });
    let b = completed(run(offline_config(split.path(), 9, 8, 3), RunOptions { resume: true, stop_after: None }).unwrap());
    assert_eq!(a.archive, b.archive);
    assert_eq!(a.population, b.population);
    assert_eq!(read(&full.path().join(ARCHIVE_FILE)), read(&split.path().join(ARCHIVE_FILE)));
    assert_eq!(read(&full.path().join("run.jsonl")), read(&split.path().join("run.jsonl")));
}

#[test]
fn resume_rejects_a_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    run(offline_config(dir.path(), 9, 4, 2), RunOptions { resume: false, stop_after: Some(1) }).unwrap();
    let other_seed = offline_config(dir.path(), 10, 4, 2);
    assert!(matches!(Engine::resume(other_seed), Err(Error::Config(_))));
}

#[test]
fn export_fronts_match_a_fresh_sort_of_the_archive() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = completed(run(offline_config(dir.path(), 4, 10, 3), RunOptions::default()).unwrap());
    let archive = Archive::from_jsonl(&read(&dir.path().join(ARCHIVE_FILE))).unwrap();
    assert_eq!(archive, outcome.archive);

    let frontier: Vec<_> = read(&dir.path().join("frontier.jsonl"))
        .lines()
        .map(|l| deserialize_individual(l).unwrap())
        .collect();
    let expected: Vec<_> = archive.frontier().into_iter().cloned().collect();
    assert_eq!(frontier, expected);

    let members: Vec<_> = archive.entries().iter().map(|e| &e.individual).collect();
    let objs: Vec<ObjectiveVector> = members.iter().map(|i| i.objectives.unwrap()).collect();
    let ranks = fast_nondominated_sort(&objs).ranks(objs.len());
    for (stem, pick) in [
        ("scatter_m_l", 0usize),
        ("scatter_m_r", 1),
        ("scatter_l_r", 2),
    ] {
        let csv = read(&dir.path().join(format!("{stem}.csv")));
        let mut rows = 0;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let front: usize = cols[0].parse().unwrap();
            let id: u64 = cols[1].parse().unwrap();
            let idx = members.iter().position(|m| m.id().0 == id).unwrap();
            assert_eq!(ranks[idx], front);
            assert!(front < 3);
            let o = objs[idx];
            let (x, y) = match pick {
                0 => (o.performance, o.length as f64),
                1 => (o.performance, o.perplexity),
                _ => (o.length as f64, o.perplexity),
            };
            assert_eq!(cols[2].parse::<f64>().unwrap(), x);
            assert_eq!(cols[3].parse::<f64>().unwrap(), y);
            rows += 1;
        }
        assert_eq!(rows, ranks.iter().filter(|&&r| r < 3).count());
        let svg = read(&dir.path().join(format!("{stem}.svg")));
        assert_eq!(svg.matches("data-front=").count(), rows);
    }
}

/// Gateway that fails every call after the first `ok` ones.
struct FlakyGateway {
    inner: promptevo::gateway::Gateway,
    ok: usize,
    calls: AtomicUsize,
}

impl ChatGateway for FlakyGateway {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(GatewayError::Status { status: 400, detail: "refused".into() });
        }
        self.inner.complete(request)
    }
}

fn flaky_backends(config: &RunConfig, ok: usize) -> Backends {
    Backends {
        gateway: Arc::new(FlakyGateway {
            inner: promptevo::gateway::Gateway::mock(MockMode::SeededEdit, 0),
            ok,
            calls: AtomicUsize::new(0),
        }),
        evaluator: build_evaluator(config, ObjectiveCache::in_memory()).unwrap(),
        templates: TemplateSet::bundled().unwrap(),
        params: config.gateway.params.clone(),
    }
}

#[test]
fn too_many_operator_failures_abort_with_checkpoint_intact() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_seed(dir.path(), 5, 3);
    // 4 seeding calls succeed, then every call fails
    let mut engine = Engine::new(config.clone(), flaky_backends(&config, 4)).unwrap();
    engine.initialize().unwrap();
    let before = read(&dir.path().join(CHECKPOINT_FILE));
    match engine.run_generation() {
        Err(Error::GenerationAborted { failed, total }) => assert_eq!((failed, total), (5, 5)),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(read(&dir.path().join(CHECKPOINT_FILE)), before);
    let cp = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(cp.generation_completed, 0);
    let events = log_events(dir.path());
    assert_eq!(events.iter().filter(|e| e["event"] == "operator_failure").count(), 5);
    assert_eq!(events.last().unwrap()["event"], "generation_aborted");
}

#[test]
fn failures_within_the_budget_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = one_seed(dir.path(), 5, 1);
    config.max_operator_failure_fraction = 1.0;
    config.injection_rate = 0.0;
    // seeding (4 calls) plus 2 of the 5 offspring calls succeed
    let mut engine = Engine::new(config.clone(), flaky_backends(&config, 6)).unwrap();
    engine.initialize().unwrap();
    let report = engine.run_generation().unwrap();
    assert_eq!(report.operator_failures, 3);
    assert_eq!(report.offspring, 2);
    assert_eq!(engine.population().len(), 5);
}

#[test]
fn seeding_failure_aborts_and_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = one_seed(dir.path(), 4, 1);
    let mut engine = Engine::new(config.clone(), flaky_backends(&config, 1)).unwrap();
    assert!(matches!(engine.initialize(), Err(Error::Operator { .. })));
    let events = log_events(dir.path());
    assert_eq!(events[0]["event"], "run_start");
    assert!(events.iter().any(|e| e["event"] == "operator"));
    assert!(events.iter().any(|e| e["event"] == "operator_failure"));
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
}
