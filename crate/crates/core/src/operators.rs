//! The four LLM-backed variation operators: prompt assembly from the fixed
//! templates, optional objective annotation, output cleanup and child assembly.

use std::fmt;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::{ChatGateway, CompletionParams, CompletionRequest};
use crate::instruction::{Individual, Instruction, InstructionId, LineageRecord, ObjectiveVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    DefinitionMutation,
    DefinitionCrossover,
    ExampleMutation,
    ExampleCrossover,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::DefinitionMutation,
        OperatorKind::DefinitionCrossover,
        OperatorKind::ExampleMutation,
        OperatorKind::ExampleCrossover,
    ];

    pub fn is_crossover(self) -> bool {
        matches!(self, OperatorKind::DefinitionCrossover | OperatorKind::ExampleCrossover)
    }

    pub fn edits_definition(self) -> bool {
        matches!(self, OperatorKind::DefinitionMutation | OperatorKind::DefinitionCrossover)
    }

    pub fn key(self) -> &'static str {
        match self {
            OperatorKind::DefinitionMutation => "definition_mutation",
            OperatorKind::DefinitionCrossover => "definition_crossover",
            OperatorKind::ExampleMutation => "example_mutation",
            OperatorKind::ExampleCrossover => "example_crossover",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Uniform draw over the four operators, consuming exactly one `u32`.
pub fn select_operator<R: RngCore + ?Sized>(rng: &mut R) -> OperatorKind {
    OperatorKind::ALL[(rng.next_u32() >> 30) as usize]
}

pub const BUNDLED_TEMPLATES: &str = include_str!("../assets/operator_prompts.toml");

/// SHA-256 of each operator's guided fixed text, `{task}` slot unfilled.
const GUIDED_CHECKSUMS: [(OperatorKind, &str); 4] = [
    (
        OperatorKind::DefinitionMutation,
        "8cff98fba2b8956fcb68b695ceb591670198680b6a274496615d0d2f54a95621",
    ),
    (
        OperatorKind::DefinitionCrossover,
        "edfff3468c57f9c3c821320f10a0c5b6c45d6bc6476f7d37ded5423e7c407841",
    ),
    (
        OperatorKind::ExampleMutation,
        "bb07e3a3c89b417262de8681f9e0ad57b4154c6a7b568b07145314e2056c0054",
    ),
    (
        OperatorKind::ExampleCrossover,
        "55b9593f2de56d4c2f8a1291744c0379180bf19058b6179430dd188166a15fff",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorTemplate {
    pub guided: String,
    pub unguided: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub definition_mutation: OperatorTemplate,
    pub definition_crossover: OperatorTemplate,
    pub example_mutation: OperatorTemplate,
    pub example_crossover: OperatorTemplate,
}

impl TemplateSet {
    /// The compiled-in templates, checksum-verified.
    pub fn bundled() -> Result<Self> {
        Self::parse(BUNDLED_TEMPLATES, true)
    }

    /// Loads a template file; with `verify`, the guided texts must match the
    /// compiled-in checksums.
    pub fn from_file(path: &Path, verify: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, verify)
    }

    pub fn parse(text: &str, verify: bool) -> Result<Self> {
        let set: TemplateSet =
            toml::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        for kind in OperatorKind::ALL {
            let t = set.get(kind);
            for slot in required_slots(kind) {
                if !t.payload.contains(slot) {
                    return Err(Error::Template(format!("{kind} payload lacks {slot}")));
                }
            }
        }
        if verify {
            set.verify_checksums()?;
        }
        Ok(set)
    }

    pub fn verify_checksums(&self) -> Result<()> {
        for (kind, expected) in GUIDED_CHECKSUMS {
            let actual = hex::encode(Sha256::digest(self.get(kind).guided.as_bytes()));
            if actual != expected {
                return Err(Error::Template(format!(
                    "{kind} fixed prompt does not match its checksum"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: OperatorKind) -> &OperatorTemplate {
        match kind {
            OperatorKind::DefinitionMutation => &self.definition_mutation,
            OperatorKind::DefinitionCrossover => &self.definition_crossover,
            OperatorKind::ExampleMutation => &self.example_mutation,
            OperatorKind::ExampleCrossover => &self.example_crossover,
        }
    }
}

fn required_slots(kind: OperatorKind) -> &'static [&'static str] {
    if kind.is_crossover() {
        &["{parent1}", "{objectives1}", "{parent2}", "{objectives2}"]
    } else {
        &["{parent1}", "{objectives1}"]
    }
}

/// Fully assembled operator prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorPrompt {
    pub kind: OperatorKind,
    pub fixed_text: String,
    pub guidance_enabled: bool,
    pub payload: String,
}

impl OperatorPrompt {
    pub fn text(&self) -> String {
        format!("{}\n{}", self.fixed_text, self.payload)
    }
}

/// Parent text handed to an operator together with its fitness.
#[derive(Debug, Clone, Copy)]
pub struct ParentView<'a> {
    pub instruction: &'a Instruction,
    pub objectives: Option<&'a ObjectiveVector>,
}

impl<'a> From<&'a Individual> for ParentView<'a> {
    fn from(ind: &'a Individual) -> Self {
        Self {
            instruction: &ind.instruction,
            objectives: ind.objectives.as_ref(),
        }
    }
}

impl ParentView<'_> {
    fn segment(&self, kind: OperatorKind) -> &str {
        if kind.edits_definition() {
            self.instruction.definition()
        } else {
            self.instruction.example()
        }
    }
}

pub fn build_prompt(
    templates: &TemplateSet,
    kind: OperatorKind,
    task_name: &str,
    parent1: ParentView<'_>,
    parent2: Option<ParentView<'_>>,
    guidance: bool,
) -> Result<OperatorPrompt> {
    let template = templates.get(kind);
    let parent2 = match (kind.is_crossover(), parent2) {
        (true, None) => {
            return Err(Error::Argument(format!("{kind} needs a second parent")));
        }
        (true, p2) => p2,
        (false, _) => None,
    };

    let annotation = |p: &ParentView<'_>| -> Result<String> {
        p.objectives
            .map(|f| format!("Minimization objectives: {f}"))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "objective guidance needs evaluated parent {}",
                    p.instruction.id()
                ))
            })
    };

    let mut slots: Vec<(&str, String)> = vec![("{parent1}", parent1.segment(kind).to_owned())];
    if guidance {
        slots.push(("{objectives1}", annotation(&parent1)?));
    }
    if let Some(p2) = &parent2 {
        slots.push(("{parent2}", p2.segment(kind).to_owned()));
        if guidance {
            slots.push(("{objectives2}", annotation(p2)?));
        }
    }

    let mut lines = Vec::new();
    for line in template.payload.lines() {
        let trimmed = line.trim();
        if !guidance && (trimmed == "{objectives1}" || trimmed == "{objectives2}") {
            continue;
        }
        lines.push(fill_slots(line, &slots));
    }
    let fixed = if guidance {
        &template.guided
    } else {
        &template.unguided
    };

    Ok(OperatorPrompt {
        kind,
        fixed_text: fixed.replace("{task}", task_name),
        guidance_enabled: guidance,
        payload: lines.join("\n"),
    })
}

/// Single left-to-right pass so slot-like text inside parent content is never
/// substituted a second time.
fn fill_slots(line: &str, slots: &[(&str, String)]) -> String {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    'scan: while !rest.is_empty() {
        if rest.starts_with('{') {
            for (name, value) in slots {
                if let Some(after) = rest.strip_prefix(name) {
                    out.push_str(value);
                    rest = after;
                    continue 'scan;
                }
            }
        }
        let c = rest.chars().next().unwrap();
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

/// Cleans a completion: strips fences and wrapping quotes, drops echoed
/// objective lines and `<Input>` markers, trims. `None` when nothing is left.
pub fn parse_operator_output(raw: &str) -> Option<String> {
    let mut text = raw.trim();
    if text.starts_with("```") {
        let body = text.trim_start_matches('`');
        // skip an info string such as ```text
        let body = match body.find('\n') {
            Some(nl) => &body[nl + 1..],
            None => "",
        };
        text = body.trim_end().strip_suffix("```").unwrap_or(body).trim();
    }
    let kept: Vec<&str> = text
        .lines()
        .filter(|line| {
            let t = line.trim();
            let lower = t.to_lowercase();
            !lower.starts_with("minimization objectives")
                && !is_marker_line(t)
        })
        .collect();
    let joined = kept.join("\n");
    let mut cleaned = joined.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”')] {
        if cleaned.chars().count() >= 2 && cleaned.starts_with(open) && cleaned.ends_with(close) {
            cleaned = cleaned[open.len_utf8()..cleaned.len() - close.len_utf8()].trim();
        }
    }
    if cleaned.is_empty() {
        None
    } else {
        Some(cleaned.to_owned())
    }
}

fn is_marker_line(t: &str) -> bool {
    matches!(t, "<Input>" | "</Input>" | "<Input 1>" | "</Input 1>" | "<Input 2>" | "</Input 2>")
}

/// Shared, read-only inputs for operator calls.
pub struct OperatorContext<'a> {
    pub templates: &'a TemplateSet,
    pub gateway: &'a dyn ChatGateway,
    pub params: &'a CompletionParams,
    pub task_name: &'a str,
    pub guidance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOutcome {
    pub child: Instruction,
    pub prompt: OperatorPrompt,
    pub raw_output: String,
    /// The completion was unusable and the child copies parent 1.
    pub fallback: bool,
}

/// Runs one operator and assembles the child. Definition operators keep
/// parent 1's example; example operators keep parent 1's definition.
pub fn apply_operator(
    ctx: &OperatorContext<'_>,
    kind: OperatorKind,
    parent1: ParentView<'_>,
    parent2: ParentView<'_>,
    child_id: InstructionId,
    nonce: u64,
) -> Result<OperatorOutcome> {
    let p1 = parent1.instruction;
    let parents = if kind.is_crossover() {
        vec![p1.id(), parent2.instruction.id()]
    } else {
        vec![p1.id()]
    };
    let prompt = build_prompt(ctx.templates, kind, ctx.task_name, parent1, Some(parent2), ctx.guidance)?;
    let text = prompt.text();
    let raw = ctx
        .gateway
        .complete(&CompletionRequest {
            prompt: &text,
            params: ctx.params,
            nonce,
        })
        .map_err(|source| Error::Operator {
            kind,
            parents: parents.clone(),
            source,
        })?;

    let lineage = LineageRecord {
        operator: kind,
        parents,
    };
    let parsed = parse_operator_output(&raw);
    let (definition, example) = match (&parsed, kind.edits_definition()) {
        (Some(d), true) => (d.as_str(), p1.example()),
        (Some(e), false) => (p1.definition(), e.as_str()),
        (None, _) => (p1.definition(), p1.example()),
    };
    if parsed.is_none() {
        log::warn!("{kind} on {} produced no usable text; copying parent", p1.id());
    }
    let child = Instruction::new(child_id, definition, example)?.with_lineage(lineage);
    Ok(OperatorOutcome {
        child,
        prompt,
        raw_output: raw,
        fallback: parsed.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::GatewayError;
    use crate::gateway::{parent_segments, splice, Gateway, MockMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Number of "(a, b, c)" numeric triples in `text`.
    fn count_triples(text: &str) -> usize {
        let mut count = 0;
        let mut rest = text;
        while let Some(open) = rest.find('(') {
            let after = &rest[open + 1..];
            if let Some(close) = after.find(')') {
                let parts: Vec<&str> = after[..close].split(',').map(str::trim).collect();
                if parts.len() == 3 && parts.iter().all(|p| p.parse::<f64>().is_ok()) {
                    count += 1;
                }
            }
            rest = after;
        }
        count
    }

    struct FnGateway<F>(F);

    impl<F: Fn(&str) -> Result<String, GatewayError> + Send + Sync> ChatGateway for FnGateway<F> {
        fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
            (self.0)(request.prompt)
        }
    }

    fn parent(id: u64, d: &str, e: &str, f: (f64, u64, f64)) -> Individual {
        Individual::new(Instruction::new(InstructionId(id), d, e).unwrap(), 0)
            .evaluated(ObjectiveVector::new(f.0, f.1, f.2).unwrap())
    }

    fn templates() -> TemplateSet {
        TemplateSet::bundled().unwrap()
    }

    #[test]
    fn bundled_templates_verify() {
        let t = templates();
        assert!(t.definition_mutation.guided.contains("professional prompt engineer"));
        assert!(!t.definition_mutation.guided.contains("{task}"));
        assert!(t.example_crossover.guided.contains("for {task}"));
    }

    #[test]
    fn tampered_template_is_rejected() {
        let tampered = BUNDLED_TEMPLATES.replacen("please be creative", "please be bold", 1);
        assert!(matches!(TemplateSet::parse(&tampered, true), Err(Error::Template(_))));
        assert!(TemplateSet::parse(&tampered, false).is_ok());
    }

    #[test]
    fn operator_draws_are_uniform_and_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let k = select_operator(&mut rng);
            counts[OperatorKind::ALL.iter().position(|&x| x == k).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&freq), "frequency {freq}");
        }

        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let first = select_operator(&mut a);
        b.next_u32();
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(first, select_operator(&mut ChaCha8Rng::seed_from_u64(5)));
    }

    #[test]
    fn guided_mutation_prompt() {
        let p = parent(1, "Classify the sentiment.", "good -> positive", (0.5, 120, 1.1));
        let prompt = build_prompt(&templates(), OperatorKind::DefinitionMutation, "sentiment analysis", (&p).into(), None, true).unwrap();
        let text = prompt.text();
        assert!(text.starts_with(&templates().definition_mutation.guided));
        assert!(text.contains("Given the minimization objectives"));
        assert!(text.contains("Classify the sentiment."));
        assert!(!text.contains("good -> positive"));
        assert!(text.contains("(0.5, 120, 1.1)"));
        assert_eq!(count_triples(&text), 1);
    }

    #[test]
    fn unguided_prompt_has_no_objectives() {
        let p = parent(1, "Classify the sentiment.", "", (0.5, 120, 1.1));
        let prompt = build_prompt(&templates(), OperatorKind::DefinitionMutation, "x", (&p).into(), None, false).unwrap();
        let text = prompt.text();
        assert!(text.contains("Classify the sentiment."));
        assert!(!text.contains("Given the minimization objectives"));
        assert!(!text.to_lowercase().contains("minimization objectives"));
        assert_eq!(count_triples(&text), 0);
    }

    #[test]
    fn guided_example_crossover_annotates_both() {
        let p1 = parent(1, "d1", "e-one", (0.5, 10, 2.0));
        let p2 = parent(2, "d2", "e-two", (0.25, 12, 3.5));
        let prompt = build_prompt(&templates(), OperatorKind::ExampleCrossover, "topic labelling", (&p1).into(), Some((&p2).into()), true).unwrap();
        let text = prompt.text();
        assert!(text.contains("for topic labelling"));
        let e1 = text.find("e-one").unwrap();
        let f1 = text.find("(0.5, 10, 2)").unwrap();
        let e2 = text.find("e-two").unwrap();
        let f2 = text.find("(0.25, 12, 3.5)").unwrap();
        assert!(e1 < f1 && f1 < e2 && e2 < f2);
        assert_eq!(count_triples(&text), 2);
        let (s1, s2) = parent_segments(&text).unwrap();
        assert_eq!((s1.as_str(), s2.as_deref()), ("e-one", Some("e-two")));
    }

    #[test]
    fn crossover_without_second_parent_fails() {
        let p = parent(1, "d", "e", (1.0, 3, 1.0));
        assert!(matches!(
            build_prompt(&templates(), OperatorKind::DefinitionCrossover, "t", (&p).into(), None, true),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn guidance_needs_objectives() {
        let p = Individual::new(Instruction::new(InstructionId(1), "d", "").unwrap(), 0);
        assert!(build_prompt(&templates(), OperatorKind::DefinitionMutation, "t", (&p).into(), None, true).is_err());
        assert!(build_prompt(&templates(), OperatorKind::DefinitionMutation, "t", (&p).into(), None, false).is_ok());
    }

    #[test]
    fn slot_text_in_parent_is_not_expanded() {
        let p = parent(1, "say {objectives1} and {task}", "", (1.0, 3, 1.0));
        let prompt = build_prompt(&templates(), OperatorKind::DefinitionMutation, "t", (&p).into(), None, true).unwrap();
        assert!(prompt.payload.contains("say {objectives1} and {task}"));
        assert_eq!(count_triples(&prompt.payload), 1);
    }

    #[test]
    fn output_parsing() {
        assert_eq!(parse_operator_output("```\nNew definition text\n```").as_deref(), Some("New definition text"));
        assert_eq!(parse_operator_output("```text\nA\nB\n```").as_deref(), Some("A\nB"));
        assert_eq!(
            parse_operator_output("New def\nMinimization objectives: (0.5, 100, 1.1)").as_deref(),
            Some("New def")
        );
        assert_eq!(parse_operator_output("\"Quoted output\"").as_deref(), Some("Quoted output"));
        assert_eq!(parse_operator_output("   "), None);
        assert_eq!(parse_operator_output("MINIMIZATION OBJECTIVES: (1, 2, 3)"), None);
    }

    fn ctx<'a>(t: &'a TemplateSet, gw: &'a dyn ChatGateway, params: &'a CompletionParams, guidance: bool) -> OperatorContext<'a> {
        OperatorContext { templates: t, gateway: gw, params, task_name: "sentiment analysis", guidance }
    }

    #[test]
    fn definition_mutation_with_uppercase_mock() {
        let t = templates();
        let gw = Gateway::mock(MockMode::Uppercase, 0);
        let params = CompletionParams::default();
        let p1 = parent(1, "Classify the text.", "x -> y", (0.5, 20, 2.0));
        let p2 = parent(2, "Other.", "z", (0.4, 8, 2.0));
        let out = apply_operator(&ctx(&t, &gw, &params, true), OperatorKind::DefinitionMutation, (&p1).into(), (&p2).into(), InstructionId(9), 0).unwrap();
        assert_eq!(out.child.definition(), "CLASSIFY THE TEXT.");
        assert_eq!(out.child.example(), "x -> y");
        assert_eq!(out.child.id(), InstructionId(9));
        assert_eq!(out.child.lineage()[0].operator, OperatorKind::DefinitionMutation);
        assert_eq!(out.child.lineage()[0].parents, vec![InstructionId(1)]);
    }

    #[test]
    fn definition_crossover_with_splice_mock() {
        let t = templates();
        let gw = Gateway::mock(MockMode::Splice, 0);
        let params = CompletionParams::default();
        let p1 = parent(1, "abcdef", "keep me", (0.5, 20, 2.0));
        let p2 = parent(2, "uvwxyz", "not me", (0.4, 8, 2.0));
        let out = apply_operator(&ctx(&t, &gw, &params, true), OperatorKind::DefinitionCrossover, (&p1).into(), (&p2).into(), InstructionId(3), 0).unwrap();
        assert_eq!(out.child.definition(), "abcxyz");
        assert_eq!(out.child.example(), "keep me");
        assert_eq!(out.child.lineage()[0].parents, vec![InstructionId(1), InstructionId(2)]);
    }

    #[test]
    fn example_crossover_keeps_definition() {
        let t = templates();
        let gw = FnGateway(|_: &str| Ok("```\nnew example block\n```".to_owned()));
        let params = CompletionParams::default();
        let p1 = parent(1, "Def one.", "ex one", (0.5, 20, 2.0));
        let p2 = parent(2, "Def two.", "ex two", (0.4, 8, 2.0));
        let out = apply_operator(&ctx(&t, &gw, &params, true), OperatorKind::ExampleCrossover, (&p1).into(), (&p2).into(), InstructionId(3), 0).unwrap();
        assert_eq!(out.child.definition(), "Def one.");
        assert_eq!(out.child.example(), "new example block");
    }

    #[test]
    fn empty_output_falls_back_to_parent() {
        let t = templates();
        let gw = FnGateway(|_: &str| Ok("  ".to_owned()));
        let params = CompletionParams::default();
        let p1 = parent(1, "Def one.", "ex one", (0.5, 20, 2.0));
        let out = apply_operator(&ctx(&t, &gw, &params, false), OperatorKind::ExampleMutation, (&p1).into(), (&p1).into(), InstructionId(3), 0).unwrap();
        assert!(out.fallback);
        assert_eq!(out.child.render(), p1.instruction.render());
        assert_eq!(out.child.id(), InstructionId(3));
    }

    #[test]
    fn gateway_failure_names_kind_and_parents() {
        let t = templates();
        let gw = FnGateway(|_: &str| Err(GatewayError::Status { status: 401, detail: "no".into() }));
        let params = CompletionParams::default();
        let p1 = parent(1, "a", "b", (0.5, 3, 2.0));
        let p2 = parent(2, "c", "d", (0.5, 3, 2.0));
        match apply_operator(&ctx(&t, &gw, &params, true), OperatorKind::DefinitionCrossover, (&p1).into(), (&p2).into(), InstructionId(3), 0) {
            Err(Error::Operator { kind, parents, .. }) => {
                assert_eq!(kind, OperatorKind::DefinitionCrossover);
                assert_eq!(parents, vec![InstructionId(1), InstructionId(2)]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_mock_reproduces_parent_for_every_kind() {
        let t = templates();
        let gw = Gateway::mock(MockMode::Echo, 0);
        let params = CompletionParams::default();
        let p1 = parent(1, "Decide the label.", "Text: fine -> neutral\nText: awful -> negative", (0.4, 60, 3.0));
        let p2 = parent(2, "Another def.", "Text: ok -> neutral", (0.3, 30, 2.0));
        for kind in OperatorKind::ALL {
            for guidance in [true, false] {
                let out = apply_operator(&ctx(&t, &gw, &params, guidance), kind, (&p1).into(), (&p2).into(), InstructionId(5), 0).unwrap();
                assert_eq!(out.child.render(), p1.instruction.render(), "{kind}");
            }
        }
    }

    #[test]
    fn splice_reference() {
        assert_eq!(splice("abcd", "wxyz"), "abyz");
    }
}
