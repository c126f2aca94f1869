//! Scoring: document-level and sentence-level grid comparison, plus the
//! categorical location metric for recipes.
//!
//! All scores are pure functions of (prediction grids, gold grids); the
//! action column of a dump is redundant and transitions are re-derived from
//! the grids. Matching rules:
//!
//! * Document level asks four questions per process. `inputs` are entities
//!   existing before step 1 and gone after the last step; `outputs` the
//!   reverse. `moves` are `(entity, step, from, to)` tuples. `conversions`
//!   are `(step, location, destroyed-set, created-set)` tuples pairing the
//!   entities destroyed FROM a location with those created AT it in the same
//!   step. Per process and question, precision = matched/|pred| (1 when
//!   nothing was predicted) and recall = matched/|gold| (1 when there was
//!   nothing to find); question scores average over processes and each F1 is
//!   the harmonic mean of its own averaged P and R.
//! * Sentence level asks, per entity and event kind (create/destroy/move):
//!   Cat-1 whether the event happens (always scored); Cat-2 at which steps
//!   (scored only when both sides say it happens; every occurrence must
//!   match); Cat-3 at which locations (same gating; occurrence order matters,
//!   step indices do not). A category with no instances scores 1.
//! * Locations compare after normalization: lowercase, collapse whitespace,
//!   strip leading articles. This merges `The Ground` with `ground` but keeps
//!   `right side of your heart` distinct from `heart`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::data::ProcessDocument;
use crate::formalism::{derive_transitions, Action, AttributeValue, StateGrid};
use crate::infer::ProcessTrace;

/// One side of a comparison: a process, its entity names, and a state grid
/// whose rows follow `entities` order.
#[derive(Debug, Clone)]
pub struct ProcessAnswer {
    pub process_id: String,
    pub entities: Vec<String>,
    pub grid: StateGrid,
}

impl ProcessAnswer {
    pub fn from_trace(trace: &ProcessTrace) -> Self {
        ProcessAnswer {
            process_id: trace.process_id.clone(),
            entities: trace
                .grid
                .entities()
                .iter()
                .map(|e| e.name.clone())
                .collect(),
            grid: trace.grid.clone(),
        }
    }

    /// The gold grid of a loaded document, if it has one.
    pub fn from_gold(doc: &ProcessDocument) -> Option<Self> {
        doc.gold.as_ref().map(|grid| ProcessAnswer {
            process_id: doc.process_id.clone(),
            entities: doc.entities.iter().map(|e| e.name.clone()).collect(),
            grid: grid.clone(),
        })
    }

    /// Rebuild answers from parsed dump rows. `source` is for error messages.
    pub fn from_rows(
        rows: &[crate::data::PredictionRow],
        source: &str,
    ) -> Result<Vec<Self>, crate::data::DataError> {
        Ok(crate::data::grids_from_rows(rows, source)?
            .into_iter()
            .map(|(process_id, entities, grid)| ProcessAnswer {
                process_id,
                entities,
                grid,
            })
            .collect())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/gold coverage differs: {0}")]
    CoverageMismatch(String),
    #[error("class id {id} outside the {num_classes}-way location vocabulary")]
    UnknownClassId { id: u16, num_classes: usize },
}

/// Lowercase, collapse whitespace, and strip leading article tokens. If the
/// text is nothing but articles the collapsed form is kept, so the result is
/// never empty for non-empty input.
pub fn normalize_location(text: &str) -> String {
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
    let skip = words
        .iter()
        .take_while(|w| matches!(w.as_str(), "a" | "an" | "the"))
        .count();
    if skip == words.len() {
        words.join(" ")
    } else {
        words[skip..].join(" ")
    }
}

/// A location under matching semantics: the three value kinds never cross,
/// and named places compare by normalized text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum LocKey {
    Nowhere,
    Unknown,
    Named(String),
}

impl LocKey {
    fn of(value: &AttributeValue) -> LocKey {
        match value {
            AttributeValue::Nowhere => LocKey::Nowhere,
            AttributeValue::Unknown => LocKey::Unknown,
            AttributeValue::Span { text, .. } => LocKey::Named(normalize_location(text)),
        }
    }
}

type MoveTuple = (String, usize, LocKey, LocKey);
type ConversionTuple = (usize, LocKey, BTreeSet<String>, BTreeSet<String>);

struct QuestionSets {
    inputs: BTreeSet<String>,
    outputs: BTreeSet<String>,
    moves: BTreeSet<MoveTuple>,
    conversions: BTreeSet<ConversionTuple>,
}

fn question_sets(ans: &ProcessAnswer) -> QuestionSets {
    let grid = &ans.grid;
    let t = grid.num_steps();
    let trans = derive_transitions(grid);
    let mut sets = QuestionSets {
        inputs: BTreeSet::new(),
        outputs: BTreeSet::new(),
        moves: BTreeSet::new(),
        conversions: BTreeSet::new(),
    };
    for (e, name) in ans.entities.iter().enumerate() {
        let first = grid.value(e, 0).exists();
        let last = grid.value(e, t).exists();
        if first && !last {
            sets.inputs.insert(name.clone());
        }
        if !first && last {
            sets.outputs.insert(name.clone());
        }
        for k in 1..=t {
            if trans.label(e, k).action == Action::Move {
                sets.moves.insert((
                    name.clone(),
                    k,
                    LocKey::of(grid.value(e, k - 1)),
                    LocKey::of(grid.value(e, k)),
                ));
            }
        }
    }
    for k in 1..=t {
        let mut destroyed: BTreeMap<LocKey, BTreeSet<String>> = BTreeMap::new();
        let mut created: BTreeMap<LocKey, BTreeSet<String>> = BTreeMap::new();
        for (e, name) in ans.entities.iter().enumerate() {
            match trans.label(e, k).action {
                Action::Destroy => {
                    destroyed
                        .entry(LocKey::of(grid.value(e, k - 1)))
                        .or_default()
                        .insert(name.clone());
                }
                Action::Create => {
                    created
                        .entry(LocKey::of(grid.value(e, k)))
                        .or_default()
                        .insert(name.clone());
                }
                _ => {}
            }
        }
        for (loc, dst) in destroyed {
            if let Some(src) = created.remove(&loc) {
                sets.conversions.insert((k, loc, dst, src));
            }
        }
    }
    sets
}

/// Precision/recall of one predicted set against gold. Empty prediction
/// means no false positives (P = 1); empty gold means nothing was missed
/// (R = 1).
fn set_pr<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> (f64, f64) {
    let matched = pred.intersection(gold).count() as f64;
    let p = if pred.is_empty() {
        1.0
    } else {
        matched / pred.len() as f64
    };
    let r = if gold.is_empty() {
        1.0
    } else {
        matched / gold.len() as f64
    };
    (p, r)
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuestionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl QuestionScore {
    fn from_pr(precision: f64, recall: f64) -> Self {
        QuestionScore {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DocLevelReport {
    pub inputs: QuestionScore,
    pub outputs: QuestionScore,
    pub moves: QuestionScore,
    pub conversions: QuestionScore,
    pub overall: QuestionScore,
    pub num_processes: usize,
}

impl fmt::Display for DocLevelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "document-level scores over {} processes",
            self.num_processes
        )?;
        writeln!(f, "{:<13}{:>10}{:>10}{:>10}", "question", "P", "R", "F1")?;
        for (name, q) in [
            ("inputs", &self.inputs),
            ("outputs", &self.outputs),
            ("moves", &self.moves),
            ("conversions", &self.conversions),
            ("overall", &self.overall),
        ] {
            writeln!(
                f,
                "{name:<13}{:>10.4}{:>10.4}{:>10.4}",
                q.precision, q.recall, q.f1
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SentLevelReport {
    pub cat1: f64,
    pub cat2: f64,
    pub cat3: f64,
    pub macro_avg: f64,
    pub micro_avg: f64,
    pub cat1_total: usize,
    pub cat2_total: usize,
    pub cat3_total: usize,
}

impl fmt::Display for SentLevelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "sentence-level scores (exact step match; {}/{}/{} instances)",
            self.cat1_total, self.cat2_total, self.cat3_total
        )?;
        writeln!(
            f,
            "cat1 {:.4}  cat2 {:.4}  cat3 {:.4}  macro {:.4}  micro {:.4}",
            self.cat1, self.cat2, self.cat3, self.macro_avg, self.micro_avg
        )
    }
}

/// Index both sides by process id and check they cover the same processes,
/// entities, and step counts.
fn paired<'a>(
    pred: &'a [ProcessAnswer],
    gold: &'a [ProcessAnswer],
) -> Result<Vec<(&'a ProcessAnswer, &'a ProcessAnswer)>, EvalError> {
    let mut by_id: BTreeMap<&str, &ProcessAnswer> = BTreeMap::new();
    for p in pred {
        if by_id.insert(&p.process_id, p).is_some() {
            return Err(EvalError::CoverageMismatch(format!(
                "process {} predicted twice",
                p.process_id
            )));
        }
    }
    if by_id.len() != gold.len() {
        return Err(EvalError::CoverageMismatch(format!(
            "{} predicted processes vs {} gold",
            by_id.len(),
            gold.len()
        )));
    }
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_id.remove(g.process_id.as_str()).ok_or_else(|| {
            EvalError::CoverageMismatch(format!("process {} has no prediction", g.process_id))
        })?;
        let pe: BTreeSet<&String> = p.entities.iter().collect();
        let ge: BTreeSet<&String> = g.entities.iter().collect();
        if pe != ge {
            return Err(EvalError::CoverageMismatch(format!(
                "process {}: predicted entities {pe:?} vs gold {ge:?}",
                g.process_id
            )));
        }
        if p.grid.num_steps() != g.grid.num_steps() {
            return Err(EvalError::CoverageMismatch(format!(
                "process {}: {} predicted steps vs {} gold",
                g.process_id,
                p.grid.num_steps(),
                g.grid.num_steps()
            )));
        }
        pairs.push((p, g));
    }
    Ok(pairs)
}

/// Score the four per-process questions. Zero processes score a vacuous 1.
pub fn eval_document_level(
    pred: &[ProcessAnswer],
    gold: &[ProcessAnswer],
) -> Result<DocLevelReport, EvalError> {
    let pairs = paired(pred, gold)?;
    let n = pairs.len() as f64;
    let mut sums = [[0.0f64; 2]; 4];
    for (p, g) in &pairs {
        let ps = question_sets(p);
        let gs = question_sets(g);
        for (i, (pq, gq)) in [
            set_pr(&ps.inputs, &gs.inputs),
            set_pr(&ps.outputs, &gs.outputs),
            set_pr(&ps.moves, &gs.moves),
            set_pr(&ps.conversions, &gs.conversions),
        ]
        .into_iter()
        .enumerate()
        {
            sums[i][0] += pq;
            sums[i][1] += gq;
        }
    }
    let q = |i: usize| {
        if pairs.is_empty() {
            QuestionScore::from_pr(1.0, 1.0)
        } else {
            QuestionScore::from_pr(sums[i][0] / n, sums[i][1] / n)
        }
    };
    let (inputs, outputs, moves, conversions) = (q(0), q(1), q(2), q(3));
    let op = (inputs.precision + outputs.precision + moves.precision + conversions.precision) / 4.0;
    let or = (inputs.recall + outputs.recall + moves.recall + conversions.recall) / 4.0;
    Ok(DocLevelReport {
        inputs,
        outputs,
        moves,
        conversions,
        overall: QuestionScore::from_pr(op, or),
        num_processes: pairs.len(),
    })
}

/// Location payload of one event occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
enum EventLoc {
    At(LocKey),
    FromTo(LocKey, LocKey),
}

/// Steps (1-based, ascending) and location payloads of every `kind` event in
/// one entity row.
fn event_row(grid: &StateGrid, entity: usize, kind: Action) -> (Vec<usize>, Vec<EventLoc>) {
    let trans = derive_transitions(grid);
    let mut steps = Vec::new();
    let mut locs = Vec::new();
    for k in 1..=grid.num_steps() {
        if trans.label(entity, k).action != kind {
            continue;
        }
        steps.push(k);
        locs.push(match kind {
            Action::Create => EventLoc::At(LocKey::of(grid.value(entity, k))),
            Action::Destroy => EventLoc::At(LocKey::of(grid.value(entity, k - 1))),
            _ => EventLoc::FromTo(
                LocKey::of(grid.value(entity, k - 1)),
                LocKey::of(grid.value(entity, k)),
            ),
        });
    }
    (steps, locs)
}

/// Score the three per-entity event questions.
pub fn eval_sentence_level(
    pred: &[ProcessAnswer],
    gold: &[ProcessAnswer],
) -> Result<SentLevelReport, EvalError> {
    let pairs = paired(pred, gold)?;
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    for (p, g) in &pairs {
        for (ge, name) in g.entities.iter().enumerate() {
            let pe = p.entities.iter().position(|n| n == name).expect("paired");
            for kind in [Action::Create, Action::Destroy, Action::Move] {
                let (g_steps, g_locs) = event_row(&g.grid, ge, kind);
                let (p_steps, p_locs) = event_row(&p.grid, pe, kind);
                total[0] += 1;
                correct[0] += usize::from(g_steps.is_empty() == p_steps.is_empty());
                if !g_steps.is_empty() && !p_steps.is_empty() {
                    total[1] += 1;
                    correct[1] += usize::from(g_steps == p_steps);
                    total[2] += 1;
                    correct[2] += usize::from(g_locs == p_locs);
                }
            }
        }
    }
    let cat = |i: usize| {
        if total[i] == 0 {
            1.0
        } else {
            correct[i] as f64 / total[i] as f64
        }
    };
    let (cat1, cat2, cat3) = (cat(0), cat(1), cat(2));
    let all_total: usize = total.iter().sum();
    let micro_avg = if all_total == 0 {
        1.0
    } else {
        correct.iter().sum::<usize>() as f64 / all_total as f64
    };
    Ok(SentLevelReport {
        cat1,
        cat2,
        cat3,
        macro_avg: (cat1 + cat2 + cat3) / 3.0,
        micro_avg,
        cat1_total: total[0],
        cat2_total: total[1],
        cat3_total: total[2],
    })
}

/// One side of a recipe comparison: per-ingredient rows of location-class
/// ids over steps `0..=T`.
#[derive(Debug, Clone)]
pub struct RecipeAnswer {
    pub recipe_id: String,
    pub locations: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CookingReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub gold_changes: usize,
    pub pred_changes: usize,
}

impl fmt::Display for CookingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "location changes: P {:.4}  R {:.4}  F1 {:.4}  accuracy {:.4} \
             ({} gold / {} predicted change events)",
            self.precision, self.recall, self.f1, self.accuracy, self.gold_changes,
            self.pred_changes
        )
    }
}

/// F1 over change events (an ingredient's class id differing from the
/// previous step) and accuracy of the predicted id at gold change steps.
pub fn eval_cooking(
    pred: &[RecipeAnswer],
    gold: &[RecipeAnswer],
    num_classes: usize,
) -> Result<CookingReport, EvalError> {
    let mut by_id: BTreeMap<&str, &RecipeAnswer> = BTreeMap::new();
    for p in pred {
        if by_id.insert(&p.recipe_id, p).is_some() {
            return Err(EvalError::CoverageMismatch(format!(
                "recipe {} predicted twice",
                p.recipe_id
            )));
        }
    }
    if by_id.len() != gold.len() {
        return Err(EvalError::CoverageMismatch(format!(
            "{} predicted recipes vs {} gold",
            by_id.len(),
            gold.len()
        )));
    }
    let check_ids = |rows: &[Vec<u16>]| {
        for row in rows {
            for &id in row {
                if usize::from(id) >= num_classes {
                    return Err(EvalError::UnknownClassId { id, num_classes });
                }
            }
        }
        Ok(())
    };

    let mut pred_events: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut gold_events: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut acc_hits = 0usize;
    for (r, g) in gold.iter().enumerate() {
        let p = by_id.remove(g.recipe_id.as_str()).ok_or_else(|| {
            EvalError::CoverageMismatch(format!("recipe {} has no prediction", g.recipe_id))
        })?;
        if p.locations.len() != g.locations.len() {
            return Err(EvalError::CoverageMismatch(format!(
                "recipe {}: {} predicted ingredients vs {} gold",
                g.recipe_id,
                p.locations.len(),
                g.locations.len()
            )));
        }
        check_ids(&p.locations)?;
        check_ids(&g.locations)?;
        for (i, g_row) in g.locations.iter().enumerate() {
            let p_row = &p.locations[i];
            if p_row.len() != g_row.len() {
                return Err(EvalError::CoverageMismatch(format!(
                    "recipe {} ingredient {i}: {} predicted steps vs {} gold",
                    g.recipe_id,
                    p_row.len().saturating_sub(1),
                    g_row.len().saturating_sub(1)
                )));
            }
            for k in 1..g_row.len() {
                if g_row[k] != g_row[k - 1] {
                    gold_events.insert((r, i, k));
                    acc_hits += usize::from(p_row[k] == g_row[k]);
                }
                if p_row[k] != p_row[k - 1] {
                    pred_events.insert((r, i, k));
                }
            }
        }
    }
    let (precision, recall) = set_pr(&pred_events, &gold_events);
    let accuracy = if gold_events.is_empty() {
        1.0
    } else {
        acc_hits as f64 / gold_events.len() as f64
    };
    Ok(CookingReport {
        precision,
        recall,
        f1: harmonic(precision, recall),
        accuracy,
        gold_changes: gold_events.len(),
        pred_changes: pred_events.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_predictions;
    use crate::synth::random_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    fn fixture_dir() -> &'static Path {
        Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/eval"))
    }

    pub(crate) fn load_answers(name: &str, side: &str) -> Vec<ProcessAnswer> {
        let path = fixture_dir().join(format!("{name}.{side}.tsv"));
        let text = std::fs::read_to_string(&path).unwrap();
        let rows = parse_predictions(&text, &path.display().to_string()).unwrap();
        ProcessAnswer::from_rows(&rows, &path.display().to_string()).unwrap()
    }

    fn expected(name: &str) -> serde_json::Value {
        let path = fixture_dir().join(format!("{name}.expected.json"));
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    fn num(v: &serde_json::Value, path: &[&str]) -> f64 {
        let mut cur = v;
        for p in path {
            cur = &cur[p];
        }
        cur.as_f64().unwrap()
    }

    pub(crate) const FIXTURES: [&str; 10] = [
        "01_identity",
        "02_extra_move",
        "03_span_boundary",
        "04_article_normalization",
        "05_missed_destroy",
        "06_wrong_container",
        "07_no_predicted_moves",
        "08_multi_process",
        "09_conversion_mismatch",
        "10_multi_conversion",
    ];

    #[test]
    fn fixtures_match_frozen_scores() {
        for name in FIXTURES {
            let pred = load_answers(name, "pred");
            let gold = load_answers(name, "gold");
            let doc = eval_document_level(&pred, &gold).unwrap();
            let sent = eval_sentence_level(&pred, &gold).unwrap();
            let exp = expected(name);
            for (qname, q) in [
                ("inputs", &doc.inputs),
                ("outputs", &doc.outputs),
                ("moves", &doc.moves),
                ("conversions", &doc.conversions),
                ("overall", &doc.overall),
            ] {
                for (field, got) in [
                    ("precision", q.precision),
                    ("recall", q.recall),
                    ("f1", q.f1),
                ] {
                    let want = num(&exp, &["document", qname, field]);
                    assert!(
                        (got - want).abs() < 1e-9,
                        "{name} document {qname} {field}: got {got}, want {want}"
                    );
                }
            }
            for (field, got) in [
                ("cat1", sent.cat1),
                ("cat2", sent.cat2),
                ("cat3", sent.cat3),
                ("macro_avg", sent.macro_avg),
                ("micro_avg", sent.micro_avg),
            ] {
                let want = num(&exp, &["sentence", field]);
                assert!(
                    (got - want).abs() < 1e-9,
                    "{name} sentence {field}: got {got}, want {want}"
                );
            }
            for (field, got) in [
                ("cat1_total", sent.cat1_total),
                ("cat2_total", sent.cat2_total),
                ("cat3_total", sent.cat3_total),
            ] {
                assert_eq!(
                    got,
                    num(&exp, &["sentence", field]) as usize,
                    "{name} sentence {field}"
                );
            }
        }
    }

    #[test]
    fn normalization_strips_articles_and_case_only() {
        assert_eq!(normalize_location("The  Right Side"), "right side");
        assert_eq!(normalize_location("a an the ground"), "ground");
        assert_eq!(normalize_location("the"), "the");
        assert_eq!(normalize_location("An Apple Tree"), "apple tree");
        assert_ne!(
            normalize_location("right side of your heart"),
            normalize_location("heart")
        );
    }

    #[test]
    fn identity_scores_one_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for round in 0..200 {
            let grid = random_grid(&mut rng, 5, 8);
            let names: Vec<String> = grid.entities().iter().map(|e| e.name.clone()).collect();
            let ans = vec![ProcessAnswer {
                process_id: format!("p{round}"),
                entities: names,
                grid,
            }];
            let doc = eval_document_level(&ans, &ans).unwrap();
            let sent = eval_sentence_level(&ans, &ans).unwrap();
            for v in [
                doc.inputs.f1,
                doc.outputs.f1,
                doc.moves.f1,
                doc.conversions.f1,
                doc.overall.precision,
                doc.overall.recall,
                doc.overall.f1,
                sent.cat1,
                sent.cat2,
                sent.cat3,
                sent.macro_avg,
                sent.micro_avg,
            ] {
                assert_eq!(v, 1.0, "round {round}");
            }
        }
    }

    #[test]
    fn dropping_a_matched_tuple_degrades_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            use rand::Rng;
            let gold: BTreeSet<u32> = (0..rng.random_range(1..10))
                .map(|_| rng.random_range(0..20))
                .collect();
            let mut pred: BTreeSet<u32> = (0..rng.random_range(0..10))
                .map(|_| rng.random_range(0..20))
                .collect();
            pred.extend(gold.iter().take(1));
            let (p0, r0) = set_pr(&pred, &gold);
            let shared = *pred.intersection(&gold).next().unwrap();
            pred.remove(&shared);
            let (p1, r1) = set_pr(&pred, &gold);
            assert!(r1 < r0, "recall must drop: {r1} vs {r0}");
            assert!(p1 <= p0, "precision must not rise: {p1} vs {p0}");
        }
    }

    #[test]
    fn coverage_mismatches_are_rejected() {
        let gold = load_answers("01_identity", "gold");
        assert!(matches!(
            eval_document_level(&[], &gold),
            Err(EvalError::CoverageMismatch(_))
        ));

        let mut renamed = gold.clone();
        renamed[0].process_id = "other".into();
        assert!(eval_document_level(&renamed, &gold).is_err());

        let mut entity_swap = gold.clone();
        entity_swap[0].entities[0] = "steam".into();
        assert!(eval_sentence_level(&entity_swap, &gold).is_err());

        let mut short = gold.clone();
        let g = &gold[0].grid;
        let drop_last = StateGrid::new(
            g.entities().to_vec(),
            g.num_steps() - 1,
            (0..g.num_entities())
                .map(|e| g.row(e)[..g.num_steps()].to_vec())
                .collect(),
        )
        .unwrap();
        short[0].grid = drop_last;
        assert!(eval_document_level(&short, &gold).is_err());
    }

    #[test]
    fn entity_order_does_not_matter() {
        let gold = load_answers("05_missed_destroy", "gold");
        let g = &gold[0];
        let flipped = ProcessAnswer {
            process_id: g.process_id.clone(),
            entities: vec![g.entities[1].clone(), g.entities[0].clone()],
            grid: StateGrid::new(
                vec![g.grid.entities()[1].clone(), g.grid.entities()[0].clone()],
                g.grid.num_steps(),
                vec![g.grid.row(1).to_vec(), g.grid.row(0).to_vec()],
            )
            .unwrap(),
        };
        let doc = eval_document_level(&[flipped.clone()], &gold).unwrap();
        assert_eq!(doc.overall.f1, 1.0);
        let sent = eval_sentence_level(&[flipped], &gold).unwrap();
        assert_eq!(sent.micro_avg, 1.0);
    }

    fn cooking_fixture(name: &str) -> (Vec<RecipeAnswer>, Vec<RecipeAnswer>, usize, serde_json::Value) {
        let path = fixture_dir().join(format!("{name}.json"));
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let side = |key: &str| -> Vec<RecipeAnswer> {
            v[key]
                .as_object()
                .unwrap()
                .iter()
                .map(|(rid, rows)| RecipeAnswer {
                    recipe_id: rid.clone(),
                    locations: serde_json::from_value(rows.clone()).unwrap(),
                })
                .collect()
        };
        let n = v["num_classes"].as_u64().unwrap() as usize;
        let exp = v["expected"].clone();
        (side("pred"), side("gold"), n, exp)
    }

    pub(crate) const COOKING_FIXTURES: [&str; 3] = [
        "cooking_01_identity",
        "cooking_02_partial",
        "cooking_03_no_gold_changes",
    ];

    #[test]
    fn cooking_fixtures_match_frozen_scores() {
        for name in COOKING_FIXTURES {
            let (pred, gold, n, exp) = cooking_fixture(name);
            let rep = eval_cooking(&pred, &gold, n).unwrap();
            for (field, got) in [
                ("precision", rep.precision),
                ("recall", rep.recall),
                ("f1", rep.f1),
                ("accuracy", rep.accuracy),
            ] {
                let want = num(&exp, &[field]);
                assert!(
                    (got - want).abs() < 1e-9,
                    "{name} {field}: got {got}, want {want}"
                );
            }
            assert_eq!(rep.gold_changes, num(&exp, &["gold_changes"]) as usize);
            assert_eq!(rep.pred_changes, num(&exp, &["pred_changes"]) as usize);
        }
    }

    #[test]
    fn cooking_rejects_bad_ids_and_shapes() {
        let ans = |ids: Vec<Vec<u16>>| {
            vec![RecipeAnswer {
                recipe_id: "r".into(),
                locations: ids,
            }]
        };
        let gold = ans(vec![vec![1, 2, 2]]);
        assert!(matches!(
            eval_cooking(&ans(vec![vec![1, 9, 9]]), &gold, 5),
            Err(EvalError::UnknownClassId { id: 9, num_classes: 5 })
        ));
        assert!(matches!(
            eval_cooking(&ans(vec![vec![1, 2]]), &gold, 5),
            Err(EvalError::CoverageMismatch(_))
        ));
        assert!(matches!(
            eval_cooking(&ans(vec![vec![1, 2, 2], vec![0, 0, 0]]), &gold, 5),
            Err(EvalError::CoverageMismatch(_))
        ));
        assert!(eval_cooking(&gold, &gold, 5).is_ok());
    }

    #[test]
    fn reports_render_and_serialize() {
        let gold = load_answers("02_extra_move", "gold");
        let pred = load_answers("02_extra_move", "pred");
        let doc = eval_document_level(&pred, &gold).unwrap();
        let sent = eval_sentence_level(&pred, &gold).unwrap();
        let text = format!("{doc}{sent}");
        assert!(text.contains("moves"));
        assert!(text.contains("macro"));
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"overall\""));
    }
}
