//! Decoding model outputs into consistent state grids.
//!
//! Attribute distributions decode greedily (argmax class, best span pair);
//! the reconciler then walks each entity's steps favoring the predicted
//! transitions, falling back to the transition forced by the decoded
//! attributes whenever the prediction cannot apply to the current state.
//! The resulting (grid, transitions) pair always passes
//! [`check_consistency`] with zero violations.

use protrace_autodiff::{ParamStore, Tape};

use crate::data::{rows_from_process, PredictionRow, ProcessDocument, RecipeDocument};
use crate::encoding::ProceduralContext;
use crate::formalism::{
    apply_transition, check_consistency, transition_between, Action,
    AttributeValue, EntityRef, SpanLoc, StateGrid, TransitionLabel, TransitionSeq,
};
use crate::model::cooking::{CookingModel, CookingModelError};
use crate::model::heads::{
    AttributeDistribution, CLASS_NOWHERE, CLASS_UNKNOWN,
};
use crate::model::{Model, ModelError};

/// Longest decodable span, in encoder tokens.
pub const MAX_SPAN_TOKENS: usize = 10;
/// Minimum start*end mass for a span to count as found.
pub const SPAN_MASS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    /// Walk transitions, reconciling them with decoded attributes.
    Reconciled,
    /// Use decoded attributes verbatim; transition outputs are ignored.
    AttributesOnly,
}

#[derive(Debug, Clone)]
pub struct DecodedAttribute {
    pub value: AttributeValue,
    /// True when class said SPAN but no valid span pair carried enough
    /// mass, so the value fell back to UNKNOWN.
    pub used_fallback: bool,
}

/// Best in-sentence (start, end) pair: start <= end < start + MAX_SPAN_TOKENS,
/// both inside one sentence, maximizing p_start * p_end.
fn best_span(
    dist: &AttributeDistribution,
    ctx: &ProceduralContext,
) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (_, range) in &ctx.sentence_ranges {
        for s in range.clone() {
            let top = (s + MAX_SPAN_TOKENS).min(range.end);
            for e in s..top {
                let mass = dist.p_start[s] * dist.p_end[e];
                if best.map_or(true, |(_, _, b)| mass > b) {
                    best = Some((s, e, mass));
                }
            }
        }
    }
    best
}

fn span_value(
    doc: &ProcessDocument,
    ctx: &ProceduralContext,
    start: usize,
    end: usize,
) -> Option<AttributeValue> {
    let (sentence, first_word) = ctx.data_token_at(start)?;
    let (_, last_word) = ctx.data_token_at(end)?;
    let words = &doc.sentences[sentence].tokens[first_word..=last_word];
    Some(AttributeValue::span_at(
        words.join(" "),
        SpanLoc {
            sentence,
            start: first_word,
            end: last_word,
        },
    ))
}

/// Greedy decode of one attribute distribution.
///
/// With `use_class` the 3-way class decides the shape and spans are only
/// searched for the SPAN class. Without it (span-only ablation) the class
/// is read off where the span mass sits: a reserved class token or a
/// sentence span.
pub fn decode_attribute(
    dist: &AttributeDistribution,
    ctx: &ProceduralContext,
    doc: &ProcessDocument,
    use_class: bool,
) -> DecodedAttribute {
    let found = |value| DecodedAttribute {
        value,
        used_fallback: false,
    };
    if use_class {
        let class = (0..dist.p_class.len())
            .max_by(|&a, &b| dist.p_class[a].total_cmp(&dist.p_class[b]))
            .unwrap();
        match class {
            CLASS_NOWHERE => found(AttributeValue::Nowhere),
            CLASS_UNKNOWN => found(AttributeValue::Unknown),
            _ => match best_span(dist, ctx) {
                Some((s, e, mass)) if mass > SPAN_MASS_FLOOR => {
                    match span_value(doc, ctx, s, e) {
                        Some(v) => found(v),
                        None => DecodedAttribute {
                            value: AttributeValue::Unknown,
                            used_fallback: true,
                        },
                    }
                }
                _ => DecodedAttribute {
                    value: AttributeValue::Unknown,
                    used_fallback: true,
                },
            },
        }
    } else {
        let reserved = |pos: usize| dist.p_start[pos] * dist.p_end[pos];
        let nowhere_mass = reserved(ctx.nowhere_pos);
        let unknown_mass = reserved(ctx.unknown_pos);
        let span = best_span(dist, ctx);
        let span_mass = span.map_or(0.0, |(_, _, m)| m);
        if nowhere_mass >= unknown_mass && nowhere_mass >= span_mass {
            found(AttributeValue::Nowhere)
        } else if unknown_mass >= span_mass {
            found(AttributeValue::Unknown)
        } else {
            let (s, e, _) = span.unwrap();
            match span_value(doc, ctx, s, e) {
                Some(v) => found(v),
                None => DecodedAttribute {
                    value: AttributeValue::Unknown,
                    used_fallback: true,
                },
            }
        }
    }
}

/// One entity's reconciled walk.
#[derive(Debug, Clone)]
pub struct ReconcileOutcome {
    /// Attribute per step, `0..=T`.
    pub column: Vec<AttributeValue>,
    /// Transition per step, `1..=T`.
    pub labels: Vec<TransitionLabel>,
    /// Steps where the favored transition could not be applied and the
    /// attribute-derived transition was used instead.
    pub overridden: usize,
}

/// Walk steps `1..=T` from `a0`, applying each favored transition when its
/// precondition holds against the running value, otherwise deriving the
/// transition from (running value, decoded attribute). A favored MOVE whose
/// target equals the running value and a favored CREATE whose decoded
/// attribute does not exist are treated as inapplicable (the derived
/// transition replaces them), keeping the walk free of consistency
/// violations.
pub fn reconcile(
    a0: AttributeValue,
    decoded_curr: &[AttributeValue],
    favored: Option<&[Action]>,
) -> ReconcileOutcome {
    if let Some(f) = favored {
        assert_eq!(f.len(), decoded_curr.len(), "one favored action per step");
    }
    let mut column = Vec::with_capacity(decoded_curr.len() + 1);
    let mut labels = Vec::with_capacity(decoded_curr.len());
    let mut overridden = 0;
    let mut v = a0;
    column.push(v.clone());

    for (i, target) in decoded_curr.iter().enumerate() {
        let action = favored.map(|f| f[i]);
        let degenerate = match action {
            // Moving onto the current value would disagree with the
            // derived NONE; creating something that decodes as absent
            // has no location to create at.
            Some(Action::Move) => v.same_state(target) || !target.exists(),
            Some(Action::Create) => !target.exists(),
            _ => false,
        };
        let favored_label = match (action, degenerate) {
            (Some(Action::Create), false) => Some(TransitionLabel::create(target.clone())),
            (Some(Action::Move), false) => Some(TransitionLabel::move_to(target.clone())),
            (Some(Action::Destroy), _) => Some(TransitionLabel::destroy()),
            (Some(Action::None), _) => Some(TransitionLabel::none()),
            _ => None,
        };
        let applied = favored_label.and_then(|label| {
            apply_transition(&v, &label).ok().map(|next| (label, next))
        });
        let label = match applied {
            Some((label, next)) => {
                v = next;
                label
            }
            None => {
                if action.is_some() {
                    overridden += 1;
                }
                // A derived NONE keeps the running value rather than
                // swapping in the decoded target's spelling.
                let derived = transition_between(&v, target);
                v = apply_transition(&v, &derived).expect("derived transitions apply");
                derived
            }
        };
        labels.push(label);
        column.push(v.clone());
    }

    ReconcileOutcome {
        column,
        labels,
        overridden,
    }
}

#[derive(Debug, Clone)]
pub struct EntityTrace {
    pub entity: EntityRef,
    pub column: Vec<AttributeValue>,
    pub labels: Vec<TransitionLabel>,
    pub span_fallbacks: usize,
    pub overridden: usize,
}

pub struct ProcessTrace {
    pub process_id: String,
    pub grid: StateGrid,
    pub transitions: TransitionSeq,
    pub span_fallbacks: usize,
    pub overridden: usize,
}

impl ProcessTrace {
    /// External dump rows, step-major.
    pub fn dump_rows(&self) -> Vec<PredictionRow> {
        let names: Vec<String> = self
            .grid
            .entities()
            .iter()
            .map(|e| e.name.clone())
            .collect();
        rows_from_process(&self.process_id, &names, &self.grid, &self.transitions)
    }
}

/// Run the model over every entity of a document and decode.
pub fn track_process(
    model: &Model,
    store: &ParamStore,
    doc: &ProcessDocument,
    mode: TrackMode,
) -> Result<ProcessTrace, ModelError> {
    let use_class = model.heads.has_class_head();
    let mut columns = Vec::with_capacity(doc.entities.len());
    let mut label_rows = Vec::with_capacity(doc.entities.len());
    let mut span_fallbacks = 0;
    let mut overridden = 0;

    for entity in &doc.entities {
        let mut tape = Tape::new();
        let fwd = model.forward_process(&mut tape, store, doc, entity)?;

        let mut a0 = None;
        let mut curr = Vec::with_capacity(fwd.steps.len());
        let mut favored = Vec::with_capacity(fwd.steps.len());
        for (i, step) in fwd.steps.iter().enumerate() {
            if i == 0 {
                let prev = AttributeDistribution::from_vars(&tape, &step.prev)
                    .map_err(ModelError::Head)?;
                let d = decode_attribute(&prev, &step.ctx, doc, use_class);
                span_fallbacks += d.used_fallback as usize;
                a0 = Some(d.value);
            }
            let dist = AttributeDistribution::from_vars(&tape, &step.curr)
                .map_err(ModelError::Head)?;
            let d = decode_attribute(&dist, &step.ctx, doc, use_class);
            span_fallbacks += d.used_fallback as usize;
            curr.push(d.value);
        }
        for &logits in &fwd.transition_logits {
            let vals = tape.value(logits);
            let argmax = (0..vals.ncols())
                .max_by(|&a, &b| vals[[0, a]].total_cmp(&vals[[0, b]]))
                .unwrap();
            favored.push(Action::ALL[argmax]);
        }

        let a0 = a0.expect("at least one step");
        let outcome = match mode {
            TrackMode::Reconciled => {
                let favored = (!favored.is_empty()).then_some(favored.as_slice());
                reconcile(a0, &curr, favored)
            }
            TrackMode::AttributesOnly => {
                let mut column = vec![a0];
                column.extend(curr.iter().cloned());
                let labels = (1..column.len())
                    .map(|k| transition_between(&column[k - 1], &column[k]))
                    .collect();
                ReconcileOutcome {
                    column,
                    labels,
                    overridden: 0,
                }
            }
        };
        overridden += outcome.overridden;
        columns.push(outcome.column);
        label_rows.push(outcome.labels);
    }

    let grid = StateGrid::new(doc.entities.clone(), doc.num_steps(), columns)
        .expect("reconciler emits full columns");
    let transitions = TransitionSeq::new(label_rows);
    debug_assert!(check_consistency(&grid, &transitions)
        .map_or(false, |v| v.is_empty()));
    Ok(ProcessTrace {
        process_id: doc.process_id.clone(),
        grid,
        transitions,
        span_fallbacks,
        overridden,
    })
}

/// Predicted location-class ids per ingredient and step (`0..=T`).
///
/// The walk favors predicted transitions the same way the span model does:
/// NONE keeps the running id, anything else adopts the step's predicted id.
pub fn track_recipe(
    model: &CookingModel,
    store: &ParamStore,
    recipe: &RecipeDocument,
) -> Result<Vec<Vec<u16>>, CookingModelError> {
    let mut out = Vec::with_capacity(recipe.ingredients.len());
    for ing in 0..recipe.ingredients.len() {
        let mut tape = Tape::new();
        let fwd = model.forward_recipe(&mut tape, store, recipe, ing)?;
        let argmax_row = |v| {
            let vals = tape.value(v);
            (0..vals.ncols())
                .max_by(|&a, &b| vals[[0, a]].total_cmp(&vals[[0, b]]))
                .unwrap() as u16
        };
        let mut ids = Vec::with_capacity(fwd.steps.len() + 1);
        let mut current = argmax_row(fwd.steps[0].prev_logits);
        ids.push(current);
        for (i, step) in fwd.steps.iter().enumerate() {
            let action = Action::ALL[argmax_row(fwd.transition_logits[i]) as usize];
            if action != Action::None {
                current = argmax_row(step.curr_logits);
            }
            ids.push(current);
        }
        out.push(ids);
    }
    Ok(out)
}
