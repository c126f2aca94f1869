//! Process representation: entities, per-step attribute values, and the
//! transitions between them.
//!
//! A process over `T` sentences is a grid of attribute values with `T + 1`
//! columns (column 0 is the pre-process state) plus one transition label per
//! entity and step `1..=T`. Grids and transition sequences are two views of
//! the same process: [`derive_transitions`] maps values to labels, and
//! folding [`apply_transition`] over labels rebuilds the value columns.

use std::fmt;

use thiserror::Error;

/// One tracked participant of a process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRef {
    pub process_id: String,
    /// Surface form, e.g. "fuel"; non-empty after trimming.
    pub name: String,
    /// Ordinal within the process; unique per process.
    pub index: usize,
}

impl EntityRef {
    pub fn new(process_id: impl Into<String>, name: impl Into<String>, index: usize) -> Self {
        let name = name.into();
        debug_assert!(!name.trim().is_empty(), "entity name must be non-empty");
        Self {
            process_id: process_id.into(),
            name,
            index,
        }
    }
}

/// Grounded position of a span: sentence index plus token range within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanLoc {
    pub sentence: usize,
    /// Token range `[start, end]`, inclusive on both sides.
    pub start: usize,
    pub end: usize,
}

/// The attribute of one entity at one time step: it does not exist, it
/// exists somewhere unknown, or it exists at a place named by a text span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttributeValue {
    Nowhere,
    Unknown,
    Span {
        text: String,
        /// Set when the span is grounded in the encoded context.
        loc: Option<SpanLoc>,
    },
}

impl AttributeValue {
    pub fn span(text: impl Into<String>) -> Self {
        let text = text.into();
        debug_assert!(!text.trim().is_empty(), "span text must be non-empty");
        AttributeValue::Span { text, loc: None }
    }

    pub fn span_at(text: impl Into<String>, loc: SpanLoc) -> Self {
        let text = text.into();
        debug_assert!(!text.trim().is_empty(), "span text must be non-empty");
        AttributeValue::Span {
            text,
            loc: Some(loc),
        }
    }

    pub fn exists(&self) -> bool {
        !matches!(self, AttributeValue::Nowhere)
    }

    pub fn span_text(&self) -> Option<&str> {
        match self {
            AttributeValue::Span { text, .. } => Some(text),
            _ => None,
        }
    }

    /// State equality: case-insensitive, whitespace-normalized span text;
    /// grounding positions are ignored.
    pub fn same_state(&self, other: &AttributeValue) -> bool {
        match (self, other) {
            (AttributeValue::Nowhere, AttributeValue::Nowhere) => true,
            (AttributeValue::Unknown, AttributeValue::Unknown) => true,
            (AttributeValue::Span { text: a, .. }, AttributeValue::Span { text: b, .. }) => {
                normalize_span(a) == normalize_span(b)
            }
            _ => false,
        }
    }

    /// Drop any grounding information, keeping only the state.
    pub fn ungrounded(&self) -> AttributeValue {
        match self {
            AttributeValue::Span { text, .. } => AttributeValue::Span {
                text: text.clone(),
                loc: None,
            },
            other => other.clone(),
        }
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Nowhere => write!(f, "-"),
            AttributeValue::Unknown => write!(f, "?"),
            AttributeValue::Span { text, .. } => write!(f, "{text}"),
        }
    }
}

/// Lowercase and collapse internal whitespace.
pub fn normalize_span(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// What happened to an entity between step `k-1` and step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Create,
    Move,
    Destroy,
    None,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Create, Action::Move, Action::Destroy, Action::None];

    /// Stable class id: position in [`Action::ALL`].
    pub fn index(self) -> usize {
        match self {
            Action::Create => 0,
            Action::Move => 1,
            Action::Destroy => 2,
            Action::None => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Action::Create => "CREATE",
            Action::Move => "MOVE",
            Action::Destroy => "DESTROY",
            Action::None => "NONE",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A transition with its optional destination argument.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLabel {
    pub action: Action,
    /// Destination for CREATE/MOVE; never present for DESTROY/NONE.
    /// A missing destination on CREATE/MOVE means "somewhere unknown".
    pub location: Option<AttributeValue>,
}

impl TransitionLabel {
    pub fn none() -> Self {
        Self {
            action: Action::None,
            location: None,
        }
    }

    pub fn destroy() -> Self {
        Self {
            action: Action::Destroy,
            location: None,
        }
    }

    pub fn create(location: AttributeValue) -> Self {
        debug_assert!(location.exists(), "CREATE destination must exist");
        Self {
            action: Action::Create,
            location: Some(location),
        }
    }

    pub fn move_to(location: AttributeValue) -> Self {
        debug_assert!(location.exists(), "MOVE destination must exist");
        Self {
            action: Action::Move,
            location: Some(location),
        }
    }

    /// Destination with a missing argument read as UNKNOWN.
    fn effective_location(&self) -> AttributeValue {
        self.location.clone().unwrap_or(AttributeValue::Unknown)
    }

    /// Label equality for consistency checking: same action, and for
    /// CREATE/MOVE the same destination state (missing ≡ UNKNOWN).
    pub fn same_label(&self, other: &TransitionLabel) -> bool {
        if self.action != other.action {
            return false;
        }
        match self.action {
            Action::Create | Action::Move => self
                .effective_location()
                .same_state(&other.effective_location()),
            Action::Destroy | Action::None => true,
        }
    }
}

impl fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.action, &self.location) {
            (Action::Create, Some(l)) => write!(f, "CREATE({l})"),
            (Action::Move, Some(l)) => write!(f, "MOVE({l})"),
            (a, _) => write!(f, "{a}"),
        }
    }
}

/// Full attribute grid of a process: one row per entity, columns `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    entities: Vec<EntityRef>,
    num_steps: usize,
    /// `values[entity][step]`, step in `0..=num_steps`.
    values: Vec<Vec<AttributeValue>>,
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least one step, got {0}")]
    NoSteps(usize),
    #[error("entity {entity} has {have} value columns, expected {want}")]
    BadColumns {
        entity: usize,
        have: usize,
        want: usize,
    },
    #[error("{have} value rows for {want} entities")]
    BadRows { have: usize, want: usize },
}

impl StateGrid {
    pub fn new(
        entities: Vec<EntityRef>,
        num_steps: usize,
        values: Vec<Vec<AttributeValue>>,
    ) -> Result<Self, GridError> {
        if num_steps == 0 {
            return Err(GridError::NoSteps(0));
        }
        if values.len() != entities.len() {
            return Err(GridError::BadRows {
                have: values.len(),
                want: entities.len(),
            });
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != num_steps + 1 {
                return Err(GridError::BadColumns {
                    entity: i,
                    have: row.len(),
                    want: num_steps + 1,
                });
            }
        }
        Ok(Self {
            entities,
            num_steps,
            values,
        })
    }

    pub fn entities(&self) -> &[EntityRef] {
        &self.entities
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Value of `entity` after step `step` (step 0 = pre-process state).
    pub fn value(&self, entity: usize, step: usize) -> &AttributeValue {
        &self.values[entity][step]
    }

    pub fn row(&self, entity: usize) -> &[AttributeValue] {
        &self.values[entity]
    }

    pub fn set_value(&mut self, entity: usize, step: usize, value: AttributeValue) {
        self.values[entity][step] = value;
    }
}

/// One transition label per entity and step `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSeq {
    /// `labels[entity][k - 1]` holds the label for step `k`.
    labels: Vec<Vec<TransitionLabel>>,
}

impl TransitionSeq {
    pub fn new(labels: Vec<Vec<TransitionLabel>>) -> Self {
        Self { labels }
    }

    pub fn num_entities(&self) -> usize {
        self.labels.len()
    }

    pub fn num_steps(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Label for `entity` at step `k` (1-based).
    pub fn label(&self, entity: usize, k: usize) -> &TransitionLabel {
        &self.labels[entity][k - 1]
    }

    pub fn set_label(&mut self, entity: usize, k: usize, label: TransitionLabel) {
        self.labels[entity][k - 1] = label;
    }

    pub fn row(&self, entity: usize) -> &[TransitionLabel] {
        &self.labels[entity]
    }
}

/// Read the forced transition off a pair of adjacent attribute values.
pub fn transition_between(prev: &AttributeValue, curr: &AttributeValue) -> TransitionLabel {
    if prev.same_state(curr) {
        TransitionLabel::none()
    } else if !prev.exists() {
        TransitionLabel::create(curr.ungrounded())
    } else if !curr.exists() {
        TransitionLabel::destroy()
    } else {
        TransitionLabel::move_to(curr.ungrounded())
    }
}

/// Transitions forced by a grid's value changes. Total on valid grids.
pub fn derive_transitions(grid: &StateGrid) -> TransitionSeq {
    let labels = (0..grid.num_entities())
        .map(|e| {
            (1..=grid.num_steps())
                .map(|k| transition_between(grid.value(e, k - 1), grid.value(e, k)))
                .collect()
        })
        .collect();
    TransitionSeq::new(labels)
}

/// A transition whose precondition contradicts the state it is applied to.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("cannot apply {label} to {prev}: {reason}")]
pub struct InconsistentTransition {
    pub label: TransitionLabel,
    pub prev: AttributeValue,
    pub reason: &'static str,
}

/// Forward semantics of one transition label.
pub fn apply_transition(
    prev: &AttributeValue,
    t: &TransitionLabel,
) -> Result<AttributeValue, InconsistentTransition> {
    match t.action {
        Action::Create => {
            if prev.exists() {
                Err(InconsistentTransition {
                    label: t.clone(),
                    prev: prev.ungrounded(),
                    reason: "the entity already exists",
                })
            } else {
                Ok(t.effective_location())
            }
        }
        Action::Move => {
            if !prev.exists() {
                Err(InconsistentTransition {
                    label: t.clone(),
                    prev: prev.ungrounded(),
                    reason: "the entity does not exist",
                })
            } else {
                Ok(t.effective_location())
            }
        }
        Action::Destroy => {
            if !prev.exists() {
                Err(InconsistentTransition {
                    label: t.clone(),
                    prev: prev.ungrounded(),
                    reason: "the entity does not exist",
                })
            } else {
                Ok(AttributeValue::Nowhere)
            }
        }
        Action::None => Ok(prev.ungrounded()),
    }
}

/// The three ways a predicted transition can contradict predicted attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationCategory {
    Creation,
    Move,
    Destroy,
}

/// One attribute/transition disagreement at a specific cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: usize,
    /// Step `k` in `1..=T`.
    pub step: usize,
    pub category: ViolationCategory,
    /// Label the grid's value change forces.
    pub expected: TransitionLabel,
    /// Label actually given.
    pub found: TransitionLabel,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entity {} step {}: {:?} violation, grid forces {} but found {}",
            self.entity, self.step, self.category, self.expected, self.found
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeMismatch {
    #[error("grid has {grid} entities, transitions have {trans}")]
    Entities { grid: usize, trans: usize },
    #[error("grid has {grid} steps, transitions have {trans}")]
    Steps { grid: usize, trans: usize },
}

/// Compare given transitions against those the grid forces. Empty result
/// iff `trans` equals `derive_transitions(grid)` label for label.
///
/// Mismatches are categorized by the transition actually given (a CREATE
/// that contradicts the grid is a Creation violation, and so on); a wrong
/// NONE is categorized by the change the grid shows instead.
pub fn check_consistency(
    grid: &StateGrid,
    trans: &TransitionSeq,
) -> Result<Vec<Violation>, ShapeMismatch> {
    if grid.num_entities() != trans.num_entities() {
        return Err(ShapeMismatch::Entities {
            grid: grid.num_entities(),
            trans: trans.num_entities(),
        });
    }
    if grid.num_entities() > 0 && grid.num_steps() != trans.num_steps() {
        return Err(ShapeMismatch::Steps {
            grid: grid.num_steps(),
            trans: trans.num_steps(),
        });
    }
    let derived = derive_transitions(grid);
    let mut violations = Vec::new();
    for e in 0..grid.num_entities() {
        for k in 1..=grid.num_steps() {
            let expected = derived.label(e, k);
            let found = trans.label(e, k);
            if expected.same_label(found) {
                continue;
            }
            let by = if found.action == Action::None {
                expected.action
            } else {
                found.action
            };
            let category = match by {
                Action::Create => ViolationCategory::Creation,
                Action::Move => ViolationCategory::Move,
                Action::Destroy => ViolationCategory::Destroy,
                Action::None => ViolationCategory::Move,
            };
            violations.push(Violation {
                entity: e,
                step: k,
                category,
                expected: expected.clone(),
                found: found.clone(),
            });
        }
    }
    Ok(violations)
}
