//! Tab-separated prediction dumps.
//!
//! One row per (process, step, entity):
//!
//! ```text
//! process_id  step  entity  action  before_location  after_location
//! ```
//!
//! `action` is one of CREATE/MOVE/DESTROY/NONE; locations use `-` for
//! non-existence and `?` for an unknown place. Evaluators consume this
//! shape directly.

use crate::data::DataError;
use crate::formalism::{
    derive_transitions, Action, AttributeValue, StateGrid, TransitionSeq,
};

/// One dump row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub process_id: String,
    /// 1-based step.
    pub step: usize,
    pub entity: String,
    pub action: Action,
    pub before: AttributeValue,
    pub after: AttributeValue,
}

fn parse_action(s: &str) -> Option<Action> {
    Action::ALL.into_iter().find(|a| a.label() == s)
}

fn parse_location(s: &str) -> AttributeValue {
    match s {
        "-" => AttributeValue::Nowhere,
        "?" => AttributeValue::Unknown,
        text => AttributeValue::span(text),
    }
}

/// Rows for one process in reading order: every entity at step 1, then
/// step 2, and so on.
pub fn rows_from_process(
    process_id: &str,
    entity_names: &[String],
    grid: &StateGrid,
    trans: &TransitionSeq,
) -> Vec<PredictionRow> {
    let mut rows = Vec::with_capacity(grid.num_entities() * grid.num_steps());
    for k in 1..=grid.num_steps() {
        for e in 0..grid.num_entities() {
            rows.push(PredictionRow {
                process_id: process_id.to_string(),
                step: k,
                entity: entity_names[e].clone(),
                action: trans.label(e, k).action,
                before: grid.value(e, k - 1).ungrounded(),
                after: grid.value(e, k).ungrounded(),
            });
        }
    }
    rows
}

/// Convenience: rows for a grid with its own derived transitions.
pub fn rows_from_grid(process_id: &str, grid: &StateGrid) -> Vec<PredictionRow> {
    let names: Vec<String> = grid.entities().iter().map(|e| e.name.clone()).collect();
    let trans = derive_transitions(grid);
    rows_from_process(process_id, &names, grid, &trans)
}

/// Serialize rows as tab-separated text.
pub fn write_predictions(rows: &[PredictionRow]) -> Result<String, DataError> {
    let mut out = String::new();
    for row in rows {
        for field in [
            row.process_id.as_str(),
            row.entity.as_str(),
        ] {
            if field.contains('\t') || field.contains('\n') {
                return Err(DataError::Serialize(format!(
                    "field contains a tab or newline: {field:?}"
                )));
            }
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.process_id, row.step, row.entity, row.action, row.before, row.after
        ));
    }
    Ok(out)
}

/// Parse dump text back into rows. `file` is used in error messages only.
pub fn parse_predictions(text: &str, file: &str) -> Result<Vec<PredictionRow>, DataError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(DataError::parse(
                file,
                line_no,
                format!("expected 6 tab-separated fields, got {}", fields.len()),
            ));
        }
        let step: usize = fields[1].parse().map_err(|_| {
            DataError::parse(file, line_no, format!("bad step `{}`", fields[1]))
        })?;
        if step == 0 {
            return Err(DataError::parse(file, line_no, "steps are 1-based"));
        }
        let action = parse_action(fields[3]).ok_or_else(|| {
            DataError::parse(file, line_no, format!("unknown action `{}`", fields[3]))
        })?;
        rows.push(PredictionRow {
            process_id: fields[0].to_string(),
            step,
            entity: fields[2].to_string(),
            action,
            before: parse_location(fields[4]),
            after: parse_location(fields[5]),
        });
    }
    Ok(rows)
}

/// Rebuild per-process state grids from dump rows.
///
/// Processes come back in first-appearance order, entities in the order they
/// first show up within a process. Requires every entity at every step
/// `1..=T` exactly once, and each row's `before` to match the previous step's
/// `after`. `source` is used in error messages only.
pub fn grids_from_rows(
    rows: &[PredictionRow],
    source: &str,
) -> Result<Vec<(String, Vec<String>, StateGrid)>, DataError> {
    use std::collections::BTreeMap;

    let bad = |reason: String| DataError::Dump {
        file: source.to_string(),
        reason,
    };

    let mut order: Vec<&str> = Vec::new();
    let mut by_process: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for row in rows {
        let bucket = by_process.entry(&row.process_id).or_default();
        if bucket.is_empty() {
            order.push(&row.process_id);
        }
        bucket.push(row);
    }

    let mut out = Vec::with_capacity(order.len());
    for pid in order {
        let rows = &by_process[pid];
        let num_steps = rows.iter().map(|r| r.step).max().unwrap_or(0);
        let mut entities: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, &str), (&AttributeValue, &AttributeValue)> =
            BTreeMap::new();
        for row in rows {
            if !entities.iter().any(|e| *e == row.entity) {
                entities.push(row.entity.clone());
            }
            if cells
                .insert((row.step, &row.entity), (&row.before, &row.after))
                .is_some()
            {
                return Err(bad(format!(
                    "process {pid} step {} lists entity {:?} twice",
                    row.step, row.entity
                )));
            }
        }
        let mut values = Vec::with_capacity(entities.len());
        for name in &entities {
            let mut row = Vec::with_capacity(num_steps + 1);
            for k in 1..=num_steps {
                let (before, after) = cells.get(&(k, name.as_str())).ok_or_else(|| {
                    bad(format!("process {pid} step {k} is missing entity {name:?}"))
                })?;
                if k == 1 {
                    row.push((*before).clone());
                } else if !row[k - 1].same_state(before) {
                    return Err(bad(format!(
                        "process {pid} entity {name:?}: step {k} starts at `{before}` \
                         but step {} ended at `{}`",
                        k - 1,
                        row[k - 1]
                    )));
                }
                row.push((*after).clone());
            }
            values.push(row);
        }
        let refs = entities
            .iter()
            .enumerate()
            .map(|(i, name)| crate::formalism::EntityRef::new(pid, name.clone(), i))
            .collect();
        let grid = StateGrid::new(refs, num_steps, values)
            .map_err(|e| bad(format!("process {pid}: {e}")))?;
        out.push((pid.to_string(), entities, grid));
    }
    Ok(out)
}

/// Per-recipe categorical locations: (recipe_id, ingredient names,
/// `locations[ingredient][step]` for steps `0..=T`).
pub type CookingAnswerRows = (String, Vec<String>, Vec<Vec<u16>>);

/// Serialize cooking predictions as tab-separated text, one row per
/// (recipe, ingredient, step): `recipe_id  ingredient  step  location_id`.
/// Step 0 is the state before any instruction.
pub fn write_cooking_predictions(recipes: &[CookingAnswerRows]) -> Result<String, DataError> {
    let mut out = String::new();
    for (recipe_id, ingredients, locations) in recipes {
        for field in std::iter::once(recipe_id).chain(ingredients) {
            if field.contains('\t') || field.contains('\n') {
                return Err(DataError::Serialize(format!(
                    "field contains a tab or newline: {field:?}"
                )));
            }
        }
        for (i, ids) in locations.iter().enumerate() {
            for (step, id) in ids.iter().enumerate() {
                out.push_str(&format!(
                    "{recipe_id}\t{}\t{step}\t{id}\n",
                    ingredients[i]
                ));
            }
        }
    }
    Ok(out)
}

/// Parse a cooking prediction dump. Recipes come back in first-appearance
/// order, ingredients likewise; every ingredient must cover steps `0..=T`
/// exactly once, with the same `T` across a recipe's ingredients.
pub fn parse_cooking_predictions(
    text: &str,
    file: &str,
) -> Result<Vec<CookingAnswerRows>, DataError> {
    use std::collections::BTreeMap;

    let bad = |reason: String| DataError::Dump {
        file: file.to_string(),
        reason,
    };

    let mut order: Vec<String> = Vec::new();
    let mut by_recipe: BTreeMap<String, (Vec<String>, BTreeMap<(usize, usize), u16>)> =
        BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::parse(
                file,
                line_no,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let step: usize = fields[2].parse().map_err(|_| {
            DataError::parse(file, line_no, format!("bad step `{}`", fields[2]))
        })?;
        let id: u16 = fields[3].parse().map_err(|_| {
            DataError::parse(file, line_no, format!("bad location id `{}`", fields[3]))
        })?;
        let bucket = by_recipe.entry(fields[0].to_string()).or_default();
        if bucket.0.is_empty() {
            order.push(fields[0].to_string());
        }
        let ing = match bucket.0.iter().position(|n| n == fields[1]) {
            Some(i) => i,
            None => {
                bucket.0.push(fields[1].to_string());
                bucket.0.len() - 1
            }
        };
        if bucket.1.insert((ing, step), id).is_some() {
            return Err(bad(format!(
                "recipe {} lists ingredient {:?} step {step} twice",
                fields[0], fields[1]
            )));
        }
    }

    let mut out = Vec::with_capacity(order.len());
    for rid in order {
        let (ingredients, cells) = &by_recipe[&rid];
        let steps = cells.keys().map(|&(_, k)| k).max().unwrap_or(0);
        let mut locations = Vec::with_capacity(ingredients.len());
        for (i, name) in ingredients.iter().enumerate() {
            let mut ids = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                ids.push(*cells.get(&(i, k)).ok_or_else(|| {
                    bad(format!(
                        "recipe {rid} ingredient {name:?} is missing step {k}"
                    ))
                })?);
            }
            locations.push(ids);
        }
        out.push((rid, ingredients.clone(), locations));
    }
    Ok(out)
}
