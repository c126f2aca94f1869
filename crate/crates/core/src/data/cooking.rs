//! Recipe corpus with categorical ingredient locations.
//!
//! `<dir>/<split>.jsonl` holds one JSON record per line:
//!
//! ```json
//! {"recipe_id": "r100", "steps": ["Mix flour and water."],
//!  "ingredients": ["flour", "water"], "locations": [[3, 7], [0, 7]]}
//! ```
//!
//! `locations[i]` gives ingredient `i`'s location class after each step,
//! with one extra leading entry for the pre-process state (`steps.len() + 1`
//! ids in total). Ids index into `<dir>/location_vocab.txt`, one location
//! name per line, line number = class id.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Sentence, Split};
use crate::formalism::EntityRef;

/// Fixed categorical location vocabulary; index = classifier class id.
#[derive(Debug, Clone)]
pub struct CookingVocab {
    names: Vec<String>,
}

impl CookingVocab {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u16) -> &str {
        &self.names[id as usize]
    }

    pub fn id(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }
}

/// Load the class vocabulary file (one name per line).
pub fn load_location_vocab(dir: &Path) -> Result<CookingVocab, DataError> {
    let path = dir.join("location_vocab.txt");
    if !path.is_file() {
        return Err(DataError::MissingSplit(path));
    }
    let file = path.display().to_string();
    let mut names = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            return Err(DataError::parse(&file, idx + 1, "empty vocabulary entry"));
        }
        if !seen.insert(name.to_string()) {
            return Err(DataError::parse(
                &file,
                idx + 1,
                format!("duplicate vocabulary entry `{name}`"),
            ));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(DataError::parse(&file, 0, "empty vocabulary file"));
    }
    Ok(CookingVocab::new(names))
}

/// One recipe with per-step categorical locations for each ingredient.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeDocument {
    pub recipe_id: String,
    pub sentences: Vec<Sentence>,
    pub ingredients: Vec<EntityRef>,
    /// `gold_locations[ingredient][step]`, step in `0..=T`.
    pub gold_locations: Vec<Vec<u16>>,
}

impl RecipeDocument {
    pub fn num_steps(&self) -> usize {
        self.sentences.len()
    }

    /// Does any ingredient change location at any step?
    pub fn has_location_change(&self) -> bool {
        self.gold_locations
            .iter()
            .any(|row| row.windows(2).any(|w| w[0] != w[1]))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecipeRecord {
    recipe_id: String,
    steps: Vec<String>,
    ingredients: Vec<String>,
    locations: Vec<Vec<u16>>,
}

/// Load `<dir>/<split>.jsonl`, validating ids against the vocabulary.
///
/// The train split keeps only recipes where at least one ingredient changes
/// location; `sample_size` then takes a seeded random subset (deterministic
/// for a fixed seed). Dev and test are returned unfiltered and unsampled.
pub fn load_npn_cooking(
    dir: &Path,
    split: Split,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<Vec<RecipeDocument>, DataError> {
    let vocab = load_location_vocab(dir)?;
    let path = dir.join(format!("{}.jsonl", split.file_stem()));
    if !path.is_file() {
        return Err(DataError::MissingSplit(path));
    }
    let file = path.display().to_string();
    let mut recipes = Vec::new();
    for (idx, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecipeRecord = serde_json::from_str(line)
            .map_err(|e| DataError::parse(&file, line_no, e.to_string()))?;
        recipes.push(validate_record(record, &vocab, &file, line_no)?);
    }

    if split == Split::Train {
        recipes.retain(RecipeDocument::has_location_change);
        if recipes.is_empty() {
            return Err(DataError::EmptyAfterFilter(path));
        }
        if let Some(n) = sample_size {
            if n < recipes.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked =
                    rand::seq::index::sample(&mut rng, recipes.len(), n).into_vec();
                picked.sort_unstable();
                recipes = picked.into_iter().map(|i| recipes[i].clone()).collect();
            }
        }
    }
    Ok(recipes)
}

fn validate_record(
    record: RecipeRecord,
    vocab: &CookingVocab,
    file: &str,
    line: usize,
) -> Result<RecipeDocument, DataError> {
    if record.steps.is_empty() {
        return Err(DataError::parse(file, line, "recipe has no steps"));
    }
    if record.ingredients.is_empty() {
        return Err(DataError::parse(file, line, "recipe has no ingredients"));
    }
    if record.locations.len() != record.ingredients.len() {
        return Err(DataError::parse(
            file,
            line,
            format!(
                "{} location rows for {} ingredients",
                record.locations.len(),
                record.ingredients.len()
            ),
        ));
    }
    let want = record.steps.len() + 1;
    for (i, row) in record.locations.iter().enumerate() {
        if row.len() != want {
            return Err(DataError::parse(
                file,
                line,
                format!(
                    "ingredient `{}` has {} location ids, expected {want}",
                    record.ingredients[i],
                    row.len()
                ),
            ));
        }
        if let Some(&bad) = row.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(DataError::parse(
                file,
                line,
                format!("location id {bad} outside the {}-way vocabulary", vocab.len()),
            ));
        }
    }
    let sentences: Vec<Sentence> = record.steps.iter().map(Sentence::new).collect();
    if let Some(i) = sentences.iter().position(|s| s.tokens.is_empty()) {
        return Err(DataError::parse(file, line, format!("step {} is empty", i + 1)));
    }
    let ingredients = record
        .ingredients
        .iter()
        .enumerate()
        .map(|(i, name)| EntityRef::new(record.recipe_id.clone(), name.clone(), i))
        .collect();
    Ok(RecipeDocument {
        recipe_id: record.recipe_id,
        sentences,
        ingredients,
        gold_locations: record.locations,
    })
}
