//! Corpus loading and serialization.
//!
//! The data layer works in word-level tokens (whitespace split, with
//! leading/trailing punctuation peeled off); subword alignment is the
//! encoder's job. Gold span offsets always refer to these word tokens.

mod cooking;
mod dump;
mod ground;
mod propara;

pub use cooking::{load_location_vocab, load_npn_cooking, CookingVocab, RecipeDocument};
pub use dump::{
    grids_from_rows, parse_cooking_predictions, parse_predictions, rows_from_grid,
    rows_from_process, write_cooking_predictions, write_predictions, CookingAnswerRows,
    PredictionRow,
};
pub use ground::{ground_gold_span, UngroundableSpan};
pub use propara::{load_propara, parse_propara, write_propara};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::formalism::{EntityRef, StateGrid};

/// Dataset split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (use train/dev/test)")),
        }
    }
}

/// One sentence: raw text plus its word-level tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }
}

/// A paragraph with its entities and (optionally) a gold state grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessDocument {
    pub process_id: String,
    pub prompt: Option<String>,
    pub sentences: Vec<Sentence>,
    pub entities: Vec<EntityRef>,
    pub gold: Option<StateGrid>,
}

impl ProcessDocument {
    pub fn num_steps(&self) -> usize {
        self.sentences.len()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing split file {0}")]
    MissingSplit(PathBuf),
    #[error("{file}:{line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("cannot serialize: {0}")]
    Serialize(String),
    #[error("malformed dump ({file}): {reason}")]
    Dump { file: String, reason: String },
    #[error("no training recipes left after the location-change filter ({0})")]
    EmptyAfterFilter(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub(crate) fn parse(file: &str, line: usize, reason: impl Into<String>) -> Self {
        DataError::Parse {
            file: file.to_string(),
            line,
            reason: reason.into(),
        }
    }
}

/// Word-level tokenization: whitespace split, then leading/trailing
/// punctuation become their own tokens. Internal punctuation (hyphens,
/// apostrophes) stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    fn is_edge_punct(c: char) -> bool {
        matches!(
            c,
            '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '"' | '[' | ']'
        )
    }

    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        let mut lead = Vec::new();
        while let Some(c) = rest.chars().next() {
            if is_edge_punct(c) {
                lead.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trail = Vec::new();
        while let Some(c) = rest.chars().next_back() {
            if is_edge_punct(c) {
                trail.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(lead);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_peels_edge_punctuation() {
        assert_eq!(
            tokenize("The fuel burns, quickly."),
            vec!["The", "fuel", "burns", ",", "quickly", "."]
        );
        assert_eq!(tokenize("(in the tank)"), vec!["(", "in", "the", "tank", ")"]);
        assert_eq!(tokenize("sediment-rich water"), vec!["sediment-rich", "water"]);
        assert_eq!(tokenize("  spaced   out  "), vec!["spaced", "out"]);
        assert!(tokenize("").is_empty());
    }
}
