//! Greedy longest-match-first subword tokenization over a fixed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::encoding::{Tokenizer, CLS, C_NOW, C_UNK, SEP};

const UNK: &str = "[UNK]";

/// Subword vocabulary loaded from a `vocab.txt` (line number = token id).
///
/// The reserved class tokens are not part of pretrained vocabularies, so
/// they are aliased to the first two `[unusedN]` slots, which pretrained
/// checkpoints leave free for exactly this purpose.
#[derive(Debug, Clone)]
pub struct WordPieceVocab {
    tokens: Vec<String>,
    by_token: HashMap<String, usize>,
    unk_id: usize,
    max_word_chars: usize,
}

impl WordPieceVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        let by_token: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for required in [UNK, CLS, SEP, "[unused0]", "[unused1]"] {
            if !by_token.contains_key(required) {
                return Err(format!("vocabulary lacks required token {required}"));
            }
        }
        let unk_id = by_token[UNK];
        Ok(Self {
            tokens,
            by_token,
            unk_id,
            max_word_chars: 100,
        })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Reserved class tokens are looked up via their `[unusedN]` aliases.
    fn alias(token: &str) -> &str {
        match token {
            C_NOW => "[unused0]",
            C_UNK => "[unused1]",
            other => other,
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.by_token
            .get(Self::alias(token))
            .copied()
            .unwrap_or(self.unk_id)
    }

    fn contains(&self, token: &str) -> bool {
        self.by_token.contains_key(token)
    }

    /// Greedy longest-match-first split of one lowercased word. A word with
    /// no valid split becomes a single `[UNK]`.
    pub fn wordpiece(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > self.max_word_chars {
            return vec![UNK.to_string()];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found: Option<String> = None;
            while end > start {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate = format!("##{candidate}");
                }
                if self.contains(&candidate) {
                    found = Some(candidate);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(piece) => {
                    pieces.push(piece);
                    start = end;
                }
                None => return vec![UNK.to_string()],
            }
        }
        pieces
    }
}

impl Tokenizer for WordPieceVocab {
    fn subtokens(&self, word: &str) -> Vec<String> {
        // Special and reserved tokens never split.
        if word.starts_with('[') && word.ends_with(']') && self.contains(Self::alias(word)) {
            return vec![word.to_string()];
        }
        self.wordpiece(&word.to_lowercase())
    }
}
