//! Grounding gold location strings as token spans in the visible context.

use thiserror::Error;

use crate::data::{tokenize, ProcessDocument};
use crate::formalism::{AttributeValue, SpanLoc};

/// A gold span with no token match in the visible sentences. Such targets
/// still train the class head but are excluded from the span loss.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("`{text}` (entity {entity}, state column {column}) not found in sentences 0..{region_end}")]
pub struct UngroundableSpan {
    pub entity: usize,
    pub column: usize,
    pub text: String,
    pub region_end: usize,
}

/// Ground one gold value for state column `column` (0..=T).
///
/// SPAN values are located within the sentences visible when that column is
/// first predicted: column 0 is read off the step-1 context, column `j ≥ 1`
/// off the step-`j` context, so the search region is sentences
/// `0..max(column, 1)` (0-based). NOWHERE and UNKNOWN pass through; the
/// encoder maps them to its reserved class tokens.
///
/// Matching strips leading articles from the gold string, then prefers a
/// case-sensitive token match in the latest sentence, falling back to
/// case-insensitive; within a sentence the last occurrence wins.
pub fn ground_gold_span(
    doc: &ProcessDocument,
    entity: usize,
    column: usize,
    gold_value: &AttributeValue,
) -> Result<AttributeValue, UngroundableSpan> {
    let text = match gold_value {
        AttributeValue::Span { text, .. } => text,
        other => return Ok(other.clone()),
    };
    let region_end = column.max(1).min(doc.sentences.len());
    let gold_tokens = strip_articles(tokenize(text));
    if gold_tokens.is_empty() {
        return Err(UngroundableSpan {
            entity,
            column,
            text: text.clone(),
            region_end,
        });
    }

    for case_sensitive in [true, false] {
        for sent in (0..region_end).rev() {
            let hay = &doc.sentences[sent].tokens;
            if let Some(start) = last_subsequence(hay, &gold_tokens, case_sensitive) {
                return Ok(AttributeValue::span_at(
                    text.clone(),
                    SpanLoc {
                        sentence: sent,
                        start,
                        end: start + gold_tokens.len() - 1,
                    },
                ));
            }
        }
    }
    Err(UngroundableSpan {
        entity,
        column,
        text: text.clone(),
        region_end,
    })
}

fn strip_articles(mut tokens: Vec<String>) -> Vec<String> {
    while tokens
        .first()
        .is_some_and(|t| matches!(t.to_lowercase().as_str(), "the" | "a" | "an"))
    {
        tokens.remove(0);
    }
    tokens
}

/// Start index of the last occurrence of `needle` as a contiguous token
/// subsequence of `hay`.
fn last_subsequence(hay: &[String], needle: &[String], case_sensitive: bool) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    let eq = |a: &str, b: &str| {
        if case_sensitive {
            a == b
        } else {
            a.to_lowercase() == b.to_lowercase()
        }
    };
    (0..=hay.len() - needle.len())
        .rev()
        .find(|&start| needle.iter().enumerate().all(|(i, n)| eq(&hay[start + i], n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_propara;
    use crate::formalism::AttributeValue;

    fn doc() -> ProcessDocument {
        let text = "\
1\tsentence\t1\tBlood enters the right side of your heart.\n\
1\tsentence\t2\tThe heart pumps blood to the lungs.\n\
1\tsentence\t3\tBlood returns to the heart.\n\
1\tentity\tblood\theart\tright side of your heart\tlungs\theart\n";
        parse_propara(text, "t").unwrap().remove(0)
    }

    fn grounded(doc: &ProcessDocument, column: usize, text: &str) -> SpanLoc {
        match ground_gold_span(doc, 0, column, &AttributeValue::span(text)).unwrap() {
            AttributeValue::Span { loc: Some(l), .. } => l,
            other => panic!("expected grounded span, got {other:?}"),
        }
    }

    #[test]
    fn multi_token_span_is_grounded_whole() {
        // "right side of your heart" sits in sentence 1 at tokens 3..=7.
        let loc = grounded(&doc(), 1, "right side of your heart");
        assert_eq!(loc, SpanLoc { sentence: 0, start: 3, end: 7 });
    }

    #[test]
    fn latest_visible_sentence_wins() {
        // "heart" appears in sentences 0, 1, 2; column 3 sees all three and
        // must pick sentence 2 (and its last occurrence).
        let loc = grounded(&doc(), 3, "heart");
        assert_eq!(loc.sentence, 2);
        assert_eq!(doc().sentences[2].tokens[loc.start], "heart");
    }

    #[test]
    fn future_sentences_are_invisible() {
        // "lungs" only appears in sentence 1; column 1 sees sentence 0 only.
        let err = ground_gold_span(&doc(), 0, 1, &AttributeValue::span("lungs")).unwrap_err();
        assert_eq!(err.region_end, 1);
        // Column 2 sees sentences 0..2 and finds it.
        let loc = grounded(&doc(), 2, "lungs");
        assert_eq!(loc.sentence, 1);
    }

    #[test]
    fn column_zero_reads_the_first_sentence() {
        let loc = grounded(&doc(), 0, "heart");
        assert_eq!(loc.sentence, 0);
    }

    #[test]
    fn articles_and_case_are_forgiven() {
        let loc = grounded(&doc(), 1, "The Heart");
        assert_eq!(loc.sentence, 0);
        assert_eq!(doc().sentences[0].tokens[loc.start], "heart");
    }

    #[test]
    fn case_sensitive_match_outranks_case_insensitive() {
        let text = "\
2\tsentence\t1\tThe Mill grinds grain.\n\
2\tsentence\t2\tA mill needs wind, and the Mill turns.\n\
2\tentity\tgrain\tMill\tMill\tMill\n";
        let doc = parse_propara(text, "t").unwrap().remove(0);
        // Case-sensitive "Mill" exists in sentence 1 (last occurrence, token 7),
        // so the lowercase "mill" at token 1 never gets considered.
        let loc = grounded(&doc, 2, "Mill");
        assert_eq!(loc.sentence, 1);
        assert_eq!(loc.start, 7);
    }

    #[test]
    fn class_values_pass_through() {
        assert_eq!(
            ground_gold_span(&doc(), 0, 2, &AttributeValue::Nowhere).unwrap(),
            AttributeValue::Nowhere
        );
        assert_eq!(
            ground_gold_span(&doc(), 0, 2, &AttributeValue::Unknown).unwrap(),
            AttributeValue::Unknown
        );
    }

    #[test]
    fn unmatchable_span_reports_context() {
        let err = ground_gold_span(&doc(), 1, 2, &AttributeValue::span("kidney")).unwrap_err();
        assert_eq!(err.entity, 1);
        assert_eq!(err.column, 2);
        assert_eq!(err.region_end, 2);
    }
}
