//! Grid-format paragraph files.
//!
//! One blank-line-separated block per paragraph; within a block, every row
//! starts with the paragraph id and a row kind:
//!
//! ```text
//! 7   prompt    What happens during photosynthesis?        (optional, once)
//! 7   sentence  1   Roots absorb water from the soil.      (1-based, in order)
//! 7   sentence  2   The water flows to the leaf.
//! 7   entity    water   soil   soil   leaf                 (T+1 state cells)
//! ```
//!
//! State cells: `-` = does not exist, `?` = exists at an unknown place,
//! anything else = location span text. Entity rows either all carry exactly
//! `T + 1` state cells (a gold grid) or all carry none (unlabeled input).

use std::fs;
use std::path::Path;

use crate::data::{DataError, ProcessDocument, Sentence, Split};
use crate::formalism::{AttributeValue, EntityRef, StateGrid};

/// Read `<dir>/<split>.tsv`.
pub fn load_propara(dir: &Path, split: Split) -> Result<Vec<ProcessDocument>, DataError> {
    let path = dir.join(format!("{}.tsv", split.file_stem()));
    if !path.is_file() {
        return Err(DataError::MissingSplit(path));
    }
    let text = fs::read_to_string(&path)?;
    parse_propara(&text, &path.display().to_string())
}

fn cell_to_value(cell: &str) -> AttributeValue {
    match cell {
        "-" => AttributeValue::Nowhere,
        "?" => AttributeValue::Unknown,
        span => AttributeValue::span(span),
    }
}

fn value_to_cell(value: &AttributeValue) -> String {
    value.to_string()
}

struct Block<'a> {
    start_line: usize,
    rows: Vec<(usize, Vec<&'a str>)>,
}

/// Parse grid-format text. `file` is used in error messages only.
pub fn parse_propara(text: &str, file: &str) -> Result<Vec<ProcessDocument>, DataError> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut current: Option<Block> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        current
            .get_or_insert_with(|| Block {
                start_line: line_no,
                rows: Vec::new(),
            })
            .rows
            .push((line_no, fields));
    }
    if let Some(b) = current.take() {
        blocks.push(b);
    }

    let mut docs = Vec::with_capacity(blocks.len());
    let mut seen_ids = std::collections::HashSet::new();
    for block in blocks {
        let doc = parse_block(&block, file)?;
        if !seen_ids.insert(doc.process_id.clone()) {
            return Err(DataError::parse(
                file,
                block.start_line,
                format!("duplicate paragraph id `{}`", doc.process_id),
            ));
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn parse_block(block: &Block, file: &str) -> Result<ProcessDocument, DataError> {
    let mut process_id: Option<String> = None;
    let mut prompt: Option<String> = None;
    let mut sentences: Vec<Sentence> = Vec::new();
    let mut entity_rows: Vec<(usize, String, Vec<String>)> = Vec::new();

    for (line_no, fields) in &block.rows {
        let line = *line_no;
        if fields.len() < 2 {
            return Err(DataError::parse(file, line, "expected `<id>\\t<kind>\\t...`"));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(DataError::parse(file, line, "empty paragraph id"));
        }
        match process_id {
            Some(ref existing) if existing != id => {
                return Err(DataError::parse(
                    file,
                    line,
                    format!("paragraph id changed from `{existing}` to `{id}` mid-block"),
                ));
            }
            None => process_id = Some(id.to_string()),
            _ => {}
        }
        match fields[1] {
            "prompt" => {
                if prompt.is_some() {
                    return Err(DataError::parse(file, line, "second prompt row"));
                }
                if fields.len() != 3 {
                    return Err(DataError::parse(file, line, "prompt row needs one text field"));
                }
                prompt = Some(fields[2].to_string());
            }
            "sentence" => {
                if fields.len() != 4 {
                    return Err(DataError::parse(
                        file,
                        line,
                        "sentence row needs `<id>\\tsentence\\t<number>\\t<text>`",
                    ));
                }
                let number: usize = fields[2].parse().map_err(|_| {
                    DataError::parse(file, line, format!("bad sentence number `{}`", fields[2]))
                })?;
                if number != sentences.len() + 1 {
                    return Err(DataError::parse(
                        file,
                        line,
                        format!(
                            "sentence number {number} out of order (expected {})",
                            sentences.len() + 1
                        ),
                    ));
                }
                let sentence = Sentence::new(fields[3]);
                if sentence.tokens.is_empty() {
                    return Err(DataError::parse(file, line, "empty sentence"));
                }
                sentences.push(sentence);
            }
            "entity" => {
                if fields.len() < 3 || fields[2].trim().is_empty() {
                    return Err(DataError::parse(file, line, "entity row needs a name"));
                }
                let states = fields[3..].iter().map(|s| s.to_string()).collect();
                entity_rows.push((line, fields[2].trim().to_string(), states));
            }
            other => {
                return Err(DataError::parse(
                    file,
                    line,
                    format!("unknown row kind `{other}`"),
                ));
            }
        }
    }

    let process_id = process_id.expect("non-empty block");
    if sentences.is_empty() {
        return Err(DataError::parse(
            file,
            block.start_line,
            format!("paragraph `{process_id}` has no sentences"),
        ));
    }
    if entity_rows.is_empty() {
        return Err(DataError::parse(
            file,
            block.start_line,
            format!("paragraph `{process_id}` has no entities"),
        ));
    }
    let num_steps = sentences.len();

    let entities: Vec<EntityRef> = entity_rows
        .iter()
        .enumerate()
        .map(|(i, (_, name, _))| EntityRef::new(process_id.clone(), name.clone(), i))
        .collect();
    {
        let mut names = std::collections::HashSet::new();
        for (line, name, _) in &entity_rows {
            if !names.insert(name.as_str()) {
                return Err(DataError::parse(
                    file,
                    *line,
                    format!("duplicate entity `{name}`"),
                ));
            }
        }
    }

    let labeled = entity_rows.iter().filter(|(_, _, s)| !s.is_empty()).count();
    let gold = if labeled == 0 {
        None
    } else if labeled < entity_rows.len() {
        let (line, name, _) = entity_rows
            .iter()
            .find(|(_, _, s)| s.is_empty())
            .expect("mixed labeling");
        return Err(DataError::parse(
            file,
            *line,
            format!("entity `{name}` lacks state cells while others have them"),
        ));
    } else {
        let mut values = Vec::with_capacity(entity_rows.len());
        for (line, name, states) in &entity_rows {
            if states.len() != num_steps + 1 {
                return Err(DataError::parse(
                    file,
                    *line,
                    format!(
                        "entity `{name}` has {} state cells for {num_steps} sentences (need {})",
                        states.len(),
                        num_steps + 1
                    ),
                ));
            }
            values.push(states.iter().map(|s| cell_to_value(s)).collect());
        }
        Some(
            StateGrid::new(entities.clone(), num_steps, values)
                .expect("lengths checked above"),
        )
    };

    Ok(ProcessDocument {
        process_id,
        prompt,
        sentences,
        entities,
        gold,
    })
}

/// Serialize documents back to grid format. Inverse of [`parse_propara`]
/// for well-formed inputs.
pub fn write_propara(docs: &[ProcessDocument]) -> Result<String, DataError> {
    let clean = |field: &str, what: &str| -> Result<(), DataError> {
        if field.contains('\t') || field.contains('\n') {
            return Err(DataError::Serialize(format!(
                "{what} contains a tab or newline: {field:?}"
            )));
        }
        Ok(())
    };
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        clean(&doc.process_id, "paragraph id")?;
        if let Some(p) = &doc.prompt {
            clean(p, "prompt")?;
            out.push_str(&format!("{}\tprompt\t{}\n", doc.process_id, p));
        }
        for (s, sentence) in doc.sentences.iter().enumerate() {
            clean(&sentence.text, "sentence")?;
            out.push_str(&format!(
                "{}\tsentence\t{}\t{}\n",
                doc.process_id,
                s + 1,
                sentence.text
            ));
        }
        for (e, entity) in doc.entities.iter().enumerate() {
            clean(&entity.name, "entity name")?;
            out.push_str(&format!("{}\tentity\t{}", doc.process_id, entity.name));
            if let Some(grid) = &doc.gold {
                for step in 0..=grid.num_steps() {
                    let cell = value_to_cell(grid.value(e, step));
                    clean(&cell, "state cell")?;
                    out.push('\t');
                    out.push_str(&cell);
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Two entities over three sentences, written by hand together with the
    // grid it must parse to.
    const FIXTURE: &str = "\
12\tprompt\tHow does an engine burn fuel?\n\
12\tsentence\t1\tFuel sits in the tank.\n\
12\tsentence\t2\tA pump moves the fuel to the engine.\n\
12\tsentence\t3\tThe engine burns the fuel into exhaust.\n\
12\tentity\tfuel\ttank\ttank\tengine\t-\n\
12\tentity\texhaust\t-\t-\t-\t?\n";

    fn expected_doc() -> ProcessDocument {
        let entities = vec![
            EntityRef::new("12", "fuel", 0),
            EntityRef::new("12", "exhaust", 1),
        ];
        let grid = StateGrid::new(
            entities.clone(),
            3,
            vec![
                vec![
                    AttributeValue::span("tank"),
                    AttributeValue::span("tank"),
                    AttributeValue::span("engine"),
                    AttributeValue::Nowhere,
                ],
                vec![
                    AttributeValue::Nowhere,
                    AttributeValue::Nowhere,
                    AttributeValue::Nowhere,
                    AttributeValue::Unknown,
                ],
            ],
        )
        .unwrap();
        ProcessDocument {
            process_id: "12".into(),
            prompt: Some("How does an engine burn fuel?".into()),
            sentences: vec![
                Sentence::new("Fuel sits in the tank."),
                Sentence::new("A pump moves the fuel to the engine."),
                Sentence::new("The engine burns the fuel into exhaust."),
            ],
            entities,
            gold: Some(grid),
        }
    }

    #[test]
    fn fixture_parses_to_expected_grid() {
        let docs = parse_propara(FIXTURE, "fixture").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0], expected_doc());
    }

    #[test]
    fn round_trip_is_lossless() {
        let docs = parse_propara(FIXTURE, "fixture").unwrap();
        let text = write_propara(&docs).unwrap();
        let again = parse_propara(&text, "round-trip").unwrap();
        assert_eq!(docs, again);
    }

    #[test]
    fn wrong_cell_count_is_rejected_with_line_number() {
        let bad = FIXTURE.replace("12\tentity\tfuel\ttank\ttank\tengine\t-\n", "12\tentity\tfuel\ttank\ttank\n");
        let err = parse_propara(&bad, "bad").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad:5"), "{msg}");
        assert!(msg.contains("state cells"), "{msg}");
    }

    #[test]
    fn out_of_order_sentences_are_rejected() {
        let bad = FIXTURE.replace("12\tsentence\t2", "12\tsentence\t7");
        assert!(parse_propara(&bad, "bad").is_err());
    }

    #[test]
    fn unlabeled_blocks_have_no_gold() {
        let text = "\
9\tsentence\t1\tWater falls.\n\
9\tentity\twater\n";
        let docs = parse_propara(text, "t").unwrap();
        assert_eq!(docs[0].gold, None);
        assert_eq!(docs[0].entities.len(), 1);
        // And they round-trip too.
        let again = parse_propara(&write_propara(&docs).unwrap(), "t").unwrap();
        assert_eq!(docs, again);
    }

    #[test]
    fn partially_labeled_blocks_are_rejected() {
        let text = "\
9\tsentence\t1\tWater falls.\n\
9\tentity\twater\t?\t?\n\
9\tentity\tcloud\n";
        assert!(parse_propara(text, "t").is_err());
    }

    #[test]
    fn duplicate_paragraph_ids_are_rejected() {
        let text = format!("{FIXTURE}\n{FIXTURE}");
        assert!(parse_propara(&text, "t").is_err());
    }

    #[test]
    fn multiple_blocks_parse_independently() {
        let two = format!("{FIXTURE}\n9\tsentence\t1\tWater falls.\n9\tentity\twater\t?\t-\n");
        let docs = parse_propara(&two, "t").unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].process_id, "9");
        let grid = docs[1].gold.as_ref().unwrap();
        assert_eq!(grid.value(0, 0), &AttributeValue::Unknown);
        assert_eq!(grid.value(0, 1), &AttributeValue::Nowhere);
    }
}
