//! Single-file parameter archives.
//!
//! Layout: 8 magic bytes, a little-endian u32 format version, a little-endian
//! u64 header length, a JSON header (run config, optional tiny-encoder
//! vocabulary, tensor names and shapes in store order), then each tensor's
//! raw little-endian f64 values back to back. Writes go to a sibling
//! temporary file and are renamed into place, so a crash never leaves a
//! half-written archive at the target path.
//!
//! Loading rebuilds the model from the embedded config, then requires the
//! archived tensors to match the rebuilt store name for name and shape for
//! shape; any drift fails loudly instead of silently misassigning weights.
//! The pretrained backend still needs its weights directory at load time for
//! the tokenizer files; every parameter value comes from the archive.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use protrace_autodiff::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::cooking::{CookingConfig, CookingModel};
use crate::model::Model;
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"PROTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file: {0}")]
    Format(String),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error("cannot rebuild the archived model: {0}")]
    Build(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// `span` for the grid model, `cooking` for the categorical variant.
    variant: String,
    config: TrainConfig,
    tiny_vocab: Option<Vec<String>>,
    cooking_classes: Option<usize>,
    params: Vec<ParamEntry>,
}

fn write_archive(path: &Path, header: &Header, store: &ParamStore) -> Result<(), CheckpointError> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(header_bytes.len() + 8 * store.num_scalars() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, _, value) in store.iter() {
        for &x in value.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    let file_name = path
        .file_name()
        .ok_or_else(|| CheckpointError::Format(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn entries(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .iter()
        .map(|(_, name, value)| ParamEntry {
            name: name.to_string(),
            rows: value.nrows(),
            cols: value.ncols(),
        })
        .collect()
}

/// Archive a grid-model run.
pub fn save_span(
    path: &Path,
    config: &TrainConfig,
    tiny_vocab: Option<&[String]>,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let header = Header {
        version: VERSION,
        variant: "span".to_string(),
        config: config.clone(),
        tiny_vocab: tiny_vocab.map(|v| v.to_vec()),
        cooking_classes: None,
        params: entries(store),
    };
    write_archive(path, &header, store)
}

/// Archive a cooking-variant run.
pub fn save_cooking(
    path: &Path,
    config: &TrainConfig,
    tiny_vocab: Option<&[String]>,
    num_classes: usize,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let header = Header {
        version: VERSION,
        variant: "cooking".to_string(),
        config: config.clone(),
        tiny_vocab: tiny_vocab.map(|v| v.to_vec()),
        cooking_classes: Some(num_classes),
        params: entries(store),
    };
    write_archive(path, &header, store)
}

fn read_archive(path: &Path) -> Result<(Header, Vec<Array2<f64>>), CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Format(format!(
            "{} does not start with the archive magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported archive version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20 + header_len;
    if bytes.len() < data_start {
        return Err(CheckpointError::Format("truncated header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..data_start])?;

    let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
    let data = &bytes[data_start..];
    if data.len() != expected {
        return Err(CheckpointError::Format(format!(
            "tensor data is {} bytes, header promises {expected}",
            data.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut off = 0;
    for entry in &header.params {
        let n = entry.rows * entry.cols;
        let mut flat = Vec::with_capacity(n);
        for i in 0..n {
            let s = off + i * 8;
            flat.push(f64::from_le_bytes(data[s..s + 8].try_into().unwrap()));
        }
        off += n * 8;
        tensors.push(
            Array2::from_shape_vec((entry.rows, entry.cols), flat).expect("shape follows counts"),
        );
    }
    Ok((header, tensors))
}

/// Overwrite freshly registered parameters with archived values, requiring
/// an exact name-and-shape match in registration order.
fn restore(
    store: &mut ParamStore,
    header: &Header,
    tensors: Vec<Array2<f64>>,
) -> Result<(), CheckpointError> {
    if store.len() != header.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "rebuilt model has {} tensors, archive has {}",
            store.len(),
            header.params.len()
        )));
    }
    let ids: Vec<_> = store
        .iter()
        .map(|(id, name, value)| (id, name.to_string(), value.nrows(), value.ncols()))
        .collect();
    for ((id, name, rows, cols), (entry, tensor)) in
        ids.into_iter().zip(header.params.iter().zip(tensors))
    {
        if name != entry.name || rows != entry.rows || cols != entry.cols {
            return Err(CheckpointError::Mismatch(format!(
                "expected tensor {name} [{rows}, {cols}], archive has {} [{}, {}]",
                entry.name, entry.rows, entry.cols
            )));
        }
        store.set(id, tensor).expect("shape checked above");
    }
    Ok(())
}

/// A grid model restored from an archive.
pub struct LoadedSpan {
    pub config: TrainConfig,
    pub tiny_vocab: Option<Vec<String>>,
    pub model: Model,
    pub store: ParamStore,
}

pub fn load_span(path: &Path) -> Result<LoadedSpan, CheckpointError> {
    let (header, tensors) = read_archive(path)?;
    if header.variant != "span" {
        return Err(CheckpointError::Mismatch(format!(
            "archive holds a {} model, expected span",
            header.variant
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(header.config.seed);
    let (encoder, tiny_vocab) = crate::train::encoder_from_parts(
        &header.config,
        header.tiny_vocab.clone(),
        &mut store,
        &mut rng,
    )
    .map_err(|e| CheckpointError::Build(e.to_string()))?;
    let model = Model::new(&mut store, encoder, header.config.model.clone(), &mut rng)
        .map_err(|e| CheckpointError::Build(e.to_string()))?;
    restore(&mut store, &header, tensors)?;
    Ok(LoadedSpan {
        config: header.config,
        tiny_vocab,
        model,
        store,
    })
}

/// A cooking model restored from an archive.
pub struct LoadedCooking {
    pub config: TrainConfig,
    pub tiny_vocab: Option<Vec<String>>,
    pub num_classes: usize,
    pub model: CookingModel,
    pub store: ParamStore,
}

pub fn load_cooking(path: &Path) -> Result<LoadedCooking, CheckpointError> {
    let (header, tensors) = read_archive(path)?;
    if header.variant != "cooking" {
        return Err(CheckpointError::Mismatch(format!(
            "archive holds a {} model, expected cooking",
            header.variant
        )));
    }
    let num_classes = header.cooking_classes.ok_or_else(|| {
        CheckpointError::Format("cooking archive without a class count".to_string())
    })?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(header.config.seed);
    let (encoder, tiny_vocab) = crate::train::encoder_from_parts(
        &header.config,
        header.tiny_vocab.clone(),
        &mut store,
        &mut rng,
    )
    .map_err(|e| CheckpointError::Build(e.to_string()))?;
    let cooking_cfg = CookingConfig {
        num_classes,
        class_seq_hidden: header.config.model.class_seq_hidden,
        trans_hidden: header.config.model.trans_hidden,
        seq_class: !header.config.model.ablation.no_seq_class,
    };
    let model = CookingModel::new(&mut store, encoder, cooking_cfg, &mut rng)
        .map_err(|e| CheckpointError::Build(e.to_string()))?;
    restore(&mut store, &header, tensors)?;
    Ok(LoadedCooking {
        config: header.config,
        tiny_vocab,
        num_classes,
        model,
        store,
    })
}
