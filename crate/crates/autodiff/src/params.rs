//! Named parameter storage with seeded initializers.

use std::collections::HashMap;

use ndarray::{ArcArray2, Array2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter `{0}` registered twice")]
    DuplicateName(String),
    #[error("parameter `{name}` has shape [{have_r}, {have_c}], expected [{want_r}, {want_c}]")]
    ShapeMismatch {
        name: String,
        have_r: usize,
        have_c: usize,
        want_r: usize,
        want_c: usize,
    },
}

struct Slot {
    name: String,
    value: ArcArray2<f64>,
}

/// Flat store of model parameters, addressed by [`ParamId`] or name.
///
/// Values are reference-counted so tapes can hold them without copying;
/// in-place updates between forward passes reuse the allocation.
#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::DuplicateName(name));
        }
        let id = ParamId(self.slots.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.slots.push(Slot {
            name,
            value: value.into_shared(),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.index()].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &ArcArray2<f64> {
        &self.slots[id.index()].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> ArcArray2<f64> {
        self.slots[id.index()].value.clone()
    }

    /// Mutable access; copies only if a tape still holds the old value.
    pub fn value_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        self.slots[id.index()].value.view_mut()
    }

    /// Replace a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Array2<f64>) -> Result<(), ParamError> {
        let slot = &mut self.slots[id.index()];
        let (wr, wc) = slot.value.dim();
        let (hr, hc) = value.dim();
        if (wr, wc) != (hr, hc) {
            return Err(ParamError::ShapeMismatch {
                name: slot.name.clone(),
                have_r: hr,
                have_c: hc,
                want_r: wr,
                want_c: wc,
            });
        }
        slot.value = value.into_shared();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArcArray2<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| (ParamId(i as u32), s.name.as_str(), &s.value))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }
}

/// Glorot/Xavier uniform initialization: `U(-a, a)` with `a = sqrt(6/(fan_in+fan_out))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

/// Zero-mean normal initialization with the given standard deviation.
pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Box-Muller transform; avoids pulling in a distributions crate.
    Array2::from_shape_simple_fn((rows, cols), || {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}
