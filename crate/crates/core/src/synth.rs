//! Seeded random process generators for property checks and benchmarks.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::formalism::{AttributeValue, EntityRef, StateGrid};

/// Small location vocabulary used by the generators.
pub const LOCATIONS: [&str; 12] = [
    "tank",
    "engine",
    "soil",
    "root",
    "leaf",
    "cloud",
    "ocean",
    "factory",
    "sediment",
    "alternator",
    "stomach",
    "membrane",
];

fn random_value(rng: &mut ChaCha8Rng) -> AttributeValue {
    match rng.random_range(0..4u8) {
        0 => AttributeValue::Nowhere,
        1 => AttributeValue::Unknown,
        _ => AttributeValue::span(*LOCATIONS.choose(rng).expect("non-empty vocab")),
    }
}

/// A valid random grid: 1..=`max_entities` entities, 1..=`max_steps` steps,
/// every cell drawn independently from {NOWHERE, UNKNOWN, random span}.
pub fn random_grid(rng: &mut ChaCha8Rng, max_entities: usize, max_steps: usize) -> StateGrid {
    let num_entities = rng.random_range(1..=max_entities.max(1));
    let num_steps = rng.random_range(1..=max_steps.max(1));
    let entities = (0..num_entities)
        .map(|i| EntityRef::new("synthetic", format!("entity{i}"), i))
        .collect();
    let values = (0..num_entities)
        .map(|_| (0..=num_steps).map(|_| random_value(rng)).collect())
        .collect();
    StateGrid::new(entities, num_steps, values).expect("generator emits valid shapes")
}
