//! Recipe variant: attributes come from a fixed location vocabulary, so the
//! span machinery is replaced by an n-way classifier and the
//! attribute-aware vector becomes a probability-weighted mixture of learned
//! class embeddings.

use protrace_autodiff::nn::{Linear, Lstm};
use protrace_autodiff::params::normal;
use protrace_autodiff::{ParamError, ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{ProcessDocument, RecipeDocument};
use crate::encoding::{build_context, ContextError, Encoder, EncoderFailure};
use crate::model::heads::{HeadError, StepTag, TransitionHead};

#[derive(Debug, Error)]
pub enum CookingModelError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Encoder(#[from] EncoderFailure),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("recipe `{0}` has no steps")]
    EmptyRecipe(String),
    #[error("ingredient index {index} out of range ({count} ingredients)")]
    BadIngredient { index: usize, count: usize },
}

#[derive(Debug, Clone)]
pub struct CookingConfig {
    pub num_classes: usize,
    pub class_seq_hidden: usize,
    pub trans_hidden: usize,
    pub seq_class: bool,
}

impl Default for CookingConfig {
    fn default() -> Self {
        Self {
            num_classes: 243,
            class_seq_hidden: 1000,
            trans_hidden: 200,
            seq_class: true,
        }
    }
}

/// Tape nodes for one recipe step of one ingredient.
pub struct CookingStepForward {
    pub pooled: Var,
    /// `[1, num_classes]` each.
    pub prev_logits: Var,
    pub curr_logits: Var,
}

pub struct CookingForward {
    pub steps: Vec<CookingStepForward>,
    /// `[1, 4]` per step.
    pub transition_logits: Vec<Var>,
}

pub struct CookingModel {
    pub encoder: Box<dyn Encoder>,
    pub config: CookingConfig,
    class_seq: Option<Lstm>,
    g_class: Linear,
    readout: [Linear; 2],
    /// `[num_classes, H]` learned location embeddings.
    class_emb: ParamId,
    transition: TransitionHead,
}

impl CookingModel {
    pub fn new(
        store: &mut ParamStore,
        encoder: Box<dyn Encoder>,
        config: CookingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let width = encoder.hidden_width();
        let (class_seq, class_in) = if config.seq_class {
            (
                Some(Lstm::register(
                    store,
                    "cooking.class_seq",
                    width,
                    config.class_seq_hidden,
                    rng,
                )?),
                config.class_seq_hidden,
            )
        } else {
            (None, width)
        };
        let g_class = Linear::register(store, "cooking.g_class", class_in, class_in, rng)?;
        let readout = [
            Linear::register(store, "cooking.class.prev", class_in, config.num_classes, rng)?,
            Linear::register(store, "cooking.class.curr", class_in, config.num_classes, rng)?,
        ];
        let class_emb = store.add(
            "cooking.class_emb".to_string(),
            normal(config.num_classes, width, 0.02, rng),
        )?;
        let transition = TransitionHead::register(
            store,
            "cooking.transition",
            width,
            Some(2 * width),
            config.trans_hidden,
            true,
            rng,
        )?;
        Ok(Self {
            encoder,
            config,
            class_seq,
            g_class,
            readout,
            class_emb,
            transition,
        })
    }

    /// View of a recipe as a generic process document for one ingredient,
    /// so context assembly is shared with the span-based model.
    pub fn as_process_document(recipe: &RecipeDocument) -> ProcessDocument {
        ProcessDocument {
            process_id: recipe.recipe_id.clone(),
            prompt: None,
            sentences: recipe.sentences.clone(),
            entities: recipe.ingredients.clone(),
            gold: None,
        }
    }

    fn class_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        class_input: Var,
        tag: StepTag,
    ) -> Var {
        let a = self.g_class.apply(tape, store, class_input);
        let g = tape.tanh(a);
        let idx = match tag {
            StepTag::Prev => 0,
            StepTag::Curr => 1,
        };
        self.readout[idx].apply(tape, store, g)
    }

    /// Probability-weighted mixture of class embeddings, `[1, H]`.
    fn class_mixture(&self, tape: &mut Tape, store: &ParamStore, logits: Var) -> Var {
        let p = tape.softmax_rows(logits);
        let emb = tape.param(store, self.class_emb);
        tape.matmul(p, emb)
    }

    pub fn forward_recipe(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        recipe: &RecipeDocument,
        ingredient: usize,
    ) -> Result<CookingForward, CookingModelError> {
        let num_steps = recipe.num_steps();
        if num_steps == 0 {
            return Err(CookingModelError::EmptyRecipe(recipe.recipe_id.clone()));
        }
        if ingredient >= recipe.ingredients.len() {
            return Err(CookingModelError::BadIngredient {
                index: ingredient,
                count: recipe.ingredients.len(),
            });
        }
        let doc = Self::as_process_document(recipe);
        let entity = &doc.entities[ingredient];

        let mut pooled = Vec::with_capacity(num_steps);
        for k in 1..=num_steps {
            let ctx = build_context(
                &doc,
                entity,
                k,
                self.encoder.tokenizer(),
                self.encoder.max_len(),
            )?;
            let r = self.encoder.encode_on_tape(tape, store, &ctx)?;
            pooled.push(tape.row(r, 0));
        }

        let class_inputs = match &self.class_seq {
            Some(lstm) => lstm.run(tape, store, &pooled),
            None => pooled.clone(),
        };

        let mut steps = Vec::with_capacity(num_steps);
        let mut pairs = Vec::with_capacity(num_steps);
        for (i, &p) in pooled.iter().enumerate() {
            let prev_logits = self.class_logits(tape, store, class_inputs[i], StepTag::Prev);
            let curr_logits = self.class_logits(tape, store, class_inputs[i], StepTag::Curr);
            let ra_curr = self.class_mixture(tape, store, curr_logits);
            let ra_prev = self.class_mixture(tape, store, prev_logits);
            pairs.push(tape.concat_cols(ra_curr, ra_prev));
            steps.push(CookingStepForward {
                pooled: p,
                prev_logits,
                curr_logits,
            });
        }

        let transition_logits = self.transition.predict(tape, store, &pooled, Some(&pairs))?;
        Ok(CookingForward {
            steps,
            transition_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sentence;
    use crate::encoding::{TinyEncoder, TinyVocab};
    use crate::formalism::EntityRef;
    use rand::SeedableRng;

    fn recipe() -> RecipeDocument {
        let sentences = vec![
            Sentence::new("Chop the onion on the board."),
            Sentence::new("Fry the onion in the pan."),
        ];
        let ingredients = vec![EntityRef {
            process_id: "r1".to_string(),
            name: "onion".to_string(),
            index: 0,
        }];
        RecipeDocument {
            recipe_id: "r1".to_string(),
            sentences,
            ingredients,
            gold_locations: vec![vec![0, 1, 2]],
        }
    }

    fn build(num_classes: usize) -> (ParamStore, CookingModel, RecipeDocument) {
        let r = recipe();
        let doc = CookingModel::as_process_document(&r);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vocab = TinyVocab::build(std::slice::from_ref(&doc));
        let enc = TinyEncoder::new(&mut store, vocab, 12, 1, 2, 128, &mut rng).unwrap();
        let cfg = CookingConfig {
            num_classes,
            class_seq_hidden: 7,
            trans_hidden: 5,
            seq_class: true,
        };
        let model = CookingModel::new(&mut store, Box::new(enc), cfg, &mut rng).unwrap();
        (store, model, r)
    }

    #[test]
    fn forward_shapes_follow_the_vocabulary() {
        let (store, model, r) = build(9);
        let mut tape = Tape::new();
        let out = model.forward_recipe(&mut tape, &store, &r, 0).unwrap();
        assert_eq!(out.steps.len(), 2);
        assert_eq!(out.transition_logits.len(), 2);
        for s in &out.steps {
            assert_eq!(tape.shape(s.prev_logits), (1, 9));
            assert_eq!(tape.shape(s.curr_logits), (1, 9));
        }
        assert_eq!(tape.shape(out.transition_logits[0]), (1, 4));
    }

    #[test]
    fn bad_ingredient_index_is_an_error() {
        let (store, model, r) = build(5);
        let mut tape = Tape::new();
        assert!(matches!(
            model.forward_recipe(&mut tape, &store, &r, 3),
            Err(CookingModelError::BadIngredient { index: 3, count: 1 })
        ));
    }

    #[test]
    fn class_mixture_with_one_hot_returns_embedding_row() {
        let (store, model, _) = build(4);
        let mut tape = Tape::new();
        // Extreme logits make softmax effectively one-hot.
        let logits = tape.constant(ndarray::array![[100.0, 0.0, 0.0, 0.0]]);
        let mix = model.class_mixture(&mut tape, &store, logits);
        let emb = store.value(model.class_emb);
        for j in 0..12 {
            assert!((tape.value(mix)[[0, j]] - emb[[0, j]]).abs() < 1e-9);
        }
    }
}
