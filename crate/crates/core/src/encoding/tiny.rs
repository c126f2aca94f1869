//! Small trainable transformer encoder with a word-level vocabulary,
//! sized for CPU training on bundled corpora.

use std::collections::HashMap;

use protrace_autodiff::{ParamError, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::data::ProcessDocument;
use crate::encoding::transformer::{TransformerConfig, TransformerParams};
use crate::encoding::{
    Encoder, EncoderFailure, ProceduralContext, Tokenizer, CLS, C_NOW, C_UNK, SEP,
};

const UNK: &str = "[UNK]";

/// Word-level vocabulary: specials first, then corpus words.
#[derive(Debug, Clone)]
pub struct TinyVocab {
    tokens: Vec<String>,
    by_token: HashMap<String, usize>,
}

impl TinyVocab {
    pub const SPECIALS: [&'static str; 5] = [UNK, CLS, SEP, C_NOW, C_UNK];

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, by_token }
    }

    /// Collect the lowercased words of every sentence, prompt, and entity
    /// name, plus the query template words.
    pub fn build(docs: &[ProcessDocument]) -> Self {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let push = |word: &str, tokens: &mut Vec<String>, seen: &mut HashMap<String, usize>| {
            let w = word.to_lowercase();
            if !seen.contains_key(&w) {
                seen.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        };
        for w in ["where", "is", "?"] {
            push(w, &mut tokens, &mut seen);
        }
        for doc in docs {
            for sentence in &doc.sentences {
                for w in &sentence.tokens {
                    push(w, &mut tokens, &mut seen);
                }
            }
            for entity in &doc.entities {
                for w in crate::data::tokenize(&entity.name) {
                    push(&w, &mut tokens, &mut seen);
                }
            }
        }
        Self {
            by_token: seen,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.by_token.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Case-folding word-level pass-through.
struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn subtokens(&self, word: &str) -> Vec<String> {
        vec![word.to_lowercase()]
    }
}

/// Trainable encoder: embeddings plus a few transformer layers, all
/// registered in the shared parameter store.
pub struct TinyEncoder {
    cfg: TransformerConfig,
    params: TransformerParams,
    vocab: TinyVocab,
    tokenizer: WordTokenizer,
}

impl TinyEncoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new(
        store: &mut ParamStore,
        vocab: TinyVocab,
        width: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let cfg = TransformerConfig {
            vocab_size: vocab.len(),
            width,
            layers,
            heads,
            ff_width: 2 * width,
            max_len,
            ln_eps: 1e-5,
            token_types: false,
        };
        let params = TransformerParams::register(store, Self::PREFIX, &cfg, rng)?;
        Ok(Self {
            cfg,
            params,
            vocab,
            tokenizer: WordTokenizer,
        })
    }

    pub fn vocab(&self) -> &TinyVocab {
        &self.vocab
    }
}

impl Encoder for TinyEncoder {
    fn hidden_width(&self) -> usize {
        self.cfg.width
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &ProceduralContext,
    ) -> Result<Var, EncoderFailure> {
        if ctx.len() > self.cfg.max_len {
            return Err(EncoderFailure::OverLength {
                len: ctx.len(),
                max: self.cfg.max_len,
            });
        }
        let ids: Vec<usize> = ctx.tokens.iter().map(|t| self.vocab.id(t)).collect();
        Ok(self.params.forward(tape, store, &self.cfg, &ids, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_propara;
    use crate::encoding::build_context;
    use rand::SeedableRng;

    fn doc() -> ProcessDocument {
        let text = "\
3\tsentence\t1\tRoots absorb water.\n\
3\tsentence\t2\tWater reaches the leaf.\n\
3\tentity\twater\tsoil\troot\tleaf\n";
        parse_propara(text, "t").unwrap().remove(0)
    }

    fn encoder(width: usize) -> (ParamStore, TinyEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = TinyVocab::build(&[doc()]);
        let enc = TinyEncoder::new(&mut store, vocab, width, 2, 2, 64, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn vocab_covers_corpus_and_query_words() {
        let vocab = TinyVocab::build(&[doc()]);
        for w in ["roots", "absorb", "water", "leaf", "where", "is", "?", "[C_NOW]"] {
            assert_ne!(vocab.id(w), 0, "{w} must not map to [UNK]");
        }
        assert_eq!(vocab.id("zeppelin"), 0);
    }

    #[test]
    fn output_width_matches_configuration() {
        let (store, enc) = encoder(16);
        let d = doc();
        let ctx = build_context(&d, &d.entities[0], 1, enc.tokenizer(), 64).unwrap();
        let out = enc.encode(&store, &ctx).unwrap();
        assert_eq!(out.vectors.nrows(), ctx.len());
        assert_eq!(out.vectors.ncols(), 16);
        assert_eq!(out.pooled().len(), 16);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, enc) = encoder(16);
        let d = doc();
        let ctx = build_context(&d, &d.entities[0], 2, enc.tokenizer(), 64).unwrap();
        let a = enc.encode(&store, &ctx).unwrap();
        let b = enc.encode(&store, &ctx).unwrap();
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn over_length_context_is_refused() {
        let (_store, enc) = encoder(16);
        let d = doc();
        // Build with a generous limit, then present it to an encoder whose
        // limit is smaller than the context.
        let ctx = build_context(&d, &d.entities[0], 2, enc.tokenizer(), 512).unwrap();
        let mut small_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let small = TinyEncoder::new(
            &mut small_store,
            TinyVocab::build(&[doc()]),
            16,
            1,
            2,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            small.encode(&small_store, &ctx),
            Err(EncoderFailure::OverLength { .. })
        ));
    }

    #[test]
    fn gradients_flow_into_embeddings() {
        let (store, enc) = encoder(8);
        let d = doc();
        let ctx = build_context(&d, &d.entities[0], 1, enc.tokenizer(), 64).unwrap();
        let mut tape = Tape::new();
        let out = enc.encode_on_tape(&mut tape, &store, &ctx).unwrap();
        let loss = tape.mean_all(out);
        let grads = tape.backward(loss);
        let emb = store.id("encoder.token_emb.weight").unwrap();
        let g = grads.get(emb).expect("embedding gradient");
        assert!(g.iter().any(|v| *v != 0.0));
    }
}
