//! Free-form text queries: a small vocabulary, whitespace tokenizer, and a
//! learned embedder that maps any phrase to a unit vector in the shared
//! classification space.
//!
//! Object categories and predicates go through the same embedder but are
//! handled as separate query sets downstream, keeping object and predicate
//! classification disentangled.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Ordered token list; ids are dense `0..len`, with the last id reserved as
/// the out-of-vocabulary fallback. Lookup lowercases first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    by_token: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Data("vocabulary needs at least two tokens".into()));
        }
        let mut by_token = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let norm = t.to_lowercase();
            if norm != *t {
                return Err(Error::Data(format!("vocabulary token {t:?} is not lowercase")));
            }
            if norm.split_whitespace().count() != 1 {
                return Err(Error::Data(format!("vocabulary token {t:?} contains whitespace")));
            }
            if by_token.insert(norm, i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, by_token })
    }

    /// Default vocabulary: scene attribute words, predicate words, and a
    /// spread of extra words so open-vocabulary phrases have something to
    /// land on. The final token is the out-of-vocabulary slot.
    pub fn builtin() -> Vocabulary {
        const WORDS: &[&str] = &[
            // shapes / colors / sizes
            "circle", "square", "triangle", "red", "green", "blue", "yellow", "small", "large",
            // predicate words
            "left", "right", "of", "above", "below", "inside", "contains", "same", "color", "as",
            "larger", "than",
            // glue words for free-form phrases
            "a", "an", "the", "is", "to", "on", "in", "at", "and", "or", "not", "with", "near",
            "beside", "under", "over", "next",
            // extra nouns and adjectives for held-out compositions
            "object", "thing", "shape", "item", "figure", "box", "disc", "dot", "ball", "blob",
            "purple", "orange", "pink", "black", "white", "grey", "tiny", "huge", "big", "little",
            "medium", "bright",
            // out-of-vocabulary fallback (must stay last)
            "<unk>",
        ];
        Vocabulary::from_tokens(WORDS.iter().map(|s| s.to_string()).collect())
            .expect("builtin vocabulary is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn oov_id(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, word: &str) -> usize {
        let norm = word.to_lowercase();
        self.by_token.get(&norm).copied().unwrap_or_else(|| self.oov_id())
    }

    /// Lowercase, split on whitespace, map each word (OOV falls back to the
    /// reserved id). Empty or whitespace-only input is an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text.split_whitespace().map(|w| self.id_of(w)).collect();
        if ids.is_empty() {
            return Err(Error::Usage(format!("query {text:?} contains no tokens")));
        }
        Ok(ids)
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> =
            text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Parameters of the text-query embedder: token table, 2-layer MLP, and the
/// learned temperature/bias applied to classification logits.
pub struct QueryEmbedder {
    pub table: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub temperature: ParamId,
    pub bias: ParamId,
    dim: usize,
}

impl QueryEmbedder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Text;
        let t = |rng: &mut ChaCha8Rng, r, c| Matrix::trunc_normal(r, c, 0.02, rng);
        let table = store.add("text.table", g, t(rng, vocab_size, dim))?;
        let w1 = store.add("text.mlp.w1", g, t(rng, dim, dim))?;
        let b1 = store.add("text.mlp.b1", g, Matrix::zeros(1, dim))?;
        let w2 = store.add("text.mlp.w2", g, t(rng, dim, dim))?;
        let b2 = store.add("text.mlp.b2", g, Matrix::zeros(1, dim))?;
        // Cosine logits live in [-1, 1]; the temperature stretches them to a
        // usable sigmoid range and the bias starts predictions unconfident.
        let temperature = store.add("text.temperature", g, Matrix::scalar(10.0))?;
        let bias = store.add("text.bias", g, Matrix::scalar(-2.0))?;
        Ok(QueryEmbedder { table, w1, b1, w2, b2, temperature, bias, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embed a batch of query strings as rows of a `Q x d` matrix on the
    /// tape: per string, mean of token embeddings -> MLP -> L2 normalize.
    /// Errors name the offending query index.
    pub fn embed_set(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        vocab: &Vocabulary,
        texts: &[String],
    ) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Usage("query set must contain at least one string".into()));
        }
        let mut all_ids: Vec<usize> = Vec::new();
        let mut spans: Vec<(usize, usize)> = Vec::new(); // (start, len) per query
        for (qi, text) in texts.iter().enumerate() {
            let ids = vocab.tokenize(text).map_err(|e| {
                Error::Usage(format!("query {qi} ({text:?}) is invalid: {e}"))
            })?;
            spans.push((all_ids.len(), ids.len()));
            all_ids.extend(ids);
        }
        // Q x T pooling matrix averaging each query's token rows.
        let mut pool = Matrix::zeros(texts.len(), all_ids.len());
        for (qi, &(start, len)) in spans.iter().enumerate() {
            for t in 0..len {
                pool.set(qi, start + t, 1.0 / len as f32);
            }
        }
        let pool = tape.constant(pool);
        let rows = tape.gather_rows(binding.var(self.table), &all_ids)?;
        let pooled = tape.matmul(pool, rows)?;
        let h_lin = tape.matmul(pooled, binding.var(self.w1))?;
        let h_biased = tape.add(h_lin, binding.var(self.b1))?;
        let h = tape.gelu(h_biased);
        let out_lin = tape.matmul(h, binding.var(self.w2))?;
        let out = tape.add(out_lin, binding.var(self.b2))?;
        Ok(tape.l2_normalize_rows(out))
    }

    /// Embed queries with throwaway tape machinery and return the plain
    /// matrix (for precomputed inference).
    pub fn embed_set_values(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        texts: &[String],
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let q = self.embed_set(&mut tape, &binding, vocab, texts)?;
        Ok(tape.value(q).clone())
    }
}
