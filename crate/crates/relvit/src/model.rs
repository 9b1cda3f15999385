//! Full model assembly: patch encoder, subject/object projections, pair
//! scoring and selection, relationship embeddings, open-vocabulary
//! classification, and box prediction, all built on a single tape per
//! image so one backward pass covers every parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::loss::{self, LabelSpace, LossParts, Matching};
use crate::params::{Binding, ParamStore};
use crate::relation::{select, RelationHead, Selection};
use crate::scenes::{AnnotatedExample, Image};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;
use crate::text::{QueryEmbedder, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Ablation: use one projection MLP for both subject and object roles.
    pub shared_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderConfig::default(), shared_projection: false }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub head: RelationHead,
    pub embedder: QueryEmbedder,
}

/// One image's forward pass: the tape owning the graph plus handles to
/// every output the losses and metrics need.
pub struct Forward {
    pub tape: Tape,
    pub binding: Binding,
    pub selection: Selection,
    pub tokens: Var,
    /// N x N pair score logits.
    pub p: Var,
    /// M x |object queries| classification logits for the self-pairs,
    /// row-aligned with `selection.instances`.
    pub det_logits: Var,
    /// k x |predicate queries| logits, row-aligned with `selection.pairs`.
    pub rel_logits: Var,
    /// M x 4 center-form boxes, row-aligned with `selection.instances`.
    pub boxes: Var,
}

impl Model {
    /// Fresh model with deterministic initialization and the built-in
    /// vocabulary.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        Model::with_vocab(config, Vocabulary::builtin(), seed)
    }

    /// Fresh model over an explicit vocabulary (checkpoints store theirs so
    /// restored models are self-contained). Parameter registration order is
    /// fixed (encoder, relation head, text embedder) and is part of the
    /// checkpoint contract.
    pub fn with_vocab(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model> {
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder, &mut rng)?;
        let head =
            RelationHead::new(&mut store, config.encoder.dim, config.shared_projection, &mut rng)?;
        let embedder = QueryEmbedder::new(&mut store, vocab.len(), config.encoder.dim, &mut rng)?;
        Ok(Model { config, store, vocab, encoder, head, embedder })
    }

    pub fn num_tokens(&self) -> usize {
        self.config.encoder.num_tokens()
    }

    /// Full forward pass with hard top-M / top-k selection.
    pub fn forward(
        &self,
        image: &Image,
        object_queries: &[String],
        predicate_queries: &[String],
        m: usize,
        k: usize,
    ) -> Result<Forward> {
        self.forward_inner(
            image,
            QuerySource::Strings { objects: object_queries, predicates: predicate_queries },
            SelectMode::TopK { m, k },
        )
    }

    /// Forward pass with a caller-fixed selection; used by gradient checks,
    /// which must hold the discrete choices constant while perturbing
    /// parameters.
    pub fn forward_with_selection(
        &self,
        image: &Image,
        object_queries: &[String],
        predicate_queries: &[String],
        selection: &Selection,
    ) -> Result<Forward> {
        self.forward_inner(
            image,
            QuerySource::Strings { objects: object_queries, predicates: predicate_queries },
            SelectMode::Fixed(selection.clone()),
        )
    }

    /// Forward pass against query embeddings computed ahead of time (see
    /// [`QueryEmbedder::embed_set_values`]); queries are image-independent,
    /// so inference and benchmarking embed them once and reuse the values.
    pub fn forward_with_query_values(
        &self,
        image: &Image,
        object_values: &Matrix,
        predicate_values: &Matrix,
        m: usize,
        k: usize,
    ) -> Result<Forward> {
        self.forward_inner(
            image,
            QuerySource::Values { objects: object_values, predicates: predicate_values },
            SelectMode::TopK { m, k },
        )
    }

    fn forward_inner(
        &self,
        image: &Image,
        queries: QuerySource<'_>,
        mode: SelectMode,
    ) -> Result<Forward> {
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape);

        let encoded = self.encoder.encode(&mut tape, &binding, image)?;
        let tokens = encoded.tokens;
        let (s, o) = self.head.project(&mut tape, &binding, tokens)?;
        let p = self.head.scores(&mut tape, s, o)?;
        let selection = match mode {
            SelectMode::TopK { m, k } => select(tape.value(p), m, k)?,
            SelectMode::Fixed(sel) => sel,
        };

        let r = self.head.embeddings(&mut tape, &binding, s, o, &selection)?;
        let num_instances = selection.instances.len();
        let self_rows: Vec<usize> = (0..num_instances).collect();
        let pair_rows: Vec<usize> =
            (num_instances..num_instances + selection.pairs.len()).collect();
        let r_self = tape.gather_rows(r, &self_rows)?;
        let r_pairs = tape.gather_rows(r, &pair_rows)?;

        let temperature = binding.var(self.embedder.temperature);
        let bias = binding.var(self.embedder.bias);
        let (obj_q, pred_q) = match queries {
            QuerySource::Strings { objects, predicates } => (
                self.embedder.embed_set(&mut tape, &binding, &self.vocab, objects)?,
                self.embedder.embed_set(&mut tape, &binding, &self.vocab, predicates)?,
            ),
            QuerySource::Values { objects, predicates } => {
                (tape.constant(objects.clone()), tape.constant(predicates.clone()))
            }
        };
        let det_logits = self.head.classify(&mut tape, r_self, obj_q, temperature, bias)?;
        let rel_logits = self.head.classify(&mut tape, r_pairs, pred_q, temperature, bias)?;

        let cfg = self.config.encoder;
        let boxes = self.head.predict_boxes(&mut tape, &binding, tokens, &selection.instances, |i| {
            cfg.patch_center(i)
        })?;

        Ok(Forward { tape, binding, selection, tokens, p, det_logits, rel_logits, boxes })
    }

    /// Forward plus the four-component loss against one annotated example.
    pub fn training_loss(
        &self,
        example: &AnnotatedExample,
        labels: &LabelSpace,
        m: usize,
        k: usize,
    ) -> Result<(Forward, LossParts, Matching)> {
        let mut fwd =
            self.forward(&example.image, labels.objects(), labels.predicates(), m, k)?;
        let (parts, matching) = loss::image_loss(
            &mut fwd.tape,
            &fwd.selection,
            fwd.p,
            fwd.det_logits,
            fwd.rel_logits,
            fwd.boxes,
            &example.gt,
            labels,
        )?;
        Ok((fwd, parts, matching))
    }
}

enum SelectMode {
    TopK { m: usize, k: usize },
    Fixed(Selection),
}

enum QuerySource<'a> {
    Strings { objects: &'a [String], predicates: &'a [String] },
    Values { objects: &'a Matrix, predicates: &'a Matrix },
}

/// Training label space for the synthetic corpus: every color x shape
/// category plus every predicate.
pub fn synthetic_labels() -> Result<LabelSpace> {
    use crate::scenes::{Color, Predicate, Shape};
    let mut objects = Vec::new();
    for color in Color::ALL {
        for shape in Shape::ALL {
            objects.push(format!("{} {}", color.as_str(), shape.as_str()));
        }
    }
    let predicates = Predicate::ALL.iter().map(|p| p.as_str().to_string()).collect();
    LabelSpace::new(objects, predicates)
}
