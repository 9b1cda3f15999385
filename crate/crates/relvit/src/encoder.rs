//! Patch-based transformer image encoder. The N output tokens are the only
//! interface to the rest of the model: each token doubles as an object
//! proposal, so there is no decoder and no pooling.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::scenes::Image;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Image side length in pixels.
    pub side: usize,
    /// Patch side length in pixels.
    pub patch: usize,
    /// Embedding width d.
    pub dim: usize,
    /// Transformer depth.
    pub layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Hidden width of the block MLP as a multiple of d.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { side: 64, patch: 8, dim: 64, layers: 4, heads: 4, mlp_ratio: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.patch == 0 || self.dim == 0 || self.layers == 0
            || self.heads == 0 || self.mlp_ratio == 0
        {
            return Err(Error::Usage("encoder config fields must be positive".into()));
        }
        if self.side % self.patch != 0 {
            return Err(Error::Usage(format!(
                "image side {} not divisible by patch size {}",
                self.side, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Usage(format!(
                "embed dim {} not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    /// Token count N.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch center of token `i` in normalized image coordinates.
    pub fn patch_center(&self, i: usize) -> (f64, f64) {
        let g = self.grid();
        let (pr, pc) = (i / g, i % g);
        ((pc as f64 + 0.5) / g as f64, (pr as f64 + 0.5) / g as f64)
    }
}

/// Cut the image into non-overlapping patches: row `i` holds patch
/// (i div grid, i mod grid), flattened pixel-row-major with channels last.
/// The rows partition the image exactly.
pub fn patchify(image: &Image, cfg: &EncoderConfig) -> Result<Matrix> {
    if image.side != cfg.side {
        return Err(Error::Contract(format!(
            "image side {} does not match configured side {}",
            image.side, cfg.side
        )));
    }
    if image.data.len() != cfg.side * cfg.side * 3 {
        return Err(Error::Contract(format!(
            "image buffer has {} values, expected {}",
            image.data.len(),
            cfg.side * cfg.side * 3
        )));
    }
    let g = cfg.grid();
    let p = cfg.patch;
    let mut out = Matrix::zeros(cfg.num_tokens(), 3 * p * p);
    for token in 0..cfg.num_tokens() {
        let (pr, pc) = (token / g, token % g);
        let row = out.row_mut(token);
        let mut w = 0;
        for dy in 0..p {
            let y = pr * p + dy;
            for dx in 0..p {
                let x = pc * p + dx;
                let base = (y * cfg.side + x) * 3;
                row[w..w + 3].copy_from_slice(&image.data[base..base + 3]);
                w += 3;
            }
        }
    }
    Ok(out)
}

struct HeadParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    heads: Vec<HeadParams>,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

/// Parameter handles for the full encoder.
pub struct Encoder {
    pub cfg: EncoderConfig,
    proj_w: ParamId,
    proj_b: ParamId,
    pub pos: ParamId,
    blocks: Vec<BlockParams>,
    final_g: ParamId,
    final_b: ParamId,
}

/// Tokens plus the attention maps that produced them (one N x N matrix per
/// layer and head, softmax rows).
pub struct EncoderOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

const LN_EPS: f64 = 1e-5;

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Body;
        let d = cfg.dim;
        let dh = d / cfg.heads;
        let t = |rng: &mut ChaCha8Rng, r, c| Matrix::trunc_normal(r, c, 0.02, rng);
        let proj_w = store.add("enc.proj.w", g, t(rng, 3 * cfg.patch * cfg.patch, d))?;
        let proj_b = store.add("enc.proj.b", g, Matrix::zeros(1, d))?;
        let pos = store.add("enc.pos", g, t(rng, cfg.num_tokens(), d))?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("enc.block{l}.{s}");
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                heads.push(HeadParams {
                    wq: store.add(p(&format!("head{h}.wq")), g, t(rng, d, dh))?,
                    bq: store.add(p(&format!("head{h}.bq")), g, Matrix::zeros(1, dh))?,
                    wk: store.add(p(&format!("head{h}.wk")), g, t(rng, d, dh))?,
                    bk: store.add(p(&format!("head{h}.bk")), g, Matrix::zeros(1, dh))?,
                    wv: store.add(p(&format!("head{h}.wv")), g, t(rng, d, dh))?,
                    bv: store.add(p(&format!("head{h}.bv")), g, Matrix::zeros(1, dh))?,
                    wo: store.add(p(&format!("head{h}.wo")), g, t(rng, dh, d))?,
                });
            }
            blocks.push(BlockParams {
                ln1_g: store.add(p("ln1.g"), g, Matrix::full(1, d, 1.0))?,
                ln1_b: store.add(p("ln1.b"), g, Matrix::zeros(1, d))?,
                heads,
                bo: store.add(p("attn.bo"), g, Matrix::zeros(1, d))?,
                ln2_g: store.add(p("ln2.g"), g, Matrix::full(1, d, 1.0))?,
                ln2_b: store.add(p("ln2.b"), g, Matrix::zeros(1, d))?,
                mlp_w1: store.add(p("mlp.w1"), g, t(rng, d, cfg.mlp_ratio * d))?,
                mlp_b1: store.add(p("mlp.b1"), g, Matrix::zeros(1, cfg.mlp_ratio * d))?,
                mlp_w2: store.add(p("mlp.w2"), g, t(rng, cfg.mlp_ratio * d, d))?,
                mlp_b2: store.add(p("mlp.b2"), g, Matrix::zeros(1, d))?,
            });
        }
        let final_g = store.add("enc.final.g", g, Matrix::full(1, d, 1.0))?;
        let final_b = store.add("enc.final.b", g, Matrix::zeros(1, d))?;
        Ok(Encoder { cfg, proj_w, proj_b, pos, blocks, final_g, final_b })
    }

    /// Full forward pass: patch projection + positional embeddings, L
    /// pre-norm blocks (attention, MLP, residuals), final layer norm.
    /// Activations are checked for finiteness after every block; failures
    /// report the layer index.
    pub fn encode(&self, tape: &mut Tape, binding: &Binding, image: &Image) -> Result<EncoderOutput> {
        let patches = patchify(image, &self.cfg)?;
        let patches = tape.constant(patches);
        let projected = tape.matmul(patches, binding.var(self.proj_w))?;
        let with_bias = tape.add(projected, binding.var(self.proj_b))?;
        let mut x = tape.add(with_bias, binding.var(self.pos))?;

        let dh = self.cfg.dim / self.cfg.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut attention = Vec::new();
        for (li, block) in self.blocks.iter().enumerate() {
            let normed = tape.layer_norm(x, binding.var(block.ln1_g), binding.var(block.ln1_b), LN_EPS)?;
            let mut attn_out: Option<Var> = None;
            for head in &block.heads {
                let q_lin = tape.matmul(normed, binding.var(head.wq))?;
                let q = tape.add(q_lin, binding.var(head.bq))?;
                let k_lin = tape.matmul(normed, binding.var(head.wk))?;
                let k = tape.add(k_lin, binding.var(head.bk))?;
                let v_lin = tape.matmul(normed, binding.var(head.wv))?;
                let v = tape.add(v_lin, binding.var(head.bv))?;
                let scores_raw = tape.matmul_nt(q, k)?;
                let scores = tape.affine(scores_raw, scale, 0.0);
                let probs = tape.softmax_rows(scores);
                attention.push(probs);
                let ctx = tape.matmul(probs, v)?;
                let head_out = tape.matmul(ctx, binding.var(head.wo))?;
                attn_out = Some(match attn_out {
                    None => head_out,
                    Some(acc) => tape.add(acc, head_out)?,
                });
            }
            let attn_sum = attn_out.expect("at least one head");
            let attn_biased = tape.add(attn_sum, binding.var(block.bo))?;
            x = tape.add(x, attn_biased)?;

            let normed2 =
                tape.layer_norm(x, binding.var(block.ln2_g), binding.var(block.ln2_b), LN_EPS)?;
            let h_lin = tape.matmul(normed2, binding.var(block.mlp_w1))?;
            let h_b = tape.add(h_lin, binding.var(block.mlp_b1))?;
            let h = tape.gelu(h_b);
            let m_lin = tape.matmul(h, binding.var(block.mlp_w2))?;
            let m = tape.add(m_lin, binding.var(block.mlp_b2))?;
            x = tape.add(x, m)?;

            tape.value(x)
                .ensure_finite(&format!("encoder block {li}"))
                .map_err(|e| Error::Numeric(format!("{e} (layer {li})")))?;
        }
        let tokens =
            tape.layer_norm(x, binding.var(self.final_g), binding.var(self.final_b), LN_EPS)?;
        Ok(EncoderOutput { tokens, attention })
    }
}
