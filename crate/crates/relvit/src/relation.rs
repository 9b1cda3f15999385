//! Relationship head: subject/object projections, the N x N pair score
//! matrix, two-round hard selection, relationship embeddings, box prediction,
//! and open-vocabulary classification against text queries.
//!
//! The score matrix entry `p[i][j] = <s_i, o_j>` doubles as objectness on the
//! diagonal and relationship likelihood off it. Selection is hard (top-M
//! instances by diagonal score, then top-k ordered pairs among them), so only
//! a small budget of pair embeddings is ever computed.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

/// 3-layer MLP d -> d with GeLU hiddens, an input skip, and a final layer
/// norm: LN(x + W3 gelu(W2 gelu(W1 x + b1) + b2) + b3).
struct ProjectionMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl ProjectionMlp {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = ParamGroup::Body;
        let t = |rng: &mut ChaCha8Rng, r, c| Matrix::trunc_normal(r, c, 0.02, rng);
        Ok(ProjectionMlp {
            w1: store.add(format!("{prefix}.w1"), g, t(rng, dim, dim))?,
            b1: store.add(format!("{prefix}.b1"), g, Matrix::zeros(1, dim))?,
            w2: store.add(format!("{prefix}.w2"), g, t(rng, dim, dim))?,
            b2: store.add(format!("{prefix}.b2"), g, Matrix::zeros(1, dim))?,
            w3: store.add(format!("{prefix}.w3"), g, t(rng, dim, dim))?,
            b3: store.add(format!("{prefix}.b3"), g, Matrix::zeros(1, dim))?,
            ln_g: store.add(format!("{prefix}.ln.g"), g, Matrix::full(1, dim, 1.0))?,
            ln_b: store.add(format!("{prefix}.ln.b"), g, Matrix::zeros(1, dim))?,
        })
    }

    fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let h1_lin = tape.matmul(x, binding.var(self.w1))?;
        let h1_b = tape.add(h1_lin, binding.var(self.b1))?;
        let h1 = tape.gelu(h1_b);
        let h2_lin = tape.matmul(h1, binding.var(self.w2))?;
        let h2_b = tape.add(h2_lin, binding.var(self.b2))?;
        let h2 = tape.gelu(h2_b);
        let h3_lin = tape.matmul(h2, binding.var(self.w3))?;
        let h3 = tape.add(h3_lin, binding.var(self.b3))?;
        let skip = tape.add(x, h3)?;
        tape.layer_norm(skip, binding.var(self.ln_g), binding.var(self.ln_b), LN_EPS)
    }
}

/// Hard selection result over token indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Selected instance token indices, ascending.
    pub instances: Vec<usize>,
    /// Selected ordered pairs (subject token, object token), best-first;
    /// both endpoints are selected instances and i != j.
    pub pairs: Vec<(usize, usize)>,
}

impl Selection {
    /// Embedding row order: the self-pair of every instance first (ascending
    /// instance index), then the off-diagonal pairs in selection order.
    pub fn embedded_pairs(&self) -> Vec<(usize, usize)> {
        self.instances.iter().map(|&i| (i, i)).chain(self.pairs.iter().copied()).collect()
    }
}

/// Parameters of the relationship head.
pub struct RelationHead {
    dim: usize,
    /// When set, the object projection reuses the subject parameters
    /// (ablation: symmetric scores, direction-blind relationships).
    pub shared_projection: bool,
    subject: ProjectionMlp,
    object: Option<ProjectionMlp>,
    pair_ln_g: ParamId,
    pair_ln_b: ParamId,
    post_w1: ParamId,
    post_b1: ParamId,
    post_w2: ParamId,
    post_b2: ParamId,
    box_w: ParamId,
    box_b: ParamId,
}

impl RelationHead {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        shared_projection: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Body;
        let t = |rng: &mut ChaCha8Rng, r, c| Matrix::trunc_normal(r, c, 0.02, rng);
        let subject = ProjectionMlp::new(store, "rel.subject", dim, rng)?;
        let object = if shared_projection {
            None
        } else {
            Some(ProjectionMlp::new(store, "rel.object", dim, rng)?)
        };
        Ok(RelationHead {
            dim,
            shared_projection,
            subject,
            object,
            pair_ln_g: store.add("rel.pair.ln.g", g, Matrix::full(1, dim, 1.0))?,
            pair_ln_b: store.add("rel.pair.ln.b", g, Matrix::zeros(1, dim))?,
            post_w1: store.add("rel.post.w1", g, t(rng, dim, dim))?,
            post_b1: store.add("rel.post.b1", g, Matrix::zeros(1, dim))?,
            post_w2: store.add("rel.post.w2", g, t(rng, dim, dim))?,
            post_b2: store.add("rel.post.b2", g, Matrix::zeros(1, dim))?,
            box_w: store.add("rel.box.w", g, t(rng, dim, 4))?,
            box_b: store.add("rel.box.b", g, Matrix::zeros(1, 4))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Subject and object embeddings, row-aligned with the tokens. Under the
    /// shared-projection ablation both outputs are the same tape node.
    pub fn project(&self, tape: &mut Tape, binding: &Binding, tokens: Var) -> Result<(Var, Var)> {
        let s = self.subject.forward(tape, binding, tokens)?;
        let o = match &self.object {
            Some(mlp) => mlp.forward(tape, binding, tokens)?,
            None => s,
        };
        Ok((s, o))
    }

    /// Pair score logits p = S . O^T (N x N).
    pub fn scores(&self, tape: &mut Tape, s: Var, o: Var) -> Result<Var> {
        if tape.value(s).rows() != tape.value(o).rows() {
            return Err(Error::Contract(format!(
                "subject/object row mismatch: {} vs {}",
                tape.value(s).rows(),
                tape.value(o).rows()
            )));
        }
        tape.matmul_nt(s, o)
    }

    /// Relationship embeddings r = PostMLP(LN(s_i + o_j)) for every embedded
    /// pair (all self-pairs, then the selected off-diagonal pairs). Returns
    /// the embedding matrix, row-aligned with `sel.embedded_pairs()`.
    pub fn embeddings(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        s: Var,
        o: Var,
        sel: &Selection,
    ) -> Result<Var> {
        let pairs = sel.embedded_pairs();
        let subj_idx: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let obj_idx: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let s_rows = tape.gather_rows(s, &subj_idx)?;
        let o_rows = tape.gather_rows(o, &obj_idx)?;
        let sum = tape.add(s_rows, o_rows)?;
        let normed =
            tape.layer_norm(sum, binding.var(self.pair_ln_g), binding.var(self.pair_ln_b), LN_EPS)?;
        let h_lin = tape.matmul(normed, binding.var(self.post_w1))?;
        let h_b = tape.add(h_lin, binding.var(self.post_b1))?;
        let h = tape.gelu(h_b);
        let out_lin = tape.matmul(h, binding.var(self.post_w2))?;
        tape.add(out_lin, binding.var(self.post_b2))
    }

    /// Center-form boxes for the selected instances: a linear head on each
    /// token produces offsets; centers are sigmoid-squashed around the
    /// token's patch center, extents are sigmoids floored at 1e-3.
    pub fn predict_boxes(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: Var,
        instances: &[usize],
        patch_center: impl Fn(usize) -> (f64, f64),
    ) -> Result<Var> {
        let rows = tape.gather_rows(tokens, instances)?;
        let raw = tape.matmul(rows, binding.var(self.box_w))?;
        let raw_b = tape.add(raw, binding.var(self.box_b))?;
        // Shift center logits so a zero head predicts the patch center.
        let mut shift = Matrix::zeros(instances.len(), 4);
        for (r, &i) in instances.iter().enumerate() {
            let (cx, cy) = patch_center(i);
            let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
            shift.set(r, 0, logit(cx));
            shift.set(r, 1, logit(cy));
        }
        let shift = tape.constant(shift);
        let shifted = tape.add(raw_b, shift)?;
        let squashed = tape.sigmoid(shifted);
        // Floor only the extent columns.
        let mut floors = Matrix::zeros(instances.len(), 4);
        for r in 0..instances.len() {
            floors.set(r, 2, 1e-3);
            floors.set(r, 3, 1e-3);
        }
        let floors = tape.constant(floors);
        tape.maximum(squashed, floors)
    }

    /// Logits of relationship embeddings against a query matrix:
    /// temperature * cosine + bias.
    pub fn classify(
        &self,
        tape: &mut Tape,
        r: Var,
        queries: Var,
        temperature: Var,
        bias: Var,
    ) -> Result<Var> {
        if tape.value(r).cols() != tape.value(queries).cols() {
            return Err(Error::Contract(format!(
                "embedding dim {} does not match query dim {}",
                tape.value(r).cols(),
                tape.value(queries).cols()
            )));
        }
        let rn = tape.l2_normalize_rows(r);
        let cos = tape.matmul_nt(rn, queries)?;
        let scaled = tape.mul(cos, temperature)?;
        tape.add(scaled, bias)
    }
}

/// Two-round hard selection on a score matrix: top-M diagonal entries (ties
/// to the lower index), then the top-k off-diagonal entries of the M x M
/// submatrix (ties in lexicographic (i, j) order).
pub fn select(p: &Matrix, m: usize, k: usize) -> Result<Selection> {
    let n = p.rows();
    if p.cols() != n {
        return Err(Error::Contract(format!("score matrix must be square, got {:?}", p.shape())));
    }
    if m < 1 || m > n {
        return Err(Error::Contract(format!("instance budget M={m} out of range 1..={n}")));
    }
    let budget = m * (m - 1);
    if k > budget {
        return Err(Error::Contract(format!(
            "pair budget k={k} exceeds M(M-1)={budget} ordered pairs"
        )));
    }

    let mut diag: Vec<(usize, f32)> = (0..n).map(|i| (i, p.get(i, i))).collect();
    // Descending score, ties to the lower index.
    diag.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut instances: Vec<usize> = diag[..m].iter().map(|&(i, _)| i).collect();
    instances.sort_unstable();

    let mut candidates: Vec<(usize, usize, f32)> = Vec::with_capacity(budget);
    for &i in &instances {
        for &j in &instances {
            if i != j {
                candidates.push((i, j, p.get(i, j)));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    let pairs = candidates[..k].iter().map(|&(i, j, _)| (i, j)).collect();
    Ok(Selection { instances, pairs })
}
