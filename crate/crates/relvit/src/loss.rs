//! Bipartite matching between predicted instances and ground-truth objects,
//! and the four-component training loss (classification, L1 box, gIoU box,
//! relationship score), combined as an unweighted sum.
//!
//! Matching is decided on detached values; the loss graph is then built on
//! the tape so gradients flow through a fixed assignment, as in detection
//! transformers.

use std::collections::HashMap;

use crate::boxes::{center_to_corners, giou_column, giou_corners, l1_center};
use crate::error::{Error, Result};
use crate::hungarian::{hungarian, CostGrid};
use crate::relation::Selection;
use crate::scenes::GroundTruth;
use crate::tape::{sigmoid_scalar, Tape, Var};
use crate::tensor::Matrix;

/// The closed query sets used during training: object category names and
/// predicate names, each mapped to a dense query index.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    objects: Vec<String>,
    predicates: Vec<String>,
    object_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(objects: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        let mut object_index = HashMap::new();
        for (i, name) in objects.iter().enumerate() {
            if object_index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate object label {name:?}")));
            }
        }
        let mut predicate_index = HashMap::new();
        for (i, name) in predicates.iter().enumerate() {
            if predicate_index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate predicate label {name:?}")));
            }
        }
        Ok(LabelSpace { objects, predicates, object_index, predicate_index })
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        self.object_index.get(name).copied().ok_or_else(|| {
            Error::Data(format!("ground-truth category {name:?} is not in the training query set"))
        })
    }

    pub fn predicate_index(&self, name: &str) -> Result<usize> {
        self.predicate_index.get(name).copied().ok_or_else(|| {
            Error::Data(format!("ground-truth predicate {name:?} is not in the training query set"))
        })
    }
}

/// Injective map from ground-truth object index to selected-instance
/// position (an index into `Selection::instances`), sorted by GT index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
}

impl Matching {
    pub fn instance_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(g, _)| g == gt).map(|&(_, i)| i)
    }
}

/// Matching cost between every GT object (rows) and selected instance
/// (columns): [1 - sigmoid(category logit)] + L1 + [1 - gIoU], unit weights.
pub fn matching_cost(
    det_logits: &Matrix,
    boxes: &Matrix,
    gt: &GroundTruth,
    labels: &LabelSpace,
) -> Result<CostGrid> {
    let m = det_logits.rows();
    if boxes.rows() != m || boxes.cols() != 4 {
        return Err(Error::Contract(format!(
            "box matrix {:?} does not match {m} instances x 4 coords",
            boxes.shape()
        )));
    }
    let n = gt.boxes.len();
    let mut cost = Vec::with_capacity(n * m);
    for g in 0..n {
        let q = labels.object_index(&gt.categories[g])?;
        for i in 0..m {
            let cls = 1.0 - crate::tape::sigmoid_scalar(det_logits.get(i, q)) as f64;
            let pred: [f64; 4] = std::array::from_fn(|c| boxes.get(i, c) as f64);
            let l1 = l1_center(pred, gt.boxes[g]);
            let g_iou = giou_corners(center_to_corners(pred), center_to_corners(gt.boxes[g]))?;
            cost.push(cls + l1 + (1.0 - g_iou));
        }
    }
    CostGrid::new(n, m, cost)
}

/// Optimal assignment of GT objects to instances. When there are more GT
/// objects than instances the cheapest subset is kept and the rest dropped
/// with a warning.
pub fn match_instances(cost: &CostGrid) -> Result<Matching> {
    let assignment = hungarian(cost)?;
    if cost.rows() > cost.cols() {
        log::warn!(
            "{} ground-truth objects exceed the instance budget {}; dropping {}",
            cost.rows(),
            cost.cols(),
            cost.rows() - cost.cols()
        );
    }
    Ok(Matching { pairs: assignment.pairs })
}

/// Tape nodes of the four loss components and their sum; every component is
/// a 1x1 matrix.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
    pub score: Var,
    pub total: Var,
}

/// Detached component values for logging.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub score: f64,
    pub total: f64,
}

impl LossParts {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).get(0, 0) as f64;
        LossReport {
            cls: v(self.cls),
            l1: v(self.l1),
            giou: v(self.giou),
            score: v(self.score),
            total: v(self.total),
        }
    }
}

/// Builds the full per-image loss on the tape: matches instances to ground
/// truth on detached values, then delegates to [`image_loss_matched`].
///
/// `det_logits` (M x object queries) are the self-pair classification
/// logits, row-aligned with `sel.instances`; `rel_logits` (k x predicate
/// queries) are row-aligned with `sel.pairs`; `boxes` (M x 4) are
/// center-form predictions; `p` is the full N x N score matrix.
pub fn image_loss(
    tape: &mut Tape,
    sel: &Selection,
    p: Var,
    det_logits: Var,
    rel_logits: Var,
    boxes: Var,
    gt: &GroundTruth,
    labels: &LabelSpace,
) -> Result<(LossParts, Matching)> {
    let cost = matching_cost(tape.value(det_logits), tape.value(boxes), gt, labels)?;
    let matching = match_instances(&cost)?;
    let parts =
        image_loss_matched(tape, sel, &matching, p, det_logits, rel_logits, boxes, gt, labels, None)?;
    Ok((parts, matching))
}

/// Score-loss targets captured at a reference point: the per-row maximum
/// class probability for each selected instance and pair.
///
/// Normally the targets are recomputed (and detached) inside the graph on
/// every evaluation. A finite-difference check perturbs parameters and
/// re-evaluates, which would silently move the targets even though the
/// analytic gradient never flows through them; pinning the captured values
/// makes both sides differentiate the same function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTargets {
    pub diag: Vec<f32>,
    pub pairs: Vec<f32>,
}

/// Reads the score-loss targets off a forward pass, matching the in-graph
/// arithmetic bit for bit.
pub fn score_targets(tape: &Tape, det_logits: Var, rel_logits: Var) -> ScoreTargets {
    let max_prob = |logits: &Matrix| -> Vec<f32> {
        (0..logits.rows())
            .map(|r| {
                logits.row(r).iter().map(|&v| sigmoid_scalar(v)).fold(f32::MIN, f32::max)
            })
            .collect()
    };
    ScoreTargets {
        diag: max_prob(tape.value(det_logits)),
        pairs: max_prob(tape.value(rel_logits)),
    }
}

/// The differentiable part of the loss under a fixed assignment; used
/// directly by finite-difference checks, where selection, matching, and
/// (optionally) the detached score targets must stay frozen while
/// parameters are perturbed.
#[allow(clippy::too_many_arguments)]
pub fn image_loss_matched(
    tape: &mut Tape,
    sel: &Selection,
    matching: &Matching,
    p: Var,
    det_logits: Var,
    rel_logits: Var,
    boxes: Var,
    gt: &GroundTruth,
    labels: &LabelSpace,
    pinned: Option<&ScoreTargets>,
) -> Result<LossParts> {
    let m = sel.instances.len();
    let k = sel.pairs.len();
    if tape.value(det_logits).rows() != m {
        return Err(Error::Contract(format!(
            "detection logits have {} rows for {m} instances",
            tape.value(det_logits).rows()
        )));
    }
    if tape.value(rel_logits).rows() != k {
        return Err(Error::Contract(format!(
            "relationship logits have {} rows for {k} pairs",
            tape.value(rel_logits).rows()
        )));
    }

    // Object classification: one-hot targets for matched instances, all
    // zeros for the rest; per-instance CE sums over queries, averaged over
    // instances.
    let num_obj_queries = tape.value(det_logits).cols();
    let mut det_targets = Matrix::zeros(m, num_obj_queries);
    for &(g, i) in &matching.pairs {
        det_targets.set(i, labels.object_index(&gt.categories[g])?, 1.0);
    }
    let det_targets = tape.constant(det_targets);
    let det_bce = tape.bce_with_logits(det_logits, det_targets)?;
    let det_sum = tape.sum_all(det_bce);
    let det_cls = tape.affine(det_sum, 1.0 / m as f32, 0.0);

    // Predicate classification: a GT triplet supervises the selected pair
    // formed by its matched endpoints (multi-hot when several predicates
    // hold); unmatched selected pairs get all-zero targets; triplets whose
    // pair was not selected contribute nothing.
    let pair_pos: HashMap<(usize, usize), usize> =
        sel.pairs.iter().enumerate().map(|(pos, &pr)| (pr, pos)).collect();
    let num_pred_queries = tape.value(rel_logits).cols();
    let mut rel_targets = Matrix::zeros(k, num_pred_queries);
    for t in &gt.triplets {
        let (Some(si), Some(oi)) = (matching.instance_for(t.subject), matching.instance_for(t.object))
        else {
            continue;
        };
        let token_pair = (sel.instances[si], sel.instances[oi]);
        if let Some(&pos) = pair_pos.get(&token_pair) {
            rel_targets.set(pos, labels.predicate_index(t.predicate.as_str())?, 1.0);
        }
    }
    let rel_cls = if k > 0 {
        let rel_targets = tape.constant(rel_targets);
        let rel_bce = tape.bce_with_logits(rel_logits, rel_targets)?;
        let rel_sum = tape.sum_all(rel_bce);
        tape.affine(rel_sum, 1.0 / k as f32, 0.0)
    } else {
        tape.constant(Matrix::scalar(0.0))
    };
    let cls = tape.add(det_cls, rel_cls)?;

    // Box losses over matched instances only.
    let (l1, giou) = if matching.pairs.is_empty() {
        (tape.constant(Matrix::scalar(0.0)), tape.constant(Matrix::scalar(0.0)))
    } else {
        let cols: Vec<usize> = matching.pairs.iter().map(|&(_, i)| i).collect();
        let n_match = cols.len();
        let pred_rows = tape.gather_rows(boxes, &cols)?;
        let mut gt_rows = Matrix::zeros(n_match, 4);
        for (r, &(g, _)) in matching.pairs.iter().enumerate() {
            for c in 0..4 {
                gt_rows.set(r, c, gt.boxes[g][c] as f32);
            }
        }
        let gt_rows = tape.constant(gt_rows);
        let diff = tape.sub(pred_rows, gt_rows)?;
        let abs = tape.abs(diff);
        let abs_sum = tape.sum_all(abs);
        let l1 = tape.affine(abs_sum, 1.0 / n_match as f32, 0.0);
        let giou_col = giou_column(tape, pred_rows, gt_rows)?;
        let giou_mean = tape.mean_all(giou_col);
        let giou = tape.affine(giou_mean, -1.0, 1.0);
        (l1, giou)
    };

    // Relationship score loss: sigmoid CE between the selected score-matrix
    // entries and the detached maximum class probability of each embedding.
    if let Some(t) = pinned {
        if t.diag.len() != m || t.pairs.len() != k {
            return Err(Error::Contract(format!(
                "pinned score targets sized {}/{} for {m} instances and {k} pairs",
                t.diag.len(),
                t.pairs.len()
            )));
        }
    }
    let diag_elems: Vec<(usize, usize)> = sel.instances.iter().map(|&i| (i, i)).collect();
    let p_diag = tape.gather_elems(p, &diag_elems)?;
    let det_target = match pinned {
        Some(t) => tape.constant(Matrix::from_vec(m, 1, t.diag.clone())?),
        None => {
            let det_probs = tape.sigmoid(det_logits);
            let det_max = tape.row_max(det_probs)?;
            tape.stop_grad(det_max)
        }
    };
    let diag_bce = tape.bce_with_logits(p_diag, det_target)?;
    let diag_sum = tape.sum_all(diag_bce);
    let score_sum = if k > 0 {
        let p_pairs = tape.gather_elems(p, &sel.pairs)?;
        let rel_target = match pinned {
            Some(t) => tape.constant(Matrix::from_vec(k, 1, t.pairs.clone())?),
            None => {
                let rel_probs = tape.sigmoid(rel_logits);
                let rel_max = tape.row_max(rel_probs)?;
                tape.stop_grad(rel_max)
            }
        };
        let pair_bce = tape.bce_with_logits(p_pairs, rel_target)?;
        let pair_sum = tape.sum_all(pair_bce);
        tape.add(diag_sum, pair_sum)?
    } else {
        diag_sum
    };
    let score = tape.affine(score_sum, 1.0 / (m + k) as f32, 0.0);

    let partial = tape.add(cls, l1)?;
    let partial = tape.add(partial, giou)?;
    let total = tape.add(partial, score)?;

    let parts = LossParts { cls, l1, giou, score, total };
    for (name, var) in [
        ("classification loss", parts.cls),
        ("L1 box loss", parts.l1),
        ("gIoU box loss", parts.giou),
        ("relationship score loss", parts.score),
    ] {
        let v = tape.value(var).get(0, 0);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite ({v})")));
        }
    }
    Ok(parts)
}
