//! Metric suite over triplet predictions: Recall@K, per-predicate mean
//! recall, and triplet-class average precision with a rare/non-rare split,
//! together with the exhaustive pair x predicate scorer that turns one
//! forward pass into a ranked prediction list.
//!
//! Recall pools matched and total ground-truth counts over the whole
//! corpus before dividing (and mean recall does the same per predicate
//! class before averaging classes); this keeps single-relationship images
//! from dominating the way per-image averaging would, and is documented
//! here because published implementations differ on this point.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::boxes::{center_to_corners, iou_corners};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::relation::Selection;
use crate::scenes::{GroundTruth, Image};
use crate::tensor::Matrix;

/// One scored <subject, predicate, object> candidate from a single image.
///
/// Boxes are center-form like ground truth; instance indices address the
/// image's selected-instance list and exist for the graph constraint and
/// for deterministic ordering. The six factor fields multiply into
/// `combined`, so every score lives in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TripletPrediction {
    pub subject_idx: usize,
    pub object_idx: usize,
    pub subject_box: [f64; 4],
    pub object_box: [f64; 4],
    pub subject_category: String,
    pub object_category: String,
    pub predicate: String,
    pub subject_category_id: usize,
    pub object_category_id: usize,
    pub predicate_id: usize,
    pub subject_objectness: f64,
    pub subject_class_prob: f64,
    pub object_objectness: f64,
    pub object_class_prob: f64,
    pub pair_score: f64,
    pub predicate_prob: f64,
    pub combined: f64,
}

impl TripletPrediction {
    /// Deterministic ranking: score descending, then subject / object
    /// instance, then class ids, so equal scores never reorder between
    /// runs.
    pub fn order(a: &TripletPrediction, b: &TripletPrediction) -> Ordering {
        b.combined
            .total_cmp(&a.combined)
            .then(a.subject_idx.cmp(&b.subject_idx))
            .then(a.object_idx.cmp(&b.object_idx))
            .then(a.subject_category_id.cmp(&b.subject_category_id))
            .then(a.predicate_id.cmp(&b.predicate_id))
            .then(a.object_category_id.cmp(&b.object_category_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Recall budgets, ascending.
    pub k_values: Vec<usize>,
    pub iou_threshold: f64,
    /// Keep only the best triplet per ordered instance pair; otherwise up
    /// to `per_pair_cap` survive.
    pub graph_constrained: bool,
    pub per_pair_cap: usize,
    /// Triplet classes with fewer ground-truth occurrences than this count
    /// as rare in the AP split.
    pub rare_threshold: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_values: vec![5, 10, 20],
            iou_threshold: 0.5,
            graph_constrained: true,
            per_pair_cap: 4,
            rare_threshold: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() {
            return Err(Error::Usage("at least one recall budget K is required".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) || self.k_values[0] == 0 {
            return Err(Error::Usage(format!(
                "recall budgets must be positive and ascending, got {:?}",
                self.k_values
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Usage(format!(
                "IoU threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        if self.per_pair_cap == 0 {
            return Err(Error::Usage("per-pair prediction cap must be at least 1".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One instance's detection outputs: its best-scoring object query and the
/// two factors a detection contributes to the combined score.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrediction {
    /// Position within `selection.instances`.
    pub index: usize,
    pub box_center: [f64; 4],
    pub category: String,
    pub category_id: usize,
    pub objectness: f64,
    pub class_prob: f64,
    /// objectness * class_prob.
    pub score: f64,
}

/// Classifies every selected instance as its arg-best object query
/// (ties to the lower query id). Returned in selection order.
pub fn score_objects(
    selection: &Selection,
    p: &Matrix,
    det_logits: &Matrix,
    boxes: &Matrix,
    object_names: &[String],
) -> Result<Vec<ObjectPrediction>> {
    let m = selection.instances.len();
    if det_logits.rows() != m || boxes.rows() != m {
        return Err(Error::Contract(format!(
            "selection has {m} instances but logits are {}x{} and boxes {}x{}",
            det_logits.rows(),
            det_logits.cols(),
            boxes.rows(),
            boxes.cols(),
        )));
    }
    if det_logits.cols() != object_names.len() {
        return Err(Error::Contract(format!(
            "{} object names for {}-column logits",
            object_names.len(),
            det_logits.cols(),
        )));
    }
    Ok(selection
        .instances
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            let row = det_logits.row(pos);
            let mut best = 0;
            for (q, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = q;
                }
            }
            let mut box_center = [0.0f64; 4];
            for (c, slot) in box_center.iter_mut().enumerate() {
                *slot = boxes.get(pos, c) as f64;
            }
            let objectness = sigmoid(p.get(tok, tok) as f64);
            let class_prob = sigmoid(row[best] as f64);
            ObjectPrediction {
                index: pos,
                box_center,
                category: object_names[best].clone(),
                category_id: best,
                objectness,
                class_prob,
                score: objectness * class_prob,
            }
        })
        .collect())
}

/// Scores every selected pair against every predicate query, with each
/// endpoint classified as its best-scoring object query. Returns the
/// candidates fully sorted by [`TripletPrediction::order`].
pub fn exhaustive_score(
    selection: &Selection,
    p: &Matrix,
    det_logits: &Matrix,
    rel_logits: &Matrix,
    boxes: &Matrix,
    object_names: &[String],
    predicate_names: &[String],
) -> Result<Vec<TripletPrediction>> {
    let k = selection.pairs.len();
    if rel_logits.rows() != k || rel_logits.cols() != predicate_names.len() {
        return Err(Error::Contract(format!(
            "{k} pairs and {} predicate names for {}x{} pair logits",
            predicate_names.len(),
            rel_logits.rows(),
            rel_logits.cols(),
        )));
    }
    let instances = score_objects(selection, p, det_logits, boxes, object_names)?;
    let position: HashMap<usize, usize> =
        selection.instances.iter().enumerate().map(|(pos, &tok)| (tok, pos)).collect();

    let mut preds = Vec::with_capacity(k * predicate_names.len());
    for (pi, &(ti, tj)) in selection.pairs.iter().enumerate() {
        let (Some(&si), Some(&oi)) = (position.get(&ti), position.get(&tj)) else {
            return Err(Error::Contract(format!(
                "pair ({ti}, {tj}) references tokens outside the selected instances"
            )));
        };
        let pair_score = sigmoid(p.get(ti, tj) as f64);
        let (sub, obj) = (&instances[si], &instances[oi]);
        for (q, name) in predicate_names.iter().enumerate() {
            let predicate_prob = sigmoid(rel_logits.get(pi, q) as f64);
            let combined = sub.objectness
                * sub.class_prob
                * obj.objectness
                * obj.class_prob
                * pair_score
                * predicate_prob;
            preds.push(TripletPrediction {
                subject_idx: si,
                object_idx: oi,
                subject_box: sub.box_center,
                object_box: obj.box_center,
                subject_category: sub.category.clone(),
                object_category: obj.category.clone(),
                predicate: name.clone(),
                subject_category_id: sub.category_id,
                object_category_id: obj.category_id,
                predicate_id: q,
                subject_objectness: sub.objectness,
                subject_class_prob: sub.class_prob,
                object_objectness: obj.objectness,
                object_class_prob: obj.class_prob,
                pair_score,
                predicate_prob,
                combined,
            });
        }
    }
    preds.sort_by(TripletPrediction::order);
    Ok(preds)
}

/// Limits how many triplets an ordered instance pair may emit: one under
/// the graph constraint, `cap` otherwise. Input and output are sorted by
/// descending score; survivors keep their relative order.
pub fn apply_graph_constraint(
    preds: Vec<TripletPrediction>,
    constrained: bool,
    cap: usize,
) -> Vec<TripletPrediction> {
    let limit = if constrained { 1 } else { cap };
    let mut taken: HashMap<(usize, usize), usize> = HashMap::new();
    preds
        .into_iter()
        .filter(|t| {
            let n = taken.entry((t.subject_idx, t.object_idx)).or_insert(0);
            *n += 1;
            *n <= limit
        })
        .collect()
}

/// A recall value plus whether it was vacuous (no ground truth to recall).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub value: f64,
    pub vacuous: bool,
}

/// Greedy score-order matching of the top-K predictions to ground-truth
/// triplets: a prediction claims the lowest-indexed unconsumed triplet
/// whose categories and predicate match exactly as strings and whose boxes
/// both overlap at `iou` or better. Returns the claimed triplet indices.
fn greedy_match(
    preds: &[TripletPrediction],
    gt: &GroundTruth,
    k: usize,
    iou: f64,
) -> Result<Vec<usize>> {
    let mut consumed = vec![false; gt.triplets.len()];
    let mut matched = Vec::new();
    for pred in preds.iter().take(k) {
        let sub_corners = center_to_corners(pred.subject_box);
        let obj_corners = center_to_corners(pred.object_box);
        for (gi, t) in gt.triplets.iter().enumerate() {
            if consumed[gi]
                || pred.predicate != t.predicate.as_str()
                || pred.subject_category != gt.categories[t.subject]
                || pred.object_category != gt.categories[t.object]
            {
                continue;
            }
            if iou_corners(sub_corners, center_to_corners(gt.boxes[t.subject]))? >= iou
                && iou_corners(obj_corners, center_to_corners(gt.boxes[t.object]))? >= iou
            {
                consumed[gi] = true;
                matched.push(gi);
                break;
            }
        }
    }
    Ok(matched)
}

/// Fraction of ground-truth triplets recovered by the top-K predictions of
/// one image. `preds` must already be sorted by descending score.
pub fn recall_at_k(
    preds: &[TripletPrediction],
    gt: &GroundTruth,
    k: usize,
    iou: f64,
) -> Result<Recall> {
    if gt.triplets.is_empty() {
        return Ok(Recall { value: 1.0, vacuous: true });
    }
    let matched = greedy_match(preds, gt, k, iou)?;
    Ok(Recall { value: matched.len() as f64 / gt.triplets.len() as f64, vacuous: false })
}

/// One image's ranked predictions next to its ground truth.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub preds: Vec<TripletPrediction>,
    pub gt: GroundTruth,
}

/// Corpus recall: matched and total triplet counts pooled over images
/// before dividing.
pub fn corpus_recall_at_k(images: &[EvalImage], k: usize, iou: f64) -> Result<Recall> {
    let mut matched = 0usize;
    let mut total = 0usize;
    for image in images {
        total += image.gt.triplets.len();
        matched += greedy_match(&image.preds, &image.gt, k, iou)?.len();
    }
    if total == 0 {
        return Ok(Recall { value: 1.0, vacuous: true });
    }
    Ok(Recall { value: matched as f64 / total as f64, vacuous: false })
}

/// Mean recall: per predicate class, matched and total counts are pooled
/// over the corpus under each image's shared top-K budget; the result is
/// the unweighted mean over classes that occur in the ground truth.
pub fn mean_recall_at_k(images: &[EvalImage], k: usize, iou: f64) -> Result<Recall> {
    let mut matched: HashMap<&str, usize> = HashMap::new();
    let mut total: HashMap<&str, usize> = HashMap::new();
    for image in images {
        for t in &image.gt.triplets {
            *total.entry(t.predicate.as_str()).or_insert(0) += 1;
        }
        for gi in greedy_match(&image.preds, &image.gt, k, iou)? {
            *matched.entry(image.gt.triplets[gi].predicate.as_str()).or_insert(0) += 1;
        }
    }
    if total.is_empty() {
        return Ok(Recall { value: 1.0, vacuous: true });
    }
    let sum: f64 = total
        .iter()
        .map(|(class, &n)| matched.get(class).copied().unwrap_or(0) as f64 / n as f64)
        .sum();
    Ok(Recall { value: sum / total.len() as f64, vacuous: false })
}

/// A triplet class for average precision: subject category, predicate,
/// object category.
pub type TripletClass = (String, String, String);

/// Every triplet class present in the corpus ground truth, sorted.
pub fn gt_triplet_classes(images: &[EvalImage]) -> Vec<TripletClass> {
    let mut classes: Vec<TripletClass> = images
        .iter()
        .flat_map(|image| {
            image.gt.triplets.iter().map(|t| {
                (
                    image.gt.categories[t.subject].clone(),
                    t.predicate.as_str().to_string(),
                    image.gt.categories[t.object].clone(),
                )
            })
        })
        .collect();
    classes.sort();
    classes.dedup();
    classes
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// NaN when no class falls in the split.
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub evaluated_classes: usize,
    pub rare_classes: usize,
}

/// All-point interpolated average precision from a ranked hit/miss
/// sequence against `total_gt` ground-truth instances.
fn average_precision(hits: &[bool], total_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
            points.push((tp as f64 / total_gt as f64, tp as f64 / (rank + 1) as f64));
        }
    }
    // Precision envelope: each recall point counts the best precision at
    // or beyond it.
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Per-triplet-class average precision over the corpus, split into rare
/// (< `rare_threshold` ground-truth occurrences) and non-rare classes.
/// Classes with no ground truth are skipped and logged.
pub fn hico_map(
    images: &[EvalImage],
    classes: &[TripletClass],
    rare_threshold: usize,
    iou: f64,
) -> Result<MapReport> {
    let mut aps = Vec::new();
    let mut rare = Vec::new();
    let mut nonrare = Vec::new();
    for class in classes {
        // Ground truth of this class, per image.
        let gts: Vec<Vec<usize>> = images
            .iter()
            .map(|image| {
                image
                    .gt
                    .triplets
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| {
                        image.gt.categories[t.subject] == class.0
                            && t.predicate.as_str() == class.1
                            && image.gt.categories[t.object] == class.2
                    })
                    .map(|(gi, _)| gi)
                    .collect()
            })
            .collect();
        let total_gt: usize = gts.iter().map(Vec::len).sum();
        if total_gt == 0 {
            log::debug!(
                "triplet class <{} {} {}> has no ground truth; excluded from mAP",
                class.0,
                class.1,
                class.2
            );
            continue;
        }

        // All predictions of this class, ranked over the whole corpus.
        let mut ranked: Vec<(usize, &TripletPrediction)> = images
            .iter()
            .enumerate()
            .flat_map(|(ii, image)| {
                image
                    .preds
                    .iter()
                    .filter(|t| {
                        t.subject_category == class.0
                            && t.predicate == class.1
                            && t.object_category == class.2
                    })
                    .map(move |t| (ii, t))
            })
            .collect();
        ranked.sort_by(|a, b| TripletPrediction::order(a.1, b.1).then(a.0.cmp(&b.0)));

        let mut consumed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for (ii, pred) in ranked {
            let sub_corners = center_to_corners(pred.subject_box);
            let obj_corners = center_to_corners(pred.object_box);
            let mut hit = false;
            for (slot, &gi) in gts[ii].iter().enumerate() {
                if consumed[ii][slot] {
                    continue;
                }
                let t = &images[ii].gt.triplets[gi];
                if iou_corners(sub_corners, center_to_corners(images[ii].gt.boxes[t.subject]))?
                    >= iou
                    && iou_corners(obj_corners, center_to_corners(images[ii].gt.boxes[t.object]))?
                        >= iou
                {
                    consumed[ii][slot] = true;
                    hit = true;
                    break;
                }
            }
            hits.push(hit);
        }

        let ap = average_precision(&hits, total_gt);
        aps.push(ap);
        if total_gt < rare_threshold {
            rare.push(ap);
        } else {
            nonrare.push(ap);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MapReport {
        map: mean(&aps),
        map_rare: mean(&rare),
        map_nonrare: mean(&nonrare),
        evaluated_classes: aps.len(),
        rare_classes: rare.len(),
    })
}

/// One image through the model: forward pass, exhaustive scoring, and the
/// per-pair prediction limit.
pub fn predict_image(
    model: &Model,
    image: &Image,
    object_queries: &[String],
    predicate_queries: &[String],
    m: usize,
    k: usize,
    config: &EvalConfig,
) -> Result<Vec<TripletPrediction>> {
    let fwd = model.forward(image, object_queries, predicate_queries, m, k)?;
    let preds = exhaustive_score(
        &fwd.selection,
        fwd.tape.value(fwd.p),
        fwd.tape.value(fwd.det_logits),
        fwd.tape.value(fwd.rel_logits),
        fwd.tape.value(fwd.boxes),
        object_queries,
        predicate_queries,
    )?;
    Ok(apply_graph_constraint(preds, config.graph_constrained, config.per_pair_cap))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    /// (K, value) per requested budget.
    pub recall: Vec<(usize, f64)>,
    pub mean_recall: Vec<(usize, f64)>,
    pub map: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub evaluated_classes: usize,
}

/// Full metric sweep of a model over a dataset.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    object_queries: &[String],
    predicate_queries: &[String],
    m: usize,
    k: usize,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let side = model.config.encoder.side;
    let mut images = Vec::with_capacity(dataset.len());
    for idx in 0..dataset.len() {
        let example = dataset.example(idx, side);
        let preds = predict_image(
            model,
            &example.image,
            object_queries,
            predicate_queries,
            m,
            k,
            config,
        )?;
        images.push(EvalImage { preds, gt: example.gt });
    }
    metrics_over(&images, config)
}

/// Metric reduction over already-predicted images; shared by [`evaluate`]
/// and oracle-style tests that synthesize predictions.
pub fn metrics_over(images: &[EvalImage], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let mut recall = Vec::new();
    let mut mean_recall = Vec::new();
    for &k in &config.k_values {
        recall.push((k, corpus_recall_at_k(images, k, config.iou_threshold)?.value));
        mean_recall.push((k, mean_recall_at_k(images, k, config.iou_threshold)?.value));
    }
    let classes = gt_triplet_classes(images);
    let map = hico_map(images, &classes, config.rare_threshold, config.iou_threshold)?;
    Ok(EvalReport {
        images: images.len(),
        recall,
        mean_recall,
        map: map.map,
        map_rare: map.map_rare,
        map_nonrare: map.map_nonrare,
        evaluated_classes: map.evaluated_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{Predicate, Triplet};

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    /// Minimal prediction with every factor 1 except what the test sets.
    fn pred(
        (si, oi): (usize, usize),
        boxes: ([f64; 4], [f64; 4]),
        cats: (&str, &str),
        predicate: &str,
        combined: f64,
    ) -> TripletPrediction {
        TripletPrediction {
            subject_idx: si,
            object_idx: oi,
            subject_box: boxes.0,
            object_box: boxes.1,
            subject_category: cats.0.into(),
            object_category: cats.1.into(),
            predicate: predicate.into(),
            subject_category_id: 0,
            object_category_id: 0,
            predicate_id: 0,
            subject_objectness: 1.0,
            subject_class_prob: 1.0,
            object_objectness: 1.0,
            object_class_prob: 1.0,
            pair_score: 1.0,
            predicate_prob: combined,
            combined,
        }
    }

    fn simple_gt() -> GroundTruth {
        GroundTruth {
            boxes: vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2], [0.5, 0.2, 0.1, 0.1]],
            categories: names(&["red circle", "blue square", "green triangle"]),
            triplets: vec![
                Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 },
                Triplet { subject: 1, predicate: Predicate::RightOf, object: 0 },
                Triplet { subject: 2, predicate: Predicate::Above, object: 1 },
            ],
        }
    }

    /// Predictions that reproduce the ground truth exactly, scores 1.
    fn oracle_preds(gt: &GroundTruth) -> Vec<TripletPrediction> {
        gt.triplets
            .iter()
            .map(|t| {
                pred(
                    (t.subject, t.object),
                    (gt.boxes[t.subject], gt.boxes[t.object]),
                    (&gt.categories[t.subject], &gt.categories[t.object]),
                    t.predicate.as_str(),
                    1.0,
                )
            })
            .collect()
    }

    #[test]
    fn exhaustive_scoring_matches_the_hand_computed_ordering() {
        let selection = Selection { instances: vec![0, 1], pairs: vec![(0, 1), (1, 0)] };
        let p = Matrix::from_vec(2, 2, vec![2.0, 0.5, -0.5, 1.0]).unwrap();
        let det = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.2, 0.4]).unwrap();
        let rel = Matrix::from_vec(2, 2, vec![0.3, -0.2, -1.0, 2.0]).unwrap();
        let boxes =
            Matrix::from_vec(2, 4, vec![0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.2, 0.2]).unwrap();
        let preds = exhaustive_score(
            &selection,
            &p,
            &det,
            &rel,
            &boxes,
            &names(&["cat a", "cat b"]),
            &names(&["rel x", "rel y"]),
        )
        .unwrap();

        assert_eq!(preds.len(), 4);
        let got: Vec<(usize, usize, &str, f64)> = preds
            .iter()
            .map(|t| (t.subject_idx, t.object_idx, t.predicate.as_str(), t.combined))
            .collect();
        let expect = [
            (0usize, 1usize, "rel x", 0.1007715841),
            (1, 0, "rel y", 0.0937173788),
            (0, 1, "rel y", 0.0789703754),
            (1, 0, "rel x", 0.0286155412),
        ];
        for ((si, oi, pr, comb), (esi, eoi, epr, ecomb)) in got.iter().zip(expect.iter()) {
            assert_eq!((si, oi, pr), (esi, eoi, epr));
            assert!((comb - ecomb).abs() < 1e-9, "{comb} vs {ecomb}");
        }
        // Best categories follow the arg-best logit per instance.
        assert_eq!(preds[0].subject_category, "cat a");
        assert_eq!(preds[0].object_category, "cat b");
        // The instance scorer agrees with the pair scorer's endpoint data.
        let objects =
            score_objects(&selection, &p, &det, &boxes, &names(&["cat a", "cat b"])).unwrap();
        assert_eq!(objects.len(), 2);
        assert_eq!(objects[0].category_id, 0);
        assert_eq!(objects[1].category_id, 1);
        assert_eq!(objects[0].objectness, preds[0].subject_objectness);
        assert_eq!(objects[0].class_prob, preds[0].subject_class_prob);
        assert!((objects[1].score - objects[1].objectness * objects[1].class_prob).abs() < 1e-15);
        // Every factor multiplies into the combined score.
        for t in &preds {
            let product = t.subject_objectness
                * t.subject_class_prob
                * t.object_objectness
                * t.object_class_prob
                * t.pair_score
                * t.predicate_prob;
            assert!((t.combined - product).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_and_zero_factors_bound_the_combined_score() {
        let t = pred((0, 1), ([0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]), ("a", "b"), "r", 1.0);
        // All sigmoids 1: combined reduces to the product of class probs.
        let mut u = t.clone();
        u.subject_class_prob = 0.9;
        u.object_class_prob = 0.8;
        u.predicate_prob = 0.5;
        u.combined = u.subject_objectness
            * u.subject_class_prob
            * u.object_objectness
            * u.object_class_prob
            * u.pair_score
            * u.predicate_prob;
        assert!((u.combined - 0.9 * 0.8 * 0.5).abs() < 1e-12);
        // Any zero factor kills the product.
        u.pair_score = 0.0;
        u.combined = u.combined * 0.0;
        assert_eq!(u.combined, 0.0);
    }

    #[test]
    fn graph_constraint_keeps_the_best_prediction_per_pair() {
        let b = ([0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]);
        let preds = vec![
            pred((0, 1), b, ("a", "b"), "p", 0.9),
            pred((0, 1), b, ("a", "b"), "q", 0.7),
            pred((1, 0), b, ("b", "a"), "p", 0.5),
        ];
        let constrained = apply_graph_constraint(preds.clone(), true, 4);
        assert_eq!(constrained.len(), 2);
        assert_eq!(constrained[0].predicate, "p");
        assert!((constrained[0].combined - 0.9).abs() < 1e-12);
        assert_eq!(constrained[1].subject_idx, 1);

        // Already one per pair: identity.
        let single = vec![preds[0].clone(), preds[2].clone()];
        assert_eq!(apply_graph_constraint(single.clone(), true, 4), single);

        // Constrained output is a subset of unconstrained output.
        let unconstrained = apply_graph_constraint(preds.clone(), false, 4);
        for t in &constrained {
            assert!(unconstrained.contains(t));
        }
        assert_eq!(unconstrained.len(), 3);

        // The unconstrained cap still limits a long run of one pair.
        let run: Vec<_> =
            (0..6).map(|i| pred((2, 3), b, ("a", "b"), "p", 0.9 - 0.1 * i as f64)).collect();
        assert_eq!(apply_graph_constraint(run, false, 4).len(), 4);
    }

    #[test]
    fn recall_hits_the_hand_counts() {
        let gt = simple_gt();
        let perfect = oracle_preds(&gt);
        assert_eq!(
            recall_at_k(&perfect, &gt, 5, 0.5).unwrap(),
            Recall { value: 1.0, vacuous: false }
        );
        assert_eq!(
            recall_at_k(&[], &gt, 5, 0.5).unwrap(),
            Recall { value: 0.0, vacuous: false }
        );

        // One of three predictions names the wrong predicate.
        let mut preds = oracle_preds(&gt);
        preds[1].predicate = "above".into();
        let r = recall_at_k(&preds, &gt, 5, 0.5).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-12);

        // Wait: the altered prediction now duplicates GT triplet 2's
        // predicate but not its boxes/categories, so it matches nothing.
        let empty = GroundTruth { boxes: vec![], categories: vec![], triplets: vec![] };
        assert_eq!(
            recall_at_k(&perfect, &empty, 5, 0.5).unwrap(),
            Recall { value: 1.0, vacuous: true }
        );
    }

    #[test]
    fn recall_is_monotone_in_k_and_respects_the_budget() {
        let gt = simple_gt();
        let b = ([0.0, 0.0, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1]);
        // Two junk predictions outrank the three perfect ones.
        let mut preds = vec![
            pred((3, 4), b, ("x", "y"), "inside", 1.0),
            pred((4, 3), b, ("y", "x"), "contains", 1.0),
        ];
        preds.extend(oracle_preds(&gt).into_iter().map(|mut t| {
            t.combined = 0.5;
            t
        }));
        let mut last = 0.0;
        for k in 1..=5 {
            let r = recall_at_k(&preds, &gt, k, 0.5).unwrap().value;
            assert!(r >= last, "recall fell from {last} to {r} at K={k}");
            last = r;
        }
        assert_eq!(recall_at_k(&preds, &gt, 2, 0.5).unwrap().value, 0.0);
        assert_eq!(recall_at_k(&preds, &gt, 5, 0.5).unwrap().value, 1.0);
    }

    #[test]
    fn each_ground_truth_consumes_at_most_one_prediction() {
        let gt = GroundTruth {
            boxes: vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]],
            categories: names(&["red circle", "blue square"]),
            triplets: vec![Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 }],
        };
        let one = pred(
            (0, 1),
            ([0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]),
            ("red circle", "blue square"),
            "left of",
            0.9,
        );
        // The same correct triplet predicted twice still recalls one GT.
        let r = recall_at_k(&[one.clone(), one], &gt, 5, 0.5).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn mean_recall_averages_classes_unweighted() {
        // Image with 3 "left of" GT (all recalled) and 1 "above" (missed).
        let gt = GroundTruth {
            boxes: vec![
                [0.2, 0.5, 0.1, 0.1],
                [0.5, 0.5, 0.1, 0.1],
                [0.8, 0.5, 0.1, 0.1],
                [0.5, 0.2, 0.1, 0.1],
            ],
            categories: names(&["red circle", "blue square", "green triangle", "red square"]),
            triplets: vec![
                Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 },
                Triplet { subject: 0, predicate: Predicate::LeftOf, object: 2 },
                Triplet { subject: 1, predicate: Predicate::LeftOf, object: 2 },
                Triplet { subject: 3, predicate: Predicate::Above, object: 1 },
            ],
        };
        let mut preds = oracle_preds(&gt);
        preds.retain(|t| t.predicate == "left of");
        let images = vec![EvalImage { preds, gt }];

        // Overall recall weights triplets: 3/4. Mean recall weights the two
        // classes equally: (1.0 + 0.0) / 2.
        assert!(
            (corpus_recall_at_k(&images, 10, 0.5).unwrap().value - 0.75).abs() < 1e-12
        );
        assert!((mean_recall_at_k(&images, 10, 0.5).unwrap().value - 0.5).abs() < 1e-12);

        // A single class present makes both metrics agree.
        let gt2 = simple_gt();
        let single = vec![EvalImage { preds: oracle_preds(&gt2), gt: gt2 }];
        let r = corpus_recall_at_k(&single, 10, 0.5).unwrap().value;
        let mr = mean_recall_at_k(&single, 10, 0.5).unwrap().value;
        assert_eq!(r, 1.0);
        assert_eq!(mr, 1.0);
    }

    #[test]
    fn mean_recall_matches_a_brute_force_tally() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cats = ["red circle", "blue square", "green triangle"];
        let predicates = [Predicate::LeftOf, Predicate::Above, Predicate::Inside];
        let mut images = Vec::new();
        for _ in 0..12 {
            let n = rng.gen_range(2..=4);
            let boxes: Vec<[f64; 4]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.1..0.3),
                        rng.gen_range(0.1..0.3),
                    ]
                })
                .collect();
            let categories: Vec<String> =
                (0..n).map(|_| cats[rng.gen_range(0..cats.len())].to_string()).collect();
            let mut triplets = Vec::new();
            for s in 0..n {
                for o in 0..n {
                    if s != o && rng.gen_bool(0.5) {
                        triplets.push(Triplet {
                            subject: s,
                            predicate: predicates[rng.gen_range(0..predicates.len())],
                            object: o,
                        });
                    }
                }
            }
            let gt = GroundTruth { boxes, categories, triplets };
            // Noisy predictions: some correct (random score), some junk.
            let mut preds = Vec::new();
            for t in oracle_preds(&gt) {
                if rng.gen_bool(0.7) {
                    let mut t = t;
                    t.combined = rng.gen_range(0.1..1.0);
                    preds.push(t);
                }
            }
            for _ in 0..rng.gen_range(0..4) {
                preds.push(pred(
                    (7, 8),
                    ([0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.05, 0.05]),
                    ("junk a", "junk b"),
                    "below",
                    rng.gen_range(0.1..1.0),
                ));
            }
            preds.sort_by(TripletPrediction::order);
            images.push(EvalImage { preds, gt });
        }

        let k = 4;
        let got = mean_recall_at_k(&images, k, 0.5).unwrap().value;

        // Independent tally: per class, walk every image's top-K matches.
        let mut per_class: HashMap<String, (usize, usize)> = HashMap::new();
        for image in &images {
            let matched = greedy_match(&image.preds, &image.gt, k, 0.5).unwrap();
            for (gi, t) in image.gt.triplets.iter().enumerate() {
                let e = per_class.entry(t.predicate.as_str().to_string()).or_insert((0, 0));
                e.1 += 1;
                if matched.contains(&gi) {
                    e.0 += 1;
                }
            }
        }
        let expect = per_class.values().map(|&(m, t)| m as f64 / t as f64).sum::<f64>()
            / per_class.len() as f64;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn average_precision_reproduces_the_hand_trace() {
        // Single perfect prediction on a single GT.
        assert_eq!(average_precision(&[true], 1), 1.0);
        // Everything below the IoU threshold.
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        // Ranked hit, miss, hit over 2 GT.
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn map_splits_rare_and_common_classes() {
        let gt = simple_gt();
        let perfect = oracle_preds(&gt);
        let images = vec![EvalImage { preds: perfect, gt: simple_gt() }];
        let classes = gt_triplet_classes(&images);
        assert_eq!(classes.len(), 3);
        let report = hico_map(&images, &classes, 10, 0.5).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.evaluated_classes, 3);
        // Every class occurs once, under the rare threshold.
        assert_eq!(report.rare_classes, 3);
        assert_eq!(report.map_rare, 1.0);
        assert!(report.map_nonrare.is_nan());

        // A class absent from GT is skipped, not averaged as zero.
        let mut padded = classes.clone();
        padded.push(("ghost".into(), "inside".into(), "ghost".into()));
        let report2 = hico_map(&images, &padded, 10, 0.5).unwrap();
        assert_eq!(report2.evaluated_classes, 3);
        assert_eq!(report2.map, report.map);
    }

    #[test]
    fn map_counts_misses_against_precision() {
        let gt = GroundTruth {
            boxes: vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]],
            categories: names(&["red circle", "blue square"]),
            triplets: vec![
                Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 },
                Triplet { subject: 1, predicate: Predicate::RightOf, object: 0 },
            ],
        };
        // For class <red circle, left of, blue square>: a hit at rank 1, a
        // boxes-off miss at rank 2 against a second GT in another image.
        let hit = pred(
            (0, 1),
            ([0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]),
            ("red circle", "blue square"),
            "left of",
            0.9,
        );
        let mut miss = hit.clone();
        miss.subject_box = [0.05, 0.05, 0.05, 0.05];
        miss.combined = 0.8;
        let mut second_hit = hit.clone();
        second_hit.combined = 0.7;
        let images = vec![
            EvalImage { preds: vec![hit, miss], gt: gt.clone() },
            EvalImage { preds: vec![second_hit], gt },
        ];
        let class =
            ("red circle".to_string(), "left of".to_string(), "blue square".to_string());
        let report = hico_map(&images, &[class], 10, 0.5).unwrap();
        // Hand trace: ranks (hit, miss, hit) over 2 GT -> 5/6.
        assert!((report.map - 5.0 / 6.0).abs() < 1e-12, "{}", report.map);
    }

    #[test]
    fn selection_capped_and_exhaustive_budgets_agree_when_k_covers_all_pairs() {
        use crate::encoder::EncoderConfig;
        use crate::model::{synthetic_labels, ModelConfig};
        use crate::scenes::{annotate, sample_scene};
        let config = ModelConfig {
            encoder: EncoderConfig { side: 16, patch: 8, dim: 16, layers: 1, heads: 2, mlp_ratio: 2 },
            shared_projection: false,
        };
        let model = Model::new(config, 13).unwrap();
        let labels = synthetic_labels().unwrap();
        let example = annotate(&sample_scene(17, 0.0).unwrap(), 16);
        let n = model.num_tokens();
        let cfg = EvalConfig { graph_constrained: true, ..EvalConfig::default() };

        let via_selection = predict_image(
            &model,
            &example.image,
            labels.objects(),
            labels.predicates(),
            n,
            n * (n - 1),
            &cfg,
        )
        .unwrap();

        // Selection-free oracle: score every ordered token pair directly
        // off the forward tensors with plain loops.
        let full = Selection {
            instances: (0..n).collect(),
            pairs: (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect(),
        };
        let fwd = model
            .forward_with_selection(
                &example.image,
                labels.objects(),
                labels.predicates(),
                &full,
            )
            .unwrap();
        let p = fwd.tape.value(fwd.p);
        let det = fwd.tape.value(fwd.det_logits);
        let rel = fwd.tape.value(fwd.rel_logits);
        let boxes = fwd.tape.value(fwd.boxes);
        let mut oracle = Vec::new();
        for (pi, &(i, j)) in full.pairs.iter().enumerate() {
            let best = |row: &[f32]| {
                let mut b = 0;
                for (q, &v) in row.iter().enumerate().skip(1) {
                    if v > row[b] {
                        b = q;
                    }
                }
                b
            };
            let (bi, bj) = (best(det.row(i)), best(det.row(j)));
            for q in 0..labels.predicates().len() {
                let combined = sigmoid(p.get(i, i) as f64)
                    * sigmoid(det.get(i, bi) as f64)
                    * sigmoid(p.get(j, j) as f64)
                    * sigmoid(det.get(j, bj) as f64)
                    * sigmoid(p.get(i, j) as f64)
                    * sigmoid(rel.get(pi, q) as f64);
                let row_box = |r: usize| {
                    [
                        boxes.get(r, 0) as f64,
                        boxes.get(r, 1) as f64,
                        boxes.get(r, 2) as f64,
                        boxes.get(r, 3) as f64,
                    ]
                };
                oracle.push(pred(
                    (i, j),
                    (row_box(i), row_box(j)),
                    (&labels.objects()[bi], &labels.objects()[bj]),
                    &labels.predicates()[q],
                    combined,
                ));
            }
        }
        oracle.sort_by(|a, b| {
            b.combined
                .total_cmp(&a.combined)
                .then(a.subject_idx.cmp(&b.subject_idx))
                .then(a.object_idx.cmp(&b.object_idx))
        });
        // Keep the best per ordered pair, as the graph constraint does.
        let mut seen = std::collections::HashSet::new();
        oracle.retain(|t| seen.insert((t.subject_idx, t.object_idx)));

        assert_eq!(via_selection.len(), oracle.len());
        for (a, b) in via_selection.iter().zip(&oracle) {
            assert_eq!((a.subject_idx, a.object_idx), (b.subject_idx, b.object_idx));
            assert_eq!(a.predicate, b.predicate);
            assert!((a.combined - b.combined).abs() < 1e-12);
        }

        // And the metric path accepts the predictions end to end.
        let images = vec![EvalImage { preds: via_selection, gt: example.gt }];
        let report = metrics_over(&images, &cfg).unwrap();
        assert_eq!(report.images, 1);
        for w in report.recall.windows(2) {
            assert!(w[0].1 <= w[1].1, "recall must not fall with K");
        }
    }

    #[test]
    fn ground_truth_as_predictions_scores_perfectly() {
        let images: Vec<EvalImage> = (0..4)
            .map(|s| {
                let gt = {
                    use crate::scenes::{annotate, sample_scene};
                    annotate(&sample_scene(100 + s, 0.0).unwrap(), 16).gt
                };
                EvalImage { preds: oracle_preds(&gt), gt }
            })
            .collect();
        // Dense scenes can carry dozens of triplets; give the recall
        // budget room to cover the largest image.
        let kmax = images.iter().map(|i| i.gt.triplets.len()).max().unwrap().max(1);
        let config = EvalConfig { k_values: vec![kmax], ..EvalConfig::default() };
        let report = metrics_over(&images, &config).unwrap();
        for &(k, r) in &report.recall {
            assert_eq!(r, 1.0, "R@{k}");
        }
        for &(k, mr) in &report.mean_recall {
            assert_eq!(mr, 1.0, "mR@{k}");
        }
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn config_validation_rejects_malformed_budgets() {
        let ok = EvalConfig::default();
        ok.validate().unwrap();
        let bad =
            |f: &dyn Fn(&mut EvalConfig)| {
                let mut c = ok.clone();
                f(&mut c);
                c.validate().unwrap_err()
            };
        assert_eq!(bad(&|c| c.k_values = vec![]).exit_code(), 1);
        assert_eq!(bad(&|c| c.k_values = vec![5, 5]).exit_code(), 1);
        assert_eq!(bad(&|c| c.k_values = vec![0, 5]).exit_code(), 1);
        assert_eq!(bad(&|c| c.iou_threshold = 1.0).exit_code(), 1);
        assert_eq!(bad(&|c| c.per_pair_cap = 0).exit_code(), 1);
    }
}
