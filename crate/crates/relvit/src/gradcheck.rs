//! Directional gradient verification: compares the analytic directional
//! derivative from a backward pass against a central finite difference of
//! the same loss.
//!
//! The loss is re-evaluated from scratch at perturbed parameter values, so
//! the caller supplies a context (usually a [`Model`](crate::model::Model))
//! plus two closures: one exposing its parameter store for perturbation and
//! one evaluating the loss and its gradient for the probed parameter. Any
//! discrete choices inside the loss (pair selection, instance matching)
//! must be held fixed by the closure, otherwise the finite difference
//! measures a different function on each side of the step.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Analytic vs numeric directional derivative of a scalar loss along
/// `direction` in the coordinates of parameter `id`.
///
/// `eval` returns the loss value and dloss/dparam for `id` at the current
/// parameter values; the gradient is only used at the center point. The
/// numeric side is (L(θ+h·d) − L(θ−h·d)) / 2h with the perturbation done in
/// 64-bit and rounded once into the 32-bit store. On return the parameter
/// holds its original bits.
pub fn directional<C, S, F>(
    ctx: &mut C,
    store: S,
    id: ParamId,
    direction: &Matrix,
    h: f64,
    mut eval: F,
) -> Result<(f64, f64)>
where
    S: Fn(&mut C) -> &mut ParamStore,
    F: FnMut(&C) -> Result<(f64, Matrix)>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside [1e-4, 1e-2]; smaller drowns in f32 \
             rounding, larger in curvature"
        )));
    }
    let original = store(ctx).value(id).clone();
    if direction.shape() != original.shape() {
        return Err(Error::Contract(format!(
            "direction shape {:?} does not match parameter shape {:?}",
            direction.shape(),
            original.shape()
        )));
    }

    let (_, grad) = eval(ctx)?;
    if grad.shape() != original.shape() {
        return Err(Error::Contract(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            original.shape()
        )));
    }
    let analytic: f64 = grad
        .data()
        .iter()
        .zip(direction.data())
        .map(|(&g, &d)| g as f64 * d as f64)
        .sum();

    let mut probe = |sign: f64, ctx: &mut C| -> Result<f64> {
        let mut shifted = original.clone();
        for (v, &d) in shifted.data_mut().iter_mut().zip(direction.data()) {
            *v = (*v as f64 + sign * h * d as f64) as f32;
        }
        store(ctx).set_value(id, shifted)?;
        Ok(eval(ctx)?.0)
    };
    let plus = probe(1.0, ctx);
    let minus = probe(-1.0, ctx);
    store(ctx).set_value(id, original)?;
    let numeric = (plus? - minus?) / (2.0 * h);
    Ok((analytic, numeric))
}

/// Relative disagreement between the two derivatives, floored so that
/// near-zero directions compare on an absolute scale.
///
/// The floor reflects what a central difference of a 32-bit loss can
/// resolve: each evaluation carries a few ulps of rounding (roughly 1e-6
/// for losses of order ten), so over a 2h ≈ 1e-2 baseline the numeric side
/// is only trustworthy down to about 1e-3. Differences below that are
/// treated as noise rather than amplified into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(2e-2);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::image_loss_matched;
    use crate::model::{synthetic_labels, Model, ModelConfig};
    use crate::params::ParamGroup;
    use crate::scenes::{annotate, sample_scene};
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tiny model advanced a few dozen optimizer steps so every parameter
    /// group sits at a scale where the loss is locally near-linear.
    fn warmed_up_model(config: ModelConfig, labels: &crate::loss::LabelSpace) -> Model {
        use crate::checkpoint::TrainState;
        use crate::train::{train_step, TrainConfig};
        let mut state = TrainState::fresh(config, 21).unwrap();
        let cfg = TrainConfig { model: config, m: 3, k: 4, ..TrainConfig::default() };
        let batch: Vec<_> =
            (40..43).map(|s| annotate(&sample_scene(s, 0.0).unwrap(), 16)).collect();
        for _ in 0..60 {
            train_step(&mut state, &batch, labels, &cfg, 1e-3, 1e-3).unwrap();
        }
        state.model
    }

    /// Store with one 1x3 parameter and a sum-of-squares loss.
    fn quadratic_store() -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let theta = Matrix::from_vec(1, 3, vec![0.5, -1.25, 2.0]).unwrap();
        let id = store.add("theta", ParamGroup::Body, theta).unwrap();
        (store, id)
    }

    fn quadratic_eval(store: &ParamStore, id: ParamId) -> Result<(f64, Matrix)> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = binding.var(id);
        let sq = tape.mul(x, x)?;
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).get(0, 0) as f64, grads.of(x).clone()))
    }

    #[test]
    fn quadratic_loss_matches_its_closed_form() {
        let (mut store, id) = quadratic_store();
        let theta = store.value(id).clone();
        for axis in 0..3 {
            let mut dir = Matrix::zeros(1, 3);
            dir.set(0, axis, 1.0);
            let (analytic, numeric) =
                directional(&mut store, |s| s, id, &dir, 1e-2, |s| quadratic_eval(s, id))
                    .unwrap();
            let expect = 2.0 * theta.get(0, axis) as f64;
            assert!((analytic - expect).abs() < 1e-6, "axis {axis}: {analytic} vs {expect}");
            assert!(
                relative_error(analytic, numeric) < 1e-2,
                "axis {axis}: analytic {analytic} numeric {numeric}"
            );
        }
        // The probe restores the original parameter bits.
        assert_eq!(store.value(id), &theta);
    }

    #[test]
    fn step_size_outside_the_trustworthy_band_is_rejected() {
        let (mut store, id) = quadratic_store();
        let dir = Matrix::zeros(1, 3);
        for h in [1e-5, 0.5] {
            let err = directional(&mut store, |s| s, id, &dir, h, |s| quadratic_eval(s, id))
                .unwrap_err();
            assert_eq!(err.exit_code(), 1, "h = {h}");
        }
    }

    #[test]
    fn unreachable_parameter_has_zero_derivative_on_both_sides() {
        let (mut store, used) = quadratic_store();
        let spare = store
            .add("spare", ParamGroup::Body, Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap())
            .unwrap();
        let dir = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let (analytic, numeric) =
            directional(&mut store, |s| s, spare, &dir, 1e-3, |s| {
                let (loss, _) = quadratic_eval(s, used)?;
                // Gradient of the loss w.r.t. the spare parameter.
                let mut tape = Tape::new();
                let binding = s.bind(&mut tape);
                let x = binding.var(used);
                let sq = tape.mul(x, x)?;
                let l = tape.sum_all(sq);
                let grads = tape.backward(l)?;
                let _ = loss;
                Ok((tape.value(l).get(0, 0) as f64, grads.of(binding.var(spare)).clone()))
            })
            .unwrap();
        assert_eq!(analytic, 0.0);
        assert!(numeric.abs() <= 1e-3 * 1e-3, "numeric {numeric}");
    }

    #[test]
    fn full_model_loss_agrees_with_finite_differences_in_thirty_directions() {
        let config = ModelConfig {
            encoder: crate::encoder::EncoderConfig {
                side: 16,
                patch: 8,
                dim: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            shared_projection: false,
        };
        let labels = synthetic_labels().unwrap();
        let example = annotate(&sample_scene(33, 0.0).unwrap(), 16);

        // At freshly initialized weights the query embeddings have norms of
        // a few 1e-3, so the cosine similarity is violently nonlinear at any
        // step size the 32-bit contract allows. A short warmup run moves
        // every parameter group to a representative scale first; the check
        // then probes the model as it actually exists during training.
        let mut model = warmed_up_model(config, &labels);

        // Freeze every non-differentiable choice at the center point: the
        // pair selection, the instance matching, and the detached score
        // targets (the analytic gradient never flows through any of them).
        let (fwd, _, matching) = model.training_loss(&example, &labels, 3, 4).unwrap();
        let selection = fwd.selection.clone();
        let targets = crate::loss::score_targets(&fwd.tape, fwd.det_logits, fwd.rel_logits);
        drop(fwd);

        let ids: Vec<ParamId> = model.store.ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut failures = Vec::new();
        for trial in 0..30 {
            let id = ids[rng.gen_range(0..ids.len())];
            let (rows, cols) = model.store.value(id).shape();
            let dir = Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            )
            .unwrap();

            let (analytic, numeric) = directional(
                &mut model,
                |m| &mut m.store,
                id,
                &dir,
                5e-3,
                |m| {
                    let mut f = m.forward_with_selection(
                        &example.image,
                        labels.objects(),
                        labels.predicates(),
                        &selection,
                    )?;
                    let parts = image_loss_matched(
                        &mut f.tape,
                        &f.selection,
                        &matching,
                        f.p,
                        f.det_logits,
                        f.rel_logits,
                        f.boxes,
                        &example.gt,
                        &labels,
                        Some(&targets),
                    )?;
                    let grads = f.tape.backward(parts.total)?;
                    let loss = f.tape.value(parts.total).get(0, 0) as f64;
                    Ok((loss, grads.of(f.binding.var(id)).clone()))
                },
            )
            .unwrap();

            let rel = relative_error(analytic, numeric);
            if rel >= 5e-2 {
                failures.push(format!(
                    "trial {trial} param {:?}: analytic {analytic:.6e} numeric {numeric:.6e} \
                     rel {rel:.3}",
                    model.store.name(id)
                ));
            }
        }
        assert!(
            failures.len() <= 1,
            "{} of 30 directions disagree:\n{}",
            failures.len(),
            failures.join("\n")
        );
    }
}

