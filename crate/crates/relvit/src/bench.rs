//! Latency sweep over the pair budget k: how much slower is relationship
//! prediction than running the same network in detection-only mode
//! (self-pairs only, k = 0)?
//!
//! Protocol: batch size 1, query embeddings computed once up front and
//! excluded from the timed region, strictly single-threaded, median over a
//! configured trial count. The timed region spans image submission to the
//! ranked prediction list being ready.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{apply_graph_constraint, exhaustive_score, EvalConfig};
use crate::model::Model;
use crate::scenes::Image;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Pair budgets to sweep; 0 means detection-only.
    pub k_values: Vec<usize>,
    pub trials: usize,
    /// Instances kept by round-one selection.
    pub m: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { k_values: vec![0, 4, 16, 64], trials: 30, m: 16 }
    }
}

impl BenchConfig {
    pub fn validate(&self, num_tokens: usize) -> Result<()> {
        if self.trials < 5 {
            return Err(Error::Usage(format!(
                "medians over {} trials are unstable; use at least 5",
                self.trials
            )));
        }
        if self.k_values.is_empty() {
            return Err(Error::Usage("at least one pair budget k is required".into()));
        }
        if self.m == 0 || self.m > num_tokens {
            return Err(Error::Usage(format!(
                "selection size M={} must lie in 1..={num_tokens}",
                self.m
            )));
        }
        let cap = self.m * (self.m - 1);
        if let Some(&k) = self.k_values.iter().find(|&&k| k > cap) {
            return Err(Error::Usage(format!(
                "pair budget k={k} exceeds M(M-1)={cap} for M={}",
                self.m
            )));
        }
        Ok(())
    }
}

/// One row of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchEntry {
    pub k: usize,
    /// Pairs actually scored after selection: min(k, M(M-1)).
    pub pairs: usize,
    pub trials: usize,
    pub median_seconds: f64,
    /// Detection-only median divided by this entry's median; 1.0 by
    /// definition at k = 0.
    pub relative_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub m: usize,
    /// Token count N of the benchmarked model.
    pub num_tokens: usize,
    /// Median latency of the detection-only mode (the k = 0 baseline).
    pub baseline_seconds: f64,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    /// Plot-ready CSV; any plotting tool takes it from here.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,pairs,trials,median_seconds,relative_speed,reduction\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.k,
                e.pairs,
                e.trials,
                e.median_seconds,
                e.relative_speed,
                pair_reduction(self.num_tokens, self.m, e.k),
            ));
        }
        out
    }
}

/// Middle of the sorted samples; the mean of the two middle values for
/// even counts. Empty input yields NaN.
pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Fraction of the exhaustive N x N pair grid that selection avoids
/// embedding: 1 - (k + M)/N², counting the M always-embedded self-pairs.
/// At production scale (N = 3600 tokens, M = 512, k = 16386) this is the
/// headline ~99.9% (precisely 99.87%) reduction.
pub fn pair_reduction(num_tokens: usize, m: usize, k: usize) -> f64 {
    if num_tokens == 0 {
        return 0.0;
    }
    let exhaustive = (num_tokens * num_tokens) as f64;
    1.0 - (((k + m) as f64) / exhaustive).min(1.0)
}

fn timed_prediction(
    model: &Model,
    image: &Image,
    object_values: &Matrix,
    predicate_values: &Matrix,
    object_names: &[String],
    predicate_names: &[String],
    m: usize,
    k: usize,
    eval: &EvalConfig,
) -> Result<f64> {
    let start = Instant::now();
    let fwd = model.forward_with_query_values(image, object_values, predicate_values, m, k)?;
    let preds = exhaustive_score(
        &fwd.selection,
        fwd.tape.value(fwd.p),
        fwd.tape.value(fwd.det_logits),
        fwd.tape.value(fwd.rel_logits),
        fwd.tape.value(fwd.boxes),
        object_names,
        predicate_names,
    )?;
    let ready = apply_graph_constraint(preds, eval.graph_constrained, eval.per_pair_cap);
    let elapsed = start.elapsed().as_secs_f64();
    drop(ready);
    Ok(elapsed)
}

/// Runs the sweep on one image. The detection-only baseline is always
/// measured, whether or not 0 appears in the k list.
pub fn run(
    model: &Model,
    image: &Image,
    object_queries: &[String],
    predicate_queries: &[String],
    config: &BenchConfig,
) -> Result<BenchReport> {
    config.validate(model.num_tokens())?;
    let object_values =
        model.embedder.embed_set_values(&model.store, &model.vocab, object_queries)?;
    let predicate_values =
        model.embedder.embed_set_values(&model.store, &model.vocab, predicate_queries)?;
    let eval = EvalConfig::default();

    let measure = |k: usize| -> Result<f64> {
        // One untimed warm-up run settles allocator and cache state.
        timed_prediction(
            model,
            image,
            &object_values,
            &predicate_values,
            object_queries,
            predicate_queries,
            config.m,
            k,
            &eval,
        )?;
        let mut samples = Vec::with_capacity(config.trials);
        for _ in 0..config.trials {
            samples.push(timed_prediction(
                model,
                image,
                &object_values,
                &predicate_values,
                object_queries,
                predicate_queries,
                config.m,
                k,
                &eval,
            )?);
        }
        Ok(median(&samples))
    };

    let baseline_seconds = measure(0)?;
    let mut entries = Vec::with_capacity(config.k_values.len());
    for &k in &config.k_values {
        let pairs = k.min(config.m * (config.m - 1));
        let (median_seconds, relative_speed) = if k == 0 {
            (baseline_seconds, 1.0)
        } else {
            let med = measure(k)?;
            let rel = baseline_seconds / med;
            if !(rel > 0.0 && rel <= 1.5) {
                return Err(Error::Numeric(format!(
                    "relative speed {rel:.3} at k={k} is outside (0, 1.5]; \
                     timing measurements look broken"
                )));
            }
            (med, rel)
        };
        entries.push(BenchEntry {
            k,
            pairs,
            trials: config.trials,
            median_seconds,
            relative_speed,
        });
    }
    Ok(BenchReport { m: config.m, num_tokens: model.num_tokens(), baseline_seconds, entries })
}
