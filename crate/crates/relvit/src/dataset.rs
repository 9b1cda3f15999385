//! Scene corpora on disk: newline-delimited JSON, one symbolic scene per
//! line with its relationship triplets stored alongside. No pixels are ever
//! written; images are rasterized when an example is drawn.
//!
//! Records are validated on load: object counts, box bounds, center
//! spacing, and — crucially — that every stored triplet actually satisfies
//! its predicate rule on the stored boxes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{
    derive_relations, predicate_holds, rasterize, sample_scene, triplet_frequencies,
    AnnotatedExample, GroundTruth, Predicate, SceneObject, SceneSpec, Triplet, MIN_CENTER_DIST,
};

/// One serialized scene. Triplets are `[subject, predicate, object]` with
/// indices into `objects`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub triplets: Vec<(usize, Predicate, usize)>,
}

impl SceneRecord {
    /// Record for a sampled scene with its full derived relation set.
    pub fn from_spec(spec: &SceneSpec) -> SceneRecord {
        SceneRecord {
            seed: spec.seed,
            objects: spec.objects.clone(),
            triplets: derive_relations(spec)
                .into_iter()
                .map(|t| (t.subject, t.predicate, t.object))
                .collect(),
        }
    }

    /// Checks every invariant and converts to a scene plus ground truth.
    pub fn validate(&self) -> Result<(SceneSpec, GroundTruth)> {
        let seed = self.seed;
        let n = self.objects.len();
        if !(2..=5).contains(&n) {
            return Err(Error::Data(format!(
                "scene {seed}: {n} objects outside the allowed 2..=5"
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.hx > 0.0 && o.hy > 0.0) {
                return Err(Error::Data(format!(
                    "scene {seed}: object {i} has non-positive half-extents"
                )));
            }
            let [x0, y0, x1, y1] = o.corners();
            if x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0 {
                return Err(Error::Data(format!(
                    "scene {seed}: object {i} extends outside the unit square"
                )));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&self.objects[i], &self.objects[j]);
                let dist = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                if dist < MIN_CENTER_DIST {
                    return Err(Error::Data(format!(
                        "scene {seed}: objects {i} and {j} are {dist:.4} apart (minimum {MIN_CENTER_DIST})"
                    )));
                }
            }
        }
        let mut triplets = Vec::with_capacity(self.triplets.len());
        for (idx, &(s, pred, o)) in self.triplets.iter().enumerate() {
            if s >= n || o >= n {
                return Err(Error::Data(format!(
                    "scene {seed}: triplet {idx} references object {} of {n}",
                    s.max(o)
                )));
            }
            if s == o {
                return Err(Error::Data(format!(
                    "scene {seed}: triplet {idx} relates object {s} to itself"
                )));
            }
            if !predicate_holds(pred, &self.objects[s], &self.objects[o]) {
                return Err(Error::Data(format!(
                    "scene {seed}: triplet {idx} ({s} {:?} {o}) does not hold on the stored boxes",
                    pred.as_str()
                )));
            }
            triplets.push(Triplet { subject: s, predicate: pred, object: o });
        }
        let spec = SceneSpec { seed, objects: self.objects.clone() };
        let gt = GroundTruth {
            boxes: spec.objects.iter().map(|o| o.center_box()).collect(),
            categories: spec.objects.iter().map(|o| o.category()).collect(),
            triplets,
        };
        Ok((spec, gt))
    }
}

/// Samples `count` scenes with consecutive seeds from `seed_start`. When
/// `allowed` is given, stored triplets are filtered to those predicates
/// (scenes themselves are unchanged, so some may end up relation-free).
pub fn generate_records(
    seed_start: u64,
    count: usize,
    skew: f64,
    allowed: Option<&[Predicate]>,
) -> Result<Vec<SceneRecord>> {
    (0..count)
        .map(|i| {
            let spec = sample_scene(seed_start + i as u64, skew)?;
            let mut record = SceneRecord::from_spec(&spec);
            if let Some(allowed) = allowed {
                record.triplets.retain(|&(_, p, _)| allowed.contains(&p));
            }
            Ok(record)
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<SceneRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), no + 1), e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// A validated in-memory corpus. Scenes stay symbolic; `example` rasterizes
/// on demand.
pub struct Dataset {
    pub name: String,
    examples: Vec<(SceneSpec, GroundTruth)>,
}

impl Dataset {
    pub fn from_records(name: impl Into<String>, records: &[SceneRecord]) -> Result<Dataset> {
        let examples = records.iter().map(SceneRecord::validate).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { name: name.into(), examples })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let records = read_records(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Dataset::from_records(name, &records)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn spec(&self, idx: usize) -> &SceneSpec {
        &self.examples[idx].0
    }

    pub fn ground_truth(&self, idx: usize) -> &GroundTruth {
        &self.examples[idx].1
    }

    /// Rasterizes scene `idx` at the given resolution, keeping the stored
    /// (possibly filtered) triplets rather than re-deriving them.
    pub fn example(&self, idx: usize, side: usize) -> AnnotatedExample {
        let (spec, gt) = &self.examples[idx];
        AnnotatedExample { spec: spec.clone(), image: rasterize(spec, side), gt: gt.clone() }
    }

    pub fn predicate_frequencies(&self) -> Result<[f64; 8]> {
        triplet_frequencies(self.examples.iter().flat_map(|(_, gt)| &gt.triplets))
    }
}

/// Draws `batch` example handles: each slot picks a dataset by mixture
/// weight, then an example uniformly within it. Returns (dataset index,
/// example index) pairs.
pub fn sample_batch(
    datasets: &[Dataset],
    weights: &[f64],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    if datasets.is_empty() {
        return Err(Error::Usage("mixture needs at least one dataset".into()));
    }
    if datasets.len() != weights.len() {
        return Err(Error::Usage(format!(
            "{} datasets but {} mixture weights",
            datasets.len(),
            weights.len()
        )));
    }
    for (d, &w) in datasets.iter().zip(weights) {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Usage(format!("mixture weight for {:?} must be >= 0, got {w}", d.name)));
        }
        if w > 0.0 && d.is_empty() {
            return Err(Error::Usage(format!(
                "dataset {:?} is empty but has nonzero mixture weight",
                d.name
            )));
        }
    }
    let index = WeightedIndex::new(weights)
        .map_err(|e| Error::Usage(format!("invalid mixture weights: {e}")))?;
    Ok((0..batch)
        .map(|_| {
            let d = index.sample(rng);
            (d, rng.gen_range(0..datasets[d].len()))
        })
        .collect())
}
