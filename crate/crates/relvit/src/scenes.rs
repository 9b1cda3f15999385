//! Synthetic relational scenes: sampling, rasterization, ground-truth
//! derivation, augmentation, and predicate-frequency rebalancing.
//!
//! Scenes are symbolic (a few shapes with attributes and positions); pixels
//! are produced on demand by a deterministic painter's-algorithm rasterizer.
//! Relationship ground truth is *derived* from closed-form rules over the
//! boxes, so it can be re-checked at any point and an independent
//! implementation of the rules serves as a test oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::center_to_corners;
use crate::error::{Error, Result};

/// Margin (in normalized units) a center must clear for a directional
/// spatial predicate to hold.
pub const SPATIAL_MARGIN: f64 = 0.05;
/// Containment slack for "inside"/"contains".
pub const INSIDE_MARGIN: f64 = 0.01;
/// Box-area ratio for "larger than".
pub const AREA_RATIO: f64 = 1.5;
/// Minimum pairwise center distance between scene objects.
pub const MIN_CENTER_DIST: f64 = 0.05;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Data(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }
    };
}

string_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

string_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
});

string_enum!(SizeClass {
    Small => "small",
    Large => "large",
});

string_enum!(Predicate {
    LeftOf => "left of",
    RightOf => "right of",
    Above => "above",
    Below => "below",
    Inside => "inside",
    Contains => "contains",
    SameColorAs => "same color as",
    LargerThan => "larger than",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.8, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.1],
            Color::Blue => [0.1, 0.1, 0.8],
            Color::Yellow => [0.8, 0.8, 0.1],
        }
    }
}

impl SizeClass {
    /// Half-extent range for this size class.
    pub fn half_extent_range(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (0.05, 0.08),
            SizeClass::Large => (0.11, 0.16),
        }
    }
}

impl Predicate {
    /// Predicates whose truth depends on left/right orientation.
    pub fn flip_sensitive(self) -> bool {
        matches!(self, Predicate::LeftOf | Predicate::RightOf)
    }

    /// Label after a horizontal mirror.
    pub fn mirrored(self) -> Predicate {
        match self {
            Predicate::LeftOf => Predicate::RightOf,
            Predicate::RightOf => Predicate::LeftOf,
            other => other,
        }
    }
}

pub const BACKGROUND: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl SceneObject {
    /// Center-form box [cx, cy, w, h].
    pub fn center_box(&self) -> [f64; 4] {
        [self.cx, self.cy, 2.0 * self.hx, 2.0 * self.hy]
    }

    pub fn corners(&self) -> [f64; 4] {
        center_to_corners(self.center_box())
    }

    pub fn area(&self) -> f64 {
        4.0 * self.hx * self.hy
    }

    /// Compositional category string, e.g. "red circle".
    pub fn category(&self) -> String {
        format!("{} {}", self.color.as_str(), self.shape.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

/// One relationship instance: (subject index, predicate, object index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Center-form boxes, row-aligned with `categories`.
    pub boxes: Vec<[f64; 4]>,
    pub categories: Vec<String>,
    pub triplets: Vec<Triplet>,
}

/// Square RGB image, row-major, channel-last, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let base = (row * self.side + col) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedExample {
    pub spec: SceneSpec,
    pub image: Image,
    pub gt: GroundTruth,
}

/// Does `predicate(a, b)` hold? Callers guarantee a and b are distinct
/// objects; the rules themselves are pure box/attribute comparisons.
pub fn predicate_holds(predicate: Predicate, a: &SceneObject, b: &SceneObject) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let v_overlap = ca[3].min(cb[3]) - ca[1].max(cb[1]);
    let h_overlap = ca[2].min(cb[2]) - ca[0].max(cb[0]);
    match predicate {
        Predicate::LeftOf => a.cx + SPATIAL_MARGIN < b.cx && v_overlap >= 0.0,
        Predicate::RightOf => b.cx + SPATIAL_MARGIN < a.cx && v_overlap >= 0.0,
        Predicate::Above => a.cy + SPATIAL_MARGIN < b.cy && h_overlap >= 0.0,
        Predicate::Below => b.cy + SPATIAL_MARGIN < a.cy && h_overlap >= 0.0,
        Predicate::Inside => {
            ca[0] >= cb[0] + INSIDE_MARGIN
                && ca[1] >= cb[1] + INSIDE_MARGIN
                && ca[2] <= cb[2] - INSIDE_MARGIN
                && ca[3] <= cb[3] - INSIDE_MARGIN
        }
        Predicate::Contains => predicate_holds(Predicate::Inside, b, a),
        Predicate::SameColorAs => a.color == b.color,
        Predicate::LargerThan => a.area() > AREA_RATIO * b.area(),
    }
}

/// All predicate instances over all ordered object pairs, in deterministic
/// (subject, object, predicate) order.
pub fn derive_relations(spec: &SceneSpec) -> Vec<Triplet> {
    let mut out = Vec::new();
    for i in 0..spec.objects.len() {
        for j in 0..spec.objects.len() {
            if i == j {
                continue;
            }
            for &p in Predicate::ALL {
                if predicate_holds(p, &spec.objects[i], &spec.objects[j]) {
                    out.push(Triplet { subject: i, predicate: p, object: j });
                }
            }
        }
    }
    out
}

/// Draw an index in 0..n with Zipf-like weights 1/(i+1)^skew. skew = 0 is
/// uniform; larger skew concentrates mass on low indices.
fn zipf_index(rng: &mut ChaCha8Rng, n: usize, skew: f64) -> usize {
    let weights: Vec<f64> = (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(skew)).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i;
        }
        draw -= w;
    }
    n - 1
}

/// Fraction of small objects that get placed inside an existing large object
/// (when one exists), so containment predicates occur often enough to learn.
const NESTED_PLACEMENT_PROB: f64 = 0.15;

/// Deterministically sample a scene: 2-5 objects with Zipf-weighted
/// attributes, boxes inside the unit square, centers pairwise at least
/// [`MIN_CENTER_DIST`] apart. Objects are stored (and therefore painted)
/// in decreasing area order so nested objects stay visible.
pub fn sample_scene(seed: u64, skew: f64) -> Result<SceneSpec> {
    if !(skew >= 0.0) {
        return Err(Error::Usage(format!("attribute skew must be >= 0, got {skew}")));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5usize);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    while objects.len() < n {
        let mut placed = false;
        for _attempt in 0..1000 {
            let shape = Shape::ALL[zipf_index(&mut rng, Shape::ALL.len(), skew)];
            let color = Color::ALL[zipf_index(&mut rng, Color::ALL.len(), skew)];
            let size = SizeClass::ALL[zipf_index(&mut rng, SizeClass::ALL.len(), skew)];
            let (lo, hi) = size.half_extent_range();
            let hx = rng.gen_range(lo..hi);
            let hy = hx;

            let hosts: Vec<usize> = objects
                .iter()
                .enumerate()
                .filter(|(_, o)| {
                    o.size == SizeClass::Large
                        && o.hx - hx - INSIDE_MARGIN > 0.0
                        && o.hy - hy - INSIDE_MARGIN > 0.0
                })
                .map(|(i, _)| i)
                .collect();
            let nest = size == SizeClass::Small
                && !hosts.is_empty()
                && rng.gen_bool(NESTED_PLACEMENT_PROB);
            let (cx, cy) = if nest {
                let host = &objects[hosts[rng.gen_range(0..hosts.len())]];
                let rx = host.hx - hx - INSIDE_MARGIN;
                let ry = host.hy - hy - INSIDE_MARGIN;
                (
                    rng.gen_range(host.cx - rx..host.cx + rx),
                    rng.gen_range(host.cy - ry..host.cy + ry),
                )
            } else {
                (rng.gen_range(hx..1.0 - hx), rng.gen_range(hy..1.0 - hy))
            };

            let far_enough = objects
                .iter()
                .all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() >= MIN_CENTER_DIST);
            if far_enough {
                objects.push(SceneObject { shape, color, size, cx, cy, hx, hy });
                placed = true;
                break;
            }
        }
        if !placed {
            // Practically unreachable; settle for fewer objects but never
            // drop below the 2-object minimum.
            if objects.len() >= 2 {
                break;
            }
        }
    }
    // Large first so the painter keeps small/nested objects on top.
    objects.sort_by(|a, b| b.area().partial_cmp(&a.area()).unwrap());
    Ok(SceneSpec { seed, objects })
}

/// Paint the scene: later objects over earlier, hard edges, grey background.
/// Pure function of (spec, side).
pub fn rasterize(spec: &SceneSpec, side: usize) -> Image {
    let mut data = vec![BACKGROUND; side * side * 3];
    for obj in &spec.objects {
        let rgb = obj.color.rgb();
        let [x0, y0, x1, y1] = obj.corners();
        // Pixel bounding range (pixel centers at (j + 0.5) / side).
        let j0 = ((x0 * side as f64 - 0.5).ceil().max(0.0)) as usize;
        let j1 = ((x1 * side as f64 - 0.5).floor().min(side as f64 - 1.0)).max(0.0) as usize;
        let i0 = ((y0 * side as f64 - 0.5).ceil().max(0.0)) as usize;
        let i1 = ((y1 * side as f64 - 0.5).floor().min(side as f64 - 1.0)).max(0.0) as usize;
        for i in i0..=i1.min(side - 1) {
            let py = (i as f64 + 0.5) / side as f64;
            for j in j0..=j1.min(side - 1) {
                let px = (j as f64 + 0.5) / side as f64;
                let covered = match obj.shape {
                    Shape::Square => px >= x0 && px <= x1 && py >= y0 && py <= y1,
                    Shape::Circle => {
                        let dx = (px - obj.cx) / obj.hx;
                        let dy = (py - obj.cy) / obj.hy;
                        dx * dx + dy * dy <= 1.0
                    }
                    Shape::Triangle => {
                        // Upward triangle: apex at top-center, base at bottom.
                        let t = (py - y0) / (y1 - y0);
                        if !(0.0..=1.0).contains(&t) {
                            false
                        } else {
                            (px - obj.cx).abs() <= t * obj.hx
                        }
                    }
                };
                if covered {
                    let base = (i * side + j) * 3;
                    data[base..base + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Image { side, data }
}

/// Rasterize and derive ground truth for a spec.
pub fn annotate(spec: &SceneSpec, side: usize) -> AnnotatedExample {
    let gt = GroundTruth {
        boxes: spec.objects.iter().map(|o| o.center_box()).collect(),
        categories: spec.objects.iter().map(|o| o.category()).collect(),
        triplets: derive_relations(spec),
    };
    AnnotatedExample { spec: spec.clone(), image: rasterize(spec, side), gt }
}

/// Deterministic core of [`augment`]: resize by factor `f` anchored at the
/// top-left corner (the freed area stays background), then optionally mirror
/// horizontally, swapping left/right predicate labels.
pub fn apply_resize_flip(example: &AnnotatedExample, f: f64, flip: bool) -> AnnotatedExample {
    let mut spec = example.spec.clone();
    for o in &mut spec.objects {
        o.cx *= f;
        o.cy *= f;
        o.hx *= f;
        o.hy *= f;
        if flip {
            o.cx = 1.0 - o.cx;
        }
    }
    let triplets = example
        .gt
        .triplets
        .iter()
        .map(|t| Triplet {
            subject: t.subject,
            predicate: if flip { t.predicate.mirrored() } else { t.predicate },
            object: t.object,
        })
        .collect();
    let gt = GroundTruth {
        boxes: spec.objects.iter().map(|o| o.center_box()).collect(),
        categories: example.gt.categories.clone(),
        triplets,
    };
    AnnotatedExample { image: rasterize(&spec, example.image.side), spec, gt }
}

/// Training augmentation: random resize in [0.5, 1.0] with padding; a
/// horizontal flip happens only when the ground truth contains no
/// flip-sensitive predicate. Triplet labels are preserved (boxes move with
/// the image).
pub fn augment(example: &AnnotatedExample, rng: &mut ChaCha8Rng) -> AnnotatedExample {
    let f = rng.gen_range(0.5..=1.0);
    let has_spatial = example.gt.triplets.iter().any(|t| t.predicate.flip_sensitive());
    let flip = !has_spatial && rng.gen_bool(0.5);
    apply_resize_flip(example, f, flip)
}

/// Per-predicate empirical frequencies (count / total triplets) over any
/// triplet collection. Errors when there are no triplets at all.
pub fn triplet_frequencies<'a>(
    triplets: impl IntoIterator<Item = &'a Triplet>,
) -> Result<[f64; 8]> {
    let mut counts = [0usize; 8];
    let mut total = 0usize;
    for t in triplets {
        counts[t.predicate.index()] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Contract(
            "cannot compute predicate frequencies over an empty corpus".into(),
        ));
    }
    let mut freqs = [0.0f64; 8];
    for (f, c) in freqs.iter_mut().zip(counts.iter()) {
        *f = *c as f64 / total as f64;
    }
    Ok(freqs)
}

/// Per-predicate empirical frequencies (count / total triplets) over a
/// corpus. Errors on a corpus with no triplets at all.
pub fn predicate_frequencies(examples: &[AnnotatedExample]) -> Result<[f64; 8]> {
    triplet_frequencies(examples.iter().flat_map(|ex| &ex.gt.triplets))
}

/// Keep each triplet independently with probability
/// `1 - min(freq(predicate), 0.95)`. Boxes and categories are untouched.
pub fn drop_triplets(
    example: &AnnotatedExample,
    freqs: &[f64; 8],
    rng: &mut ChaCha8Rng,
) -> AnnotatedExample {
    let mut out = example.clone();
    out.gt.triplets.retain(|t| {
        let keep_prob = 1.0 - freqs[t.predicate.index()].min(0.95);
        rng.gen_bool(keep_prob)
    });
    out
}

/// Frequency-based rebalancing over a whole corpus: frequencies are computed
/// on the input, then every triplet is independently kept with probability
/// `1 - min(freq, 0.95)`.
pub fn rebalance(examples: &[AnnotatedExample], rng: &mut ChaCha8Rng) -> Result<Vec<AnnotatedExample>> {
    let freqs = predicate_frequencies(examples)?;
    Ok(examples.iter().map(|ex| drop_triplets(ex, &freqs, rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn obj(shape: Shape, color: Color, cx: f64, cy: f64, h: f64) -> SceneObject {
        let size = if h < 0.1 { SizeClass::Small } else { SizeClass::Large };
        SceneObject { shape, color, size, cx, cy, hx: h, hy: h }
    }

    #[test]
    fn sampling_is_deterministic() {
        for seed in [0u64, 1, 42, 987654321] {
            assert_eq!(sample_scene(seed, 1.0).unwrap(), sample_scene(seed, 1.0).unwrap());
        }
        assert_ne!(sample_scene(1, 1.0).unwrap(), sample_scene(2, 1.0).unwrap());
    }

    #[test]
    fn sampled_scenes_respect_invariants() {
        for seed in 0..500u64 {
            let spec = sample_scene(seed, 1.2).unwrap();
            assert!((2..=5).contains(&spec.objects.len()), "seed {seed}");
            for o in &spec.objects {
                let [x0, y0, x1, y1] = o.corners();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0, "seed {seed}");
            }
            for i in 0..spec.objects.len() {
                for j in i + 1..spec.objects.len() {
                    let (a, b) = (&spec.objects[i], &spec.objects[j]);
                    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                    assert!(d >= MIN_CENTER_DIST, "seed {seed}: centers {d} apart");
                }
            }
        }
    }

    #[test]
    fn zero_skew_attributes_are_uniform() {
        let mut shape_counts = [0usize; 3];
        let mut color_counts = [0usize; 4];
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let spec = sample_scene(seed, 0.0).unwrap();
            for o in &spec.objects {
                shape_counts[o.shape.index()] += 1;
                color_counts[o.color.index()] += 1;
                total += 1;
            }
        }
        let check = |counts: &[usize], p: f64| {
            let mean = total as f64 * p;
            let sigma = (total as f64 * p * (1.0 - p)).sqrt();
            for (i, &c) in counts.iter().enumerate() {
                assert!(
                    (c as f64 - mean).abs() < 3.0 * sigma,
                    "bucket {i}: count {c} vs mean {mean:.0} (sigma {sigma:.0})"
                );
            }
        };
        check(&shape_counts, 1.0 / 3.0);
        check(&color_counts, 1.0 / 4.0);
    }

    #[test]
    fn positive_skew_prefers_early_attributes() {
        let mut color_counts = [0usize; 4];
        for seed in 0..4000u64 {
            let spec = sample_scene(seed, 1.5).unwrap();
            for o in &spec.objects {
                color_counts[o.color.index()] += 1;
            }
        }
        assert!(color_counts[0] > 2 * color_counts[3], "{color_counts:?}");
    }

    #[test]
    fn rasterize_empty_spec_is_background() {
        let spec = SceneSpec { seed: 0, objects: vec![] };
        let img = rasterize(&spec, 16);
        assert!(img.data.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn rasterize_red_circle_geometry() {
        let spec = SceneSpec {
            seed: 0,
            objects: vec![obj(Shape::Circle, Color::Red, 0.5, 0.5, 0.25)],
        };
        let side = 64;
        let img = rasterize(&spec, side);
        for i in 0..side {
            for j in 0..side {
                let px = (j as f64 + 0.5) / side as f64;
                let py = (i as f64 + 0.5) / side as f64;
                let inside = ((px - 0.5).powi(2) + (py - 0.5).powi(2)).sqrt() <= 0.25;
                let got = img.pixel(i, j);
                if inside {
                    assert_eq!(got, [0.8, 0.1, 0.1], "pixel ({i},{j}) should be red");
                } else {
                    assert_eq!(got, [BACKGROUND; 3], "pixel ({i},{j}) should be background");
                }
            }
        }
    }

    #[test]
    fn rasterize_is_reproducible_and_painters_order_holds() {
        let spec = sample_scene(7, 0.5).unwrap();
        assert_eq!(rasterize(&spec, 64), rasterize(&spec, 64));

        // A small object over a large one at the same center: the small
        // object's color must win at the shared center pixel.
        let spec = SceneSpec {
            seed: 0,
            objects: vec![
                obj(Shape::Square, Color::Blue, 0.5, 0.5, 0.3),
                obj(Shape::Square, Color::Red, 0.5, 0.5, 0.1),
            ],
        };
        let img = rasterize(&spec, 32);
        assert_eq!(img.pixel(16, 16), [0.8, 0.1, 0.1]);
    }

    #[test]
    fn directional_duals_hand_case() {
        let a = obj(Shape::Circle, Color::Red, 0.2, 0.5, 0.08);
        let b = obj(Shape::Square, Color::Blue, 0.8, 0.5, 0.08);
        let spec = SceneSpec { seed: 0, objects: vec![a, b] };
        let rels = derive_relations(&spec);
        assert!(rels.contains(&Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 }));
        assert!(rels.contains(&Triplet { subject: 1, predicate: Predicate::RightOf, object: 0 }));
        assert!(!rels.iter().any(|t| t.predicate == Predicate::SameColorAs));
    }

    #[test]
    fn same_color_is_symmetric() {
        let spec = SceneSpec {
            seed: 0,
            objects: vec![
                obj(Shape::Circle, Color::Red, 0.3, 0.3, 0.06),
                obj(Shape::Triangle, Color::Red, 0.7, 0.7, 0.06),
            ],
        };
        let rels = derive_relations(&spec);
        assert!(rels
            .contains(&Triplet { subject: 0, predicate: Predicate::SameColorAs, object: 1 }));
        assert!(rels
            .contains(&Triplet { subject: 1, predicate: Predicate::SameColorAs, object: 0 }));
    }

    /// Independent rule implementation: evaluates every predicate straight
    /// from corner coordinates with separately written inequalities.
    fn oracle_relations(spec: &SceneSpec) -> Vec<Triplet> {
        let mut out = Vec::new();
        let n = spec.objects.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let a = &spec.objects[i];
                let b = &spec.objects[j];
                let (ax0, ay0, ax1, ay1) =
                    (a.cx - a.hx, a.cy - a.hy, a.cx + a.hx, a.cy + a.hy);
                let (bx0, by0, bx1, by1) =
                    (b.cx - b.hx, b.cy - b.hy, b.cx + b.hx, b.cy + b.hy);
                let v_olap = ay1.min(by1) >= ay0.max(by0);
                let h_olap = ax1.min(bx1) >= ax0.max(bx0);
                let area_a = (ax1 - ax0) * (ay1 - ay0);
                let area_b = (bx1 - bx0) * (by1 - by0);
                let mut push = |p: Predicate| {
                    out.push(Triplet { subject: i, predicate: p, object: j })
                };
                if b.cx - a.cx > SPATIAL_MARGIN && v_olap {
                    push(Predicate::LeftOf);
                }
                if a.cx - b.cx > SPATIAL_MARGIN && v_olap {
                    push(Predicate::RightOf);
                }
                if b.cy - a.cy > SPATIAL_MARGIN && h_olap {
                    push(Predicate::Above);
                }
                if a.cy - b.cy > SPATIAL_MARGIN && h_olap {
                    push(Predicate::Below);
                }
                if ax0 - bx0 >= INSIDE_MARGIN
                    && ay0 - by0 >= INSIDE_MARGIN
                    && bx1 - ax1 >= INSIDE_MARGIN
                    && by1 - ay1 >= INSIDE_MARGIN
                {
                    push(Predicate::Inside);
                }
                if bx0 - ax0 >= INSIDE_MARGIN
                    && by0 - ay0 >= INSIDE_MARGIN
                    && ax1 - bx1 >= INSIDE_MARGIN
                    && ay1 - by1 >= INSIDE_MARGIN
                {
                    push(Predicate::Contains);
                }
                if a.color == b.color {
                    push(Predicate::SameColorAs);
                }
                if area_a / area_b > AREA_RATIO {
                    push(Predicate::LargerThan);
                }
            }
        }
        out
    }

    #[test]
    fn derived_relations_match_independent_oracle() {
        use std::collections::HashSet;
        for seed in 0..300u64 {
            let spec = sample_scene(seed, 1.0).unwrap();
            let got: HashSet<Triplet> = derive_relations(&spec).into_iter().collect();
            let want: HashSet<Triplet> = oracle_relations(&spec).into_iter().collect();
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn duals_always_paired() {
        for seed in 0..200u64 {
            let spec = sample_scene(seed, 0.8).unwrap();
            let rels = derive_relations(&spec);
            for t in &rels {
                let dual = match t.predicate {
                    Predicate::LeftOf => Some(Predicate::RightOf),
                    Predicate::RightOf => Some(Predicate::LeftOf),
                    Predicate::Above => Some(Predicate::Below),
                    Predicate::Below => Some(Predicate::Above),
                    Predicate::Inside => Some(Predicate::Contains),
                    Predicate::Contains => Some(Predicate::Inside),
                    _ => None,
                };
                if let Some(d) = dual {
                    assert!(
                        rels.contains(&Triplet {
                            subject: t.object,
                            predicate: d,
                            object: t.subject
                        }),
                        "seed {seed}: {t:?} lacks dual"
                    );
                }
            }
        }
    }

    #[test]
    fn resize_identity_and_half() {
        let spec = sample_scene(3, 0.5).unwrap();
        let ex = annotate(&spec, 32);
        let same = apply_resize_flip(&ex, 1.0, false);
        assert_eq!(same.image, ex.image);
        assert_eq!(same.gt.boxes, ex.gt.boxes);

        let half = apply_resize_flip(&ex, 0.5, false);
        for (orig, scaled) in ex.gt.boxes.iter().zip(half.gt.boxes.iter()) {
            for c in 0..4 {
                assert!((scaled[c] - 0.5 * orig[c]).abs() < 1e-12);
            }
        }
        // The bottom-right quadrant is untouched padding.
        let img = &half.image;
        for i in 20..32 {
            for j in 20..32 {
                assert_eq!(img.pixel(i, j), [BACKGROUND; 3]);
            }
        }
    }

    #[test]
    fn flip_swaps_left_right_labels() {
        let a = obj(Shape::Circle, Color::Red, 0.2, 0.5, 0.08);
        let b = obj(Shape::Square, Color::Blue, 0.8, 0.5, 0.08);
        let spec = SceneSpec { seed: 0, objects: vec![a, b] };
        let ex = annotate(&spec, 16);
        let flipped = apply_resize_flip(&ex, 1.0, true);
        assert!(flipped
            .gt
            .triplets
            .contains(&Triplet { subject: 0, predicate: Predicate::RightOf, object: 1 }));
        assert!(!flipped
            .gt
            .triplets
            .iter()
            .any(|t| t.subject == 0 && t.predicate == Predicate::LeftOf));
        // The mirrored labels still hold on the mirrored boxes.
        for t in &flipped.gt.triplets {
            assert!(predicate_holds(
                t.predicate,
                &flipped.spec.objects[t.subject],
                &flipped.spec.objects[t.object]
            ));
        }
    }

    #[test]
    fn augment_never_flips_spatial_scenes() {
        let a = obj(Shape::Circle, Color::Red, 0.2, 0.5, 0.08);
        let b = obj(Shape::Square, Color::Blue, 0.8, 0.5, 0.08);
        let spec = SceneSpec { seed: 0, objects: vec![a, b] };
        let ex = annotate(&spec, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let aug = augment(&ex, &mut rng);
            // A flip would re-order the centers and swap the label.
            assert!(aug.spec.objects[0].cx < aug.spec.objects[1].cx);
            assert!(aug
                .gt
                .triplets
                .contains(&Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 }));
        }
    }

    #[test]
    fn augment_scales_boxes_with_image() {
        let spec = sample_scene(11, 0.5).unwrap();
        let ex = annotate(&spec, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let aug = augment(&ex, &mut rng);
            let f = aug.gt.boxes[0][2] / ex.gt.boxes[0][2];
            assert!((0.5..=1.0).contains(&f), "scale factor {f}");
            for (orig, scaled) in ex.gt.boxes.iter().zip(aug.gt.boxes.iter()) {
                assert!((scaled[2] - f * orig[2]).abs() < 1e-9);
                assert!((scaled[3] - f * orig[3]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rebalance_keep_probability_caps_at_five_percent() {
        // Corpus where one predicate has frequency 1.0.
        let a = obj(Shape::Circle, Color::Red, 0.3, 0.3, 0.06);
        let b = obj(Shape::Circle, Color::Red, 0.7, 0.7, 0.06);
        let spec = SceneSpec { seed: 0, objects: vec![a, b] };
        let mut ex = annotate(&spec, 16);
        ex.gt.triplets = vec![
            Triplet { subject: 0, predicate: Predicate::SameColorAs, object: 1 };
            10_000
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = rebalance(std::slice::from_ref(&ex), &mut rng).unwrap();
        let kept = out[0].gt.triplets.len() as f64;
        let sigma = (10_000.0f64 * 0.05 * 0.95).sqrt();
        assert!(
            (kept - 500.0).abs() < 3.0 * sigma,
            "kept {kept} of 10000, expected about 500"
        );
    }

    #[test]
    fn rebalance_even_frequencies_keep_half() {
        let a = obj(Shape::Circle, Color::Red, 0.3, 0.3, 0.06);
        let b = obj(Shape::Circle, Color::Red, 0.7, 0.7, 0.06);
        let spec = SceneSpec { seed: 0, objects: vec![a, b] };
        let mut ex = annotate(&spec, 16);
        let mut triplets = Vec::new();
        for _ in 0..5000 {
            triplets.push(Triplet { subject: 0, predicate: Predicate::SameColorAs, object: 1 });
            triplets.push(Triplet { subject: 0, predicate: Predicate::LeftOf, object: 1 });
        }
        ex.gt.triplets = triplets;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = rebalance(std::slice::from_ref(&ex), &mut rng).unwrap();
        let kept_same = out[0]
            .gt
            .triplets
            .iter()
            .filter(|t| t.predicate == Predicate::SameColorAs)
            .count() as f64;
        let sigma = (5000.0f64 * 0.5 * 0.5).sqrt();
        assert!((kept_same - 2500.0).abs() < 3.0 * sigma, "kept {kept_same} of 5000");
    }

    #[test]
    fn unseen_predicate_is_always_kept() {
        let a = obj(Shape::Circle, Color::Red, 0.3, 0.3, 0.06);
        let b = obj(Shape::Circle, Color::Red, 0.7, 0.7, 0.06);
        let spec = SceneSpec { seed: 0, objects: vec![a, b] };
        let mut ex = annotate(&spec, 16);
        ex.gt.triplets =
            vec![Triplet { subject: 0, predicate: Predicate::Above, object: 1 }; 100];
        // Frequencies from elsewhere never saw "above".
        let mut freqs = [0.5f64; 8];
        freqs[Predicate::Above.index()] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = drop_triplets(&ex, &freqs, &mut rng);
        assert_eq!(out.gt.triplets.len(), 100);
    }

    #[test]
    fn empty_corpus_rebalance_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(rebalance(&[], &mut rng).is_err());
        let spec = SceneSpec {
            seed: 0,
            objects: vec![obj(Shape::Circle, Color::Red, 0.3, 0.3, 0.06)],
        };
        let mut ex = annotate(&spec, 8);
        ex.gt.triplets.clear();
        assert!(rebalance(&[ex], &mut rng).is_err());
    }

    #[test]
    fn rebalance_flattens_skewed_corpora() {
        let scenes: Vec<AnnotatedExample> = (0..10_000u64)
            .map(|seed| annotate(&sample_scene(seed, 1.5).unwrap(), 8))
            .collect();
        let before = predicate_frequencies(&scenes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let after_examples = rebalance(&scenes, &mut rng).unwrap();
        let after = predicate_frequencies(&after_examples).unwrap();
        let ratio = |f: &[f64; 8]| {
            let max = f.iter().cloned().fold(0.0f64, f64::max);
            let min = f.iter().cloned().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
            max / min
        };
        assert!(
            ratio(&after) < ratio(&before),
            "imbalance should shrink: before {:.2}, after {:.2}",
            ratio(&before),
            ratio(&after)
        );
    }

    #[test]
    fn predicate_round_trip_strings() {
        for &p in Predicate::ALL {
            assert_eq!(Predicate::parse(p.as_str()).unwrap(), p);
        }
        assert!(Predicate::parse("overlaps").is_err());
    }
}
