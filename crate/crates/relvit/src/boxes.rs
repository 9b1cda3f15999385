//! Axis-aligned box geometry in normalized image coordinates.
//!
//! Boxes travel in two layouts: center form `[cx, cy, w, h]` (what the box
//! head predicts and what the L1 loss compares) and corner form
//! `[x0, y0, x1, y1]` (what overlap measures need). The plain f64 functions
//! here serve matching and evaluation; [`giou_column`] builds the same
//! computation out of tape ops so the box loss is differentiable.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub fn center_to_corners(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn corners_to_center(b: [f64; 4]) -> [f64; 4] {
    let [x0, y0, x1, y1] = b;
    [0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0]
}

fn check_corners(b: [f64; 4], what: &str) -> Result<()> {
    let [x0, y0, x1, y1] = b;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Numeric(format!(
            "{what} box [{x0}, {y0}, {x1}, {y1}] has non-positive extent"
        )));
    }
    Ok(())
}

/// Intersection-over-union of two corner-form boxes with positive area.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_corners(a, "first")?;
    check_corners(b, "second")?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    Ok(inter / union)
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union. Ranges over [-1, 1]; equals IoU when the hull is tight.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let iou = iou_corners(a, b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let hull_w = a[2].max(b[2]) - a[0].min(b[0]);
    let hull_h = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = hull_w * hull_h;
    Ok(iou - (hull - union) / hull)
}

/// Sum of absolute coordinate differences between two center-form boxes.
pub fn l1_center(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Differentiable per-row generalized IoU between two `n x 4` center-form
/// box matrices, returned as an `n x 1` column. Rows pair up one-to-one.
///
/// Box widths/heights are clamped to a small positive floor so degenerate
/// rows cannot produce divisions by zero mid-training.
pub fn giou_column(tape: &mut Tape, pred_cw: Var, gt_cw: Var) -> Result<Var> {
    let n = tape.value(pred_cw).rows();
    if tape.value(pred_cw).cols() != 4 || tape.value(gt_cw).shape() != (n, 4) {
        return Err(Error::Contract(format!(
            "giou_column wants matching n x 4 inputs, got {:?} and {:?}",
            tape.value(pred_cw).shape(),
            tape.value(gt_cw).shape()
        )));
    }

    // Split one center-form matrix into corner/extent columns.
    let split = |tape: &mut Tape, cw: Var| -> Result<([Var; 4], Var, Var)> {
        let cx = tape.slice_cols(cw, 0, 1)?;
        let cy = tape.slice_cols(cw, 1, 1)?;
        let w_raw = tape.slice_cols(cw, 2, 1)?;
        let h_raw = tape.slice_cols(cw, 3, 1)?;
        let w = tape.clamp_min(w_raw, 1e-6);
        let h = tape.clamp_min(h_raw, 1e-6);
        let half_w = tape.affine(w, 0.5, 0.0);
        let half_h = tape.affine(h, 0.5, 0.0);
        let x0 = tape.sub(cx, half_w)?;
        let x1 = tape.add(cx, half_w)?;
        let y0 = tape.sub(cy, half_h)?;
        let y1 = tape.add(cy, half_h)?;
        Ok(([x0, y0, x1, y1], w, h))
    };

    let ([ax0, ay0, ax1, ay1], aw, ah) = split(tape, pred_cw)?;
    let ([bx0, by0, bx1, by1], bw, bh) = split(tape, gt_cw)?;

    let ix0 = tape.maximum(ax0, bx0)?;
    let iy0 = tape.maximum(ay0, by0)?;
    let ix1 = tape.minimum(ax1, bx1)?;
    let iy1 = tape.minimum(ay1, by1)?;
    let iw_raw = tape.sub(ix1, ix0)?;
    let ih_raw = tape.sub(iy1, iy0)?;
    let iw = tape.clamp_min(iw_raw, 0.0);
    let ih = tape.clamp_min(ih_raw, 0.0);
    let inter = tape.mul(iw, ih)?;

    let area_a = tape.mul(aw, ah)?;
    let area_b = tape.mul(bw, bh)?;
    let areas = tape.add(area_a, area_b)?;
    let union = tape.sub(areas, inter)?;

    let iou = tape.div(inter, union)?;

    let hx0 = tape.minimum(ax0, bx0)?;
    let hy0 = tape.minimum(ay0, by0)?;
    let hx1 = tape.maximum(ax1, bx1)?;
    let hy1 = tape.maximum(ay1, by1)?;
    let hw = tape.sub(hx1, hx0)?;
    let hh = tape.sub(hy1, hy0)?;
    let hull = tape.mul(hw, hh)?;

    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    tape.sub(iou, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_boxes_score_one() {
        let b = [0.2, 0.3, 0.6, 0.9];
        assert!((iou_corners(b, b).unwrap() - 1.0).abs() < 1e-12);
        assert!((giou_corners(b, b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_hand_value() {
        // Unit squares one unit apart: IoU 0, union 2, hull 3x1,
        // so gIoU = 0 - (3 - 2)/3 = -1/3.
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [2.0, 0.0, 3.0, 1.0];
        assert_eq!(iou_corners(a, b).unwrap(), 0.0);
        assert!((giou_corners(a, b).unwrap() + 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn partial_overlap_hand_value() {
        // [0,0,2,2] vs [1,1,3,3]: inter 1, union 7, hull 9.
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 1.0, 3.0, 3.0];
        assert!((iou_corners(a, b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        let expected = 1.0 / 7.0 - 2.0 / 9.0;
        assert!((giou_corners(a, b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn giou_random_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let random_box = |rng: &mut ChaCha8Rng| {
            let x0: f64 = rng.gen_range(0.0..0.8);
            let y0: f64 = rng.gen_range(0.0..0.8);
            [x0, y0, x0 + rng.gen_range(0.05..0.5), y0 + rng.gen_range(0.05..0.5)]
        };
        for _ in 0..10_000 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let g_ab = giou_corners(a, b).unwrap();
            let g_ba = giou_corners(b, a).unwrap();
            assert!((g_ab - g_ba).abs() < 1e-12, "not symmetric");
            assert!((-1.0..=1.0).contains(&g_ab), "out of range: {g_ab}");
            assert!(g_ab <= iou_corners(a, b).unwrap() + 1e-12, "giou must not exceed iou");
        }
    }

    #[test]
    fn degenerate_box_is_a_numeric_error() {
        let good = [0.0, 0.0, 1.0, 1.0];
        let flat = [0.5, 0.5, 0.5, 0.9];
        let err = iou_corners(good, flat).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(giou_corners(flat, good).is_err());
    }

    #[test]
    fn center_corner_round_trip() {
        let cw = [0.4, 0.6, 0.2, 0.3];
        let back = corners_to_center(center_to_corners(cw));
        for (a, b) in cw.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_giou_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 16;
        let mut pred = Matrix::zeros(n, 4);
        let mut gt = Matrix::zeros(n, 4);
        let mut expected = Vec::new();
        for r in 0..n {
            let mk = |rng: &mut ChaCha8Rng| {
                [
                    rng.gen_range(0.2f32..0.8),
                    rng.gen_range(0.2f32..0.8),
                    rng.gen_range(0.05f32..0.4),
                    rng.gen_range(0.05f32..0.4),
                ]
            };
            let p = mk(&mut rng);
            let g = mk(&mut rng);
            pred.row_mut(r).copy_from_slice(&p);
            gt.row_mut(r).copy_from_slice(&g);
            let pc = center_to_corners(p.map(|v| v as f64));
            let gc = center_to_corners(g.map(|v| v as f64));
            expected.push(giou_corners(pc, gc).unwrap());
        }
        let mut tape = Tape::new();
        let pv = tape.constant(pred);
        let gv = tape.constant(gt);
        let col = giou_column(&mut tape, pv, gv).unwrap();
        for r in 0..n {
            let got = tape.value(col).get(r, 0) as f64;
            assert!(
                (got - expected[r]).abs() < 1e-5,
                "row {r}: tape {got} vs reference {}",
                expected[r]
            );
        }
    }

    #[test]
    fn tape_giou_gradient_check() {
        // Boxes chosen with margins so the finite-difference step cannot
        // cross a min/max kink.
        let pred0 =
            Matrix::from_vec(2, 4, vec![0.40, 0.40, 0.30, 0.30, 0.70, 0.25, 0.20, 0.18]).unwrap();
        let gt =
            Matrix::from_vec(2, 4, vec![0.50, 0.45, 0.28, 0.26, 0.30, 0.60, 0.22, 0.24]).unwrap();

        let eval = |pred: &Matrix| -> f64 {
            let mut tape = Tape::new();
            let pv = tape.constant(pred.clone());
            let gv = tape.constant(gt.clone());
            let col = giou_column(&mut tape, pv, gv).unwrap();
            let s = tape.sum_all(col);
            tape.value(s).get(0, 0) as f64
        };

        let mut tape = Tape::new();
        let pv = tape.param(0, pred0.clone());
        let gv = tape.constant(gt.clone());
        let col = giou_column(&mut tape, pv, gv).unwrap();
        let s = tape.sum_all(col);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.of(pv).clone();

        let h = 2e-3f32;
        for idx in 0..pred0.len() {
            let mut p = pred0.clone();
            p.data_mut()[idx] += h;
            let fp = eval(&p);
            p.data_mut()[idx] -= 2.0 * h;
            let fm = eval(&p);
            let numeric = (fp - fm) / (2.0 * h as f64);
            let a = analytic.data()[idx] as f64;
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            assert!(
                ((a - numeric) / denom).abs() < 2e-2,
                "coord {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
