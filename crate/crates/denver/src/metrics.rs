//! Segmentation metric suite: confusion-matrix metrics, clDice and the
//! normalized surface distance, aggregated over annotated frames.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DenverError, Result};
use crate::imaging_io::{distance_to_set, skeletonize};

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub jaccard: f64,
    pub dice: f64,
    pub acc: f64,
    pub sn: f64,
    pub sp: f64,
    pub cl_dice: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub annotated_frames: Vec<usize>,
    pub per_frame: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
    pub std: FrameMetrics,
}

fn check_shapes(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(DenverError::Input(format!(
            "metric shape mismatch {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Ratio with the empty-denominator convention: 1 if numerator context is
/// also empty, else 0.
fn safe_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub jaccard: f64,
    pub dice: f64,
    pub acc: f64,
    pub sn: f64,
    pub sp: f64,
}

pub fn confusion_metrics(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<ConfusionMetrics> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (p, g) in pred.iter().zip(gt.iter()) {
        match (*p > 0.5, *g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = (tp + fp + tn + fn_) as f64;
    Ok(ConfusionMetrics {
        jaccard: safe_ratio(tp as f64, (tp + fp + fn_) as f64),
        dice: safe_ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64),
        acc: (tp + tn) as f64 / n,
        sn: safe_ratio(tp as f64, (tp + fn_) as f64),
        sp: safe_ratio(tn as f64, (tn + fp) as f64),
    })
}

/// Skeleton-overlap metric: harmonic mean of topology precision and
/// sensitivity.
pub fn cl_dice(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sk_pred = skeletonize(pred);
    let sk_gt = skeletonize(gt);
    let inter = |sk: &Array2<f32>, m: &Array2<f32>| -> (f64, f64) {
        let mut hits = 0.0;
        let mut total = 0.0;
        for (s, v) in sk.iter().zip(m.iter()) {
            if *s > 0.5 {
                total += 1.0;
                if *v > 0.5 {
                    hits += 1.0;
                }
            }
        }
        (hits, total)
    };
    let (tp_hits, tp_total) = inter(&sk_pred, gt);
    let (ts_hits, ts_total) = inter(&sk_gt, pred);
    let tprec = safe_ratio(tp_hits, tp_total);
    let tsens = safe_ratio(ts_hits, ts_total);
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Boundary = mask minus its erosion by the 3x3 cross.
pub fn boundary(mask: &Array2<f32>) -> Array2<f32> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if mask[[y as usize, x as usize]] <= 0.5 {
                continue;
            }
            let mut eroded = true;
            for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    eroded = false; // border pixels are boundary
                    break;
                }
                if mask[[ny as usize, nx as usize]] <= 0.5 {
                    eroded = false;
                    break;
                }
            }
            if !eroded {
                out[[y as usize, x as usize]] = 1.0;
            }
        }
    }
    out
}

/// Normalized surface distance at tolerance `tau` pixels. Symmetric in its
/// arguments. Both masks empty -> 1, exactly one empty -> 0.
pub fn nsd(pred: &Array2<f32>, gt: &Array2<f32>, tau: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if tau <= 0.0 {
        return Err(DenverError::Config("nsd tolerance must be positive".into()));
    }
    let pred_empty = pred.iter().all(|v| *v <= 0.5);
    let gt_empty = gt.iter().all(|v| *v <= 0.5);
    if pred_empty && gt_empty {
        return Ok(1.0);
    }
    if pred_empty || gt_empty {
        return Ok(0.0);
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let d_to_bg = distance_to_set(&bg);
    let d_to_bp = distance_to_set(&bp);
    let mut close = 0.0f64;
    let mut total = 0.0f64;
    for (b, d) in bp.iter().zip(d_to_bg.iter()) {
        if *b > 0.5 {
            total += 1.0;
            if (*d as f64) <= tau {
                close += 1.0;
            }
        }
    }
    for (b, d) in bg.iter().zip(d_to_bp.iter()) {
        if *b > 0.5 {
            total += 1.0;
            if (*d as f64) <= tau {
                close += 1.0;
            }
        }
    }
    Ok(close / total)
}

/// Peak signal-to-noise ratio in dB for intensities in [0,1]. Identical
/// images give +inf.
pub fn psnr(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    check_shapes(a, b)?;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

pub fn frame_metrics(pred: &Array2<f32>, gt: &Array2<f32>, tau: f64) -> Result<FrameMetrics> {
    let c = confusion_metrics(pred, gt)?;
    Ok(FrameMetrics {
        jaccard: c.jaccard,
        dice: c.dice,
        acc: c.acc,
        sn: c.sn,
        sp: c.sp,
        cl_dice: cl_dice(pred, gt)?,
        nsd: nsd(pred, gt, tau)?,
    })
}

/// Evaluate predictions against ground truth on annotated frames only,
/// reporting per-frame metrics and mean +- std.
pub fn evaluate_sequence(
    preds: &[Array2<f32>],
    gts: &[Array2<f32>],
    annotated_frames: &[usize],
    tau: f64,
) -> Result<MetricReport> {
    let mut per_frame = Vec::with_capacity(annotated_frames.len());
    for &t in annotated_frames {
        if t >= preds.len() || t >= gts.len() {
            return Err(DenverError::Input(format!(
                "annotated frame {} has no prediction or ground truth",
                t
            )));
        }
        per_frame.push(frame_metrics(&preds[t], &gts[t], tau)?);
    }
    let fields = |m: &FrameMetrics| [m.jaccard, m.dice, m.acc, m.sn, m.sp, m.cl_dice, m.nsd];
    let n = per_frame.len().max(1) as f64;
    let mut mean = [0.0f64; 7];
    for m in &per_frame {
        for (acc, v) in mean.iter_mut().zip(fields(m)) {
            *acc += v / n;
        }
    }
    let mut var = [0.0f64; 7];
    for m in &per_frame {
        for ((acc, v), mu) in var.iter_mut().zip(fields(m)).zip(mean) {
            *acc += (v - mu) * (v - mu) / n;
        }
    }
    let pack = |a: [f64; 7]| FrameMetrics {
        jaccard: a[0],
        dice: a[1],
        acc: a[2],
        sn: a[3],
        sp: a[4],
        cl_dice: a[5],
        nsd: a[6],
    };
    Ok(MetricReport {
        annotated_frames: annotated_frames.to_vec(),
        per_frame,
        mean: pack(mean),
        std: pack(var.map(f64::sqrt)),
    })
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,jaccard,dice,acc,sn,sp,cl_dice,nsd\n");
        for (t, m) in self.annotated_frames.iter().zip(&self.per_frame) {
            s += &format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                t, m.jaccard, m.dice, m.acc, m.sn, m.sp, m.cl_dice, m.nsd
            );
        }
        s += &format!(
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.mean.jaccard,
            self.mean.dice,
            self.mean.acc,
            self.mean.sn,
            self.mean.sp,
            self.mean.cl_dice,
            self.mean.nsd
        );
        s += &format!(
            "std,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.std.jaccard,
            self.std.dice,
            self.std.acc,
            self.std.sn,
            self.std.sp,
            self.std.cl_dice,
            self.std.nsd
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s += &format!(
            "{:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "frame", "clDice", "NSD", "Jaccard", "Dice", "Acc", "Sn", "Sp"
        );
        for (t, m) in self.annotated_frames.iter().zip(&self.per_frame) {
            s += &format!(
                "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                t, m.cl_dice, m.nsd, m.jaccard, m.dice, m.acc, m.sn, m.sp
            );
        }
        s += &format!(
            "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean",
            self.mean.cl_dice,
            self.mean.nsd,
            self.mean.jaccard,
            self.mean.dice,
            self.mean.acc,
            self.mean.sn,
            self.mean.sp
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<f32> {
        let mut m = Array2::zeros((h, w));
        for y in y0..y1 {
            for x in x0..x1 {
                m[[y, x]] = 1.0;
            }
        }
        m
    }

    #[test]
    fn perfect_prediction_all_ones() {
        let m = square(12, 12, 2, 8, 3, 9);
        let c = confusion_metrics(&m, &m).unwrap();
        assert_eq!(
            (c.jaccard, c.dice, c.acc, c.sn, c.sp),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(cl_dice(&m, &m).unwrap(), 1.0);
        assert_eq!(nsd(&m, &m, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks() {
        let a = square(12, 12, 0, 3, 0, 3);
        let b = square(12, 12, 8, 11, 8, 11);
        let c = confusion_metrics(&a, &b).unwrap();
        assert_eq!((c.jaccard, c.dice, c.sn), (0.0, 0.0, 0.0));
    }

    #[test]
    fn overlapping_squares_hand_counts() {
        // two 8x8 squares overlapping in an 8x4 strip
        let a = square(16, 16, 4, 12, 0, 8);
        let b = square(16, 16, 4, 12, 4, 12);
        let c = confusion_metrics(&a, &b).unwrap();
        assert!((c.dice - 0.5).abs() < 1e-12);
        assert!((c.jaccard - 32.0 / 96.0).abs() < 1e-12);
    }

    #[test]
    fn dice_jaccard_identity() {
        let a = square(10, 10, 1, 7, 2, 9);
        let b = square(10, 10, 3, 9, 1, 6);
        let c = confusion_metrics(&a, &b).unwrap();
        assert!((c.dice - 2.0 * c.jaccard / (1.0 + c.jaccard)).abs() < 1e-12);
    }

    #[test]
    fn cldice_penalizes_missing_branch() {
        // T-junction gt; pred misses the vertical branch
        let mut gt = Array2::zeros((21, 21));
        for x in 1..20 {
            for y in 9..12 {
                gt[[y, x]] = 1.0;
            }
        }
        for y in 11..20 {
            for x in 9..12 {
                gt[[y, x]] = 1.0;
            }
        }
        let mut pred = Array2::zeros((21, 21));
        for x in 1..20 {
            for y in 9..12 {
                pred[[y, x]] = 1.0;
            }
        }
        let cd = cl_dice(&pred, &gt).unwrap();
        assert!(cd < 1.0);
        // pred's skeleton lies inside gt, so tprec = 1 and
        // clDice = 2 tsens / (1 + tsens) with tsens read off the skeletons.
        let sk_gt = skeletonize(&gt);
        let (mut hits, mut total) = (0.0f64, 0.0f64);
        for (s, p) in sk_gt.iter().zip(pred.iter()) {
            if *s > 0.5 {
                total += 1.0;
                if *p > 0.5 {
                    hits += 1.0;
                }
            }
        }
        let tsens = hits / total;
        assert!(tsens < 1.0);
        assert!((cd - 2.0 * tsens / (1.0 + tsens)).abs() < 1e-12);
    }

    #[test]
    fn nsd_dilated_within_tolerance() {
        let gt = square(16, 16, 4, 12, 4, 12);
        let pred = square(16, 16, 3, 13, 3, 13); // dilated by 1
        assert_eq!(nsd(&pred, &gt, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn nsd_shifted_brute_force() {
        let gt = square(32, 32, 4, 12, 4, 12);
        let pred = square(32, 32, 4, 12, 14, 22); // shifted 10 px
        let v = nsd(&pred, &gt, 2.0).unwrap();
        assert!(v < 1.0);
        // brute-force boundary distances
        let bp = boundary(&pred);
        let bg = boundary(&gt);
        let dist = |p: (usize, usize), set: &Array2<f32>| -> f64 {
            let mut best = f64::INFINITY;
            for y in 0..32 {
                for x in 0..32 {
                    if set[[y, x]] > 0.5 {
                        let dy = y as f64 - p.0 as f64;
                        let dx = x as f64 - p.1 as f64;
                        best = best.min((dy * dy + dx * dx).sqrt());
                    }
                }
            }
            best
        };
        let mut close = 0.0;
        let mut total = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                if bp[[y, x]] > 0.5 {
                    total += 1.0;
                    if dist((y, x), &bg) <= 2.0 {
                        close += 1.0;
                    }
                }
                if bg[[y, x]] > 0.5 {
                    total += 1.0;
                    if dist((y, x), &bp) <= 2.0 {
                        close += 1.0;
                    }
                }
            }
        }
        assert!((v - close / total).abs() < 1e-12);
    }

    #[test]
    fn nsd_empty_conventions_and_symmetry() {
        let empty = Array2::zeros((8, 8));
        let full = square(8, 8, 2, 6, 2, 6);
        assert_eq!(nsd(&empty, &empty, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&empty, &full, 2.0).unwrap(), 0.0);
        assert_eq!(nsd(&full, &empty, 2.0).unwrap(), 0.0);
        let other = square(8, 8, 1, 5, 3, 7);
        assert_eq!(
            nsd(&full, &other, 1.0).unwrap(),
            nsd(&other, &full, 1.0).unwrap()
        );
    }

    #[test]
    fn psnr_known_values() {
        let a = Array2::from_elem((10, 10), 0.5f32);
        let mut b = a.clone();
        assert_eq!(psnr(&a, &b).unwrap(), f64::INFINITY);
        b += 0.1; // mse = 0.01 -> 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((5, 5));
        assert!(confusion_metrics(&a, &b).is_err());
        assert!(cl_dice(&a, &b).is_err());
        assert!(nsd(&a, &b, 2.0).is_err());
    }

    #[test]
    fn sequence_aggregation() {
        let gt = square(10, 10, 2, 8, 2, 8);
        let p1 = gt.clone();
        let p2 = square(10, 10, 2, 8, 4, 10);
        let report = evaluate_sequence(&[p1.clone(), p2], &[gt.clone(), gt.clone()], &[0, 1], 2.0)
            .unwrap();
        assert_eq!(report.per_frame.len(), 2);
        let expect_mean = (report.per_frame[0].dice + report.per_frame[1].dice) / 2.0;
        assert!((report.mean.dice - expect_mean).abs() < 1e-12);
        // single annotated frame: mean equals that frame, std 0
        let single = evaluate_sequence(&[p1], &[gt], &[0], 2.0).unwrap();
        assert_eq!(single.mean.dice, single.per_frame[0].dice);
        assert_eq!(single.std.dice, 0.0);
        // missing GT index
        assert!(evaluate_sequence(&[], &[], &[0], 2.0).is_err());
    }
}
