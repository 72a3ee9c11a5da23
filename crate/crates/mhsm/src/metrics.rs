//! Evaluation metrics: thresholded confusion metrics, AUC-ROC, Brier score,
//! multi-hazard inventory density, Jaccard overlap of high-susceptibility
//! masks, and zone-wise macro averaging.

use crate::error::{Error, Result};
use crate::grid::{Raster, SamplePoint};

/// Counts of a binary confusion table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(y: &[u8], p: &[f64], threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for (yi, pi) in y.iter().zip(p) {
            let pos = *pi >= threshold;
            match (yi, pos) {
                (1, true) => c.tp += 1,
                (1, false) => c.fn_ += 1,
                (0, true) => c.fp += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Thresholded classification metrics; metrics whose denominator was zero
/// carry value 0 and appear in `undefined`.
#[derive(Debug, Clone)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub undefined: Vec<&'static str>,
}

pub fn confusion_metrics(y: &[u8], p: &[f64], threshold: f64) -> ConfusionMetrics {
    let c = ConfusionCounts::from_predictions(y, p, threshold);
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut undefined = Vec::new();
    let mut ratio = |num: f64, den: f64, name: &'static str| {
        if den == 0.0 {
            undefined.push(name);
            0.0
        } else {
            num / den
        }
    };
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_, "accuracy");
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fn_, "recall");
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_, "f1");
    let fpr = ratio(fp, fp + tn, "fpr");
    ConfusionMetrics {
        accuracy,
        precision,
        recall,
        f1,
        fpr,
        undefined,
    }
}

/// AUC-ROC in the Mann-Whitney formulation: the probability a random
/// positive scores above a random negative, ties counting one half.
pub fn auc_roc(y: &[u8], p: &[f64]) -> Result<f64> {
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUC undefined: only one class present".into(),
        ));
    }
    // average ranks with tie correction
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if y[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC-ROC by trapezoidal integration of the ROC curve; algebraically equal
/// to [`auc_roc`] and kept as an independent cross-check route.
pub fn auc_roc_trapezoid(y: &[u8], p: &[f64]) -> Result<f64> {
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUC undefined: only one class present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if y[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
        i = j + 1;
    }
    Ok(area / (n_pos as f64 * n_neg as f64))
}

/// Mean squared difference between predicted probabilities and outcomes.
pub fn brier(y: &[u8], p: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    y.iter()
        .zip(p)
        .map(|(yi, pi)| (pi - *yi as f64).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

/// Percentage of hazard-occurrence points per bivariate class, a 5x5 matrix
/// indexed [flood_class][landslide_class]. Points on nodata cells are
/// excluded from both numerator and denominator.
pub fn mh_density(points: &[SamplePoint], classes: &Raster) -> [[f64; 5]; 5] {
    let mut counts = [[0usize; 5]; 5];
    let mut total = 0usize;
    for p in points {
        if p.label_flood == 0 && p.label_landslide == 0 {
            continue;
        }
        let Some(v) = classes.value_at(p.x, p.y) else {
            continue;
        };
        if classes.is_nodata(v) {
            continue;
        }
        let code = v as usize;
        counts[code / 5][code % 5] += 1;
        total += 1;
    }
    let mut out = [[0.0f64; 5]; 5];
    if total > 0 {
        for i in 0..5 {
            for j in 0..5 {
                out[i][j] = 100.0 * counts[i][j] as f64 / total as f64;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct JaccardHigh {
    pub flood: f64,
    pub landslide: f64,
    /// Set per hazard when both masks were empty (value forced to 1).
    pub flood_empty: bool,
    pub landslide_empty: bool,
}

/// Jaccard overlap of the combined High + Very High classes between two
/// bivariate class rasters, reported per hazard.
pub fn jaccard_high(a: &Raster, b: &Raster) -> Result<JaccardHigh> {
    if !a.same_grid(b) {
        return Err(Error::Validation(
            "class rasters do not share one grid".into(),
        ));
    }
    // per-hazard class of a bivariate code: flood = code / 5, landslide = code % 5
    let hazard_class = |code: usize, h: usize| if h == 0 { code / 5 } else { code % 5 };
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (va, vb) in a.values.iter().zip(&b.values) {
        let ca = (!a.is_nodata(*va)).then_some(*va as usize);
        let cb = (!b.is_nodata(*vb)).then_some(*vb as usize);
        for h in 0..2 {
            let in_a = ca.is_some_and(|c| hazard_class(c, h) >= 3);
            let in_b = cb.is_some_and(|c| hazard_class(c, h) >= 3);
            if in_a && in_b {
                inter[h] += 1;
            }
            if in_a || in_b {
                union[h] += 1;
            }
        }
    }
    let score = |h: usize| {
        if union[h] == 0 {
            (1.0, true)
        } else {
            (inter[h] as f64 / union[h] as f64, false)
        }
    };
    let (flood, flood_empty) = score(0);
    let (landslide, landslide_empty) = score(1);
    Ok(JaccardHigh {
        flood,
        landslide,
        flood_empty,
        landslide_empty,
    })
}

/// Unweighted mean over zones, skipping undefined entries. Returns the mean
/// and the skip count; None when every zone was undefined.
pub fn macro_average(values: &[Option<f64>]) -> Option<(f64, usize)> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return None;
    }
    let skipped = values.len() - defined.len();
    Some((defined.iter().sum::<f64>() / defined.len() as f64, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn perfect_predictions() {
        let y = [1, 0, 1, 0];
        let p = [0.9, 0.1, 0.8, 0.2];
        let m = confusion_metrics(&y, &p, 0.5);
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1, m.fpr),
            (1.0, 1.0, 1.0, 1.0, 0.0)
        );
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn all_negative_predictions_flag_precision() {
        let y = [1, 0, 1, 0];
        let p = [0.1; 4];
        let m = confusion_metrics(&y, &p, 0.5);
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.contains(&"precision"));
        assert_eq!(m.recall, 0.0);
    }

    #[test]
    fn hand_counted_case() {
        // TP=3, FP=1, FN=1, TN=5
        let y = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let p = [0.9, 0.8, 0.7, 0.2, 0.6, 0.1, 0.1, 0.1, 0.1, 0.1];
        let m = confusion_metrics(&y, &p, 0.5);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
        assert!((m.f1 - 0.75).abs() < 1e-12);
        assert!((m.accuracy - 0.8).abs() < 1e-12);
    }

    #[test]
    fn auc_simple_cases() {
        assert_eq!(auc_roc(&[0, 1], &[0.2, 0.8]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0, 1, 0, 1], &[0.5; 4]).unwrap(), 0.5);
        // two pos-neg pairs: (0.3 vs 0.4) loses, (0.9 vs 0.4) wins
        assert_eq!(auc_roc(&[0, 1, 1], &[0.4, 0.3, 0.9]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert!(auc_roc(&[1, 1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn auc_routes_agree() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = 30 + rng.below(50);
            let y: Vec<u8> = (0..n).map(|_| (rng.uniform() < 0.4) as u8).collect();
            if y.iter().all(|&v| v == 0) || y.iter().all(|&v| v == 1) {
                continue;
            }
            // quantized scores force ties
            let p: Vec<f64> = (0..n)
                .map(|_| (rng.uniform() * 8.0).round() / 8.0)
                .collect();
            let a = auc_roc(&y, &p).unwrap();
            let b = auc_roc_trapezoid(&y, &p).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn brier_cases() {
        assert_eq!(brier(&[1, 0], &[1.0, 0.0]), 0.0);
        assert_eq!(brier(&[1, 0, 1, 0], &[0.5; 4]), 0.25);
        assert!((brier(&[1], &[0.8]) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn brier_label_flip_symmetry() {
        let mut rng = Rng::new(5);
        let y: Vec<u8> = (0..40).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let p: Vec<f64> = (0..40).map(|_| rng.uniform()).collect();
        let yf: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let pf: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        assert!((brier(&y, &p) - brier(&yf, &pf)).abs() < 1e-12);
    }

    fn class_raster(codes: &[f64], ncols: usize, nrows: usize) -> Raster {
        Raster::new(ncols, nrows, 0.0, 0.0, 100.0, -9999.0, codes.to_vec()).unwrap()
    }

    #[test]
    fn mh_density_concentrated() {
        let classes = class_raster(&[7.0, 7.0, 7.0, 7.0], 2, 2);
        let pts = vec![
            SamplePoint {
                x: 50.0,
                y: 50.0,
                label_flood: 1,
                label_landslide: 0,
                features: vec![],
                zone_id: None,
            };
            5
        ];
        let m = mh_density(&pts, &classes);
        assert!((m[1][2] - 100.0).abs() < 1e-9);
        let total: f64 = m.iter().flatten().sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn mh_density_four_cells() {
        let classes = class_raster(&[0.0, 6.0, 12.0, 18.0], 2, 2);
        let mk = |x: f64, y: f64| SamplePoint {
            x,
            y,
            label_flood: 1,
            label_landslide: 1,
            features: vec![],
            zone_id: None,
        };
        let pts = vec![
            mk(50.0, 150.0),
            mk(150.0, 150.0),
            mk(50.0, 50.0),
            mk(150.0, 50.0),
        ];
        let m = mh_density(&pts, &classes);
        for (i, j) in [(0, 0), (1, 1), (2, 2), (3, 3)] {
            assert!((m[i][j] - 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jaccard_cases() {
        let a = class_raster(&[24.0, 24.0, 0.0, 0.0], 2, 2);
        let same = jaccard_high(&a, &a).unwrap();
        assert_eq!(same.flood, 1.0);
        assert_eq!(same.landslide, 1.0);

        // disjoint nonempty flood masks: codes 15 (H flood) vs 0 placed apart
        let b = class_raster(&[0.0, 0.0, 15.0, 15.0], 2, 2);
        let c = class_raster(&[15.0, 15.0, 0.0, 0.0], 2, 2);
        let d = jaccard_high(&b, &c).unwrap();
        assert_eq!(d.flood, 0.0);

        // overlap 2, union 4 on the flood mask
        let e = class_raster(&[15.0, 15.0, 15.0, 15.0, 0.0, 0.0], 3, 2);
        let f = class_raster(&[15.0, 15.0, 0.0, 0.0, 15.0, 15.0], 3, 2);
        let j = jaccard_high(&e, &f).unwrap();
        assert!((j.flood - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn jaccard_empty_masks_flagged() {
        let a = class_raster(&[0.0; 4], 2, 2);
        let j = jaccard_high(&a, &a).unwrap();
        assert_eq!(j.flood, 1.0);
        assert!(j.flood_empty);
    }

    #[test]
    fn macro_average_rules() {
        let (m, s) = macro_average(&[Some(0.8), Some(0.9)]).unwrap();
        assert!((m - 0.85).abs() < 1e-12);
        assert_eq!(s, 0);
        assert_eq!(macro_average(&[Some(0.7)]), Some((0.7, 0)));
        let (m, skipped) = macro_average(&[Some(0.6), None, Some(0.8)]).unwrap();
        assert!((m - 0.7).abs() < 1e-12);
        assert_eq!(skipped, 1);
        assert_eq!(macro_average(&[None, None]), None);
    }

    #[test]
    fn f1_identity_with_pr_form() {
        let mut rng = Rng::new(41);
        for _ in 0..20 {
            let n = 50;
            let y: Vec<u8> = (0..n).map(|_| (rng.uniform() < 0.5) as u8).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let m = confusion_metrics(&y, &p, 0.5);
            if m.precision + m.recall > 0.0 && m.undefined.is_empty() {
                let f1_pr = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                assert!((m.f1 - f1_pr).abs() < 1e-12);
            }
        }
    }
}
