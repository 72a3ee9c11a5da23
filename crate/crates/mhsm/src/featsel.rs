//! Zone-wise two-step feature selection: a Pearson collinearity screen
//! followed by SHAP-importance retention. A feature survives the screen when
//! no kept pair correlates above the threshold, and survives retention when
//! its mean absolute SHAP contribution is nonzero for at least one hazard.

use serde::{Deserialize, Serialize};

use crate::trees::ShapAttribution;

/// Mean-absolute-SHAP threshold below which a contribution counts as zero.
pub const ZERO_SHAP_EPS: f64 = 1e-12;

/// Pearson correlation matrix of the feature columns. Constant columns get
/// r = 0 against every other column (and are reported in the flag vector);
/// the diagonal is always 1.
pub fn pearson_matrix(x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let d = x.first().map_or(0, |r| r.len());
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for row in x {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let constant: Vec<bool> = (0..d).map(|i| cov[i * d + i] == 0.0).collect();
    let mut r = vec![vec![0.0; d]; d];
    for i in 0..d {
        r[i][i] = 1.0;
        for j in (i + 1)..d {
            let denom = (cov[i * d + i] * cov[j * d + j]).sqrt();
            let v = if denom == 0.0 {
                0.0
            } else {
                cov[i * d + j] / denom
            };
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    (r, constant)
}

/// Iteratively drop one member of the worst over-threshold pair (the member
/// with the larger mean |r| against the other kept features; ties drop the
/// later column) until no kept pair exceeds the threshold. Returns kept
/// column indices, ascending.
pub fn collinearity_screen(r: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let d = r.len();
    let mut kept: Vec<usize> = (0..d).collect();
    loop {
        let mut worst: Option<(f64, usize, usize)> = None;
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[(a + 1)..] {
                let v = r[i][j].abs();
                if v > threshold && worst.is_none_or(|(w, _, _)| v > w) {
                    worst = Some((v, i, j));
                }
            }
        }
        let Some((_, i, j)) = worst else {
            return kept;
        };
        let mean_abs = |col: usize| -> f64 {
            let others: Vec<f64> = kept
                .iter()
                .filter(|&&k| k != col)
                .map(|&k| r[col][k].abs())
                .collect();
            others.iter().sum::<f64>() / others.len().max(1) as f64
        };
        let (mi, mj) = (mean_abs(i), mean_abs(j));
        let drop = if mi > mj {
            i
        } else if mj > mi {
            j
        } else {
            i.max(j)
        };
        kept.retain(|&k| k != drop);
    }
}

/// Mean absolute SHAP per feature (I) and its percentage share (P).
/// When every I is below [`ZERO_SHAP_EPS`] the percentages are all zero and
/// the flag is set.
pub fn shap_importance(phi: &ShapAttribution) -> (Vec<f64>, Vec<f64>, bool) {
    let d = phi.phi.first().map_or(0, |r| r.len());
    let n = phi.phi.len() as f64;
    let mut imp = vec![0.0; d];
    for row in &phi.phi {
        for (acc, v) in imp.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    imp.iter_mut().for_each(|v| *v /= n);
    let denom: f64 = imp.iter().filter(|&&v| v >= ZERO_SHAP_EPS).sum();
    if denom < ZERO_SHAP_EPS {
        return (imp, vec![0.0; d], true);
    }
    let pct = imp
        .iter()
        .map(|&v| {
            if v < ZERO_SHAP_EPS {
                0.0
            } else {
                100.0 * v / denom
            }
        })
        .collect();
    (imp, pct, false)
}

/// Keep a feature when either hazard assigns it a nonzero share.
pub fn zone_feature_select(p_flood: &[f64], p_landslide: &[f64]) -> Vec<bool> {
    p_flood
        .iter()
        .zip(p_landslide)
        .map(|(f, l)| *f > 0.0 || *l > 0.0)
        .collect()
}

/// Per-zone feature-selection record, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureReport {
    pub zone_id: u32,
    pub feature_names: Vec<String>,
    pub pearson: Vec<Vec<f64>>,
    pub constant_features: Vec<String>,
    pub dropped_collinear: Vec<String>,
    /// Mean |SHAP| and percentage share per screened feature, per hazard.
    pub importance_flood: Vec<f64>,
    pub importance_landslide: Vec<f64>,
    pub pct_flood: Vec<f64>,
    pub pct_landslide: Vec<f64>,
    pub flood_importance_degenerate: bool,
    pub landslide_importance_degenerate: bool,
    /// Names of the features screened (post-Pearson), in column order.
    pub screened: Vec<String>,
    pub retained: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_perfect_linearity() {
        let x = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let (r, _) = pearson_matrix(&x);
        assert!((r[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(r[0][0], 1.0);
    }

    #[test]
    fn pearson_perfect_anticorrelation() {
        let x = vec![vec![1.0, 6.0], vec![2.0, 4.0], vec![3.0, 2.0]];
        let (r, _) = pearson_matrix(&x);
        assert!((r[0][1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_hand_case() {
        let x = vec![vec![1.0, 1.0], vec![2.0, 3.0], vec![3.0, 2.0]];
        let (r, _) = pearson_matrix(&x);
        assert!((r[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_column_flagged() {
        let x = vec![vec![1.0, 7.0], vec![2.0, 7.0], vec![3.0, 7.0]];
        let (r, constant) = pearson_matrix(&x);
        assert_eq!(r[0][1], 0.0);
        assert_eq!(constant, vec![false, true]);
        assert_eq!(r[1][1], 1.0);
    }

    #[test]
    fn screen_keeps_all_below_threshold() {
        let r = vec![
            vec![1.0, 0.5, 0.3],
            vec![0.5, 1.0, 0.2],
            vec![0.3, 0.2, 1.0],
        ];
        assert_eq!(collinearity_screen(&r, 0.8), vec![0, 1, 2]);
    }

    #[test]
    fn screen_drops_one_of_identical_pair() {
        let r = vec![
            vec![1.0, 1.0, 0.1],
            vec![1.0, 1.0, 0.1],
            vec![0.1, 0.1, 1.0],
        ];
        let kept = collinearity_screen(&r, 0.8);
        assert_eq!(kept.len(), 2);
        assert!(kept.contains(&2));
        // tie on mean |r|: the later column (1) is dropped
        assert!(kept.contains(&0));
    }

    #[test]
    fn screen_mutually_correlated_triple() {
        // all three pairwise at 0.9, but column 0 is least entangled with
        // the outside column 3
        let r = vec![
            vec![1.0, 0.90, 0.90, 0.05],
            vec![0.90, 1.0, 0.92, 0.40],
            vec![0.90, 0.92, 1.0, 0.45],
            vec![0.05, 0.40, 0.45, 1.0],
        ];
        let kept = collinearity_screen(&r, 0.8);
        // 1-2 is the worst pair; 2 has larger mean |r|, dropped first; then
        // 0-1 remains over threshold and 1 (larger mean) is dropped
        assert_eq!(kept, vec![0, 3]);
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[(a + 1)..] {
                assert!(r[i][j].abs() <= 0.8);
            }
        }
    }

    #[test]
    fn importance_all_zero_flagged() {
        let phi = ShapAttribution {
            phi0: 0.3,
            phi: vec![vec![0.0, 0.0]; 5],
        };
        let (i, p, flagged) = shap_importance(&phi);
        assert!(flagged);
        assert_eq!(i, vec![0.0, 0.0]);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn importance_single_active_feature() {
        let phi = ShapAttribution {
            phi0: 0.0,
            phi: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        };
        let (_, p, flagged) = shap_importance(&phi);
        assert!(!flagged);
        assert_eq!(p, vec![100.0, 0.0]);
    }

    #[test]
    fn importance_percentages() {
        let phi = ShapAttribution {
            phi0: 0.0,
            phi: vec![vec![3.0, 1.0], vec![-3.0, -1.0]],
        };
        let (i, p, _) = shap_importance(&phi);
        assert_eq!(i, vec![3.0, 1.0]);
        assert!((p[0] - 75.0).abs() < 1e-9);
        assert!((p[1] - 25.0).abs() < 1e-9);
        assert!((p.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn retention_rule() {
        assert_eq!(
            zone_feature_select(&[0.0, 0.0], &[5.0, 0.0]),
            vec![true, false]
        );
        assert_eq!(zone_feature_select(&[2.0], &[0.0]), vec![true]);
    }

    #[test]
    fn retention_monotone_in_percentages() {
        let p_f = [0.0, 10.0, 0.0];
        let p_l = [0.0, 0.0, 3.0];
        let base = zone_feature_select(&p_f, &p_l);
        let p_f_up = [4.0, 10.0, 0.0];
        let up = zone_feature_select(&p_f_up, &p_l);
        for (b, u) in base.iter().zip(&up) {
            assert!(!b | u, "raising P removed a retained feature");
        }
    }
}
