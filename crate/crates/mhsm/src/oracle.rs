//! Independent reference implementations used by the test suites to
//! cross-check the production algorithms: exhaustive subset-enumeration
//! Shapley values, exhaustive 1-D partition search, and a permutation-based
//! ANOVA p-value. These deliberately share no code with the fast paths they
//! verify.

use crate::rng::Rng;
use crate::trees::{GbtModel, Tree};

/// Conditional-expectation value of one tree given only the features in
/// `mask` are known, all others marginalized by training-cover fractions.
fn subset_value(tree: &Tree, row: &[f64], mask: u32, node_idx: usize) -> f64 {
    let node = &tree.nodes[node_idx];
    if node.is_leaf {
        return node.weight;
    }
    if mask & (1 << node.feature) != 0 {
        let next = if row[node.feature] < node.threshold {
            node.left
        } else {
            node.right
        };
        subset_value(tree, row, mask, next)
    } else {
        let l = &tree.nodes[node.left];
        let r = &tree.nodes[node.right];
        (l.cover * subset_value(tree, row, mask, node.left)
            + r.cover * subset_value(tree, row, mask, node.right))
            / node.cover
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Exact Shapley values by enumerating every feature subset, using the same
/// conditional-expectation value function as path-dependent TreeSHAP.
/// Returns (phi0, per-feature contributions) in margin space. Only feasible
/// for small feature counts (p <= ~16).
pub fn brute_force_shap(model: &GbtModel, row: &[f64]) -> (f64, Vec<f64>) {
    let p = model.feature_names.len();
    assert!(p <= 16, "subset enumeration is exponential in features");
    let mut phi = vec![0.0; p];
    let mut phi0 = model.base_score;
    for tree in &model.trees {
        // value of every subset in one sweep
        let mut values = vec![0.0f64; 1 << p];
        for (mask, slot) in values.iter_mut().enumerate() {
            *slot = subset_value(tree, row, mask as u32, 0);
        }
        phi0 += model.learning_rate * values[0];
        for i in 0..p {
            let bit = 1u32 << i;
            let mut contribution = 0.0;
            for mask in 0..(1u32 << p) {
                if mask & bit != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let weight = factorial(s) * factorial(p - s - 1) / factorial(p);
                contribution += weight * (values[(mask | bit) as usize] - values[mask as usize]);
            }
            phi[i] += model.learning_rate * contribution;
        }
    }
    (phi0, phi)
}

/// Within-group sum of squared deviations of one contiguous slice.
fn slice_ssd(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    sorted.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Exhaustive search over every partition of the sorted values into k
/// contiguous non-empty classes. Returns (thresholds, objective) where the
/// thresholds are the first value of each upper class.
pub fn exhaustive_jenks(values: &[f64], k: usize) -> (Vec<f64>, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    assert!(k >= 1 && k <= n);
    // choose k-1 cut positions among positions 1..n
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut cuts = vec![0usize; k - 1];
    fn recurse(
        sorted: &[f64],
        k: usize,
        start: usize,
        level: usize,
        cuts: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let n = sorted.len();
        if level == k - 1 {
            let mut cost = 0.0;
            let mut lo = 0usize;
            for &c in cuts.iter() {
                cost += slice_ssd(&sorted[lo..c]);
                lo = c;
            }
            cost += slice_ssd(&sorted[lo..]);
            if best.as_ref().is_none_or(|(_, bc)| cost < *bc) {
                *best = Some((cuts.clone(), cost));
            }
            return;
        }
        // leave room for the remaining cuts
        for c in start..=(n - (k - 1 - level)) {
            cuts[level] = c;
            recurse(sorted, k, c + 1, level + 1, cuts, best);
        }
    }
    recurse(&sorted, k, 1, 0, &mut cuts, &mut best);
    let (cut_positions, objective) = best.unwrap();
    let thresholds = cut_positions.iter().map(|&c| sorted[c]).collect();
    (thresholds, objective)
}

fn anova_f(y: &[f64], labels: &[usize], n_groups: usize) -> f64 {
    let n = y.len() as f64;
    let grand = y.iter().sum::<f64>() / n;
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (v, &g) in y.iter().zip(labels) {
        sums[g] += v;
        counts[g] += 1;
    }
    let mut ssb = 0.0;
    for g in 0..n_groups {
        if counts[g] == 0 {
            continue;
        }
        let mean = sums[g] / counts[g] as f64;
        ssb += counts[g] as f64 * (mean - grand) * (mean - grand);
    }
    let sst: f64 = y.iter().map(|v| (v - grand) * (v - grand)).sum();
    let ssw = sst - ssb;
    let df_b = (counts.iter().filter(|&&c| c > 0).count() - 1) as f64;
    let df_w = n - counts.iter().filter(|&&c| c > 0).count() as f64;
    (ssb / df_b) / (ssw / df_w)
}

/// Permutation-test p-value for a one-way ANOVA: the fraction of label
/// permutations whose F statistic reaches the observed one.
pub fn permutation_anova_p(y: &[f64], labels: &[usize], draws: usize, seed: u64) -> f64 {
    let n_groups = labels.iter().copied().max().unwrap() + 1;
    let observed = anova_f(y, labels, n_groups);
    let mut rng = Rng::substream(seed, "perm_anova");
    let mut perm = labels.to_vec();
    let mut hits = 0usize;
    for _ in 0..draws {
        rng.shuffle(&mut perm);
        if anova_f(y, &perm, n_groups) >= observed {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}
