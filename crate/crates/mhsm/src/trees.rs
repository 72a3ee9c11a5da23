//! Gradient-boosted decision trees with logistic loss (Newton boosting) and
//! exact path-dependent TreeSHAP attribution.
//!
//! Trees are grown with exact greedy splits on the gain
//! (G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l))/2 and leaf weights
//! -G/(H+l). Every node records its cover (sum of training Hessians), which
//! the SHAP recursion uses as the conditioning distribution.

use serde::{Deserialize, Serialize};

use crate::config::{GbtConfig, GbtHyperparams};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MARGIN_CAP: f64 = 30.0;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub cover: f64,
    pub weight: f64,
    pub is_leaf: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf_value(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            let node = &self.nodes[idx];
            if node.is_leaf {
                return node.weight;
            }
            idx = if row[node.feature] < node.threshold {
                node.left
            } else {
                node.right
            };
        }
    }

    /// Cover-weighted mean of leaf values: the tree's output expectation
    /// under the training distribution.
    pub fn expectation(&self, idx: usize) -> f64 {
        let node = &self.nodes[idx];
        if node.is_leaf {
            return node.weight;
        }
        let l = &self.nodes[node.left];
        let r = &self.nodes[node.right];
        (l.cover * self.expectation(node.left) + r.cover * self.expectation(node.right))
            / node.cover
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub trees: Vec<Tree>,
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
}

impl GbtModel {
    /// Single-row probability; the caller guarantees finite features of the
    /// right arity (the raster path validates upstream).
    pub fn predict_proba_one(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.leaf_value(row)).sum();
        sigmoid((self.base_score + self.learning_rate * sum).clamp(-MARGIN_CAP, MARGIN_CAP))
    }
}

/// Additive attribution of model margins: `phi0 + sum_i phi[s][i]` equals
/// the margin of sample s.
#[derive(Debug, Clone)]
pub struct ShapAttribution {
    pub phi0: f64,
    pub phi: Vec<Vec<f64>>,
}

fn validate_matrix(x: &[Vec<f64>], n_features: usize) -> Result<()> {
    for (i, row) in x.iter().enumerate() {
        if row.len() != n_features {
            return Err(Error::Dimension(format!(
                "row {i} has {} features, expected {n_features}",
                row.len()
            )));
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation(format!("NaN feature value in row {i}")));
        }
    }
    Ok(())
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    columns: &'a [usize],
    params: &'a GbtHyperparams,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let leaf = |nodes: &mut Vec<TreeNode>| {
            nodes.push(TreeNode {
                feature: 0,
                threshold: 0.0,
                left: 0,
                right: 0,
                cover: h,
                weight: -g / (h + self.params.l2_lambda),
                is_leaf: true,
            });
            nodes.len() - 1
        };
        if depth >= self.params.max_depth || rows.len() < 2 {
            return leaf(&mut self.nodes);
        }
        let Some((feature, threshold)) = self.best_split(&rows, g, h) else {
            return leaf(&mut self.nodes);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&i| self.x[i][feature] < threshold);
        let idx = self.nodes.len();
        self.nodes.push(TreeNode {
            feature,
            threshold,
            left: 0,
            right: 0,
            cover: h,
            weight: 0.0,
            is_leaf: false,
        });
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[idx].left = left;
        self.nodes[idx].right = right;
        idx
    }

    fn best_split(&self, rows: &[usize], g_total: f64, h_total: f64) -> Option<(usize, f64)> {
        let lambda = self.params.l2_lambda;
        let mcw = self.params.min_child_weight;
        let parent_score = g_total * g_total / (h_total + lambda);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, f64, f64)> = Vec::with_capacity(rows.len());
        for &feature in self.columns {
            sorted.clear();
            sorted.extend(
                rows.iter()
                    .map(|&i| (self.x[i][feature], self.grad[i], self.hess[i])),
            );
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                gl += sorted[k].1;
                hl += sorted[k].2;
                if sorted[k + 1].0 == sorted[k].0 {
                    continue;
                }
                let (gr, hr) = (g_total - gl, h_total - hl);
                if hl < mcw || hr < mcw {
                    continue;
                }
                let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score);
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    let threshold = 0.5 * (sorted[k].0 + sorted[k + 1].0);
                    best = Some((gain, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Fit a boosted-tree classifier on binary labels.
pub fn gbt_train(
    x: &[Vec<f64>],
    y: &[u8],
    feature_names: &[String],
    params: &GbtHyperparams,
    seed: u64,
) -> Result<GbtModel> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Validation(format!(
            "need matching X/y with at least 2 rows, got {}/{}",
            x.len(),
            y.len()
        )));
    }
    params.validate()?;
    validate_matrix(x, feature_names.len())?;
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(Error::Validation(
            "training labels contain a single class".into(),
        ));
    }

    let n = x.len();
    let d = feature_names.len();
    let prevalence = (n_pos as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prevalence / (1.0 - prevalence)).ln();
    let mut margins = vec![base_score; n];
    let mut rng = Rng::substream(seed, "gbt_train");
    let mut trees = Vec::with_capacity(params.n_trees);

    let row_count = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let col_count = ((params.colsample * d as f64).round() as usize).clamp(1, d);

    for _ in 0..params.n_trees {
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let w = if y[i] == 1 {
                params.scale_pos_weight
            } else {
                1.0
            };
            grad[i] = w * (p - y[i] as f64);
            hess[i] = w * p * (1.0 - p);
        }
        let rows = rng.sample_indices(n, row_count);
        let columns = rng.sample_indices(d, col_count);
        let mut builder = TreeBuilder {
            x,
            grad: &grad,
            hess: &hess,
            columns: &columns,
            params,
            nodes: Vec::new(),
        };
        builder.build(rows, 0);
        let tree = Tree {
            nodes: builder.nodes,
        };
        for i in 0..n {
            margins[i] += params.learning_rate * tree.leaf_value(&x[i]);
        }
        trees.push(tree);
    }

    Ok(GbtModel {
        trees,
        base_score,
        learning_rate: params.learning_rate,
        feature_names: feature_names.to_vec(),
    })
}

/// Raw log-odds margin, capped at +-30.
pub fn gbt_predict_margin(model: &GbtModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    validate_matrix(x, model.feature_names.len())?;
    Ok(x.iter()
        .map(|row| {
            let sum: f64 = model.trees.iter().map(|t| t.leaf_value(row)).sum();
            (model.base_score + model.learning_rate * sum).clamp(-MARGIN_CAP, MARGIN_CAP)
        })
        .collect())
}

pub fn gbt_predict_proba(model: &GbtModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(gbt_predict_margin(model, x)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

/// Randomized hyperparameter search with stratified k-fold cross-validation,
/// scored by mean held-out AUC. Ties keep the earlier draw.
pub fn random_search_cv(
    x: &[Vec<f64>],
    y: &[u8],
    feature_names: &[String],
    cfg: &GbtConfig,
    seed: u64,
) -> Result<GbtHyperparams> {
    if cfg.cv_iters == 0 {
        return Ok(cfg.defaults.clone());
    }
    let space = &cfg.search;
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation(
            "cross-validation labels contain a single class".into(),
        ));
    }
    let mut spw = space.scale_pos_weight.clone();
    if space.scale_pos_weight_auto {
        spw.push(n_neg as f64 / n_pos as f64);
    }

    let mut rng = Rng::substream(seed, "random_search");
    let pick = |rng: &mut Rng, list: &[f64]| list[rng.below(list.len())];
    let mut candidates = Vec::with_capacity(cfg.cv_iters);
    for _ in 0..cfg.cv_iters {
        candidates.push(GbtHyperparams {
            n_trees: space.n_trees[rng.below(space.n_trees.len())],
            max_depth: space.max_depth[rng.below(space.max_depth.len())],
            learning_rate: pick(&mut rng, &space.learning_rate),
            subsample: pick(&mut rng, &space.subsample),
            colsample: pick(&mut rng, &space.colsample),
            min_child_weight: cfg.defaults.min_child_weight,
            l2_lambda: cfg.defaults.l2_lambda,
            scale_pos_weight: pick(&mut rng, &spw),
        });
    }

    // stratified fold assignment
    let k = cfg.cv_folds;
    let mut fold_of = vec![0usize; y.len()];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        let mut frng = Rng::substream(seed, &format!("cv_folds/{class}"));
        frng.shuffle(&mut members);
        for (pos, &i) in members.iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }

    let mut best: Option<(f64, usize)> = None;
    for (ci, cand) in candidates.iter().enumerate() {
        let mut fold_aucs = Vec::new();
        for fold in 0..k {
            let mut xtr = Vec::new();
            let mut ytr = Vec::new();
            let mut xva = Vec::new();
            let mut yva = Vec::new();
            for i in 0..y.len() {
                if fold_of[i] == fold {
                    xva.push(x[i].clone());
                    yva.push(y[i]);
                } else {
                    xtr.push(x[i].clone());
                    ytr.push(y[i]);
                }
            }
            let tr_classes = ytr.iter().filter(|&&v| v == 1).count();
            let va_classes = yva.iter().filter(|&&v| v == 1).count();
            if tr_classes == 0
                || tr_classes == ytr.len()
                || va_classes == 0
                || va_classes == yva.len()
            {
                continue; // degenerate fold skipped
            }
            let model = gbt_train(&xtr, &ytr, feature_names, cand, seed ^ (fold as u64 + 1))?;
            let p = gbt_predict_proba(&model, &xva)?;
            fold_aucs.push(crate::metrics::auc_roc(&yva, &p)?);
        }
        if fold_aucs.is_empty() {
            continue;
        }
        let mean = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
        if best.is_none_or(|(b, _)| mean > b) {
            best = Some((mean, ci));
        }
    }
    match best {
        Some((_, ci)) => Ok(candidates[ci].clone()),
        None => Err(Error::Validation(
            "every cross-validation fold was degenerate".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Path-dependent TreeSHAP (polynomial-time path algorithm)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, depth: usize, pz: f64, po: f64, feature: usize) {
    path.truncate(depth);
    path.push(PathElement {
        feature,
        zero_fraction: pz,
        one_fraction: po,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..depth).rev() {
        path[i + 1].pweight += po * path[i].pweight * (i + 1) as f64 / (depth + 1) as f64;
        path[i].pweight = pz * path[i].pweight * (depth - i) as f64 / (depth + 1) as f64;
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let po = path[index].one_fraction;
    let pz = path[index].zero_fraction;
    let mut next_one = path[depth].pweight;
    for i in (0..depth).rev() {
        if po != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * (depth + 1) as f64 / ((i + 1) as f64 * po);
            next_one = tmp - path[i].pweight * pz * (depth - i) as f64 / (depth + 1) as f64;
        } else {
            path[i].pweight = path[i].pweight * (depth + 1) as f64 / (pz * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i] = PathElement {
            pweight: path[i].pweight,
            ..path[i + 1]
        };
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let po = path[index].one_fraction;
    let pz = path[index].zero_fraction;
    let mut next_one = path[depth].pweight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if po != 0.0 {
            let tmp = next_one * (depth + 1) as f64 / ((i + 1) as f64 * po);
            total += tmp;
            next_one = path[i].pweight - tmp * pz * (depth - i) as f64 / (depth + 1) as f64;
        } else {
            total += path[i].pweight * (depth + 1) as f64 / (pz * (depth - i) as f64);
        }
    }
    total
}

const NO_FEATURE: usize = usize::MAX;

#[allow(clippy::too_many_arguments)]
fn shap_recurse(
    tree: &Tree,
    row: &[f64],
    phi: &mut [f64],
    scale: f64,
    node_idx: usize,
    mut depth: usize,
    mut path: Vec<PathElement>,
    pz: f64,
    po: f64,
    feature: usize,
) -> Result<()> {
    extend_path(&mut path, depth, pz, po, feature);
    let node = &tree.nodes[node_idx];
    if node.is_leaf {
        for i in 1..=depth {
            let w = unwound_path_sum(&path, depth, i);
            let el = path[i];
            phi[el.feature] += scale * w * (el.one_fraction - el.zero_fraction) * node.weight;
        }
        return Ok(());
    }

    if node.cover <= 0.0 {
        return Err(Error::Validation(format!(
            "internal node {node_idx} has non-positive cover {}",
            node.cover
        )));
    }
    let hot = if row[node.feature] < node.threshold {
        node.left
    } else {
        node.right
    };
    let cold = if hot == node.left {
        node.right
    } else {
        node.left
    };

    // a repeated split on the same feature collapses into one path element
    let (mut iz, mut io) = (1.0, 1.0);
    if let Some(k) = (1..=depth).find(|&i| path[i].feature == node.feature) {
        iz = path[k].zero_fraction;
        io = path[k].one_fraction;
        unwind_path(&mut path, depth, k);
        path.truncate(depth);
        depth -= 1;
    }

    let hot_fraction = tree.nodes[hot].cover / node.cover;
    let cold_fraction = tree.nodes[cold].cover / node.cover;
    shap_recurse(
        tree,
        row,
        phi,
        scale,
        hot,
        depth + 1,
        path.clone(),
        iz * hot_fraction,
        io,
        node.feature,
    )?;
    shap_recurse(
        tree,
        row,
        phi,
        scale,
        cold,
        depth + 1,
        path,
        iz * cold_fraction,
        0.0,
        node.feature,
    )
}

/// Exact path-dependent SHAP values in margin (log-odds) space.
pub fn tree_shap(model: &GbtModel, x: &[Vec<f64>]) -> Result<ShapAttribution> {
    validate_matrix(x, model.feature_names.len())?;
    let d = model.feature_names.len();
    let phi0 = model.base_score
        + model.learning_rate * model.trees.iter().map(|t| t.expectation(0)).sum::<f64>();
    let mut phi = Vec::with_capacity(x.len());
    for row in x {
        let mut contrib = vec![0.0; d];
        for tree in &model.trees {
            shap_recurse(
                tree,
                row,
                &mut contrib,
                model.learning_rate,
                0,
                0,
                Vec::with_capacity(8),
                1.0,
                1.0,
                NO_FEATURE,
            )?;
        }
        phi.push(contrib);
    }
    Ok(ShapAttribution { phi0, phi })
}
