//! Hazard-inventory augmentation and split machinery: Gaussian-kernel KDE
//! upsampling with a minimum-spacing constraint, OC-SVM screened negative
//! sampling, and stratified train/val/test splits.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::partition::Rect;
use crate::rng::Rng;

pub type Point2 = (f64, f64);

fn dist2(a: Point2, b: Point2) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Uniform-grid spatial index with cell size equal to the spacing
/// constraint, so any pair closer than the constraint lands in the same or
/// an adjacent cell.
pub struct SpacingIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<Point2>>,
}

impl SpacingIndex {
    pub fn new(cell: f64) -> Self {
        SpacingIndex {
            cell,
            buckets: HashMap::new(),
        }
    }

    pub fn from_points(cell: f64, points: &[Point2]) -> Self {
        let mut idx = SpacingIndex::new(cell);
        for p in points {
            idx.insert(*p);
        }
        idx
    }

    fn key(&self, p: Point2) -> (i64, i64) {
        (
            (p.0 / self.cell).floor() as i64,
            (p.1 / self.cell).floor() as i64,
        )
    }

    pub fn insert(&mut self, p: Point2) {
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(p);
    }

    /// True when every indexed point is at least `d` away from `p`.
    pub fn clear_of(&self, p: Point2, d: f64) -> bool {
        let (kx, ky) = self.key(p);
        let d2 = d * d;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(pts) = self.buckets.get(&(kx + dx, ky + dy)) {
                    if pts.iter().any(|q| dist2(p, *q) < d2) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Gaussian-kernel density model over 2-D event coordinates.
#[derive(Debug, Clone)]
pub struct KdeModel {
    pub support: Vec<Point2>,
    pub bandwidth: f64,
}

/// Fit an isotropic Gaussian KDE with Scott's-rule bandwidth
/// n^(-1/6) times the pooled standard deviation of the coordinates.
pub fn kde_fit(points: &[Point2]) -> Result<KdeModel> {
    if points.len() < 2 {
        return Err(Error::Validation("KDE needs at least two points".into()));
    }
    let n = points.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points {
        mx += p.0;
        my += p.1;
    }
    mx /= n;
    my /= n;
    let (mut vx, mut vy) = (0.0, 0.0);
    for p in points {
        vx += (p.0 - mx) * (p.0 - mx);
        vy += (p.1 - my) * (p.1 - my);
    }
    let pooled_std = ((vx + vy) / (2.0 * n)).sqrt();
    if pooled_std == 0.0 {
        return Err(Error::Validation(
            "all KDE points are identical; bandwidth undefined".into(),
        ));
    }
    let bandwidth = n.powf(-1.0 / 6.0) * pooled_std;
    Ok(KdeModel {
        support: points.to_vec(),
        bandwidth,
    })
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub points: Vec<Point2>,
    /// Support-point index each accepted point descends from: inventory
    /// points map to their own index, synthetic draws to their anchor.
    pub origins: Vec<usize>,
    pub shortfall: bool,
    pub draws_used: usize,
}

/// Upsample an inventory by drawing from the fitted density (random support
/// point plus isotropic Gaussian jitter with std = bandwidth), greedily
/// keeping points whose pairwise spacing stays >= `min_spacing_m`.
pub fn kde_augment(
    model: &KdeModel,
    inventory: &[Point2],
    target_count: usize,
    min_spacing_m: f64,
    seed: u64,
) -> AugmentOutcome {
    if target_count <= inventory.len() {
        return AugmentOutcome {
            points: inventory.to_vec(),
            origins: (0..inventory.len()).collect(),
            shortfall: false,
            draws_used: 0,
        };
    }
    let mut rng = Rng::substream(seed, "kde_augment");
    let mut accepted: Vec<Point2> = Vec::with_capacity(target_count);
    let mut origins: Vec<usize> = Vec::with_capacity(target_count);
    let mut index = (min_spacing_m > 0.0).then(|| SpacingIndex::new(min_spacing_m));

    let mut push_if_clear =
        |p: Point2, origin: usize, accepted: &mut Vec<Point2>, origins: &mut Vec<usize>| {
            match &mut index {
                Some(idx) => {
                    if idx.clear_of(p, min_spacing_m) {
                        idx.insert(p);
                        accepted.push(p);
                        origins.push(origin);
                    }
                }
                None => {
                    accepted.push(p);
                    origins.push(origin);
                }
            }
        };

    // inventory first, in order, so observed events win over synthetic draws
    for (i, p) in inventory.iter().enumerate() {
        push_if_clear(*p, i, &mut accepted, &mut origins);
    }

    let budget = 50 * target_count;
    let mut draws = 0usize;
    while accepted.len() < target_count && draws < budget {
        let anchor_idx = rng.below(model.support.len());
        let anchor = model.support[anchor_idx];
        let p = (
            anchor.0 + model.bandwidth * rng.normal(),
            anchor.1 + model.bandwidth * rng.normal(),
        );
        draws += 1;
        push_if_clear(p, anchor_idx, &mut accepted, &mut origins);
    }
    AugmentOutcome {
        shortfall: accepted.len() < target_count,
        points: accepted,
        origins,
        draws_used: draws,
    }
}

/// One-class SVM with RBF kernel, fitted in the nu-parameterized dual.
#[derive(Debug, Clone)]
pub struct OcsvmModel {
    pub support_vectors: Vec<Point2>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
}

impl OcsvmModel {
    /// Signed decision value; >= 0 means inlier (hazard-like location).
    pub fn decision(&self, p: Point2) -> f64 {
        let mut s = 0.0;
        for (sv, a) in self.support_vectors.iter().zip(&self.alphas) {
            s += a * (-self.gamma * dist2(*sv, p)).exp();
        }
        s - self.rho
    }
}

/// Median heuristic for the RBF width: gamma = 1/(2 * median^2) of the
/// pairwise training distances.
pub fn median_heuristic_gamma(points: &[Point2]) -> Result<f64> {
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            dists.push(dist2(points[i], points[j]).sqrt());
        }
    }
    dists.retain(|d| *d > 0.0);
    if dists.is_empty() {
        return Err(Error::Validation(
            "median heuristic undefined: all points coincide".into(),
        ));
    }
    dists.sort_by(f64::total_cmp);
    let m = dists[dists.len() / 2];
    Ok(1.0 / (2.0 * m * m))
}

/// Solve the nu-one-class dual
///   min 1/2 a'Ka   s.t. 0 <= a_i <= 1/(nu n),  sum a_i = 1
/// by maximal-violating-pair coordinate ascent to KKT tolerance 1e-6.
pub fn ocsvm_fit(points: &[Point2], nu: f64, gamma: f64) -> Result<OcsvmModel> {
    let n = points.len();
    if n < 10 {
        return Err(Error::Validation(format!(
            "OC-SVM needs at least 10 points, got {n}"
        )));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::Validation("nu must lie in (0,1]".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Validation("gamma must be > 0".into()));
    }
    let c = 1.0 / (nu * n as f64);

    // dense kernel matrix; n stays small (raw inventories)
    let mut kernel = vec![0.0f64; n * n];
    for i in 0..n {
        kernel[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let k = (-gamma * dist2(points[i], points[j])).exp();
            kernel[i * n + j] = k;
            kernel[j * n + i] = k;
        }
    }

    // libsvm-style feasible start: the first floor(nu*n) points at the box
    // bound, one fractional remainder
    let mut alpha = vec![0.0f64; n];
    let n_init = (nu * n as f64).floor() as usize;
    for a in alpha.iter_mut().take(n_init) {
        *a = c;
    }
    if n_init < n {
        alpha[n_init] = 1.0 - n_init as f64 * c;
    }

    // gradient g = K alpha
    let mut grad = vec![0.0f64; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let row = &kernel[i * n..(i + 1) * n];
        *g = row
            .iter()
            .zip(&alpha)
            .filter(|(_, a)| **a > 0.0)
            .map(|(k, a)| k * a)
            .sum();
    }

    const TOL: f64 = 1e-6;
    const MAX_PASSES: usize = 100_000;
    let eps_box = 1e-12;
    let mut converged = false;
    for _ in 0..MAX_PASSES {
        // i: smallest gradient among coordinates that can grow
        // j: largest gradient among coordinates that can shrink
        let mut i_up = usize::MAX;
        let mut j_low = usize::MAX;
        let (mut g_up, mut g_low) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..n {
            if alpha[t] < c - eps_box && grad[t] < g_up {
                g_up = grad[t];
                i_up = t;
            }
            if alpha[t] > eps_box && grad[t] > g_low {
                g_low = grad[t];
                j_low = t;
            }
        }
        if i_up == usize::MAX || j_low == usize::MAX || g_low - g_up <= TOL {
            converged = true;
            break;
        }
        let (i, j) = (i_up, j_low);
        let eta = kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j];
        let max_step = (c - alpha[i]).min(alpha[j]);
        let step = if eta > 1e-12 {
            ((g_low - g_up) / eta).min(max_step)
        } else {
            max_step
        };
        alpha[i] += step;
        alpha[j] -= step;
        for t in 0..n {
            grad[t] += step * (kernel[t * n + i] - kernel[t * n + j]);
        }
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "OC-SVM SMO did not reach KKT tolerance {TOL} within {MAX_PASSES} passes"
        )));
    }

    // rho from free support vectors, falling back to the violation midpoint
    let free: Vec<usize> = (0..n)
        .filter(|&t| alpha[t] > eps_box && alpha[t] < c - eps_box)
        .collect();
    let rho = if free.is_empty() {
        let g_up = (0..n)
            .filter(|&t| alpha[t] < c - eps_box)
            .map(|t| grad[t])
            .fold(f64::INFINITY, f64::min);
        let g_low = (0..n)
            .filter(|&t| alpha[t] > eps_box)
            .map(|t| grad[t])
            .fold(f64::NEG_INFINITY, f64::max);
        (g_up + g_low) / 2.0
    } else {
        free.iter().map(|&t| grad[t]).sum::<f64>() / free.len() as f64
    };

    let mut support_vectors = Vec::new();
    let mut alphas = Vec::new();
    for t in 0..n {
        if alpha[t] > eps_box {
            support_vectors.push(points[t]);
            alphas.push(alpha[t]);
        }
    }
    Ok(OcsvmModel {
        support_vectors,
        alphas,
        rho,
        gamma,
        nu,
    })
}

/// Draw uniform candidates over the extent and keep those the OC-SVM calls
/// outliers that also stay >= `min_dist_m` from every hazard point.
pub fn negative_sample(
    model: &OcsvmModel,
    extent: &Rect,
    n: usize,
    hazard_points: &[Point2],
    min_dist_m: f64,
    seed: u64,
) -> Result<(Vec<Point2>, bool)> {
    if extent.is_empty() {
        return Err(Error::Validation(format!("degenerate extent {extent:?}")));
    }
    if n == 0 {
        return Err(Error::Validation("requested negative count is zero".into()));
    }
    let mut rng = Rng::substream(seed, "negative_sample");
    let index = if min_dist_m > 0.0 {
        let mut idx = SpacingIndex::new(min_dist_m);
        for p in hazard_points {
            idx.insert(*p);
        }
        Some(idx)
    } else {
        None
    };
    let mut accepted = Vec::with_capacity(n);
    let budget = 1_000 * n;
    for _ in 0..budget {
        if accepted.len() == n {
            break;
        }
        let p = (
            rng.range(extent.x0, extent.x1),
            rng.range(extent.y0, extent.y1),
        );
        if let Some(idx) = &index {
            if !idx.clear_of(p, min_dist_m) {
                continue;
            }
        }
        if model.decision(p) < 0.0 {
            accepted.push(p);
        }
    }
    let shortfall = accepted.len() < n;
    Ok((accepted, shortfall))
}

/// Stratified split on the joint (flood, landslide) label pair. Returns
/// index triples (train, val, test) into the input slice. Rows are keyed by
/// content and shuffled per stratum, so a permuted input yields the same
/// multiset per split; counts follow largest-remainder rounding.
pub fn stratified_split(
    points: &[crate::grid::SamplePoint],
    ratios: [f64; 3],
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut strata: HashMap<(u8, u8), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        strata
            .entry((p.label_flood, p.label_landslide))
            .or_default()
            .push(i);
    }
    let mut keys: Vec<(u8, u8)> = strata.keys().copied().collect();
    keys.sort_unstable();

    let mut out: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for key in keys {
        let mut members = strata.remove(&key).unwrap();
        // content order, independent of input order
        members.sort_by(|&a, &b| {
            let pa = &points[a];
            let pb = &points[b];
            pa.x.total_cmp(&pb.x)
                .then(pa.y.total_cmp(&pb.y))
                .then_with(|| {
                    for (fa, fb) in pa.features.iter().zip(&pb.features) {
                        let c = fa.total_cmp(fb);
                        if c != std::cmp::Ordering::Equal {
                            return c;
                        }
                    }
                    std::cmp::Ordering::Equal
                })
        });
        let mut rng = Rng::substream(seed, &format!("split/{}-{}", key.0, key.1));
        rng.shuffle(&mut members);

        let n = members.len();
        let mut counts = [0usize; 3];
        let mut rema: Vec<(f64, usize)> = Vec::with_capacity(3);
        let mut assigned = 0usize;
        for (s, r) in ratios.iter().enumerate() {
            let exact = r * n as f64;
            counts[s] = exact.floor() as usize;
            assigned += counts[s];
            rema.push((exact - exact.floor(), s));
        }
        // distribute leftovers by largest remainder; ties favor train/val/test order
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for k in 0..(n - assigned) {
            counts[rema[k % 3].1] += 1;
        }
        let mut it = members.into_iter();
        for (s, cnt) in counts.iter().enumerate() {
            out[s].extend(it.by_ref().take(*cnt));
        }
    }
    let [train, val, test] = out;
    (train, val, test)
}
