//! Spatial stratified-heterogeneity statistics over susceptibility maps:
//! the factor detector (q-statistic), the interaction detector (overlay q
//! with enhancement typing), and the risk detector (stratum means compared
//! by one-way ANOVA).
//!
//! Variances are population variances, which makes the q-statistic exactly
//! 1 - SSW/SST; both routes are implemented and cross-checked in tests.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StratKind {
    Quantile,
    Categorical,
}

/// A labeling of samples into strata 0..n_strata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stratification {
    pub labels: Vec<usize>,
    pub n_strata: usize,
    pub kind: StratKind,
    /// Set when ties (or a constant input) collapsed the requested strata.
    pub collapsed: bool,
}

/// Discretize into `l` quantile strata. Tied breakpoints collapse (the
/// stratum count drops and the flag is set); a constant input yields one
/// stratum.
pub fn quantile_stratify(values: &[f64], l: usize) -> Result<Stratification> {
    if l == 0 {
        return Err(Error::Validation("stratum count must be >= 1".into()));
    }
    if values.len() < l {
        return Err(Error::Validation(format!(
            "need at least {l} samples for {l} strata, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut breakpoints: Vec<f64> = (1..l).map(|i| sorted[i * n / l]).collect();
    breakpoints.dedup();
    // a breakpoint equal to the minimum would leave an empty bottom stratum
    breakpoints.retain(|b| *b > sorted[0]);
    let collapsed = breakpoints.len() != l - 1;
    let labels = values
        .iter()
        .map(|v| breakpoints.iter().filter(|b| **b <= *v).count())
        .collect();
    Ok(Stratification {
        labels,
        n_strata: breakpoints.len() + 1,
        kind: StratKind::Quantile,
        collapsed,
    })
}

/// One stratum per distinct code, in ascending code order.
pub fn categorical_stratify(values: &[f64]) -> Result<Stratification> {
    if values.is_empty() {
        return Err(Error::Validation("no samples to stratify".into()));
    }
    let mut codes: Vec<f64> = values.to_vec();
    codes.sort_by(f64::total_cmp);
    codes.dedup();
    let index: HashMap<u64, usize> = codes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.to_bits(), i))
        .collect();
    let labels = values.iter().map(|v| index[&v.to_bits()]).collect();
    Ok(Stratification {
        labels,
        n_strata: codes.len(),
        kind: StratKind::Categorical,
        collapsed: false,
    })
}

/// Equal-interval strata over the value range (the risk detector's
/// discretization of its top factor).
pub fn equal_interval_stratify(values: &[f64], l: usize) -> Result<Stratification> {
    if values.is_empty() || l == 0 {
        return Err(Error::Validation("no samples to stratify".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Stratification {
            labels: vec![0; values.len()],
            n_strata: 1,
            kind: StratKind::Quantile,
            collapsed: true,
        });
    }
    let width = (hi - lo) / l as f64;
    let labels: Vec<usize> = values
        .iter()
        .map(|v| (((v - lo) / width).floor() as usize).min(l - 1))
        .collect();
    let mut seen = vec![false; l];
    for &lab in &labels {
        seen[lab] = true;
    }
    let collapsed = seen.iter().any(|s| !s);
    Ok(Stratification {
        labels,
        n_strata: l,
        kind: StratKind::Quantile,
        collapsed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumStat {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QResult {
    pub q: f64,
    pub n: usize,
    pub strata: Vec<StratumStat>,
}

fn stratum_stats(y: &[f64], s: &Stratification) -> Vec<StratumStat> {
    let mut sums = vec![0.0; s.n_strata];
    let mut counts = vec![0usize; s.n_strata];
    for (v, &lab) in y.iter().zip(&s.labels) {
        sums[lab] += v;
        counts[lab] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; s.n_strata];
    for (v, &lab) in y.iter().zip(&s.labels) {
        let d = v - means[lab];
        sq[lab] += d * d;
    }
    (0..s.n_strata)
        .map(|h| StratumStat {
            n: counts[h],
            mean: means[h],
            var: if counts[h] > 0 {
                sq[h] / counts[h] as f64
            } else {
                0.0
            },
        })
        .collect()
}

/// The q-statistic q = 1 - sum_h(N_h var_h) / (N var), population variances.
pub fn factor_q(y: &[f64], s: &Stratification) -> Result<QResult> {
    if y.len() != s.labels.len() {
        return Err(Error::Dimension(
            "values and stratification lengths differ".into(),
        ));
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::Validation("q needs at least 2 samples".into()));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(Error::Degenerate(
            "q undefined: zero global variance".into(),
        ));
    }
    let strata = stratum_stats(y, s);
    let within: f64 = strata.iter().map(|st| st.n as f64 * st.var).sum();
    let q = 1.0 - within / (n as f64 * var);
    Ok(QResult { q, n, strata })
}

/// The sum-of-squares route 1 - SSW/SST; identical to [`factor_q`] up to
/// floating error because variances are population variances.
pub fn factor_q_sum_of_squares(y: &[f64], s: &Stratification) -> Result<f64> {
    if y.len() != s.labels.len() || y.len() < 2 {
        return Err(Error::Validation("invalid inputs for q".into()));
    }
    let grand = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - grand) * (v - grand)).sum();
    if sst == 0.0 {
        return Err(Error::Degenerate(
            "q undefined: zero total sum of squares".into(),
        ));
    }
    let mut sums = vec![0.0; s.n_strata];
    let mut counts = vec![0usize; s.n_strata];
    for (v, &lab) in y.iter().zip(&s.labels) {
        sums[lab] += v;
        counts[lab] += 1;
    }
    let mut ssw = 0.0;
    for (v, &lab) in y.iter().zip(&s.labels) {
        let m = sums[lab] / counts[lab] as f64;
        ssw += (v - m) * (v - m);
    }
    Ok(1.0 - ssw / sst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionType {
    NonlinearWeaken,
    UniWeaken,
    BiEnhance,
    Independent,
    NonlinearEnhance,
}

impl InteractionType {
    pub fn code(&self) -> &'static str {
        match self {
            InteractionType::NonlinearWeaken => "nonlinear-weaken",
            InteractionType::UniWeaken => "uni-weaken",
            InteractionType::BiEnhance => "bi-enhance",
            InteractionType::Independent => "independent",
            InteractionType::NonlinearEnhance => "nonlinear-enhance",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionResult {
    pub q1: f64,
    pub q2: f64,
    pub q12: f64,
    pub kind: InteractionType,
}

/// Overlay two stratifications (distinct label pairs become strata) and
/// classify the interaction of their explanatory powers.
pub fn interaction_q(
    y: &[f64],
    s1: &Stratification,
    s2: &Stratification,
) -> Result<InteractionResult> {
    let q1 = factor_q(y, s1)?.q;
    let q2 = factor_q(y, s2)?.q;
    let mut pair_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut labels = Vec::with_capacity(y.len());
    for (a, b) in s1.labels.iter().zip(&s2.labels) {
        let next = pair_index.len();
        let id = *pair_index.entry((*a, *b)).or_insert(next);
        labels.push(id);
    }
    let overlay = Stratification {
        n_strata: pair_index.len(),
        labels,
        kind: StratKind::Categorical,
        collapsed: false,
    };
    let q12 = factor_q(y, &overlay)?.q;

    const BAND: f64 = 1e-9;
    let kind = if (q12 - (q1 + q2)).abs() <= BAND {
        InteractionType::Independent
    } else if q12 > q1 + q2 {
        InteractionType::NonlinearEnhance
    } else if q12 > q1.max(q2) {
        InteractionType::BiEnhance
    } else if q12 >= q1.min(q2) {
        InteractionType::UniWeaken
    } else {
        InteractionType::NonlinearWeaken
    };
    Ok(InteractionResult { q1, q2, q12, kind })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskResult {
    pub stratum_means: Vec<f64>,
    pub stratum_counts: Vec<usize>,
    pub f_statistic: f64,
    pub f_infinite: bool,
    pub p_value: f64,
    pub significant: bool,
}

pub const RISK_ALPHA: f64 = 0.05;

/// One-way ANOVA across strata: F = (SSB/dfB)/(SSW/dfW) with the p-value
/// from the upper tail of F(dfB, dfW).
pub fn risk_detect(y: &[f64], s: &Stratification) -> Result<RiskResult> {
    let stats = stratum_stats(y, s);
    let occupied: Vec<&StratumStat> = stats.iter().filter(|st| st.n > 0).collect();
    if occupied.len() < 2 || occupied.iter().any(|st| st.n < 2) {
        return Err(Error::Degenerate(
            "risk detector needs >= 2 strata with >= 2 samples each".into(),
        ));
    }
    let n = y.len() as f64;
    let grand = y.iter().sum::<f64>() / n;
    let ssb: f64 = occupied
        .iter()
        .map(|st| st.n as f64 * (st.mean - grand) * (st.mean - grand))
        .sum();
    let ssw: f64 = occupied.iter().map(|st| st.n as f64 * st.var).sum();
    let df_b = (occupied.len() - 1) as f64;
    let df_w = n - occupied.len() as f64;

    let stratum_means = stats.iter().map(|st| st.mean).collect();
    let stratum_counts = stats.iter().map(|st| st.n).collect();
    if ssw == 0.0 {
        let distinct_means = ssb > 0.0;
        return Ok(RiskResult {
            stratum_means,
            stratum_counts,
            f_statistic: if distinct_means { f64::INFINITY } else { 0.0 },
            f_infinite: distinct_means,
            p_value: if distinct_means { 0.0 } else { 1.0 },
            significant: distinct_means,
        });
    }
    let f = (ssb / df_b) / (ssw / df_w);
    let p = f_upper_tail(f, df_b, df_w);
    Ok(RiskResult {
        stratum_means,
        stratum_counts,
        f_statistic: f,
        f_infinite: false,
        p_value: p,
        significant: p < RISK_ALPHA,
    })
}

/// Upper tail of the F(d1, d2) distribution via the regularized incomplete
/// beta function: P(F > f) = I_{d2/(d2 + d1 f)}(d2/2, d1/2).
pub fn f_upper_tail(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    let x = d2 / (d2 + d1 * f);
    incomplete_beta(d2 / 2.0, d1 / 2.0, x)
}

/// Regularized incomplete beta I_x(a, b) by continued fraction, absolute
/// tolerance 1e-10 or better.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + b * (1.0 - x).ln() + a * x.ln()).exp()
            * beta_cf(b, a, 1.0 - x)
            / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_5e-2,
        -0.539_523_938_495_3e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000_000_000_190_015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// q-statistic and ranking for one factor within one zone/hazard analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorQEntry {
    pub factor: String,
    pub q: f64,
    pub collapsed_strata: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionEntry {
    pub factor_a: String,
    pub factor_b: String,
    pub q12: f64,
    pub kind: InteractionType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneHazardReport {
    pub zone_id: u32,
    pub hazard: String,
    pub n_cells: usize,
    pub factor_q: Vec<FactorQEntry>,
    /// Factors whose q was undefined (zero variance) and were excluded.
    pub excluded_factors: Vec<String>,
    pub top_factors: Vec<String>,
    pub interactions: Vec<InteractionEntry>,
    pub risk: Option<RiskResult>,
    pub risk_factor: Option<String>,
    /// Equal-interval stratum labels of the risk factor, VL..VH.
    pub risk_levels: Vec<String>,
}

pub const RISK_LEVEL_NAMES: [&str; 5] = ["VL", "L", "M", "H", "VH"];

/// Run factor, interaction, and risk detectors for one hazard map within
/// one zone. `cells` indexes the sampled map cells; `y` holds the
/// susceptibility values and `factor_values` one column per factor.
#[allow(clippy::too_many_arguments)]
pub fn detector_suite(
    zone_id: u32,
    hazard: &str,
    y: &[f64],
    factor_names: &[String],
    factor_values: &[Vec<f64>],
    categorical: &[bool],
    strata: usize,
    top_k: usize,
) -> Result<ZoneHazardReport> {
    if y.len() < 2 {
        return Err(Error::Validation(
            "detector suite needs at least 2 sampled cells".into(),
        ));
    }
    let mut factor_q_entries = Vec::new();
    let mut excluded = Vec::new();
    let mut stratifications: HashMap<String, Stratification> = HashMap::new();
    for (name, values) in factor_names.iter().zip(factor_values) {
        let is_cat = categorical
            .get(factor_names.iter().position(|n| n == name).unwrap())
            .copied()
            .unwrap_or(false);
        let strat = if is_cat {
            categorical_stratify(values)?
        } else {
            quantile_stratify(values, strata)?
        };
        match factor_q(y, &strat) {
            Ok(r) => {
                factor_q_entries.push(FactorQEntry {
                    factor: name.clone(),
                    q: r.q,
                    collapsed_strata: strat.collapsed,
                });
                stratifications.insert(name.clone(), strat);
            }
            Err(_) => excluded.push(name.clone()),
        }
    }
    if factor_q_entries.is_empty() {
        return Err(Error::Degenerate(format!(
            "zone {zone_id}/{hazard}: no factor produced a defined q"
        )));
    }
    factor_q_entries.sort_by(|a, b| b.q.total_cmp(&a.q).then(a.factor.cmp(&b.factor)));

    let k = top_k.min(factor_q_entries.len());
    let top_factors: Vec<String> = factor_q_entries[..k]
        .iter()
        .map(|e| e.factor.clone())
        .collect();

    let mut interactions = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let sa = &stratifications[&top_factors[i]];
            let sb = &stratifications[&top_factors[j]];
            let r = interaction_q(y, sa, sb)?;
            interactions.push(InteractionEntry {
                factor_a: top_factors[i].clone(),
                factor_b: top_factors[j].clone(),
                q12: r.q12,
                kind: r.kind,
            });
        }
    }

    // risk detector on the top factor, re-discretized to five equal-interval
    // severity levels over its range
    let (risk, risk_factor, risk_levels) = if let Some(top) = top_factors.first() {
        let fi = factor_names.iter().position(|n| n == top).unwrap();
        let strat = equal_interval_stratify(&factor_values[fi], 5)?;
        let levels = (0..strat.n_strata)
            .map(|i| RISK_LEVEL_NAMES.get(i).copied().unwrap_or("?").to_string())
            .collect();
        match risk_detect(y, &strat) {
            Ok(r) => (Some(r), Some(top.clone()), levels),
            Err(_) => (None, Some(top.clone()), levels),
        }
    } else {
        (None, None, Vec::new())
    };

    Ok(ZoneHazardReport {
        zone_id,
        hazard: hazard.to_string(),
        n_cells: y.len(),
        factor_q: factor_q_entries,
        excluded_factors: excluded,
        top_factors,
        interactions,
        risk,
        risk_factor,
        risk_levels,
    })
}
