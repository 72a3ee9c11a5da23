//! Tile-parallel inference and map assembly: per-unit prediction over zone
//! portions, inverse-distance-weighted merging of overlapping tiles, Jenks
//! natural-break discretization, and bivariate classification.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::moe::{gate_forward, moe_combine, GateNetwork};
use crate::mvg::EfModel;
use crate::partition::{window_of, zone_portions, ComputationalUnit, GridWindow, ZoneMap};
use crate::rng::Rng;
use crate::trees::GbtModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Ef,
    Lf,
    Moe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Ef, ModelKind::Lf, ModelKind::Moe];

    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Ef => "ef",
            ModelKind::Lf => "lf",
            ModelKind::Moe => "moe",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "ef" => Ok(ModelKind::Ef),
            "lf" => Ok(ModelKind::Lf),
            "moe" => Ok(ModelKind::Moe),
            other => Err(Error::Validation(format!("unknown model {other:?}"))),
        }
    }
}

/// Per-zone trained artifacts. Models a run did not train stay None.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneModelBundle {
    pub zone_id: u32,
    pub retained_features: Vec<String>,
    pub lf_flood: Option<GbtModel>,
    pub lf_landslide: Option<GbtModel>,
    pub ef: Option<EfModel>,
    pub gate: Option<GateNetwork>,
}

/// Named stack of factor rasters sharing one grid.
#[derive(Debug, Clone)]
pub struct FactorSet {
    pub names: Vec<String>,
    pub rasters: Vec<Raster>,
}

impl FactorSet {
    pub fn new(names: Vec<String>, rasters: Vec<Raster>) -> Result<Self> {
        if names.len() != rasters.len() {
            return Err(Error::Dimension(
                "factor names and rasters differ in length".into(),
            ));
        }
        if let Some(first) = rasters.first() {
            for (n, r) in names.iter().zip(&rasters) {
                if !r.same_grid(first) {
                    return Err(Error::Validation(format!(
                        "factor {n:?} is not on the common grid"
                    )));
                }
            }
        }
        Ok(FactorSet { names, rasters })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Validation(format!("unknown factor {name:?}")))
    }
}

/// One merged-output layer set over a tile window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileLayers {
    pub s_flood: Vec<f64>,
    pub s_landslide: Vec<f64>,
    pub logdet: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TilePrediction {
    pub unit_id: u32,
    pub window: GridWindow,
    /// Center of the unit's padded rectangle: the IDW distance anchor.
    pub anchor: (f64, f64),
    pub models: BTreeMap<ModelKind, TileLayers>,
}

fn blank(n: usize, nodata: f64) -> Vec<f64> {
    vec![nodata; n]
}

/// Predict one computational unit across its zone portions.
fn predict_unit(
    unit: &ComputationalUnit,
    bundles: &BTreeMap<u32, ZoneModelBundle>,
    factors: &FactorSet,
    zones: &ZoneMap,
    models: &[ModelKind],
) -> Result<TilePrediction> {
    let template = &zones.raster;
    let window = window_of(template, &unit.padded);
    let nodata = template.nodata;
    let n = window.len();

    let want = |m: ModelKind| models.contains(&m);
    let need_ef = want(ModelKind::Ef) || want(ModelKind::Moe);
    let need_lf = want(ModelKind::Lf) || want(ModelKind::Moe);

    let mut layers: BTreeMap<ModelKind, TileLayers> = BTreeMap::new();
    for m in models {
        layers.insert(
            *m,
            TileLayers {
                s_flood: blank(n, nodata),
                s_landslide: blank(n, nodata),
                logdet: (*m == ModelKind::Ef).then(|| blank(n, nodata)),
                rho: (*m == ModelKind::Ef).then(|| blank(n, nodata)),
            },
        );
    }

    for (zone_id, mask) in zone_portions(unit, zones) {
        let bundle = bundles
            .get(&zone_id)
            .ok_or_else(|| Error::Config(format!("no trained bundle for zone {zone_id}")))?;
        let feat_idx: Vec<usize> = bundle
            .retained_features
            .iter()
            .map(|f| factors.index_of(f))
            .collect::<Result<_>>()?;
        let ef =
            if need_ef {
                Some(bundle.ef.as_ref().ok_or_else(|| {
                    Error::MissingArtifact(format!("EF model for zone {zone_id}"))
                })?)
            } else {
                None
            };
        let lf = if need_lf {
            let f = bundle.lf_flood.as_ref().ok_or_else(|| {
                Error::MissingArtifact(format!("LF flood model for zone {zone_id}"))
            })?;
            let l = bundle.lf_landslide.as_ref().ok_or_else(|| {
                Error::MissingArtifact(format!("LF landslide model for zone {zone_id}"))
            })?;
            Some((f, l))
        } else {
            None
        };
        let gate: Option<&GateNetwork> =
            if want(ModelKind::Moe) {
                Some(bundle.gate.as_ref().ok_or_else(|| {
                    Error::MissingArtifact(format!("MoE gate for zone {zone_id}"))
                })?)
            } else {
                None
            };

        let mut row_buf = vec![0.0; feat_idx.len()];
        'cells: for (wi, row, col) in window.cells() {
            if !mask[wi] {
                continue;
            }
            for (slot, &fi) in row_buf.iter_mut().zip(&feat_idx) {
                let v = factors.rasters[fi].get(row, col);
                if factors.rasters[fi].is_nodata(v) {
                    continue 'cells; // outside the effective study area
                }
                *slot = v;
            }
            let ef_out = match ef {
                Some(model) => Some(model.predict(&row_buf)?),
                None => None,
            };
            let lf_out = lf.map(|(mf, ml)| {
                (
                    mf.predict_proba_one(&row_buf),
                    ml.predict_proba_one(&row_buf),
                )
            });
            if let Some(out) = &ef_out {
                if let Some(l) = layers.get_mut(&ModelKind::Ef) {
                    l.s_flood[wi] = out.s_flood;
                    l.s_landslide[wi] = out.s_landslide;
                    l.logdet.as_mut().unwrap()[wi] = out.logdet;
                    l.rho.as_mut().unwrap()[wi] = out.rho;
                }
            }
            if let Some((pf, pl)) = lf_out {
                if let Some(l) = layers.get_mut(&ModelKind::Lf) {
                    l.s_flood[wi] = pf;
                    l.s_landslide[wi] = pl;
                }
            }
            if let Some(g) = gate {
                let e = ef_out.as_ref().expect("gate requires EF output");
                let (pf_lf, pl_lf) = lf_out.expect("gate requires LF output");
                let w = gate_forward(g, &[pf_lf, pl_lf, e.s_flood, e.s_landslide])?;
                let p = moe_combine(w, (pf_lf, pl_lf), (e.s_flood, e.s_landslide));
                if let Some(l) = layers.get_mut(&ModelKind::Moe) {
                    l.s_flood[wi] = p.0;
                    l.s_landslide[wi] = p.1;
                }
            }
        }
    }

    Ok(TilePrediction {
        unit_id: unit.id,
        window,
        anchor: unit.padded.center(),
        models: layers,
    })
}

/// Evaluate every unit, in parallel; outputs are ordered by unit and
/// independent of scheduling.
pub fn predict_tiles(
    bundles: &BTreeMap<u32, ZoneModelBundle>,
    units: &[ComputationalUnit],
    factors: &FactorSet,
    zones: &ZoneMap,
    models: &[ModelKind],
) -> Result<Vec<TilePrediction>> {
    units
        .par_iter()
        .map(|u| predict_unit(u, bundles, factors, zones, models))
        .collect()
}

/// A named layer of one tile, as stored on disk between the predict and
/// merge stages.
#[derive(Debug, Clone)]
pub struct TileLayerRef<'a> {
    pub window: GridWindow,
    pub anchor: (f64, f64),
    pub values: &'a [f64],
}

/// Inverse-distance-weighted merge of overlapping tile layers onto the
/// template grid: per cell, weights 1/(d^2 + 1e-6) anchored at each tile's
/// padded-rectangle center. Cells covered by one tile pass through exactly;
/// uncovered cells stay nodata.
pub fn idw_merge(tiles: &[TileLayerRef<'_>], template: &Raster) -> Raster {
    const EPS: f64 = 1e-6;
    let n = template.values.len();
    let mut sum_wv = vec![0.0f64; n];
    let mut sum_w = vec![0.0f64; n];
    let mut vmin = vec![f64::INFINITY; n];
    let mut vmax = vec![f64::NEG_INFINITY; n];
    for tile in tiles {
        for (wi, row, col) in tile.window.cells() {
            let v = tile.values[wi];
            if v == template.nodata {
                continue;
            }
            let (cx, cy) = template.cell_center(row, col);
            let dx = cx - tile.anchor.0;
            let dy = cy - tile.anchor.1;
            let w = 1.0 / (dx * dx + dy * dy + EPS);
            let flat = row * template.ncols + col;
            sum_wv[flat] += w * v;
            sum_w[flat] += w;
            vmin[flat] = vmin[flat].min(v);
            vmax[flat] = vmax[flat].max(v);
        }
    }
    let mut out = template.clone();
    for i in 0..n {
        out.values[i] = if vmin[i] > vmax[i] {
            template.nodata
        } else if vmin[i] == vmax[i] {
            // agreeing contributors (or a single one) pass through exactly
            vmin[i]
        } else {
            // convexity holds exactly: clamp away rounding spill
            (sum_wv[i] / sum_w[i]).clamp(vmin[i], vmax[i])
        };
    }
    out
}

/// Natural-break thresholds: k-1 ascending cut values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JenksBreaks {
    pub thresholds: Vec<f64>,
    pub objective: f64,
}

/// Exact Fisher-Jenks dynamic program minimizing the within-class sum of
/// squared deviations. Inputs beyond `sample_cap` values are subsampled
/// (seeded) before the DP. Each threshold is the smallest value of its
/// upper class.
pub fn jenks_breaks(values: &[f64], k: usize, sample_cap: usize, seed: u64) -> Result<JenksBreaks> {
    if k == 0 {
        return Err(Error::Validation("class count must be >= 1".into()));
    }
    let mut data: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if data.len() > sample_cap {
        let mut rng = Rng::substream(seed, "jenks_sample");
        let idx = rng.sample_indices(data.len(), sample_cap);
        data = idx.into_iter().map(|i| data[i]).collect();
    }
    data.sort_by(f64::total_cmp);
    let mut distinct = data.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Degenerate(format!(
            "need at least {k} distinct values, found {}",
            distinct.len()
        )));
    }
    if k == 1 {
        return Ok(JenksBreaks {
            thresholds: Vec::new(),
            objective: slice_cost(&prefix_sums(&data), 0, data.len()),
        });
    }

    let n = data.len();
    let sums = prefix_sums(&data);
    // dp[m][j]: best cost of the first j values in m+1 classes
    let mut dp = vec![f64::INFINITY; n + 1];
    let mut back = vec![vec![0usize; n + 1]; k];
    for j in 1..=n {
        dp[j] = slice_cost(&sums, 0, j);
    }
    for m in 1..k {
        let mut next = vec![f64::INFINITY; n + 1];
        for j in (m + 1)..=n {
            let mut best = f64::INFINITY;
            let mut arg = 0usize;
            for i in m..j {
                let c = dp[i] + slice_cost(&sums, i, j);
                if c < best {
                    best = c;
                    arg = i;
                }
            }
            next[j] = best;
            back[m][j] = arg;
        }
        dp = next;
    }

    let mut cuts = Vec::with_capacity(k - 1);
    let mut j = n;
    for m in (1..k).rev() {
        let i = back[m][j];
        cuts.push(i);
        j = i;
    }
    cuts.reverse();
    let thresholds: Vec<f64> = cuts.iter().map(|&c| data[c]).collect();
    for w in thresholds.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Degenerate(
                "tied values prevent strictly ascending thresholds".into(),
            ));
        }
    }
    Ok(JenksBreaks {
        thresholds,
        objective: dp[n],
    })
}

fn prefix_sums(sorted: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut s1 = Vec::with_capacity(sorted.len() + 1);
    let mut s2 = Vec::with_capacity(sorted.len() + 1);
    s1.push(0.0);
    s2.push(0.0);
    for v in sorted {
        s1.push(s1.last().unwrap() + v);
        s2.push(s2.last().unwrap() + v * v);
    }
    (s1, s2)
}

/// Within-class SSD of sorted[i..j] from prefix sums.
fn slice_cost(sums: &(Vec<f64>, Vec<f64>), i: usize, j: usize) -> f64 {
    let n = (j - i) as f64;
    let s = sums.0[j] - sums.0[i];
    let ss = sums.1[j] - sums.1[i];
    (ss - s * s / n).max(0.0)
}

/// Ordinal class of a value: the count of thresholds at or below it, so a
/// value equal to a threshold lands in the upper class.
pub fn class_of(value: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|t| **t <= value).count()
}

/// Combine per-hazard class layers into bivariate codes 5*flood + landslide.
/// Nodata in either input propagates.
pub fn classify_bivariate(
    s_flood: &Raster,
    s_landslide: &Raster,
    breaks_flood: &JenksBreaks,
    breaks_landslide: &JenksBreaks,
) -> Result<Raster> {
    if !s_flood.same_grid(s_landslide) {
        return Err(Error::Validation(
            "susceptibility rasters do not share one grid".into(),
        ));
    }
    if breaks_flood.thresholds.len() != 4 || breaks_landslide.thresholds.len() != 4 {
        return Err(Error::Validation(
            "bivariate classification expects 4 thresholds per hazard".into(),
        ));
    }
    let mut out = s_flood.clone();
    for i in 0..out.values.len() {
        let f = s_flood.values[i];
        let l = s_landslide.values[i];
        out.values[i] = if s_flood.is_nodata(f) || s_landslide.is_nodata(l) {
            out.nodata
        } else {
            let cf = class_of(f, &breaks_flood.thresholds);
            let cl = class_of(l, &breaks_landslide.thresholds);
            (5 * cf + cl) as f64
        };
    }
    Ok(out)
}
