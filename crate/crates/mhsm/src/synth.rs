//! Ground-truthed synthetic study areas for desk-scale testing: smooth
//! random factor fields, a Voronoi zone map, zone-specific quadratic logits
//! for the two hazards, and labels drawn from a Gaussian-copula Bernoulli
//! with an implanted inter-hazard correlation.

use std::collections::HashMap;

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::grid::{Raster, DEFAULT_NODATA};
use crate::partition::ZoneMap;
use crate::rng::Rng;
use crate::sampling::Point2;

/// Abramowitz-Stegun style normal CDF, accurate to ~1e-7.
pub fn norm_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(x))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736
                + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Bump {
    cx: f64,
    cy: f64,
    amp: f64,
    inv_two_s2: f64,
}

/// Zone- and hazard-specific logit coefficients over the factor stack.
struct ZoneCoeffs {
    intercept: f64,
    linear: Vec<f64>,
    quadratic: Vec<f64>,
}

pub struct SynthOutput {
    pub factors: Vec<(String, Raster)>,
    pub zones: ZoneMap,
    /// Inventories carry joint labels at the event cell.
    pub inventory_flood: Vec<(Point2, u8, u8)>,
    pub inventory_landslide: Vec<(Point2, u8, u8)>,
    pub truth_s_flood: Raster,
    pub truth_s_landslide: Raster,
    pub rho_star: f64,
    pub shortfall_flood: bool,
    pub shortfall_landslide: bool,
}

pub struct Generator {
    pub cfg: SynthConfig,
    seed: u64,
    ncols: usize,
    nrows: usize,
    factor_rasters: Vec<Raster>,
    zone_raster: Raster,
    coeffs: Vec<[ZoneCoeffs; 2]>,
    /// Per zone, per hazard affine map (a, b) standardizing the raw logit
    /// field so every zone carries a learnable signal.
    logit_affine: Vec<[(f64, f64); 2]>,
}

/// Spread of the standardized within-zone logit fields.
const LOGIT_SIGMA: f64 = 2.5;

impl Generator {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        let n_cells = (cfg.extent_m / cfg.cellsize_m).round() as usize;
        if n_cells == 0 {
            return Err(Error::Validation("extent smaller than one cell".into()));
        }
        let template = Raster::filled(n_cells, n_cells, 0.0, 0.0, cfg.cellsize_m, 0.0);

        let mut rng = Rng::substream(seed, "synth/fields");
        let mut factor_rasters = Vec::with_capacity(cfg.n_factors);
        for _ in 0..cfg.n_factors {
            let n_bumps = 5 + rng.below(4);
            let bumps: Vec<Bump> = (0..n_bumps)
                .map(|_| {
                    let s = rng.range(0.08, 0.30) * cfg.extent_m;
                    Bump {
                        cx: rng.range(0.0, cfg.extent_m),
                        cy: rng.range(0.0, cfg.extent_m),
                        amp: rng.range(-1.5, 1.5),
                        inv_two_s2: 1.0 / (2.0 * s * s),
                    }
                })
                .collect();
            let mut r = template.clone();
            for row in 0..n_cells {
                for col in 0..n_cells {
                    let (x, y) = template.cell_center(row, col);
                    let v: f64 = bumps
                        .iter()
                        .map(|b| {
                            let dx = x - b.cx;
                            let dy = y - b.cy;
                            b.amp * (-(dx * dx + dy * dy) * b.inv_two_s2).exp()
                        })
                        .sum();
                    r.set(row, col, v);
                }
            }
            factor_rasters.push(r);
        }

        let mut zrng = Rng::substream(seed, "synth/zones");
        let sites: Vec<Point2> = (0..cfg.n_zones)
            .map(|_| (zrng.range(0.0, cfg.extent_m), zrng.range(0.0, cfg.extent_m)))
            .collect();
        let mut zone_raster = template.clone();
        zone_raster.nodata = DEFAULT_NODATA;
        for row in 0..n_cells {
            for col in 0..n_cells {
                let (x, y) = template.cell_center(row, col);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, (sx, sy)) in sites.iter().enumerate() {
                    let d = (x - sx) * (x - sx) + (y - sy) * (y - sy);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                zone_raster.set(row, col, best as f64);
            }
        }

        let mut crng = Rng::substream(seed, "synth/coeffs");
        let coeffs: Vec<[ZoneCoeffs; 2]> = (0..cfg.n_zones)
            .map(|_| {
                let mut draw = || ZoneCoeffs {
                    intercept: crng.range(-0.5, 0.5),
                    linear: (0..cfg.n_factors).map(|_| crng.range(-2.5, 2.5)).collect(),
                    quadratic: (0..cfg.n_factors).map(|_| crng.range(-0.8, 0.8)).collect(),
                };
                [draw(), draw()]
            })
            .collect();

        let mut gen = Generator {
            cfg: cfg.clone(),
            seed,
            ncols: n_cells,
            nrows: n_cells,
            factor_rasters,
            zone_raster,
            coeffs,
            logit_affine: vec![[(1.0, 0.0); 2]; cfg.n_zones],
        };
        // standardize the raw logit field within each zone so that every
        // zone/hazard pair has mean = intercept and spread LOGIT_SIGMA
        let mut sums = vec![[(0.0f64, 0.0f64, 0usize); 2]; cfg.n_zones];
        for row in 0..n_cells {
            for col in 0..n_cells {
                let zone = gen.zone_raster.get(row, col) as usize;
                for h in 0..2 {
                    let v = gen.raw_logit_at(h, row, col);
                    let (s, ss, c) = sums[zone][h];
                    sums[zone][h] = (s + v, ss + v * v, c + 1);
                }
            }
        }
        for z in 0..cfg.n_zones {
            for h in 0..2 {
                let (s, ss, c) = sums[z][h];
                if c == 0 {
                    continue;
                }
                let mean = s / c as f64;
                let var = (ss / c as f64 - mean * mean).max(0.0);
                let scale = LOGIT_SIGMA / var.sqrt().max(1e-9);
                let shift = gen.coeffs[z][h].intercept - mean * scale;
                gen.logit_affine[z][h] = (scale, shift);
            }
        }
        Ok(gen)
    }

    fn raw_logit_at(&self, hazard: usize, row: usize, col: usize) -> f64 {
        let zone = self.zone_raster.get(row, col) as usize;
        let c = &self.coeffs[zone][hazard];
        let mut z = 0.0;
        for (f, raster) in self.factor_rasters.iter().enumerate() {
            let v = raster.get(row, col);
            z += c.linear[f] * v + c.quadratic[f] * v * v;
        }
        z
    }

    /// Noise-free logit of one hazard at a grid cell, a deterministic
    /// function of the factor rasters.
    pub fn logit_at(&self, hazard: usize, row: usize, col: usize) -> f64 {
        let zone = self.zone_raster.get(row, col) as usize;
        let (a, b) = self.logit_affine[zone][hazard];
        self.raw_logit_at(hazard, row, col) * a + b
    }

    fn draw_labels(&self, rng: &mut Rng, row: usize, col: usize) -> (u8, u8) {
        let rho = self.cfg.rho_star;
        let z1 = rng.normal();
        let z2 = rho * z1 + (1.0 - rho * rho).sqrt() * rng.normal();
        let noise = self.cfg.noise_std;
        let p1 = sigmoid(self.logit_at(0, row, col) + noise * rng.normal());
        let p2 = sigmoid(self.logit_at(1, row, col) + noise * rng.normal());
        ((norm_cdf(z1) < p1) as u8, (norm_cdf(z2) < p2) as u8)
    }

    /// Joint label pair at a grid cell: one frozen copula realization per
    /// cell, independent of sampling order.
    fn cell_labels(&self, row: usize, col: usize) -> (u8, u8) {
        let mut rng = Rng::substream(self.seed, &format!("synth/labels/{row}/{col}"));
        self.draw_labels(&mut rng, row, col)
    }

    /// Fresh copula realizations at one fixed cell: the Monte-Carlo view of
    /// the conditional (given-location) label dependence.
    pub fn sample_labels_at(
        &self,
        row: usize,
        col: usize,
        n: usize,
        substream: &str,
    ) -> Vec<(u8, u8)> {
        let mut rng = Rng::substream(self.seed, substream);
        (0..n)
            .map(|_| self.draw_labels(&mut rng, row, col))
            .collect()
    }

    pub fn generate(&self) -> Result<SynthOutput> {
        let cfg = &self.cfg;
        let factors: Vec<(String, Raster)> = self
            .factor_rasters
            .iter()
            .enumerate()
            .map(|(f, r)| (format!("factor_{f:02}"), r.clone()))
            .collect();
        let zones = ZoneMap::new(self.zone_raster.clone())?;

        let mut truth_f = self.factor_rasters[0].clone();
        let mut truth_l = truth_f.clone();
        for row in 0..self.nrows {
            for col in 0..self.ncols {
                truth_f.set(row, col, sigmoid(self.logit_at(0, row, col)));
                truth_l.set(row, col, sigmoid(self.logit_at(1, row, col)));
            }
        }

        // inventories: uniformly sampled cells kept when the frozen label
        // realization is positive for the hazard
        let mut label_cache: HashMap<(usize, usize), (u8, u8)> = HashMap::new();
        let mut inv_rng = Rng::substream(self.seed, "synth/inventory");
        let mut inventory_flood = Vec::with_capacity(cfg.n_inventory);
        let mut inventory_landslide = Vec::with_capacity(cfg.n_inventory);
        let budget = 200 * cfg.n_inventory.max(1);
        for _ in 0..budget {
            if inventory_flood.len() >= cfg.n_inventory
                && inventory_landslide.len() >= cfg.n_inventory
            {
                break;
            }
            let row = inv_rng.below(self.nrows);
            let col = inv_rng.below(self.ncols);
            let labels = *label_cache
                .entry((row, col))
                .or_insert_with(|| self.cell_labels(row, col));
            let center = self.zone_raster.cell_center(row, col);
            if labels.0 == 1 && inventory_flood.len() < cfg.n_inventory {
                inventory_flood.push((center, labels.0, labels.1));
            }
            if labels.1 == 1 && inventory_landslide.len() < cfg.n_inventory {
                inventory_landslide.push((center, labels.0, labels.1));
            }
        }
        // events may repeat across hazards but not within one inventory
        dedupe(&mut inventory_flood);
        dedupe(&mut inventory_landslide);

        Ok(SynthOutput {
            shortfall_flood: inventory_flood.len() < cfg.n_inventory,
            shortfall_landslide: inventory_landslide.len() < cfg.n_inventory,
            factors,
            zones,
            inventory_flood,
            inventory_landslide,
            truth_s_flood: truth_f,
            truth_s_landslide: truth_l,
            rho_star: cfg.rho_star,
        })
    }
}

fn dedupe(points: &mut Vec<(Point2, u8, u8)>) {
    let mut seen = std::collections::HashSet::new();
    points.retain(|(p, _, _)| seen.insert((p.0.to_bits(), p.1.to_bits())));
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    Generator::new(cfg, seed)?.generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            extent_m: 10_000.0,
            cellsize_m: 100.0,
            n_zones: 3,
            n_factors: 4,
            n_inventory: 200,
            rho_star: 0.0,
            noise_std: 0.2,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small_cfg();
        let a = generate(&cfg, 42).unwrap();
        let b = generate(&cfg, 42).unwrap();
        assert_eq!(a.factors[0].1.values, b.factors[0].1.values);
        assert_eq!(a.inventory_flood, b.inventory_flood);
        assert_eq!(a.zones.raster.values, b.zones.raster.values);
    }

    #[test]
    fn single_zone_constant_map() {
        let cfg = SynthConfig {
            n_zones: 1,
            ..small_cfg()
        };
        let out = generate(&cfg, 7).unwrap();
        assert!(out.zones.raster.values.iter().all(|v| *v == 0.0));
    }

    fn binary_corr(labels: &[(u8, u8)]) -> Option<f64> {
        let n = labels.len() as f64;
        let p1 = labels.iter().filter(|l| l.0 == 1).count() as f64 / n;
        let p2 = labels.iter().filter(|l| l.1 == 1).count() as f64 / n;
        let p11 = labels.iter().filter(|l| l.0 == 1 && l.1 == 1).count() as f64 / n;
        let denom = (p1 * (1.0 - p1) * p2 * (1.0 - p2)).sqrt();
        (denom > 0.0).then(|| (p11 - p1 * p2) / denom)
    }

    #[test]
    fn zero_rho_gives_conditionally_uncorrelated_labels() {
        // the copula correlation is conditional on location, so the check
        // redraws labels at fixed cells
        let cfg = small_cfg();
        let g = Generator::new(&cfg, 11).unwrap();
        for (row, col) in [(10usize, 20usize), (50, 50), (80, 15)] {
            let labels = g.sample_labels_at(row, col, 10_000, "mc_check");
            if let Some(corr) = binary_corr(&labels) {
                assert!(corr.abs() < 0.05, "cell ({row},{col}) correlation {corr}");
            }
        }
    }

    #[test]
    fn negative_rho_gives_negative_conditional_correlation() {
        let cfg = SynthConfig {
            rho_star: -0.5,
            ..small_cfg()
        };
        let g = Generator::new(&cfg, 13).unwrap();
        let mut found = 0;
        for (row, col) in [(10usize, 20usize), (50, 50), (80, 15), (30, 70)] {
            let labels = g.sample_labels_at(row, col, 20_000, "mc_check_neg");
            if let Some(corr) = binary_corr(&labels) {
                assert!(corr < 0.0, "cell ({row},{col}) correlation {corr}");
                found += 1;
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn truth_rasters_rederivable() {
        let cfg = small_cfg();
        let g = Generator::new(&cfg, 17).unwrap();
        let out = g.generate().unwrap();
        let t = &out.truth_s_flood;
        for (row, col) in [(0usize, 0usize), (10, 37), (99, 99)] {
            let expect = sigmoid(g.logit_at(0, row, col));
            assert!((t.get(row, col) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn inventories_hold_positive_labels() {
        let out = generate(&small_cfg(), 19).unwrap();
        assert!(!out.inventory_flood.is_empty());
        for (_, yf, _) in &out.inventory_flood {
            assert_eq!(*yf, 1);
        }
        for (_, _, yl) in &out.inventory_landslide {
            assert_eq!(*yl, 1);
        }
    }

    #[test]
    fn norm_cdf_reference_points() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((norm_cdf(1.959_963_985) - 0.975).abs() < 1e-6);
        assert!((norm_cdf(-1.0) - 0.158_655_25).abs() < 1e-6);
    }
}
