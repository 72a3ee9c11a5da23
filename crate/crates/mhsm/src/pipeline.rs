//! Stage orchestration over a filesystem workspace.
//!
//! Every stage reads its prerequisites from the output directory, writes its
//! artifacts under a stage subdirectory, and records a manifest holding the
//! config hash, the seed, and content hashes of its inputs. Re-running a
//! stage whose manifest still matches is a no-op, and any two runs with the
//! same config produce identical artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featsel::{self, FeatureReport};
use crate::geodetector::{self, ZoneHazardReport};
use crate::grid::{self, Hazard, Raster, SamplePoint, SampleTable, DEFAULT_PALETTE};
use crate::metrics;
use crate::moe::{self, ExpertOutputs, GateNetwork};
use crate::mosaic::{
    self, idw_merge, FactorSet, JenksBreaks, ModelKind, TileLayerRef, ZoneModelBundle,
};
use crate::mvg::{self, EfModel, MvgNet};
use crate::partition::{annotate_zones, build_units, window_of, ComputationalUnit, Rect, ZoneMap};
use crate::rng::{derive, Rng};
use crate::sampling::{
    self, kde_augment, kde_fit, negative_sample, ocsvm_fit, stratified_split, Point2, SpacingIndex,
};
use crate::synth;
use crate::trees::{gbt_train, random_search_cv};

pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// (train, val, test) index triple into a sample table.
pub type SplitIndices = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Expert outputs plus the mixture prediction (when a gate exists).
pub type SamplePrediction = (ExpertOutputs, Option<(f64, f64)>);

/// A pipeline workspace rooted at one output directory.
pub struct Workspace {
    pub out: PathBuf,
    pub cfg: RunConfig,
    cfg_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

impl Workspace {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let canonical = serde_json::to_string(&cfg).expect("config serializes");
        Ok(Workspace {
            out: out.into(),
            cfg_hash: sha256_hex(canonical.as_bytes()),
            cfg,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn ensure_dir(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(p.display().to_string(), e))
    }

    fn hash_file(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        Ok(sha256_hex(&bytes))
    }

    fn require(&self, rel: &str) -> Result<()> {
        if !self.path(rel).exists() {
            return Err(Error::MissingArtifact(rel.to_string()));
        }
        Ok(())
    }

    /// True when the stage's manifest matches the current config and input
    /// hashes and all recorded outputs still exist.
    fn stage_up_to_date(&self, stage: &str, inputs: &[String]) -> bool {
        let manifest_path = self.path(&format!("{stage}/manifest.json"));
        let Ok(text) = fs::read_to_string(&manifest_path) else {
            return false;
        };
        let Ok(manifest) = serde_json::from_str::<Manifest>(&text) else {
            return false;
        };
        if manifest.config_hash != self.cfg_hash || manifest.seed != self.cfg.seed {
            return false;
        }
        let current: Vec<String> = inputs.to_vec();
        let recorded: Vec<String> = manifest.inputs.keys().cloned().collect();
        if current != recorded {
            return false;
        }
        for (rel, recorded_hash) in &manifest.inputs {
            match self.hash_file(rel) {
                Ok(h) if &h == recorded_hash => {}
                _ => return false,
            }
        }
        manifest.outputs.iter().all(|rel| self.path(rel).exists())
    }

    fn write_manifest(&self, stage: &str, inputs: &[String], outputs: Vec<String>) -> Result<()> {
        let mut input_hashes = BTreeMap::new();
        for rel in inputs {
            input_hashes.insert(rel.clone(), self.hash_file(rel)?);
        }
        let manifest = Manifest {
            stage: stage.to_string(),
            config_hash: self.cfg_hash.clone(),
            seed: self.cfg.seed,
            inputs: input_hashes,
            outputs,
        };
        self.write_json(&format!("{stage}/manifest.json"), &manifest)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
            path: p.display().to_string(),
            msg: e.to_string(),
        })?;
        fs::write(&p, text).map_err(|e| Error::io(p.display().to_string(), e))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        self.require(rel)?;
        let p = self.path(rel);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: p.display().to_string(),
            msg: e.to_string(),
        })
    }

    // ------------------------------------------------------------------
    // shared loaders
    // ------------------------------------------------------------------

    pub fn load_zones(&self) -> Result<ZoneMap> {
        self.require("synth/zones.asc")?;
        ZoneMap::new(grid::read_ascii_grid(self.path("synth/zones.asc"))?)
    }

    pub fn load_factors(&self) -> Result<FactorSet> {
        let dir = self.path("synth/factors");
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "asc"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::MissingArtifact("synth/factors/*.asc".into()));
        }
        let mut names = Vec::new();
        let mut rasters = Vec::new();
        for p in paths {
            names.push(p.file_stem().unwrap().to_string_lossy().into_owned());
            rasters.push(grid::read_ascii_grid(&p)?);
        }
        FactorSet::new(names, rasters)
    }

    pub fn load_samples(&self) -> Result<SampleTable> {
        self.require("augment/samples.csv")?;
        grid::read_points_csv(self.path("augment/samples.csv"))
    }

    pub fn load_units(&self) -> Result<Vec<ComputationalUnit>> {
        let index: TileIndex = self.read_json("partition/tile_index.json")?;
        Ok(index.units)
    }

    pub fn load_bundle(&self, zone: u32) -> Result<ZoneModelBundle> {
        self.read_json(&format!("train/zone_{zone}.json"))
    }

    /// Deterministic per-zone splits shared by the selection, training, and
    /// evaluation stages. Points outside every zone are dropped.
    pub fn zone_splits(
        &self,
        table: &mut SampleTable,
        zones: &ZoneMap,
    ) -> BTreeMap<u32, SplitIndices> {
        for p in table.points.iter_mut() {
            p.zone_id = zones.zone_at(p.x, p.y);
        }
        let mut by_zone: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, p) in table.points.iter().enumerate() {
            if let Some(z) = p.zone_id {
                by_zone.entry(z).or_default().push(i);
            }
        }
        let mut out = BTreeMap::new();
        for (zone, members) in by_zone {
            let points: Vec<SamplePoint> =
                members.iter().map(|&i| table.points[i].clone()).collect();
            let seed = derive(self.cfg.seed, &format!("split/zone{zone}"));
            let (tr, va, te) = stratified_split(&points, SPLIT_RATIOS, seed);
            let lift =
                |idx: Vec<usize>| -> Vec<usize> { idx.into_iter().map(|i| members[i]).collect() };
            out.insert(zone, (lift(tr), lift(va), lift(te)));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileIndex {
    pub tile_size_m: f64,
    pub overlap_m: f64,
    pub units: Vec<ComputationalUnit>,
}

// ----------------------------------------------------------------------
// stage: synth
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub rho_star: f64,
    pub n_factors: usize,
    pub shortfall_flood: bool,
    pub shortfall_landslide: bool,
}

pub fn stage_synth(ws: &Workspace) -> Result<()> {
    let stage = "synth";
    if ws.stage_up_to_date(stage, &[]) {
        println!("synth: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("synth/factors")?;
    let out = synth::generate(&ws.cfg.synth, derive(ws.cfg.seed, "synth"))?;
    let mut outputs = Vec::new();
    for (name, raster) in &out.factors {
        let rel = format!("synth/factors/{name}.asc");
        grid::write_ascii_grid(raster, ws.path(&rel))?;
        outputs.push(rel);
    }
    grid::write_ascii_grid(&out.zones.raster, ws.path("synth/zones.asc"))?;
    grid::write_ascii_grid(&out.truth_s_flood, ws.path("synth/truth_sflood.asc"))?;
    grid::write_ascii_grid(
        &out.truth_s_landslide,
        ws.path("synth/truth_slandslide.asc"),
    )?;

    let write_inventory = |rows: &[(Point2, u8, u8)], rel: &str| -> Result<()> {
        let mut table = SampleTable::new(Vec::new())?;
        for ((x, y), yf, yl) in rows {
            table.points.push(SamplePoint {
                x: *x,
                y: *y,
                label_flood: *yf,
                label_landslide: *yl,
                features: Vec::new(),
                zone_id: None,
            });
        }
        grid::write_points_csv(&table, ws.path(rel))
    };
    write_inventory(&out.inventory_flood, "synth/inventory_flood.csv")?;
    write_inventory(&out.inventory_landslide, "synth/inventory_landslide.csv")?;

    let meta = SynthMeta {
        rho_star: out.rho_star,
        n_factors: out.factors.len(),
        shortfall_flood: out.shortfall_flood,
        shortfall_landslide: out.shortfall_landslide,
    };
    ws.write_json("synth/meta.json", &meta)?;
    outputs.extend(
        [
            "synth/zones.asc",
            "synth/truth_sflood.asc",
            "synth/truth_slandslide.asc",
            "synth/inventory_flood.csv",
            "synth/inventory_landslide.csv",
            "synth/meta.json",
        ]
        .map(String::from),
    );
    ws.write_manifest(stage, &[], outputs)
}

// ----------------------------------------------------------------------
// stage: partition
// ----------------------------------------------------------------------

pub fn stage_partition(ws: &Workspace) -> Result<()> {
    let stage = "partition";
    let inputs = vec!["synth/zones.asc".to_string()];
    ws.require("synth/zones.asc")?;
    if ws.stage_up_to_date(stage, &inputs) {
        println!("partition: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("partition")?;
    let zones = ws.load_zones()?;
    let (x0, y0, x1, y1) = zones.raster.extent();
    let extent = Rect::new(x0, y0, x1, y1);
    let mut units = build_units(&extent, ws.cfg.tile_size_m, ws.cfg.overlap_m)?;
    annotate_zones(&mut units, &zones);
    let index = TileIndex {
        tile_size_m: ws.cfg.tile_size_m,
        overlap_m: ws.cfg.overlap_m,
        units,
    };
    ws.write_json("partition/tile_index.json", &index)?;
    ws.write_manifest(stage, &inputs, vec!["partition/tile_index.json".into()])
}

// ----------------------------------------------------------------------
// stage: augment
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HazardAugmentReport {
    pub raw_count: usize,
    pub augment_target: usize,
    pub augmented_count: usize,
    pub augment_shortfall: bool,
    pub negative_target: usize,
    pub negative_count: usize,
    pub negative_shortfall: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentReport {
    pub flood: HazardAugmentReport,
    pub landslide: HazardAugmentReport,
    pub assembled_rows: usize,
    pub dropped_outside_study_area: usize,
}

pub fn stage_augment(ws: &Workspace) -> Result<()> {
    let stage = "augment";
    let mut inputs = vec![
        "synth/inventory_flood.csv".to_string(),
        "synth/inventory_landslide.csv".to_string(),
        "synth/zones.asc".to_string(),
    ];
    for rel in &inputs {
        ws.require(rel)?;
    }
    let factors = ws.load_factors()?;
    for name in &factors.names {
        inputs.push(format!("synth/factors/{name}.asc"));
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("augment: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("augment")?;
    let zones = ws.load_zones()?;
    let (x0, y0, x1, y1) = zones.raster.extent();
    let extent = Rect::new(x0, y0, x1, y1);
    let spacing = ws.cfg.min_spacing_m;

    let mut reports = Vec::new();
    let mut positives: Vec<Vec<Point2>> = Vec::new();
    let mut pos_labels: Vec<Vec<(u8, u8)>> = Vec::new();
    let mut negatives: Vec<Vec<Point2>> = Vec::new();
    for hazard in Hazard::BOTH {
        let rel = format!("synth/inventory_{}.csv", hazard.tag());
        let inv = grid::read_points_csv(ws.path(&rel))?;
        let coords: Vec<Point2> = inv.points.iter().map(|p| (p.x, p.y)).collect();
        if coords.len() < 2 {
            return Err(Error::Validation(format!(
                "{} inventory holds {} points; need at least 2",
                hazard.tag(),
                coords.len()
            )));
        }
        let kde = kde_fit(&coords)?;
        let target = (ws.cfg.sampling.augment_factor * coords.len() as f64).ceil() as usize;
        let aug = kde_augment(
            &kde,
            &coords,
            target,
            spacing,
            derive(ws.cfg.seed, &format!("augment/kde/{}", hazard.tag())),
        );
        let gamma = match ws.cfg.sampling.ocsvm_gamma {
            Some(g) => g,
            None => sampling::median_heuristic_gamma(&coords)?,
        };
        let ocsvm = ocsvm_fit(&coords, ws.cfg.sampling.ocsvm_nu, gamma)?;
        let neg_target = (ws.cfg.sampling.negative_ratio * aug.points.len() as f64).ceil() as usize;
        let (negs, neg_short) = negative_sample(
            &ocsvm,
            &extent,
            neg_target,
            &aug.points,
            spacing,
            derive(ws.cfg.seed, &format!("augment/neg/{}", hazard.tag())),
        )?;
        reports.push(HazardAugmentReport {
            raw_count: coords.len(),
            augment_target: target,
            augmented_count: aug.points.len(),
            augment_shortfall: aug.shortfall,
            negative_target: neg_target,
            negative_count: negs.len(),
            negative_shortfall: neg_short,
        });
        // augmented points inherit the joint labels of their source event
        let labels: Vec<(u8, u8)> = aug
            .origins
            .iter()
            .map(|&o| (inv.points[o].label_flood, inv.points[o].label_landslide))
            .collect();
        positives.push(aug.points);
        pos_labels.push(labels);
        negatives.push(negs);
    }

    // proximity fallback: a location within the working resolution of a
    // hazard's positive set is positive for that hazard
    let label_index: Vec<SpacingIndex> = positives
        .iter()
        .map(|pts| SpacingIndex::from_points(spacing.max(1e-9), pts))
        .collect();
    let near_positive = |p: Point2, h: usize| -> u8 {
        if spacing <= 0.0 {
            return 0;
        }
        (!label_index[h].clear_of(p, spacing)) as u8
    };

    let mut table = SampleTable::new(factors.names.clone())?;
    let mut seen = std::collections::HashSet::new();
    let mut dropped = 0usize;
    let mut push_row = |x: f64, y: f64, labels: (u8, u8), table: &mut SampleTable| {
        if !seen.insert((x.to_bits(), y.to_bits())) {
            return;
        }
        if zones.zone_at(x, y).is_none() {
            dropped += 1;
            return;
        }
        let mut features = Vec::with_capacity(factors.names.len());
        for raster in &factors.rasters {
            match raster.value_at(x, y) {
                Some(v) if !raster.is_nodata(v) => features.push(v),
                _ => {
                    dropped += 1;
                    return;
                }
            }
        }
        table.points.push(SamplePoint {
            x,
            y,
            label_flood: labels.0,
            label_landslide: labels.1,
            features,
            zone_id: None,
        });
    };
    for h in 0..2 {
        for (p, inherited) in positives[h].iter().zip(&pos_labels[h]) {
            let labels = (
                inherited.0.max(near_positive(*p, 0)),
                inherited.1.max(near_positive(*p, 1)),
            );
            push_row(p.0, p.1, labels, &mut table);
        }
    }
    for (h, negs) in negatives.iter().enumerate() {
        for p in negs {
            // non-occurrence of the concerned hazard; the other hazard may
            // still be positive nearby
            let other = 1 - h;
            let mut labels = [0u8, 0u8];
            labels[other] = near_positive(*p, other);
            push_row(p.0, p.1, (labels[0], labels[1]), &mut table);
        }
    }

    grid::write_points_csv(&table, ws.path("augment/samples.csv"))?;
    let report = AugmentReport {
        flood: reports[0].clone(),
        landslide: reports[1].clone(),
        assembled_rows: table.len(),
        dropped_outside_study_area: dropped,
    };
    ws.write_json("augment/report.json", &report)?;
    ws.write_manifest(
        stage,
        &inputs,
        vec!["augment/samples.csv".into(), "augment/report.json".into()],
    )
}

// ----------------------------------------------------------------------
// stage: select-features
// ----------------------------------------------------------------------

pub fn stage_select_features(ws: &Workspace, zones_filter: &[u32]) -> Result<()> {
    let stage = "featsel";
    let inputs = vec![
        "augment/samples.csv".to_string(),
        "synth/zones.asc".to_string(),
    ];
    for rel in &inputs {
        ws.require(rel)?;
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("select-features: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("featsel")?;
    let zones = ws.load_zones()?;
    let mut table = ws.load_samples()?;
    let splits = ws.zone_splits(&mut table, &zones);

    let selected: Vec<u32> = splits
        .keys()
        .copied()
        .filter(|z| zones_filter.is_empty() || zones_filter.contains(z))
        .collect();
    let reports: Vec<FeatureReport> = selected
        .par_iter()
        .map(|&zone| select_zone_features(ws, &table, zone, &splits[&zone].0))
        .collect::<Result<_>>()?;

    let mut outputs = Vec::new();
    for report in &reports {
        let rel = format!("featsel/zone_{}.json", report.zone_id);
        ws.write_json(&rel, report)?;
        outputs.push(rel);
    }
    ws.write_manifest(stage, &inputs, outputs)
}

fn select_zone_features(
    ws: &Workspace,
    table: &SampleTable,
    zone: u32,
    train_idx: &[usize],
) -> Result<FeatureReport> {
    let names = &table.feature_names;
    let x_train: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| table.points[i].features.clone())
        .collect();
    if x_train.len() < 2 {
        return Err(Error::Validation(format!(
            "zone {zone} has fewer than 2 training samples"
        )));
    }
    let (pearson, constant) = featsel::pearson_matrix(&x_train);
    let kept = featsel::collinearity_screen(&pearson, ws.cfg.pearson_threshold);
    let dropped_collinear: Vec<String> = (0..names.len())
        .filter(|i| !kept.contains(i))
        .map(|i| names[i].clone())
        .collect();
    let screened: Vec<String> = kept.iter().map(|&i| names[i].clone()).collect();
    let x_screened: Vec<Vec<f64>> = x_train
        .iter()
        .map(|row| kept.iter().map(|&i| row[i]).collect())
        .collect();

    let mut importance = Vec::new();
    let mut pct = Vec::new();
    let mut degenerate = Vec::new();
    for hazard in Hazard::BOTH {
        let y: Vec<u8> = train_idx
            .iter()
            .map(|&i| match hazard {
                Hazard::Flood => table.points[i].label_flood,
                Hazard::Landslide => table.points[i].label_landslide,
            })
            .collect();
        let single_class = y.iter().all(|&v| v == 0) || y.iter().all(|&v| v == 1);
        if single_class {
            importance.push(vec![0.0; screened.len()]);
            pct.push(vec![0.0; screened.len()]);
            degenerate.push(true);
            continue;
        }
        let seed = derive(ws.cfg.seed, &format!("featsel/zone{zone}/{}", hazard.tag()));
        let model = gbt_train(&x_screened, &y, &screened, &ws.cfg.gbt.defaults, seed)?;
        let shap = crate::trees::tree_shap(&model, &x_screened)?;
        let (imp, p, flagged) = featsel::shap_importance(&shap);
        importance.push(imp);
        pct.push(p);
        degenerate.push(flagged);
    }

    let keep_mask = featsel::zone_feature_select(&pct[0], &pct[1]);
    // a zone where neither hazard produced attributions keeps everything
    let all_degenerate = degenerate[0] && degenerate[1];
    let retained: Vec<String> = screened
        .iter()
        .enumerate()
        .filter(|(i, _)| all_degenerate || keep_mask[*i])
        .map(|(_, n)| n.clone())
        .collect();

    Ok(FeatureReport {
        zone_id: zone,
        feature_names: names.clone(),
        pearson,
        constant_features: (0..names.len())
            .filter(|&i| constant[i])
            .map(|i| names[i].clone())
            .collect(),
        dropped_collinear,
        importance_flood: importance[0].clone(),
        importance_landslide: importance[1].clone(),
        pct_flood: pct[0].clone(),
        pct_landslide: pct[1].clone(),
        flood_importance_degenerate: degenerate[0],
        landslide_importance_degenerate: degenerate[1],
        screened,
        retained,
    })
}

// ----------------------------------------------------------------------
// stage: train
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneTrainLog {
    pub zone_id: u32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub lf_flood_params: Option<crate::config::GbtHyperparams>,
    pub lf_landslide_params: Option<crate::config::GbtHyperparams>,
    pub ef_log: Option<mvg::TrainLog>,
    pub gate_log: Option<moe::GateTrainLog>,
}

pub fn stage_train(ws: &Workspace, models: &[ModelKind], zones_filter: &[u32]) -> Result<()> {
    let stage = "train";
    let mut inputs = vec![
        "augment/samples.csv".to_string(),
        "synth/zones.asc".to_string(),
    ];
    for rel in &inputs {
        ws.require(rel)?;
    }
    let zones = ws.load_zones()?;
    let mut table = ws.load_samples()?;
    let splits = ws.zone_splits(&mut table, &zones);
    for zone in splits.keys() {
        let rel = format!("featsel/zone_{zone}.json");
        ws.require(&rel)?;
        inputs.push(rel);
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("train: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("train")?;

    let want_moe = models.contains(&ModelKind::Moe);
    if want_moe && (!models.contains(&ModelKind::Ef) || !models.contains(&ModelKind::Lf)) {
        // the gate trains on both experts' outputs
        let mut missing = Vec::new();
        if !models.contains(&ModelKind::Ef) {
            missing.push("ef models (train with --models ef,lf,moe)");
        }
        if !models.contains(&ModelKind::Lf) {
            missing.push("lf models (train with --models ef,lf,moe)");
        }
        return Err(Error::MissingArtifact(missing.join(", ")));
    }

    let selected: Vec<u32> = splits
        .keys()
        .copied()
        .filter(|z| zones_filter.is_empty() || zones_filter.contains(z))
        .collect();
    let results: Vec<(ZoneModelBundle, ZoneTrainLog)> = selected
        .par_iter()
        .map(|&zone| {
            let (tr, va, te) = &splits[&zone];
            train_zone(ws, &table, zone, tr, va, te, models)
        })
        .collect::<Result<_>>()?;

    let mut outputs = Vec::new();
    for (bundle, log) in &results {
        let rel = format!("train/zone_{}.json", bundle.zone_id);
        ws.write_json(&rel, bundle)?;
        outputs.push(rel);
        let rel = format!("train/log_{}.json", bundle.zone_id);
        ws.write_json(&rel, log)?;
        outputs.push(rel);
    }
    ws.write_manifest(stage, &inputs, outputs)
}

fn gather(table: &SampleTable, idx: &[usize], features: &[String]) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<usize> = features
        .iter()
        .map(|n| {
            table
                .feature_index(n)
                .ok_or_else(|| Error::Validation(format!("unknown feature {n:?}")))
        })
        .collect::<Result<_>>()?;
    Ok(idx
        .iter()
        .map(|&i| cols.iter().map(|&c| table.points[i].features[c]).collect())
        .collect())
}

fn labels_of(table: &SampleTable, idx: &[usize], hazard: Hazard) -> Vec<u8> {
    idx.iter()
        .map(|&i| match hazard {
            Hazard::Flood => table.points[i].label_flood,
            Hazard::Landslide => table.points[i].label_landslide,
        })
        .collect()
}

fn train_zone(
    ws: &Workspace,
    table: &SampleTable,
    zone: u32,
    train_idx: &[usize],
    val_idx: &[usize],
    test_idx: &[usize],
    models: &[ModelKind],
) -> Result<(ZoneModelBundle, ZoneTrainLog)> {
    let report: FeatureReport = ws.read_json(&format!("featsel/zone_{zone}.json"))?;
    let features = report.retained.clone();
    if features.is_empty() {
        return Err(Error::Validation(format!(
            "zone {zone}: no features retained"
        )));
    }
    let x_train = gather(table, train_idx, &features)?;
    let x_val = gather(table, val_idx, &features)?;

    let mut bundle = ZoneModelBundle {
        zone_id: zone,
        retained_features: features.clone(),
        lf_flood: None,
        lf_landslide: None,
        ef: None,
        gate: None,
    };
    let mut log = ZoneTrainLog {
        zone_id: zone,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        n_test: test_idx.len(),
        lf_flood_params: None,
        lf_landslide_params: None,
        ef_log: None,
        gate_log: None,
    };

    if models.contains(&ModelKind::Lf) {
        for hazard in Hazard::BOTH {
            let y_train = labels_of(table, train_idx, hazard);
            let seed = derive(
                ws.cfg.seed,
                &format!("train/lf/zone{zone}/{}", hazard.tag()),
            );
            let params = random_search_cv(&x_train, &y_train, &features, &ws.cfg.gbt, seed)?;
            let model = gbt_train(&x_train, &y_train, &features, &params, seed)?;
            match hazard {
                Hazard::Flood => {
                    log.lf_flood_params = Some(params);
                    bundle.lf_flood = Some(model);
                }
                Hazard::Landslide => {
                    log.lf_landslide_params = Some(params);
                    bundle.lf_landslide = Some(model);
                }
            }
        }
    }

    if models.contains(&ModelKind::Ef) {
        let scaler = crate::nn::FeatureScaler::fit(&x_train);
        let xs_train: Vec<Vec<f64>> = x_train.iter().map(|r| scaler.apply(r)).collect();
        let xs_val: Vec<Vec<f64>> = x_val.iter().map(|r| scaler.apply(r)).collect();
        let pair = |idx: &[usize]| -> Vec<[f64; 2]> {
            idx.iter()
                .map(|&i| {
                    [
                        table.points[i].label_flood as f64,
                        table.points[i].label_landslide as f64,
                    ]
                })
                .collect()
        };
        let y_train = pair(train_idx);
        let y_val = pair(val_idx);
        let seed = derive(ws.cfg.seed, &format!("train/ef/zone{zone}"));
        let mut net = MvgNet::init(
            features.len(),
            &ws.cfg.mvg.hidden,
            ws.cfg.mvg.gaussian_noise_std,
            ws.cfg.mvg.dropout,
            &mut Rng::substream(seed, "init"),
        );
        let ef_log = mvg::mvg_train(
            &mut net,
            &xs_train,
            &y_train,
            &xs_val,
            &y_val,
            &ws.cfg.mvg,
            seed,
        )?;
        // calibrators fitted on the validation split
        let mut p_val_f = Vec::with_capacity(val_idx.len());
        let mut p_val_l = Vec::with_capacity(val_idx.len());
        for xv in &xs_val {
            let cache = net.forward(xv, None)?;
            p_val_f.push(mvg::sigmoid(cache.raw[0]));
            p_val_l.push(mvg::sigmoid(cache.raw[1]));
        }
        let cal_flood =
            mvg::beta_calibrate_fit(&p_val_f, &labels_of(table, val_idx, Hazard::Flood));
        let cal_landslide =
            mvg::beta_calibrate_fit(&p_val_l, &labels_of(table, val_idx, Hazard::Landslide));
        bundle.ef = Some(EfModel {
            scaler,
            net,
            cal_flood,
            cal_landslide,
        });
        log.ef_log = Some(ef_log);
    }

    if models.contains(&ModelKind::Moe) {
        let ef = bundle
            .ef
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(format!("EF model for zone {zone}")))?;
        let lf_f = bundle
            .lf_flood
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(format!("LF flood model for zone {zone}")))?;
        let lf_l = bundle
            .lf_landslide
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(format!("LF landslide model for zone {zone}")))?;
        let expert_rows = |x: &[Vec<f64>]| -> Result<Vec<ExpertOutputs>> {
            x.iter()
                .map(|row| {
                    let s = ef.predict(row)?;
                    Ok(ExpertOutputs {
                        p_lf: (lf_f.predict_proba_one(row), lf_l.predict_proba_one(row)),
                        p_ef: (s.s_flood, s.s_landslide),
                    })
                })
                .collect()
        };
        let e_train = expert_rows(&x_train)?;
        let e_val = expert_rows(&x_val)?;
        let lab = |idx: &[usize]| -> Vec<(u8, u8)> {
            idx.iter()
                .map(|&i| (table.points[i].label_flood, table.points[i].label_landslide))
                .collect()
        };
        let seed = derive(ws.cfg.seed, &format!("train/gate/zone{zone}"));
        let mut gate = GateNetwork::init(&mut Rng::substream(seed, "init"));
        let gate_log = moe::moe_train(
            &mut gate,
            &e_train,
            &lab(train_idx),
            &e_val,
            &lab(val_idx),
            &ws.cfg.gate,
            seed,
        )?;
        bundle.gate = Some(gate);
        log.gate_log = Some(gate_log);
    }

    Ok((bundle, log))
}

// ----------------------------------------------------------------------
// stage: predict
// ----------------------------------------------------------------------

const LAYER_TAGS: [&str; 4] = ["sflood", "slandslide", "logdet", "rho"];

fn tile_rel(model: ModelKind, unit: u32, layer: &str) -> String {
    format!("predict/tiles/{}_{unit}_{layer}.asc", model.tag())
}

pub fn stage_predict(ws: &Workspace, models: &[ModelKind]) -> Result<()> {
    let stage = "predict";
    let mut inputs = vec![
        "partition/tile_index.json".to_string(),
        "synth/zones.asc".to_string(),
    ];
    for rel in &inputs {
        ws.require(rel)?;
    }
    let zones = ws.load_zones()?;
    let units = ws.load_units()?;
    let factors = ws.load_factors()?;
    for name in &factors.names {
        inputs.push(format!("synth/factors/{name}.asc"));
    }
    let mut bundles = BTreeMap::new();
    for zone in zones.zone_ids() {
        let rel = format!("train/zone_{zone}.json");
        ws.require(&rel)?;
        inputs.push(rel);
        bundles.insert(zone, ws.load_bundle(zone)?);
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("predict: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("predict/tiles")?;

    let tiles = mosaic::predict_tiles(&bundles, &units, &factors, &zones, models)?;
    let template = &zones.raster;
    let mut outputs = Vec::new();
    for tile in &tiles {
        let w = tile.window;
        let sub_xll = template.xll + w.col0 as f64 * template.cellsize;
        let sub_yll = template.yll + (template.nrows - w.row0 - w.nrows) as f64 * template.cellsize;
        for (kind, layers) in &tile.models {
            let mut write_layer = |tag: &str, values: &[f64]| -> Result<()> {
                let raster = Raster::new(
                    w.ncols,
                    w.nrows,
                    sub_xll,
                    sub_yll,
                    template.cellsize,
                    template.nodata,
                    values.to_vec(),
                )?;
                let rel = tile_rel(*kind, tile.unit_id, tag);
                grid::write_ascii_grid(&raster, ws.path(&rel))?;
                outputs.push(rel);
                Ok(())
            };
            write_layer("sflood", &layers.s_flood)?;
            write_layer("slandslide", &layers.s_landslide)?;
            if let Some(v) = &layers.logdet {
                write_layer("logdet", v)?;
            }
            if let Some(v) = &layers.rho {
                write_layer("rho", v)?;
            }
        }
    }
    ws.write_manifest(stage, &inputs, outputs)
}

// ----------------------------------------------------------------------
// stage: merge
// ----------------------------------------------------------------------

fn merged_rel(model: ModelKind, layer: &str) -> String {
    format!("merge/{}_{layer}.asc", model.tag())
}

pub fn stage_merge(ws: &Workspace, models: &[ModelKind]) -> Result<()> {
    let stage = "merge";
    let mut inputs = vec![
        "partition/tile_index.json".to_string(),
        "synth/zones.asc".to_string(),
    ];
    for rel in &inputs {
        ws.require(rel)?;
    }
    let units = ws.load_units()?;
    // collect existing tile layers per model
    let mut tile_files: Vec<(ModelKind, u32, String, String)> = Vec::new();
    for model in models {
        for unit in &units {
            for layer in LAYER_TAGS {
                let rel = tile_rel(*model, unit.id, layer);
                if ws.path(&rel).exists() {
                    tile_files.push((*model, unit.id, layer.to_string(), rel));
                }
            }
        }
    }
    if tile_files.is_empty() {
        return Err(Error::MissingArtifact(
            "predict/tiles/*.asc (run predict first)".into(),
        ));
    }
    inputs.extend(tile_files.iter().map(|(_, _, _, rel)| rel.clone()));
    if ws.stage_up_to_date(stage, &inputs) {
        println!("merge: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("merge")?;
    let zones = ws.load_zones()?;
    let template = &zones.raster;
    let anchor_of: BTreeMap<u32, (f64, f64)> =
        units.iter().map(|u| (u.id, u.padded.center())).collect();

    let mut outputs = Vec::new();
    for model in models {
        for layer in LAYER_TAGS {
            let members: Vec<&(ModelKind, u32, String, String)> = tile_files
                .iter()
                .filter(|(m, _, l, _)| m == model && l == layer)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut rasters = Vec::with_capacity(members.len());
            for (_, unit_id, _, rel) in &members {
                let r = grid::read_ascii_grid(ws.path(rel))?;
                rasters.push((*unit_id, r));
            }
            let refs: Vec<TileLayerRef> = rasters
                .iter()
                .map(|(unit_id, r)| {
                    let rect = Rect::new(r.xll, r.yll, r.extent().2, r.extent().3);
                    TileLayerRef {
                        window: window_of(template, &rect),
                        anchor: anchor_of[unit_id],
                        values: &r.values,
                    }
                })
                .collect();
            let merged = idw_merge(&refs, template);
            let rel = merged_rel(*model, layer);
            grid::write_ascii_grid(&merged, ws.path(&rel))?;
            outputs.push(rel);
        }
    }
    // the MoE product inherits the EF uncertainty and correlation layers
    if models.contains(&ModelKind::Moe) {
        for layer in ["logdet", "rho"] {
            let src = merged_rel(ModelKind::Ef, layer);
            if ws.path(&src).exists() {
                let rel = merged_rel(ModelKind::Moe, layer);
                let r = grid::read_ascii_grid(ws.path(&src))?;
                grid::write_ascii_grid(&r, ws.path(&rel))?;
                outputs.push(rel);
            }
        }
    }
    ws.write_manifest(stage, &inputs, outputs)
}

// ----------------------------------------------------------------------
// stage: classify
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreaksFile {
    pub flood: JenksBreaks,
    pub landslide: JenksBreaks,
}

pub fn stage_classify(ws: &Workspace, models: &[ModelKind]) -> Result<()> {
    let stage = "classify";
    let mut inputs = Vec::new();
    let mut present = Vec::new();
    for model in models {
        let rel_f = merged_rel(*model, "sflood");
        let rel_l = merged_rel(*model, "slandslide");
        if ws.path(&rel_f).exists() && ws.path(&rel_l).exists() {
            inputs.push(rel_f);
            inputs.push(rel_l);
            present.push(*model);
        }
    }
    if present.is_empty() {
        return Err(Error::MissingArtifact(
            "merge/*_sflood.asc (run merge first)".into(),
        ));
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("classify: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("classify")?;

    // global thresholds per hazard from values pooled across all models
    let k = ws.cfg.n_severity_classes;
    let mut pool_f = Vec::new();
    let mut pool_l = Vec::new();
    let mut maps = BTreeMap::new();
    for model in &present {
        let f = grid::read_ascii_grid(ws.path(&merged_rel(*model, "sflood")))?;
        let l = grid::read_ascii_grid(ws.path(&merged_rel(*model, "slandslide")))?;
        pool_f.extend(f.values.iter().copied().filter(|v| !f.is_nodata(*v)));
        pool_l.extend(l.values.iter().copied().filter(|v| !l.is_nodata(*v)));
        maps.insert(*model, (f, l));
    }
    let breaks_f = mosaic::jenks_breaks(&pool_f, k, 10_000, derive(ws.cfg.seed, "jenks/flood"))?;
    let breaks_l =
        mosaic::jenks_breaks(&pool_l, k, 10_000, derive(ws.cfg.seed, "jenks/landslide"))?;
    ws.write_json(
        "classify/breaks.json",
        &BreaksFile {
            flood: breaks_f.clone(),
            landslide: breaks_l.clone(),
        },
    )?;

    let mut outputs = vec!["classify/breaks.json".to_string()];
    for (model, (f, l)) in &maps {
        let classes = mosaic::classify_bivariate(f, l, &breaks_f, &breaks_l)?;
        let rel = format!("classify/class_{}.asc", model.tag());
        grid::write_ascii_grid(&classes, ws.path(&rel))?;
        outputs.push(rel);
        let rel = format!("classify/class_{}.ppm", model.tag());
        grid::render_class_ppm(&classes, &DEFAULT_PALETTE, ws.path(&rel))?;
        outputs.push(rel);
    }
    ws.write_manifest(stage, &inputs, outputs)
}

// ----------------------------------------------------------------------
// stage: evaluate
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub zone_id: u32,
    pub model: String,
    pub hazard: String,
    pub n_test: usize,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub model: String,
    pub hazard: String,
    pub auc: Option<f64>,
    pub auc_zones_skipped: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JaccardEntry {
    pub model_a: String,
    pub model_b: String,
    pub flood: f64,
    pub landslide: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_zone: Vec<ZoneMetrics>,
    pub macro_averages: Vec<MacroMetrics>,
    pub mh_density: BTreeMap<String, [[f64; 5]; 5]>,
    pub jaccard: Vec<JaccardEntry>,
    /// Mean EF-predicted correlation and log-determinant over the merged
    /// map, when the EF layers exist.
    pub ef_mean_rho: Option<f64>,
    pub ef_mean_logdet: Option<f64>,
}

/// Expert and mixture predictions for a block of sample rows.
pub fn predict_samples(
    bundle: &ZoneModelBundle,
    rows: &[Vec<f64>],
) -> Result<Vec<SamplePrediction>> {
    let ef = bundle.ef.as_ref();
    let lf = bundle.lf_flood.as_ref().zip(bundle.lf_landslide.as_ref());
    rows.iter()
        .map(|row| {
            let p_ef = match ef {
                Some(m) => {
                    let s = m.predict(row)?;
                    (s.s_flood, s.s_landslide)
                }
                None => (f64::NAN, f64::NAN),
            };
            let p_lf = match lf {
                Some((f, l)) => (f.predict_proba_one(row), l.predict_proba_one(row)),
                None => (f64::NAN, f64::NAN),
            };
            let experts = ExpertOutputs { p_lf, p_ef };
            let p_moe = match &bundle.gate {
                Some(gate) => {
                    let w = moe::gate_forward(gate, &experts.gate_input())?;
                    Some(moe::moe_combine(w, p_lf, p_ef))
                }
                None => None,
            };
            Ok((experts, p_moe))
        })
        .collect()
}

pub fn stage_evaluate(ws: &Workspace, models: &[ModelKind]) -> Result<()> {
    let stage = "evaluate";
    let mut inputs = vec![
        "augment/samples.csv".to_string(),
        "synth/zones.asc".to_string(),
    ];
    for rel in &inputs {
        ws.require(rel)?;
    }
    let zones = ws.load_zones()?;
    let mut table = ws.load_samples()?;
    let splits = ws.zone_splits(&mut table, &zones);
    for zone in splits.keys() {
        let rel = format!("train/zone_{zone}.json");
        ws.require(&rel)?;
        inputs.push(rel);
    }
    for model in models {
        let rel = format!("classify/class_{}.asc", model.tag());
        if ws.path(&rel).exists() {
            inputs.push(rel);
        }
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("evaluate: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("evaluate")?;

    let mut per_zone = Vec::new();
    for (&zone, (_, _, test_idx)) in &splits {
        let bundle = ws.load_bundle(zone)?;
        let rows = gather(&table, test_idx, &bundle.retained_features)?;
        let preds = predict_samples(&bundle, &rows)?;
        for model in models {
            for hazard in Hazard::BOTH {
                let y = labels_of(&table, test_idx, hazard);
                let p: Vec<f64> = preds
                    .iter()
                    .map(|(e, m)| {
                        let pair = match model {
                            ModelKind::Lf => e.p_lf,
                            ModelKind::Ef => e.p_ef,
                            ModelKind::Moe => m.unwrap_or((f64::NAN, f64::NAN)),
                        };
                        match hazard {
                            Hazard::Flood => pair.0,
                            Hazard::Landslide => pair.1,
                        }
                    })
                    .collect();
                if p.iter().any(|v| v.is_nan()) {
                    continue; // model not trained
                }
                let auc = metrics::auc_roc(&y, &p).ok();
                let cm = metrics::confusion_metrics(&y, &p, 0.5);
                per_zone.push(ZoneMetrics {
                    zone_id: zone,
                    model: model.tag().into(),
                    hazard: hazard.tag().into(),
                    n_test: y.len(),
                    auc,
                    accuracy: cm.accuracy,
                    precision: cm.precision,
                    recall: cm.recall,
                    f1: cm.f1,
                    brier: metrics::brier(&y, &p),
                    undefined: cm.undefined.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
    }

    // macro averages over zones
    let mut macro_averages = Vec::new();
    for model in models {
        for hazard in Hazard::BOTH {
            let rows: Vec<&ZoneMetrics> = per_zone
                .iter()
                .filter(|m| m.model == model.tag() && m.hazard == hazard.tag())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let aucs: Vec<Option<f64>> = rows.iter().map(|m| m.auc).collect();
            let mean = |f: &dyn Fn(&ZoneMetrics) -> f64| -> f64 {
                rows.iter().map(|m| f(m)).sum::<f64>() / rows.len() as f64
            };
            let (auc, skipped) = match metrics::macro_average(&aucs) {
                Some((v, s)) => (Some(v), s),
                None => (None, aucs.len()),
            };
            macro_averages.push(MacroMetrics {
                model: model.tag().into(),
                hazard: hazard.tag().into(),
                auc,
                auc_zones_skipped: skipped,
                accuracy: mean(&|m| m.accuracy),
                precision: mean(&|m| m.precision),
                recall: mean(&|m| m.recall),
                f1: mean(&|m| m.f1),
                brier: mean(&|m| m.brier),
            });
        }
    }

    // inventory density over the bivariate class maps
    let occurrence: Vec<SamplePoint> = table
        .points
        .iter()
        .filter(|p| p.label_flood == 1 || p.label_landslide == 1)
        .cloned()
        .collect();
    let mut mh = BTreeMap::new();
    let mut class_maps = BTreeMap::new();
    for model in models {
        let rel = format!("classify/class_{}.asc", model.tag());
        if ws.path(&rel).exists() {
            let classes = grid::read_ascii_grid(ws.path(&rel))?;
            mh.insert(
                model.tag().to_string(),
                metrics::mh_density(&occurrence, &classes),
            );
            class_maps.insert(*model, classes);
        }
    }

    let mut jaccard = Vec::new();
    let present: Vec<ModelKind> = class_maps.keys().copied().collect();
    for i in 0..present.len() {
        for j in (i + 1)..present.len() {
            let a = &class_maps[&present[i]];
            let b = &class_maps[&present[j]];
            let jc = metrics::jaccard_high(a, b)?;
            jaccard.push(JaccardEntry {
                model_a: present[i].tag().into(),
                model_b: present[j].tag().into(),
                flood: jc.flood,
                landslide: jc.landslide,
            });
        }
    }

    let mean_layer = |rel: String| -> Option<f64> {
        let r = grid::read_ascii_grid(ws.path(&rel)).ok()?;
        let vals: Vec<f64> = r
            .values
            .iter()
            .copied()
            .filter(|v| !r.is_nodata(*v))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let report = EvaluationReport {
        per_zone,
        macro_averages,
        mh_density: mh,
        jaccard,
        ef_mean_rho: mean_layer(merged_rel(ModelKind::Ef, "rho")),
        ef_mean_logdet: mean_layer(merged_rel(ModelKind::Ef, "logdet")),
    };
    ws.write_json("evaluate/metrics.json", &report)?;
    write_metrics_csv(ws, &report)?;
    ws.write_manifest(
        stage,
        &inputs,
        vec![
            "evaluate/metrics.json".into(),
            "evaluate/metrics.csv".into(),
        ],
    )
}

fn write_metrics_csv(ws: &Workspace, report: &EvaluationReport) -> Result<()> {
    let mut csv = String::from("scope,zone,model,hazard,metric,value\n");
    for m in &report.per_zone {
        let mut push = |metric: &str, v: f64| {
            let _ = writeln!(
                csv,
                "zone,{},{},{},{metric},{v}",
                m.zone_id, m.model, m.hazard
            );
        };
        if let Some(auc) = m.auc {
            push("auc", auc);
        }
        push("accuracy", m.accuracy);
        push("precision", m.precision);
        push("recall", m.recall);
        push("f1", m.f1);
        push("brier", m.brier);
    }
    for m in &report.macro_averages {
        let mut push = |metric: &str, v: f64| {
            let _ = writeln!(csv, "macro,,{},{},{metric},{v}", m.model, m.hazard);
        };
        if let Some(auc) = m.auc {
            push("auc", auc);
        }
        push("accuracy", m.accuracy);
        push("precision", m.precision);
        push("recall", m.recall);
        push("f1", m.f1);
        push("brier", m.brier);
    }
    let p = ws.path("evaluate/metrics.csv");
    fs::write(&p, csv).map_err(|e| Error::io(p.display().to_string(), e))
}

// ----------------------------------------------------------------------
// stage: geodetector
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub report: ZoneHazardReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoDetectorReport {
    pub reports: Vec<ModelReport>,
}

pub fn stage_geodetector(ws: &Workspace, zones_filter: &[u32]) -> Result<()> {
    let stage = "geodetector";
    let models: Vec<ModelKind> = ws
        .cfg
        .geodetector
        .models
        .iter()
        .map(|s| ModelKind::parse(s))
        .collect::<Result<_>>()?;
    let mut inputs = vec!["synth/zones.asc".to_string()];
    for model in &models {
        for layer in ["sflood", "slandslide"] {
            let rel = merged_rel(*model, layer);
            ws.require(&rel)?;
            inputs.push(rel);
        }
    }
    let factors = ws.load_factors()?;
    for name in &factors.names {
        inputs.push(format!("synth/factors/{name}.asc"));
    }
    if ws.stage_up_to_date(stage, &inputs) {
        println!("geodetector: up to date, skipping");
        return Ok(());
    }
    ws.ensure_dir("geodetector")?;
    let zones = ws.load_zones()?;
    let categorical: Vec<bool> = factors
        .names
        .iter()
        .map(|n| ws.cfg.geodetector.categorical_factors.contains(n))
        .collect();

    let mut all_reports = Vec::new();
    for model in &models {
        let map_f = grid::read_ascii_grid(ws.path(&merged_rel(*model, "sflood")))?;
        let map_l = grid::read_ascii_grid(ws.path(&merged_rel(*model, "slandslide")))?;
        for zone in zones.zone_ids() {
            if !zones_filter.is_empty() && !zones_filter.contains(&zone) {
                continue;
            }
            for (hazard, map) in [(Hazard::Flood, &map_f), (Hazard::Landslide, &map_l)] {
                // sampled cell set for this zone/hazard
                let mut cells = Vec::new();
                for (i, v) in map.values.iter().enumerate() {
                    if map.is_nodata(*v) {
                        continue;
                    }
                    let zv = zones.raster.values[i];
                    if zones.raster.is_nodata(zv) || zv as u32 != zone {
                        continue;
                    }
                    cells.push(i);
                }
                if cells.len() < 2 {
                    continue;
                }
                let cap = ws.cfg.geodetector.cell_sample_cap;
                if cells.len() > cap {
                    let mut rng = Rng::substream(
                        ws.cfg.seed,
                        &format!("geodetector/{}/{zone}/{}", model.tag(), hazard.tag()),
                    );
                    let keep = rng.sample_indices(cells.len(), cap);
                    cells = keep.into_iter().map(|k| cells[k]).collect();
                }
                let y: Vec<f64> = cells.iter().map(|&i| map.values[i]).collect();
                let factor_values: Vec<Vec<f64>> = factors
                    .rasters
                    .iter()
                    .map(|r| cells.iter().map(|&i| r.values[i]).collect())
                    .collect();
                let report = geodetector::detector_suite(
                    zone,
                    hazard.tag(),
                    &y,
                    &factors.names,
                    &factor_values,
                    &categorical,
                    ws.cfg.geodetector.strata,
                    ws.cfg.geodetector.top_k,
                )?;
                all_reports.push((model.tag().to_string(), report));
            }
        }
    }

    let report = GeoDetectorReport {
        reports: all_reports
            .iter()
            .map(|(model, r)| ModelReport {
                model: model.clone(),
                report: r.clone(),
            })
            .collect(),
    };
    ws.write_json("geodetector/report.json", &report)?;
    let mut outputs = vec!["geodetector/report.json".to_string()];
    outputs.extend(render_geodetector_artifacts(ws, &all_reports)?);
    ws.write_manifest(stage, &inputs, outputs)
}

/// CSV q tables and PPM heatmaps for each zone/hazard report.
fn render_geodetector_artifacts(
    ws: &Workspace,
    reports: &[(String, ZoneHazardReport)],
) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    for (model, r) in reports {
        let base = format!("geodetector/{}_{}_zone{}", model, r.hazard, r.zone_id);
        let mut csv = String::from("factor,q\n");
        for e in &r.factor_q {
            let _ = writeln!(csv, "{},{}", e.factor, e.q);
        }
        let rel = format!("{base}_q.csv");
        let p = ws.path(&rel);
        fs::write(&p, csv).map_err(|e| Error::io(p.display().to_string(), e))?;
        outputs.push(rel);

        // interaction matrix CSV and heatmap over the top factors
        let k = r.top_factors.len();
        if k > 0 {
            let mut matrix = vec![vec![0.0f64; k]; k];
            let mut kinds = vec![vec![String::new(); k]; k];
            for (i, f) in r.top_factors.iter().enumerate() {
                let q = r
                    .factor_q
                    .iter()
                    .find(|e| &e.factor == f)
                    .map_or(0.0, |e| e.q);
                matrix[i][i] = q;
                kinds[i][i] = "self".into();
            }
            for e in &r.interactions {
                let i = r.top_factors.iter().position(|f| f == &e.factor_a).unwrap();
                let j = r.top_factors.iter().position(|f| f == &e.factor_b).unwrap();
                matrix[i][j] = e.q12;
                matrix[j][i] = e.q12;
                kinds[i][j] = e.kind.code().into();
                kinds[j][i] = e.kind.code().into();
            }
            let mut csv = String::from("factor_a,factor_b,q12,type\n");
            for e in &r.interactions {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    e.factor_a,
                    e.factor_b,
                    e.q12,
                    e.kind.code()
                );
            }
            let rel = format!("{base}_interaction.csv");
            let p = ws.path(&rel);
            fs::write(&p, csv).map_err(|e| Error::io(p.display().to_string(), e))?;
            outputs.push(rel);

            let rel = format!("{base}_interaction.ppm");
            render_heatmap(ws.path(&rel), &matrix)?;
            outputs.push(rel);
        }
    }
    Ok(outputs)
}

/// White-to-red heatmap of a small square matrix, scaled to 32x32-pixel
/// cells.
fn render_heatmap(path: PathBuf, matrix: &[Vec<f64>]) -> Result<()> {
    const CELL: usize = 32;
    let k = matrix.len();
    let side = k * CELL;
    let lo = matrix
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = matrix
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut pixels = vec![[255u8, 255, 255]; side * side];
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            let color = [
                255u8,
                (255.0 * (1.0 - t * 0.85)) as u8,
                (255.0 * (1.0 - t)) as u8,
            ];
            for py in 0..CELL {
                for px in 0..CELL {
                    pixels[(i * CELL + py) * side + j * CELL + px] = color;
                }
            }
        }
    }
    grid::write_ppm(side, side, &pixels, path)
}

// ----------------------------------------------------------------------
// stage: report
// ----------------------------------------------------------------------

/// Regenerate the derived CSV/PPM artifacts from stored models and maps
/// without retraining anything.
pub fn stage_report(ws: &Workspace, models: &[ModelKind]) -> Result<()> {
    ws.ensure_dir("report")?;
    let mut regenerated = Vec::new();
    for model in models {
        let rel = format!("classify/class_{}.asc", model.tag());
        if ws.path(&rel).exists() {
            let classes = grid::read_ascii_grid(ws.path(&rel))?;
            let out = format!("classify/class_{}.ppm", model.tag());
            grid::render_class_ppm(&classes, &DEFAULT_PALETTE, ws.path(&out))?;
            regenerated.push(out);
        }
    }
    if ws.path("evaluate/metrics.json").exists() {
        let report: EvaluationReport = ws.read_json("evaluate/metrics.json")?;
        write_metrics_csv(ws, &report)?;
        regenerated.push("evaluate/metrics.csv".into());
    }
    if ws.path("geodetector/report.json").exists() {
        let report: GeoDetectorReport = ws.read_json("geodetector/report.json")?;
        let tagged: Vec<(String, ZoneHazardReport)> = report
            .reports
            .into_iter()
            .map(|r| (r.model, r.report))
            .collect();
        regenerated.extend(render_geodetector_artifacts(ws, &tagged)?);
    }
    ws.write_json(
        "report/manifest.json",
        &Manifest {
            stage: "report".into(),
            config_hash: ws.cfg_hash.clone(),
            seed: ws.cfg.seed,
            inputs: BTreeMap::new(),
            outputs: regenerated,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;

    fn tiny_config(seed: u64, out: &std::path::Path) -> Workspace {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.tile_size_m = 4_000.0;
        cfg.overlap_m = 400.0;
        cfg.synth = SynthConfig {
            extent_m: 8_000.0,
            cellsize_m: 100.0,
            n_zones: 2,
            n_factors: 4,
            n_inventory: 150,
            rho_star: -0.3,
            noise_std: 0.2,
        };
        cfg.gbt.cv_iters = 0; // defaults only, keep the test fast
        cfg.gbt.defaults.n_trees = 40;
        cfg.gbt.defaults.max_depth = 3;
        cfg.mvg.hidden = vec![24, 12];
        cfg.mvg.max_epochs = 15;
        cfg.mvg.lr = 3e-3;
        cfg.gate.max_epochs = 15;
        cfg.geodetector.cell_sample_cap = 3_000;
        Workspace::new(cfg, out).unwrap()
    }

    fn run_all(ws: &Workspace) -> Result<()> {
        let all = ModelKind::ALL;
        stage_synth(ws)?;
        stage_partition(ws)?;
        stage_augment(ws)?;
        stage_select_features(ws, &[])?;
        stage_train(ws, &all, &[])?;
        stage_predict(ws, &all)?;
        stage_merge(ws, &all)?;
        stage_classify(ws, &all)?;
        stage_evaluate(ws, &all)?;
        stage_geodetector(ws, &[])?;
        stage_report(ws, &all)
    }

    #[test]
    fn tiny_end_to_end_and_idempotence() {
        let dir = std::env::temp_dir().join(format!("mhsm_pipe_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let ws = tiny_config(7, &dir);
        run_all(&ws).unwrap();

        // key artifacts exist
        for rel in [
            "partition/tile_index.json",
            "augment/samples.csv",
            "train/zone_0.json",
            "merge/moe_sflood.asc",
            "classify/class_moe.ppm",
            "evaluate/metrics.json",
            "geodetector/report.json",
        ] {
            assert!(ws.path(rel).exists(), "missing {rel}");
        }

        // rerunning with unchanged inputs is a no-op: manifests unchanged
        let manifest_before = fs::read_to_string(ws.path("train/manifest.json")).unwrap();
        let merged_before = fs::read_to_string(ws.path("merge/moe_sflood.asc")).unwrap();
        run_all(&ws).unwrap();
        let manifest_after = fs::read_to_string(ws.path("train/manifest.json")).unwrap();
        let merged_after = fs::read_to_string(ws.path("merge/moe_sflood.asc")).unwrap();
        assert_eq!(manifest_before, manifest_after);
        assert_eq!(merged_before, merged_after);

        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn train_moe_without_experts_is_stage_error() {
        let dir = std::env::temp_dir().join(format!("mhsm_moe_dep_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let ws = tiny_config(9, &dir);
        stage_synth(&ws).unwrap();
        stage_partition(&ws).unwrap();
        stage_augment(&ws).unwrap();
        stage_select_features(&ws, &[]).unwrap();
        let err = stage_train(&ws, &[ModelKind::Moe], &[]).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err:?}");
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn predict_without_training_names_missing_artifact() {
        let dir = std::env::temp_dir().join(format!("mhsm_missing_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let ws = tiny_config(11, &dir);
        stage_synth(&ws).unwrap();
        stage_partition(&ws).unwrap();
        let err = stage_predict(&ws, &ModelKind::ALL).unwrap_err();
        match err {
            Error::MissingArtifact(name) => assert!(name.contains("train/zone_")),
            other => panic!("expected missing artifact, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
