//! Two-level spatial partitioning: overlapping computational units over the
//! study extent, intersected with contextual-zone portions.
//!
//! Cores are half-open rectangles ([x0,x1) x [y0,y1)) so a point on a shared
//! edge belongs to exactly one unit. The lattice is anchored at the extent's
//! top-left corner; edge tiles are truncated, never shifted.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::Raster;

/// Axis-aligned rectangle in map meters, half-open on the high edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn expand(&self, margin: f64) -> Rect {
        Rect::new(
            self.x0 - margin,
            self.y0 - margin,
            self.x1 + margin,
            self.y1 + margin,
        )
    }

    pub fn clip(&self, bounds: &Rect) -> Rect {
        Rect::new(
            self.x0.max(bounds.x0),
            self.y0.max(bounds.y0),
            self.x1.min(bounds.x1),
            self.y1.min(bounds.y1),
        )
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// One overlapping lattice tile: disjoint core plus padded halo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputationalUnit {
    pub id: u32,
    pub core: Rect,
    pub padded: Rect,
    pub zone_ids: Vec<u32>,
}

/// Integer contextual-zone raster; nodata marks cells outside the study area.
#[derive(Debug, Clone)]
pub struct ZoneMap {
    pub raster: Raster,
}

impl ZoneMap {
    pub fn new(raster: Raster) -> Result<Self> {
        let mut any = false;
        for v in &raster.values {
            if raster.is_nodata(*v) {
                continue;
            }
            if v.fract() != 0.0 || *v < 0.0 {
                return Err(Error::Validation(format!(
                    "zone id {v} is not a non-negative integer"
                )));
            }
            any = true;
        }
        if !any {
            return Err(Error::Validation("zone map contains no zones".into()));
        }
        Ok(ZoneMap { raster })
    }

    pub fn zone_at(&self, x: f64, y: f64) -> Option<u32> {
        let v = self.raster.value_at(x, y)?;
        if self.raster.is_nodata(v) {
            None
        } else {
            Some(v as u32)
        }
    }

    /// Distinct zone ids present in the map, ascending.
    pub fn zone_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .raster
            .values
            .iter()
            .filter(|v| !self.raster.is_nodata(**v))
            .map(|v| *v as u32)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Subdivide `extent` into a lattice of computational units.
///
/// Unit ids run row-major starting at the top-left tile; cores partition the
/// extent, and padded rectangles are the cores expanded by `overlap_m` and
/// clipped back to the extent.
pub fn build_units(
    extent: &Rect,
    tile_size_m: f64,
    overlap_m: f64,
) -> Result<Vec<ComputationalUnit>> {
    if extent.is_empty() {
        return Err(Error::Validation(format!("degenerate extent {extent:?}")));
    }
    if !(tile_size_m > 2.0 * overlap_m) {
        return Err(Error::Validation(format!(
            "tile_size_m {tile_size_m} must exceed 2*overlap_m {}",
            2.0 * overlap_m
        )));
    }
    let cols = (extent.width() / tile_size_m).ceil() as usize;
    let rows = (extent.height() / tile_size_m).ceil() as usize;
    let mut units = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let x0 = extent.x0 + c as f64 * tile_size_m;
            let x1 = (x0 + tile_size_m).min(extent.x1);
            let y1 = extent.y1 - r as f64 * tile_size_m;
            let y0 = (y1 - tile_size_m).max(extent.y0);
            let core = Rect::new(x0, y0, x1, y1);
            let padded = core.expand(overlap_m).clip(extent);
            units.push(ComputationalUnit {
                id: (r * cols + c) as u32,
                core,
                padded,
                zone_ids: Vec::new(),
            });
        }
    }
    Ok(units)
}

/// Record, for each unit, the set of zones present within its padded extent.
pub fn annotate_zones(units: &mut [ComputationalUnit], zones: &ZoneMap) {
    for unit in units.iter_mut() {
        let mut ids: Vec<u32> = zone_portions(unit, zones).into_keys().collect();
        ids.sort_unstable();
        unit.zone_ids = ids;
    }
}

/// The sub-rectangle of raster cells whose centers fall inside a map
/// rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridWindow {
    pub row0: usize,
    pub col0: usize,
    pub nrows: usize,
    pub ncols: usize,
}

impl GridWindow {
    pub fn len(&self) -> usize {
        self.nrows * self.ncols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterate (window_index, raster_row, raster_col).
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let w = *self;
        (0..w.nrows)
            .flat_map(move |r| (0..w.ncols).map(move |c| (r * w.ncols + c, w.row0 + r, w.col0 + c)))
    }
}

/// Compute the window of `raster` whose cell centers lie inside `rect`.
pub fn window_of(raster: &Raster, rect: &Rect) -> GridWindow {
    // first column whose center x >= rect.x0: center = xll + (c+0.5)*cs
    let cs = raster.cellsize;
    let c0 = (((rect.x0 - raster.xll) / cs - 0.5).ceil()).max(0.0) as usize;
    let c1 = (((rect.x1 - raster.xll) / cs - 0.5).ceil()).max(0.0) as usize;
    let c1 = c1.min(raster.ncols);
    // rows count from the top; center y = yll + (nrows - r - 0.5)*cs
    // center y < rect.y1  =>  r > nrows - 0.5 - (rect.y1 - yll)/cs
    let r0f = raster.nrows as f64 - 0.5 - (rect.y1 - raster.yll) / cs;
    let r0 = (r0f.floor() + 1.0).max(0.0) as usize;
    let r1f = raster.nrows as f64 - 0.5 - (rect.y0 - raster.yll) / cs;
    let r1 = ((r1f.floor() + 1.0).max(0.0) as usize).min(raster.nrows);
    let (c0, r0) = (c0.min(raster.ncols), r0.min(raster.nrows));
    GridWindow {
        row0: r0,
        col0: c0,
        nrows: r1.saturating_sub(r0),
        ncols: c1.saturating_sub(c0),
    }
}

/// Masks over the unit's padded window, one per zone id present; cells
/// outside the study area (zone nodata) belong to no mask.
pub fn zone_portions(unit: &ComputationalUnit, zones: &ZoneMap) -> BTreeMap<u32, Vec<bool>> {
    let window = window_of(&zones.raster, &unit.padded);
    let mut masks: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for (wi, row, col) in window.cells() {
        let v = zones.raster.get(row, col);
        if zones.raster.is_nodata(v) {
            continue;
        }
        let mask = masks
            .entry(v as u32)
            .or_insert_with(|| vec![false; window.len()]);
        mask[wi] = true;
    }
    masks
}

/// Zone of the cell containing a point, or None outside the study area.
pub fn assign_zone(x: f64, y: f64, zones: &ZoneMap) -> Option<u32> {
    zones.zone_at(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DEFAULT_NODATA;

    fn square_extent(side: f64) -> Rect {
        Rect::new(0.0, 0.0, side, side)
    }

    #[test]
    fn single_tile_covers_extent() {
        let extent = square_extent(15_000.0);
        let units = build_units(&extent, 15_000.0, 1_500.0).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].core, extent);
        assert_eq!(units[0].padded, extent);
    }

    #[test]
    fn four_tile_lattice() {
        let extent = square_extent(30_000.0);
        let units = build_units(&extent, 15_000.0, 1_500.0).unwrap();
        assert_eq!(units.len(), 4);
        // unit 0 is the top-left tile
        let u0 = &units[0];
        assert_eq!(u0.core, Rect::new(0.0, 15_000.0, 15_000.0, 30_000.0));
        assert_eq!(u0.padded, Rect::new(0.0, 13_500.0, 16_500.0, 30_000.0));
        // cores tile the extent exactly
        let total: f64 = units.iter().map(|u| u.core.area()).sum();
        assert!((total - extent.area()).abs() < 1e-6);
        for i in 0..units.len() {
            for j in (i + 1)..units.len() {
                assert!(!units[i].core.intersects(&units[j].core));
            }
        }
    }

    #[test]
    fn edge_tile_truncated() {
        let extent = Rect::new(0.0, 0.0, 16_000.0, 15_000.0);
        let units = build_units(&extent, 15_000.0, 1_500.0).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[1].core, Rect::new(15_000.0, 0.0, 16_000.0, 15_000.0));
    }

    #[test]
    fn degenerate_extent_rejected() {
        let extent = Rect::new(0.0, 0.0, 0.0, 100.0);
        assert!(build_units(&extent, 100.0, 0.0).is_err());
    }

    #[test]
    fn neighbor_padding_overlap() {
        let extent = square_extent(45_000.0);
        let overlap = 1_500.0;
        let units = build_units(&extent, 15_000.0, overlap).unwrap();
        // horizontally adjacent interior units overlap by exactly 2*overlap
        let a = &units[0].padded;
        let b = &units[1].padded;
        let ox = a.x1 - b.x0;
        assert!((ox - 2.0 * overlap).abs() < 1e-9);
    }

    fn zone_raster_split_at(x_split: f64) -> ZoneMap {
        // 10x10 grid, cellsize 1500, zones 1 (west) and 2 (east)
        let (ncols, nrows, cs) = (10usize, 10usize, 1_500.0);
        let mut values = Vec::with_capacity(ncols * nrows);
        for r in 0..nrows {
            for c in 0..ncols {
                let _ = r;
                let x = (c as f64 + 0.5) * cs;
                values.push(if x < x_split { 1.0 } else { 2.0 });
            }
        }
        ZoneMap::new(Raster::new(ncols, nrows, 0.0, 0.0, cs, DEFAULT_NODATA, values).unwrap())
            .unwrap()
    }

    #[test]
    fn portions_single_zone() {
        let zones = zone_raster_split_at(-1.0); // everything zone 2
        let extent = square_extent(15_000.0);
        let units = build_units(&extent, 15_000.0, 1_500.0).unwrap();
        let masks = zone_portions(&units[0], &zones);
        assert_eq!(masks.len(), 1);
        assert!(masks[&2].iter().all(|&m| m));
    }

    #[test]
    fn portions_split_evenly() {
        let zones = zone_raster_split_at(7_500.0);
        let extent = square_extent(15_000.0);
        let units = build_units(&extent, 15_000.0, 1_500.0).unwrap();
        let masks = zone_portions(&units[0], &zones);
        let n1 = masks[&1].iter().filter(|&&m| m).count();
        let n2 = masks[&2].iter().filter(|&&m| m).count();
        assert_eq!(n1, n2);
        assert_eq!(n1 + n2, 100);
    }

    #[test]
    fn portions_outside_study_area() {
        let r = Raster::filled(10, 10, 0.0, 0.0, 1_500.0, 1.0);
        let mut raster = r;
        for v in raster.values.iter_mut().take(50) {
            *v = DEFAULT_NODATA;
        }
        raster.nodata = DEFAULT_NODATA;
        let zones = ZoneMap::new(raster).unwrap();
        // a unit lying entirely within the nodata half
        let unit = ComputationalUnit {
            id: 0,
            core: Rect::new(0.0, 7_500.0, 15_000.0, 15_000.0),
            padded: Rect::new(0.0, 7_500.0, 15_000.0, 15_000.0),
            zone_ids: vec![],
        };
        assert!(zone_portions(&unit, &zones).is_empty());
    }

    #[test]
    fn assign_zone_conventions() {
        let zones = zone_raster_split_at(7_500.0);
        // cell center inside zone 2
        assert_eq!(assign_zone(8_250.0, 750.0, &zones), Some(2));
        // out of bounds
        assert_eq!(assign_zone(-10.0, 0.0, &zones), None);
        assert_eq!(assign_zone(0.0, 15_000.0, &zones), None);
        // boundary point: floor convention puts x=7500 in the east cell
        assert_eq!(assign_zone(7_500.0, 750.0, &zones), Some(2));
    }

    #[test]
    fn every_cell_in_exactly_one_core() {
        let zones = zone_raster_split_at(7_500.0);
        let extent = square_extent(15_000.0);
        let units = build_units(&extent, 5_000.0, 1_000.0).unwrap();
        for r in 0..zones.raster.nrows {
            for c in 0..zones.raster.ncols {
                let (x, y) = zones.raster.cell_center(r, c);
                let owners = units.iter().filter(|u| u.core.contains(x, y)).count();
                assert_eq!(owners, 1, "cell ({r},{c}) owned by {owners} cores");
            }
        }
    }
}
