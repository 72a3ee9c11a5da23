//! Raster and point-table I/O.
//!
//! Rasters travel as ESRI ASCII grids: a six-line header (ncols, nrows,
//! xllcorner, yllcorner, cellsize, NODATA_value) followed by nrows rows of
//! whitespace-separated values, top row first. Values are written with the
//! shortest decimal representation that round-trips the 64-bit float, so a
//! write/read cycle is value-exact. Point tables travel as CSV with
//! mandatory x,y,flood,landslide columns followed by feature columns.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// A rectangular grid of 64-bit values with georeferencing header.
///
/// `values` is row-major with the map's top row first: cell (row 0, col 0)
/// is the top-left cell. The y coordinate of a cell grows downward in row
/// index and upward in map meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        let r = Raster {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
            values,
        };
        r.validate()?;
        Ok(r)
    }

    /// Raster filled with a constant value.
    pub fn filled(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64, v: f64) -> Self {
        Raster {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata: DEFAULT_NODATA,
            values: vec![v; ncols * nrows],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncols == 0 || self.nrows == 0 {
            return Err(Error::Dimension("raster has zero rows or columns".into()));
        }
        if !(self.cellsize > 0.0) {
            return Err(Error::Validation(format!(
                "cellsize must be > 0, got {}",
                self.cellsize
            )));
        }
        if self.values.len() != self.ncols * self.nrows {
            return Err(Error::Dimension(format!(
                "value count {} does not match ncols*nrows = {}",
                self.values.len(),
                self.ncols * self.nrows
            )));
        }
        for (i, v) in self.values.iter().enumerate() {
            if *v != self.nodata && !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.ncols + col] = v;
    }

    #[inline]
    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    /// Cell-center map coordinates of (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize,
        )
    }

    /// Cell index containing map point (x, y) by the floor convention,
    /// or None when outside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.xll) / self.cellsize).floor();
        let row_up = ((y - self.yll) / self.cellsize).floor();
        if col < 0.0 || row_up < 0.0 {
            return None;
        }
        let (col, row_up) = (col as usize, row_up as usize);
        if col >= self.ncols || row_up >= self.nrows {
            return None;
        }
        Some((self.nrows - 1 - row_up, col))
    }

    /// Value at map point (x, y); None outside the grid.
    pub fn value_at(&self, x: f64, y: f64) -> Option<f64> {
        self.cell_at(x, y).map(|(r, c)| self.get(r, c))
    }

    /// Map extent [x0, y0, x1, y1] covered by the grid.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.xll,
            self.yll,
            self.xll + self.ncols as f64 * self.cellsize,
            self.yll + self.nrows as f64 * self.cellsize,
        )
    }

    /// True when two rasters share the same grid geometry.
    pub fn same_grid(&self, other: &Raster) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }
}

/// Shortest decimal text that parses back to exactly the same f64.
fn fmt_value(v: f64) -> String {
    format!("{v}")
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_ascii_grid(&text, &path.display().to_string())
}

pub fn parse_ascii_grid(text: &str, path: &str) -> Result<Raster> {
    let mut lines = text.lines().enumerate();
    let mut header = |key: &str| -> Result<f64> {
        let (i, line) = lines.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 0,
            msg: format!("missing header line for {key}"),
        })?;
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or("");
        if !name.eq_ignore_ascii_case(key) {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("expected header key {key}, found {name:?}"),
            });
        }
        let value = parts.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: format!("missing value for {key}"),
        })?;
        value.parse::<f64>().map_err(|_| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: format!("cannot parse {value:?} as a number for {key}"),
        })
    };

    let ncols = header("ncols")?;
    let nrows = header("nrows")?;
    let xll = header("xllcorner")?;
    let yll = header("yllcorner")?;
    let cellsize = header("cellsize")?;
    let nodata = header("NODATA_value")?;

    if ncols.fract() != 0.0 || ncols < 1.0 || nrows.fract() != 0.0 || nrows < 1.0 {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("ncols/nrows must be positive integers, got {ncols}/{nrows}"),
        });
    }
    let (ncols, nrows) = (ncols as usize, nrows as usize);

    let mut values = Vec::with_capacity(ncols * nrows);
    for (i, line) in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("cannot parse {tok:?} as a cell value"),
            })?;
            values.push(v);
        }
    }
    if values.len() != ncols * nrows {
        return Err(Error::Dimension(format!(
            "{path}: expected {} cell values, found {}",
            ncols * nrows,
            values.len()
        )));
    }
    Raster::new(ncols, nrows, xll, yll, cellsize, nodata, values)
}

pub fn write_ascii_grid(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    r.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", r.ncols);
    let _ = writeln!(out, "nrows {}", r.nrows);
    let _ = writeln!(out, "xllcorner {}", fmt_value(r.xll));
    let _ = writeln!(out, "yllcorner {}", fmt_value(r.yll));
    let _ = writeln!(out, "cellsize {}", fmt_value(r.cellsize));
    let _ = writeln!(out, "NODATA_value {}", fmt_value(r.nodata));
    for row in 0..r.nrows {
        let mut line = String::new();
        for col in 0..r.ncols {
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&fmt_value(r.get(row, col)));
        }
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One georeferenced training/evaluation record. Feature values follow the
/// column order of the owning [`SampleTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
    pub label_flood: u8,
    pub label_landslide: u8,
    pub features: Vec<f64>,
    pub zone_id: Option<u32>,
}

/// A set of sample points sharing one feature schema.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleTable {
    pub feature_names: Vec<String>,
    pub points: Vec<SamplePoint>,
}

impl SampleTable {
    pub fn new(feature_names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &feature_names {
            if !seen.insert(n.clone()) {
                return Err(Error::Validation(format!("duplicate feature column {n:?}")));
            }
        }
        Ok(SampleTable {
            feature_names,
            points: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Feature matrix restricted to the named columns, row-major.
    pub fn feature_matrix(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_index(n)
                    .ok_or_else(|| Error::Validation(format!("unknown feature column {n:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .points
            .iter()
            .map(|p| idx.iter().map(|&i| p.features[i]).collect())
            .collect())
    }

    pub fn labels(&self, hazard: Hazard) -> Vec<u8> {
        self.points
            .iter()
            .map(|p| match hazard {
                Hazard::Flood => p.label_flood,
                Hazard::Landslide => p.label_landslide,
            })
            .collect()
    }
}

/// The two hazards of the bivariate workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Hazard {
    Flood,
    Landslide,
}

impl Hazard {
    pub const BOTH: [Hazard; 2] = [Hazard::Flood, Hazard::Landslide];

    pub fn tag(&self) -> &'static str {
        match self {
            Hazard::Flood => "flood",
            Hazard::Landslide => "landslide",
        }
    }
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<SampleTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_points_csv(&text, &path.display().to_string())
}

pub fn parse_points_csv(text: &str, path: &str) -> Result<SampleTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, required) in ["x", "y", "flood", "landslide"].iter().enumerate() {
        if cols.get(i).copied() != Some(*required) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!(
                    "column {} must be {required:?}, found {:?}",
                    i + 1,
                    cols.get(i)
                ),
            });
        }
    }
    let feature_names: Vec<String> = cols[4..].iter().map(|s| s.to_string()).collect();
    let mut table = SampleTable::new(feature_names)?;

    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let num = |j: usize| -> Result<f64> {
            fields[j].parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("cannot parse {:?} in column {:?}", fields[j], cols[j]),
            })
        };
        let x = num(0)?;
        let y = num(1)?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Validation(format!(
                "{path}:{}: non-finite coordinates",
                i + 1
            )));
        }
        let label = |j: usize| -> Result<u8> {
            match fields[j] {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Validation(format!(
                    "{path}:{}: label {:?} must be 0 or 1 in column {:?}",
                    i + 1,
                    other,
                    cols[j]
                ))),
            }
        };
        let label_flood = label(2)?;
        let label_landslide = label(3)?;
        let features = (4..fields.len()).map(num).collect::<Result<Vec<f64>>>()?;
        table.points.push(SamplePoint {
            x,
            y,
            label_flood,
            label_landslide,
            features,
            zone_id: None,
        });
    }
    Ok(table)
}

pub fn write_points_csv(table: &SampleTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("x,y,flood,landslide");
    for n in &table.feature_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for p in &table.points {
        let _ = write!(
            out,
            "{},{},{},{}",
            fmt_value(p.x),
            fmt_value(p.y),
            p.label_flood,
            p.label_landslide
        );
        for v in &p.features {
            let _ = write!(out, ",{}", fmt_value(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// RGB palette for the 5x5 bivariate susceptibility grid, indexed
/// [flood_class][landslide_class].
pub type BivariatePalette = [[[u8; 3]; 5]; 5];

/// Default bivariate palette: flood severity deepens blue, landslide
/// severity deepens red; joint extremes darken toward purple.
pub const DEFAULT_PALETTE: BivariatePalette = {
    let mut pal = [[[0u8; 3]; 5]; 5];
    let mut i = 0;
    while i < 5 {
        let mut j = 0;
        while j < 5 {
            let f = i as u32; // flood class 0..4
            let l = j as u32; // landslide class 0..4
            pal[i][j] = [
                (230 - 44 * f) as u8,
                (230 - 28 * f - 28 * l) as u8,
                (230 - 44 * l) as u8,
            ];
            j += 1;
        }
        i += 1;
    }
    pal
};

/// Write a binary PPM (P6) image.
pub fn write_ppm(
    width: usize,
    height: usize,
    pixels: &[[u8; 3]],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "pixel count {} does not match {width}x{height}",
            pixels.len()
        )));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = format!("P6\n{width} {height}\n255\n");
    file.write_all(header.as_bytes())
        .and_then(|_| {
            let mut buf = Vec::with_capacity(pixels.len() * 3);
            for p in pixels {
                buf.extend_from_slice(p);
            }
            file.write_all(&buf)
        })
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Render a raster of bivariate class codes (0..24) as a PPM image, one
/// pixel per cell. Nodata cells render white.
pub fn render_class_ppm(
    classes: &Raster,
    palette: &BivariatePalette,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut pixels = Vec::with_capacity(classes.values.len());
    for (i, v) in classes.values.iter().enumerate() {
        if classes.is_nodata(*v) {
            pixels.push([255u8, 255, 255]);
            continue;
        }
        let code = *v;
        if code.fract() != 0.0 || !(0.0..=24.0).contains(&code) {
            return Err(Error::Validation(format!(
                "class code {code} at flat index {i} outside 0..24"
            )));
        }
        let code = code as usize;
        pixels.push(palette[code / 5][code % 5]);
    }
    write_ppm(classes.ncols, classes.nrows, &pixels, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_grid_parses() {
        let text =
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 100\nNODATA_value -9999\n1 2\n";
        let r = parse_ascii_grid(text, "test").unwrap();
        assert_eq!(r.values, vec![1.0, 2.0]);
        assert_eq!((r.ncols, r.nrows), (2, 1));
    }

    #[test]
    fn nodata_sentinel_passthrough() {
        let text =
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 100\nNODATA_value -9999\n1 -9999\n";
        let r = parse_ascii_grid(text, "test").unwrap();
        assert!(r.is_nodata(r.values[1]));
    }

    #[test]
    fn malformed_header_names_line() {
        let text =
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsz 100\nNODATA_value -9999\n1 2\n";
        let err = parse_ascii_grid(text, "test").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn value_count_mismatch_is_dimension_error() {
        let text =
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 100\nNODATA_value -9999\n1 2 3\n";
        assert!(matches!(
            parse_ascii_grid(text, "test"),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ascii_round_trip_exact() {
        let dir = std::env::temp_dir().join("mhsm_grid_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.asc");
        let mut rng = crate::rng::Rng::new(9);
        let values: Vec<f64> = (0..9).map(|_| rng.normal() * 1e3).collect();
        let r = Raster::new(3, 3, 12.5, -7.25, 30.0, -9999.0, values).unwrap();
        write_ascii_grid(&r, &path).unwrap();
        let back = read_ascii_grid(&path).unwrap();
        assert_eq!(r, back);
        // second write reproduces the file byte for byte
        let text1 = fs::read_to_string(&path).unwrap();
        write_ascii_grid(&back, &path).unwrap();
        let text2 = fs::read_to_string(&path).unwrap();
        assert_eq!(text1, text2);
    }

    #[test]
    fn single_cell_write() {
        let dir = std::env::temp_dir().join("mhsm_grid_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("one.asc");
        let r = Raster::new(1, 1, 0.0, 0.0, 1.0, -9999.0, vec![0.0]).unwrap();
        write_ascii_grid(&r, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("0\n"));
    }

    #[test]
    fn csv_minimal() {
        let t = parse_points_csv("x,y,flood,landslide\n0,0,1,0\n", "test").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.points[0].label_flood, 1);
        assert!(t.feature_names.is_empty());
    }

    #[test]
    fn csv_feature_column() {
        let t = parse_points_csv("x,y,flood,landslide,slope\n0,0,1,0,12.5\n", "test").unwrap();
        assert_eq!(t.feature_names, vec!["slope".to_string()]);
        assert_eq!(t.points[0].features, vec![12.5]);
    }

    #[test]
    fn csv_rejects_non_binary_label() {
        let err = parse_points_csv("x,y,flood,landslide\n0,0,2,0\n", "test").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("mhsm_grid_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pts.csv");
        let mut rng = crate::rng::Rng::new(4);
        let mut table = SampleTable::new(vec!["a".into(), "b".into()]).unwrap();
        for _ in 0..10 {
            table.points.push(SamplePoint {
                x: rng.range(0.0, 1e5),
                y: rng.range(0.0, 1e5),
                label_flood: (rng.uniform() < 0.5) as u8,
                label_landslide: (rng.uniform() < 0.5) as u8,
                features: vec![rng.normal(), rng.normal() * 100.0],
                zone_id: None,
            });
        }
        write_points_csv(&table, &path).unwrap();
        let back = read_points_csv(&path).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn cell_indexing_round_trips() {
        let r = Raster::filled(4, 3, 100.0, 200.0, 50.0, 0.0);
        let (x, y) = r.cell_center(0, 0);
        assert_eq!((x, y), (125.0, 325.0));
        assert_eq!(r.cell_at(x, y), Some((0, 0)));
        // boundary point goes to the upper cell by the floor convention
        assert_eq!(r.cell_at(150.0, 250.0), Some((1, 1)));
        assert_eq!(r.cell_at(99.9, 200.0), None);
    }

    #[test]
    fn render_all_nodata_is_white() {
        let dir = std::env::temp_dir().join("mhsm_grid_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("nd.ppm");
        let r = Raster::filled(2, 2, 0.0, 0.0, 1.0, DEFAULT_NODATA);
        render_class_ppm(&r, &DEFAULT_PALETTE, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let body = &bytes[bytes.len() - 12..];
        assert!(body.iter().all(|b| *b == 255));
    }

    #[test]
    fn render_palette_layout() {
        let dir = std::env::temp_dir().join("mhsm_grid_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pal.ppm");
        let values: Vec<f64> = (0..25).map(|c| c as f64).collect();
        let r = Raster::new(5, 5, 0.0, 0.0, 1.0, -9999.0, values).unwrap();
        render_class_ppm(&r, &DEFAULT_PALETTE, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let body = &bytes[bytes.len() - 75..];
        for code in 0..25 {
            let px = &body[code * 3..code * 3 + 3];
            assert_eq!(px, &DEFAULT_PALETTE[code / 5][code % 5]);
        }
    }

    #[test]
    fn render_rejects_out_of_range_code() {
        let r = Raster::new(1, 1, 0.0, 0.0, 1.0, -9999.0, vec![25.0]).unwrap();
        let err = render_class_ppm(&r, &DEFAULT_PALETTE, std::env::temp_dir().join("bad.ppm"));
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
