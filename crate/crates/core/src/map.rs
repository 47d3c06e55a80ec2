//! Occupancy grids and the PGM + key/value metadata map format.
//!
//! Grid row 0 is the row nearest the map origin; image row 0 is the top of
//! the PGM, so rows are flipped on load and save.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geom::Pose2D;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("pixel data holds {actual} bytes, header promises {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("occupied threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("malformed metadata: {0}")]
    MalformedMetadata(String),
    #[error("point ({x}, {y}) lies outside the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Cell coordinates `(col, row)`.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    occupied_threshold: f64,
    cells: Vec<f64>,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// An all-free grid.
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Pose2D,
        occupied_threshold: f64,
    ) -> Result<Self, MapError> {
        Self::from_cells(width, height, resolution, origin, occupied_threshold, vec![0.0; width * height])
    }

    pub fn from_cells(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Pose2D,
        occupied_threshold: f64,
        cells: Vec<f64>,
    ) -> Result<Self, MapError> {
        if !(occupied_threshold > 0.0 && occupied_threshold < 1.0) {
            return Err(MapError::BadThreshold(occupied_threshold));
        }
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(MapError::InvalidGrid(format!("resolution {resolution}")));
        }
        if width == 0 || height == 0 {
            return Err(MapError::InvalidGrid("empty grid".into()));
        }
        if cells.len() != width * height {
            return Err(MapError::DimensionMismatch {
                expected: width * height,
                actual: cells.len(),
            });
        }
        if let Some(v) = cells.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MapError::InvalidGrid(format!("cell value {v} outside [0, 1]")));
        }
        let occupied = cells.iter().map(|&v| v >= occupied_threshold).collect();
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            occupied_threshold,
            cells,
            occupied,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    pub fn occupied_threshold(&self) -> f64 {
        self.occupied_threshold
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        let v = value.clamp(0.0, 1.0);
        let i = row * self.width + col;
        self.cells[i] = v;
        self.occupied[i] = v >= self.occupied_threshold;
    }

    /// Occupancy of a possibly out-of-range cell; outside the grid is occupied.
    #[inline]
    pub fn is_occupied(&self, col: i64, row: i64) -> bool {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            return true;
        }
        self.occupied[row as usize * self.width + col as usize]
    }

    pub fn occupancy_mask(&self) -> &[bool] {
        &self.occupied
    }

    /// Continuous grid-frame coordinates in cell units.
    #[inline]
    pub fn world_to_grid_f(&self, x: f64, y: f64) -> (f64, f64) {
        let (lx, ly) = self.origin.point_to_local(x, y);
        (lx / self.resolution, ly / self.resolution)
    }

    /// Integer cell of a world point without bounds checking.
    #[inline]
    pub fn world_to_cell(&self, x: f64, y: f64) -> (i64, i64) {
        let (gx, gy) = self.world_to_grid_f(x, y);
        (gx.floor() as i64, gy.floor() as i64)
    }

    pub fn world_to_grid(&self, x: f64, y: f64) -> Result<Cell, MapError> {
        let (c, r) = self.world_to_cell(x, y);
        if c < 0 || r < 0 || c >= self.width as i64 || r >= self.height as i64 {
            return Err(MapError::OutOfBounds { x, y });
        }
        Ok((c as usize, r as usize))
    }

    /// World coordinates of a cell centre.
    pub fn grid_to_world(&self, col: usize, row: usize) -> (f64, f64) {
        self.origin.point_to_world(
            (col as f64 + 0.5) * self.resolution,
            (row as f64 + 0.5) * self.resolution,
        )
    }

    pub fn occupied_at(&self, x: f64, y: f64) -> bool {
        let (c, r) = self.world_to_cell(x, y);
        self.is_occupied(c, r)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if !self.occupied[row * self.width + col] {
                    out.push((col, row));
                }
            }
        }
        out
    }

    /// Marks every cell whose centre satisfies `pred` as fully occupied.
    pub fn fill_where(&mut self, mut pred: impl FnMut(f64, f64) -> bool) {
        for row in 0..self.height {
            for col in 0..self.width {
                let (x, y) = self.grid_to_world(col, row);
                if pred(x, y) {
                    self.set(col, row, 1.0);
                }
            }
        }
    }

    /// Minimum distance from a world point to any occupied cell within
    /// `radius`, or `None` if none is that close. Off-grid cells count.
    pub fn nearest_occupied_within(&self, x: f64, y: f64, radius: f64) -> Option<f64> {
        let (gx, gy) = self.world_to_grid_f(x, y);
        let rc = radius / self.resolution;
        let c0 = (gx - rc).floor() as i64;
        let c1 = (gx + rc).floor() as i64;
        let r0 = (gy - rc).floor() as i64;
        let r1 = (gy + rc).floor() as i64;
        let mut best: Option<f64> = None;
        for r in r0..=r1 {
            for c in c0..=c1 {
                if !self.is_occupied(c, r) {
                    continue;
                }
                let d = crate::geom::point_aabb_distance(gx, gy, c as f64, r as f64, c as f64 + 1.0, r as f64 + 1.0)
                    * self.resolution;
                if d <= radius && best.is_none_or(|b| d < b) {
                    best = Some(d);
                }
            }
        }
        best
    }

    /// 8-bit P5 image with white = free (no negation).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for img_row in 0..self.height {
            let row = self.height - 1 - img_row;
            for col in 0..self.width {
                let v = self.cells[row * self.width + col];
                out.push((255.0 - (v * 255.0).round()) as u8);
            }
        }
        out
    }
}

/// Values read from the map metadata file.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMeta {
    pub image: Option<String>,
    pub resolution: f64,
    pub origin: Pose2D,
    pub occupied_threshold: f64,
    pub free_threshold: Option<f64>,
    pub negate: bool,
}

impl MapMeta {
    pub fn new(resolution: f64, origin: Pose2D, occupied_threshold: f64) -> Self {
        Self {
            image: None,
            resolution,
            origin,
            occupied_threshold,
            free_threshold: None,
            negate: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self, MapError> {
        let bad = |m: String| MapError::MalformedMetadata(m);
        let mut image = None;
        let mut resolution = None;
        let mut origin = None;
        let mut occ = None;
        let mut free = None;
        let mut negate = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("line {}: expected `key: value`", lineno + 1)))?;
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("line {}: `{v}` is not a number", lineno + 1)))
            };
            match key.trim() {
                "image" => image = Some(value.to_string()),
                "resolution" => resolution = Some(num(value)?),
                "origin" => {
                    let inner = value.trim_start_matches('[').trim_end_matches(']');
                    let parts = inner
                        .split(',')
                        .map(|p| num(p.trim()))
                        .collect::<Result<Vec<_>, _>>()?;
                    if parts.len() != 3 {
                        return Err(bad(format!("line {}: origin needs x, y, theta", lineno + 1)));
                    }
                    origin = Some(Pose2D::new(parts[0], parts[1], parts[2]));
                }
                "occupied_thresh" => occ = Some(num(value)?),
                "free_thresh" => free = Some(num(value)?),
                "negate" => {
                    negate = match value {
                        "0" | "false" => false,
                        "1" | "true" => true,
                        other => return Err(bad(format!("line {}: negate `{other}`", lineno + 1))),
                    }
                }
                other => return Err(bad(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        let occupied_threshold = occ.ok_or_else(|| bad("missing occupied_thresh".into()))?;
        if !(occupied_threshold > 0.0 && occupied_threshold < 1.0) {
            return Err(MapError::BadThreshold(occupied_threshold));
        }
        Ok(Self {
            image,
            resolution: resolution.ok_or_else(|| bad("missing resolution".into()))?,
            origin: origin.ok_or_else(|| bad("missing origin".into()))?,
            occupied_threshold,
            free_threshold: free,
            negate,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(img) = &self.image {
            let _ = writeln!(s, "image: {img}");
        }
        let _ = writeln!(s, "resolution: {}", self.resolution);
        let _ = writeln!(
            s,
            "origin: [{}, {}, {}]",
            self.origin.x, self.origin.y, self.origin.theta
        );
        let _ = writeln!(s, "occupied_thresh: {}", self.occupied_threshold);
        if let Some(f) = self.free_threshold {
            let _ = writeln!(s, "free_thresh: {f}");
        }
        let _ = writeln!(s, "negate: {}", u8::from(self.negate));
        s
    }
}

/// Raw 8-bit grayscale image, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Parses a binary (P5) 8-bit PGM.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm, MapError> {
    let bad = |m: &str| MapError::MalformedHeader(m.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("magic number is not P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("header truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after maxval")),
    }
    let data = &bytes[pos..];
    let expected = width * height;
    if data.len() != expected {
        return Err(MapError::DimensionMismatch {
            expected,
            actual: data.len(),
        });
    }
    Ok(Pgm {
        width,
        height,
        pixels: data.to_vec(),
    })
}

/// Builds a grid from decoded PGM pixels and metadata.
pub fn grid_from_pgm(pgm: &Pgm, meta: &MapMeta) -> Result<OccupancyGrid, MapError> {
    let mut cells = vec![0.0; pgm.width * pgm.height];
    for img_row in 0..pgm.height {
        let row = pgm.height - 1 - img_row;
        for col in 0..pgm.width {
            let p = f64::from(pgm.pixels[img_row * pgm.width + col]);
            cells[row * pgm.width + col] = if meta.negate { p / 255.0 } else { (255.0 - p) / 255.0 };
        }
    }
    OccupancyGrid::from_cells(
        pgm.width,
        pgm.height,
        meta.resolution,
        meta.origin,
        meta.occupied_threshold,
        cells,
    )
}

fn read(path: &Path) -> Result<Vec<u8>, MapError> {
    fs::read(path).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_map(pgm_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<OccupancyGrid, MapError> {
    let meta_bytes = read(meta_path.as_ref())?;
    let meta = MapMeta::parse(&String::from_utf8_lossy(&meta_bytes))?;
    let pgm = parse_pgm(&read(pgm_path.as_ref())?)?;
    grid_from_pgm(&pgm, &meta)
}

/// Loads a map through its metadata file, resolving `image` relative to it.
pub fn load_map_from_meta(meta_path: impl AsRef<Path>) -> Result<OccupancyGrid, MapError> {
    let meta_path = meta_path.as_ref();
    let meta_bytes = read(meta_path)?;
    let meta = MapMeta::parse(&String::from_utf8_lossy(&meta_bytes))?;
    let image = meta
        .image
        .as_ref()
        .ok_or_else(|| MapError::MalformedMetadata("missing image".into()))?;
    let pgm_path = meta_path.parent().unwrap_or(Path::new(".")).join(image);
    let pgm = parse_pgm(&read(&pgm_path)?)?;
    grid_from_pgm(&pgm, &meta)
}

/// Writes `<stem>.pgm` and `<stem>.yaml` into `dir`; returns the metadata path.
pub fn save_map(grid: &OccupancyGrid, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf, MapError> {
    let dir = dir.as_ref();
    let pgm_path = dir.join(format!("{stem}.pgm"));
    let meta_path = dir.join(format!("{stem}.yaml"));
    let mut meta = MapMeta::new(grid.resolution, grid.origin, grid.occupied_threshold);
    meta.image = Some(format!("{stem}.pgm"));
    meta.free_threshold = Some(0.196);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MapError::Io { path, source }
    };
    fs::write(&pgm_path, grid.to_pgm()).map_err(io(&pgm_path))?;
    fs::write(&meta_path, meta.to_text()).map_err(io(&meta_path))?;
    Ok(meta_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n# test\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(px);
        b
    }

    fn meta(negate: bool) -> MapMeta {
        let mut m = MapMeta::new(0.05, Pose2D::origin(), 0.65);
        m.negate = negate;
        m
    }

    #[test]
    fn white_is_free_black_is_occupied() {
        let g = grid_from_pgm(&parse_pgm(&pgm(2, 2, &[255; 4])).unwrap(), &meta(false)).unwrap();
        assert!(g.cells().iter().all(|&v| v == 0.0));
        let g = grid_from_pgm(&parse_pgm(&pgm(2, 2, &[0; 4])).unwrap(), &meta(false)).unwrap();
        assert!(g.cells().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pixel_value_formula() {
        let g = grid_from_pgm(&parse_pgm(&pgm(1, 1, &[127])).unwrap(), &meta(false)).unwrap();
        assert!((g.value(0, 0) - 128.0 / 255.0).abs() < 1e-15);
        let g = grid_from_pgm(&parse_pgm(&pgm(1, 1, &[127])).unwrap(), &meta(true)).unwrap();
        assert!((g.value(0, 0) - 127.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn image_rows_are_flipped() {
        // top-left pixel black -> highest grid row, column 0
        let g = grid_from_pgm(&parse_pgm(&pgm(2, 2, &[0, 255, 255, 255])).unwrap(), &meta(false)).unwrap();
        assert_eq!(g.value(0, 1), 1.0);
        assert_eq!(g.value(0, 0), 0.0);
        assert_eq!(parse_pgm(&g.to_pgm()).unwrap().pixels, vec![0, 255, 255, 255]);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_pgm(b"P2\n2 2\n255\n"), Err(MapError::MalformedHeader(_))));
        assert!(matches!(parse_pgm(b"P5\n2 x\n255\n"), Err(MapError::MalformedHeader(_))));
        assert!(matches!(parse_pgm(b"P5\n2 2\n65535\n\0\0"), Err(MapError::MalformedHeader(_))));
        assert!(matches!(
            parse_pgm(&pgm(2, 2, &[0, 0, 0])),
            Err(MapError::DimensionMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn threshold_validation() {
        let text = "resolution: 0.05\norigin: [0, 0, 0]\noccupied_thresh: 1.0\n";
        assert!(matches!(MapMeta::parse(text), Err(MapError::BadThreshold(_))));
        let text = "resolution: 0.05\norigin: [0, 0, 0]\noccupied_thresh: 0\n";
        assert!(matches!(MapMeta::parse(text), Err(MapError::BadThreshold(_))));
    }

    #[test]
    fn metadata_round_trip() {
        let mut m = MapMeta::new(0.1, Pose2D::new(-1.5, 2.0, 0.25), 0.65);
        m.image = Some("track.pgm".into());
        m.negate = true;
        assert_eq!(MapMeta::parse(&m.to_text()).unwrap(), m);
        assert!(MapMeta::parse("resolution: 0.1\nbogus: 1\n").is_err());
    }

    #[test]
    fn world_to_grid_examples() {
        let g = OccupancyGrid::new(20, 20, 0.1, Pose2D::origin(), 0.5).unwrap();
        assert_eq!(g.world_to_grid(0.05, 0.05).unwrap(), (0, 0));
        assert_eq!(g.world_to_grid(1.0, 0.0).unwrap(), (10, 0));
        assert!(matches!(g.world_to_grid(-0.01, 0.0), Err(MapError::OutOfBounds { .. })));
        assert!(g.world_to_grid(2.0, 0.5).is_err());
    }

    #[test]
    fn cell_centres_round_trip() {
        let g = OccupancyGrid::new(37, 23, 0.05, Pose2D::new(-3.2, 1.7, 0.4), 0.5).unwrap();
        for row in 0..g.height() {
            for col in 0..g.width() {
                let (x, y) = g.grid_to_world(col, row);
                assert_eq!(g.world_to_grid(x, y).unwrap(), (col, row));
            }
        }
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = OccupancyGrid::new(8, 5, 0.05, Pose2D::new(1.0, 2.0, 0.0), 0.65).unwrap();
        g.set(3, 1, 1.0);
        g.set(0, 4, 0.5);
        let meta_path = save_map(&g, dir.path(), "m").unwrap();
        let a = load_map(dir.path().join("m.pgm"), &meta_path).unwrap();
        let b = load_map_from_meta(&meta_path).unwrap();
        assert_eq!(a, b);
        assert!(a.is_occupied(3, 1));
        assert!(!a.is_occupied(0, 4));
        assert!(a.is_occupied(-1, 0));
    }
}
