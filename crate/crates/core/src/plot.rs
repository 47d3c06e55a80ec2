//! SVG rendering of an episode log over its map.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::map::{load_map_from_meta, MapError, OccupancyGrid};
use crate::scenario::EPISODE_CSV;
use crate::sim::VehicleId;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("episode log not found: {0}")]
    MissingLog(PathBuf),
    #[error("{path} line {line}: {message}")]
    BadRow { path: PathBuf, line: u64, message: String },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The columns of an episode row the plot needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub collided: bool,
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
/// Pixels per grid cell.
const CELL_PX: f64 = 2.0;

/// Accepts either the episode CSV or the log directory holding it.
pub fn read_episode(path: &Path) -> Result<Vec<TraceRow>, PlotError> {
    let file = if path.is_dir() { path.join(EPISODE_CSV) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(PlotError::MissingLog(file));
    }
    let mut reader = csv::Reader::from_path(&file).map_err(|e| PlotError::BadRow {
        path: file.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let bad = |line: u64, message: String| PlotError::BadRow {
            path: file.clone(),
            line,
            message,
        };
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(line, format!("missing column {i}")));
        let num = |i: usize| -> Result<f64, PlotError> {
            field(i)?.trim().parse::<f64>().map_err(|e| bad(line, e.to_string()))
        };
        rows.push(TraceRow {
            id: field(1)?.trim().parse().map_err(|e: std::num::ParseIntError| bad(line, e.to_string()))?,
            x: num(2)?,
            y: num(3)?,
            collided: field(9)?.trim() == "1",
        });
    }
    Ok(rows)
}

/// Occupied cells as horizontal runs, one `<rect>` per run; trajectories as
/// one polyline per vehicle (class `v{id}`); a marker where each vehicle
/// first collided.
pub fn render_svg(grid: &OccupancyGrid, rows: &[TraceRow]) -> String {
    let (w, h) = (grid.width(), grid.height());
    let (pw, ph) = (w as f64 * CELL_PX, h as f64 * CELL_PX);
    let to_px = |x: f64, y: f64| {
        let (gx, gy) = grid.world_to_grid_f(x, y);
        (gx * CELL_PX, ph - gy * CELL_PX)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{pw}" height="{ph}" viewBox="0 0 {pw} {ph}">"#
    );
    let mut traces: BTreeMap<VehicleId, Vec<(f64, f64)>> = BTreeMap::new();
    let mut crashes: BTreeMap<VehicleId, (f64, f64)> = BTreeMap::new();
    for r in rows {
        traces.entry(r.id).or_default().push((r.x, r.y));
        if r.collided {
            crashes.entry(r.id).or_insert((r.x, r.y));
        }
    }
    s.push_str("<style>\n.map{fill:#333}\n.traj{fill:none;stroke-width:1.5}\n.collision{fill:none;stroke:#000;stroke-width:2}\n");
    for (i, id) in traces.keys().enumerate() {
        let _ = writeln!(s, ".v{id}{{stroke:{}}}", PALETTE[i % PALETTE.len()]);
    }
    s.push_str("</style>\n");
    let _ = writeln!(s, r##"<rect width="{pw}" height="{ph}" fill="#fff"/>"##);
    s.push_str("<g class=\"map\">\n");
    for row in 0..h {
        let mut col = 0;
        while col < w {
            if !grid.is_occupied(col as i64, row as i64) {
                col += 1;
                continue;
            }
            let start = col;
            while col < w && grid.is_occupied(col as i64, row as i64) {
                col += 1;
            }
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{CELL_PX}"/>"#,
                start as f64 * CELL_PX,
                ph - (row + 1) as f64 * CELL_PX,
                (col - start) as f64 * CELL_PX
            );
        }
    }
    s.push_str("</g>\n");
    for (id, pts) in &traces {
        let mut p = String::new();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let (px, py) = to_px(x, y);
            if i > 0 {
                p.push(' ');
            }
            let _ = write!(p, "{px:.2},{py:.2}");
        }
        let _ = writeln!(s, r#"<polyline class="traj v{id}" points="{p}"/>"#);
    }
    for (id, &(x, y)) in &crashes {
        let (px, py) = to_px(x, y);
        let _ = writeln!(s, r#"<circle class="collision v{id}" cx="{px:.2}" cy="{py:.2}" r="6"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

/// Renders `episode` (CSV or log directory) over the map named by `map_meta`.
pub fn emit_plot(episode: impl AsRef<Path>, map_meta: impl AsRef<Path>, out_svg: impl AsRef<Path>) -> Result<(), PlotError> {
    let rows = read_episode(episode.as_ref())?;
    let grid = load_map_from_meta(map_meta)?;
    let out = out_svg.as_ref();
    std::fs::write(out, render_svg(&grid, &rows)).map_err(|source| PlotError::Io {
        path: out.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2D;

    fn grid() -> OccupancyGrid {
        let mut g = OccupancyGrid::new(10, 5, 0.1, Pose2D::origin(), 0.5).unwrap();
        g.fill_where(|x, _| x > 0.75);
        g
    }

    #[test]
    fn map_only_when_log_empty() {
        let s = render_svg(&grid(), &[]);
        assert!(!s.contains("<polyline"));
        // two occupied columns in each of five rows, one run per row
        assert_eq!(s.matches("<rect x=").count(), 5);
    }

    #[test]
    fn one_polyline_per_vehicle() {
        let rows: Vec<TraceRow> = (0..4)
            .flat_map(|i| {
                [1, 2].map(|id| TraceRow {
                    id,
                    x: 0.1 * i as f64,
                    y: 0.1 * id as f64,
                    collided: id == 2 && i >= 2,
                })
            })
            .collect();
        let s = render_svg(&grid(), &rows);
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("class=\"traj v1\"") && s.contains("class=\"traj v2\""));
        assert_eq!(s.matches("<circle").count(), 1);
        assert_eq!(s, render_svg(&grid(), &rows));
    }

    #[test]
    fn missing_log() {
        let err = read_episode(Path::new("/nonexistent/episode.csv")).unwrap_err();
        assert!(matches!(err, PlotError::MissingLog(_)));
    }
}
