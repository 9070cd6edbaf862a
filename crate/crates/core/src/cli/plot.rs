//! Static SVG charts for run directories. Each data series is embedded
//! verbatim in `data-x` / `data-y` attributes so the plotted numbers can be
//! recovered from the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, VglError};
use crate::learners::LogRow;

use super::config::RunConfig;
use super::run::{read_log, CONFIG_FILE, LOG_FILE, TRAJECTORY_FILE};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw a marker at every point.
    pub markers: bool,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot `log10(y)`; non-positive values are dropped.
    pub log_y: bool,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            let pad = 0.5 * (1.0 + lo.abs());
            return Range { lo: lo - pad, hi: hi + pad };
        }
        Range { lo, hi }
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4).map(|k| self.lo + (self.hi - self.lo) * k as f64 / 4.0).collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{v:.1}")
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

impl Chart {
    /// Finite points of a series in plot coordinates.
    fn transformed(&self, s: &Series) -> Vec<(f64, f64)> {
        s.points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
            .map(|&(x, y)| (x, if self.log_y { y.log10() } else { y }))
            .collect()
    }

    pub fn to_svg(&self) -> String {
        let data: Vec<Vec<(f64, f64)>> = self.series.iter().map(|s| self.transformed(s)).collect();
        let xr = Range::of(data.iter().flatten().map(|p| p.0));
        let yr = Range::of(data.iter().flatten().map(|p| p.1));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - xr.lo) / (xr.hi - xr.lo) * pw;
        let sy = |y: f64| MARGIN_TOP + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect class="axes" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for t in xr.ticks() {
            let x = sx(t);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                MARGIN_TOP + ph,
                MARGIN_TOP + ph + 5.0,
                MARGIN_TOP + ph + 18.0,
                tick_label(t, false)
            );
        }
        for t in yr.ticks() {
            let y = sy(t);
            let _ = writeln!(
                svg,
                r#"<line x1="{}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 5.0,
                MARGIN_LEFT - 8.0,
                y + 4.0,
                tick_label(t, self.log_y)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (k, (s, pts)) in self.series.iter().zip(&data).enumerate() {
            if pts.is_empty() {
                continue;
            }
            let color = COLORS[k % COLORS.len()];
            let join = |f: &dyn Fn(&(f64, f64)) -> String| pts.iter().map(f).collect::<Vec<_>>().join(" ");
            let raw: Vec<&(f64, f64)> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
                .collect();
            let data_x = raw.iter().map(|p| format!("{:e}", p.0)).collect::<Vec<_>>().join(" ");
            let data_y = raw.iter().map(|p| format!("{:e}", p.1)).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-name="{}" data-x="{data_x}" data-y="{data_y}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                escape(&s.name),
                join(&|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            );
            if s.markers {
                for p in pts {
                    let _ = writeln!(
                        svg,
                        r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                        sx(p.0),
                        sy(p.1)
                    );
                }
            }
            let ly = MARGIN_TOP + 14.0 + 14.0 * k as f64;
            let lx = MARGIN_LEFT + pw - 150.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

pub fn learning_curve(rows: &[LogRow]) -> Chart {
    Chart {
        title: "Learning curve".into(),
        x_label: "iteration".into(),
        y_label: "total reward".into(),
        log_y: false,
        series: vec![Series {
            name: "total_reward".into(),
            points: rows.iter().map(|r| (r.iteration as f64, r.total_reward)).collect(),
            markers: false,
        }],
    }
}

pub fn residual_chart(rows: &[LogRow]) -> Chart {
    let series = |name: &str, f: fn(&LogRow) -> f64| Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.iteration as f64, f(r))).collect(),
        markers: false,
    };
    Chart {
        title: "Residual norms".into(),
        x_label: "iteration".into(),
        y_label: "log10 residual".into(),
        log_y: true,
        series: vec![
            series("gradient_residual_norm", |r| r.gradient_residual_norm),
            series("value_residual_norm", |r| r.value_residual_norm),
        ],
    }
}

/// Planar path through the positions `(x0, x1)` of a trajectory.
pub fn trajectory_chart(positions: &[(f64, f64)]) -> Chart {
    Chart {
        title: "Greedy trajectory".into(),
        x_label: "x0".into(),
        y_label: "x1".into(),
        log_y: false,
        series: vec![Series {
            name: "path".into(),
            points: positions.to_vec(),
            markers: true,
        }],
    }
}

/// Reads the `(x0, x1)` columns of a trajectory CSV.
pub fn read_positions(path: &Path) -> Result<Vec<(f64, f64)>> {
    let bad = |reason: String| VglError::LogFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name}")))
    };
    let (i0, i1) = (col("x0")?, col("x1")?);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("{e} in {:?}", &rec[i])));
        out.push((num(i0)?, num(i1)?));
    }
    Ok(out)
}

fn write_chart(dir: &Path, name: &str, chart: &Chart) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, chart.to_svg())?;
    Ok(path)
}

/// Writes the SVG charts for a run directory and returns their paths.
/// The trajectory chart is drawn for the planar navigation environments.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_log(&dir.join(LOG_FILE))?;
    let mut written = vec![
        write_chart(dir, "learning_curve.svg", &learning_curve(&rows))?,
        write_chart(dir, "residuals.svg", &residual_chart(&rows))?,
    ];
    let traj = dir.join(TRAJECTORY_FILE);
    let config = dir.join(CONFIG_FILE);
    if traj.exists() && config.exists() {
        let cfg = RunConfig::load(&config)?;
        if cfg.env.name().starts_with("nav2d") {
            let positions = read_positions(&traj)?;
            written.push(write_chart(dir, "trajectory.svg", &trajectory_chart(&positions))?);
        }
    }
    Ok(written)
}
