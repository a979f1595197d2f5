use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::DenseMatrix;

/// Square evaluation grid over `[lo, hi]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for DensityGrid {
    fn default() -> Self {
        Self {
            resolution: 300,
            lo: -4.0,
            hi: 4.0,
        }
    }
}

impl DensityGrid {
    pub fn cell(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    /// Centre of cell `i` along either axis.
    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.cell()
    }
}

/// `exp(log_prob_iid)` at every cell centre; entry `(iy, ix)` has
/// `x1 = center(ix)` and `x2 = center(iy)`.
pub fn density_on_grid(flow: &FlowModel, grid: &DensityGrid) -> Result<DenseMatrix> {
    if flow.dim != 2 {
        return Err(Error::Shape(format!(
            "density plots need a 2-dimensional flow, got {}",
            flow.dim
        )));
    }
    if grid.resolution == 0 || !(grid.hi > grid.lo) {
        return Err(Error::InvalidParameter("empty plot grid".into()));
    }
    let r = grid.resolution;
    let pts = DenseMatrix::from_fn(r * r, 2, |k, c| {
        if c == 0 {
            grid.center(k % r)
        } else {
            grid.center(k / r)
        }
    });
    let lp = flow.log_prob_iid(&pts)?;
    Ok(DenseMatrix::from_fn(r, r, |iy, ix| lp[iy * r + ix].exp()))
}

const LOW: [f64; 3] = [255.0, 255.0, 255.0];
const MID: [f64; 3] = [65.0, 140.0, 190.0];
const HIGH: [f64; 3] = [10.0, 30.0, 80.0];

/// Colour of palette level `k` in `0..256`.
fn palette(k: u8) -> String {
    let t = k as f64 / 255.0;
    let (a, b, s) = if t < 0.5 {
        (LOW, MID, t * 2.0)
    } else {
        (MID, HIGH, (t - 0.5) * 2.0)
    };
    let c: Vec<u8> = (0..3)
        .map(|i| (a[i] + (b[i] - a[i]) * s).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

const PIXELS_PER_CELL: usize = 2;

/// Heatmap of the flow density with an optional scatter overlay. Equal
/// neighbouring cells in a row are merged into one rectangle.
pub fn density_svg(
    flow: &FlowModel,
    grid: &DensityGrid,
    scatter: Option<&DenseMatrix>,
) -> Result<String> {
    let dens = density_on_grid(flow, grid)?;
    let r = grid.resolution;
    let max = dens.as_slice().iter().cloned().fold(0.0, f64::max);
    let level = |v: f64| -> u8 {
        if max > 0.0 && v.is_finite() {
            ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let size = r * PIXELS_PER_CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{size}" height="{size}" fill="{}"/>"#,
        palette(0)
    );
    for iy in 0..r {
        let y = (r - 1 - iy) * PIXELS_PER_CELL;
        let mut ix = 0;
        while ix < r {
            let k = level(dens[(iy, ix)]);
            let start = ix;
            while ix < r && level(dens[(iy, ix)]) == k {
                ix += 1;
            }
            if k > 0 {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{y}" width="{}" height="{PIXELS_PER_CELL}" fill="{}"/>"#,
                    start * PIXELS_PER_CELL,
                    (ix - start) * PIXELS_PER_CELL,
                    palette(k)
                );
            }
        }
    }
    if let Some(pts) = scatter {
        let span = grid.hi - grid.lo;
        let _ = writeln!(s, r##"<g fill="#d62728" fill-opacity="0.6">"##);
        for i in 0..pts.rows() {
            let (x1, x2) = (pts[(i, 0)], pts[(i, 1)]);
            if !(x1 >= grid.lo && x1 <= grid.hi && x2 >= grid.lo && x2 <= grid.hi) {
                continue;
            }
            let px = (x1 - grid.lo) / span * size as f64;
            let py = (grid.hi - x2) / span * size as f64;
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5"/>"#);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_density_svg(
    flow: &FlowModel,
    grid: &DensityGrid,
    scatter: Option<&DenseMatrix>,
    path: &Path,
) -> Result<()> {
    let svg = density_svg(flow, grid, scatter)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// One polyline of a line chart.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SERIES_COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Plain line chart with labelled axes and a legend. Non-finite points are
/// left out.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{L} {T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{fx:.2}</text>"#,
            px(fx),
            H - B + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{fy:.3}</text>"#,
            L - 6.0,
            py(fy) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        L + (W - L - R) / 2.0,
        H - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        T + (H - T - B) / 2.0,
        T + (H - T - B) / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let colour = SERIES_COLOURS[k % SERIES_COLOURS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{colour}"/>"#);
        }
        let ly = T + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{colour}"/><text x="{}" y="{}">{}</text>"#,
            W - R - 150.0,
            ly - 4.0,
            W - R - 132.0,
            ly,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
