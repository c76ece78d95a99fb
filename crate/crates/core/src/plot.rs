//! Minimal SVG rendering: scatter plots, gridded heat maps and line charts,
//! plus the gridded values behind them.

use std::fmt::Write;

use crate::error::{invalid, Result};
use crate::metrics::fmt_float;
use crate::tensor::Tensor;

pub const GRID_SIZE: usize = 100;
/// Fractional padding added to each side of a bounding box.
pub const BOX_MARGIN: f64 = 0.1;

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 44.0;

/// Per-coordinate `(lo, hi)` of `points`, padded by `margin` of the range.
pub fn bounding_box(points: &Tensor, margin: f64) -> Result<Vec<(f64, f64)>> {
    if points.rank() != 2 || points.nrows() == 0 {
        return Err(invalid("bounding box needs a non-empty n x m sample"));
    }
    let m = points.ncols();
    let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); m];
    for row in points.rows() {
        for (j, &v) in row.iter().enumerate() {
            b[j].0 = b[j].0.min(v);
            b[j].1 = b[j].1.max(v);
        }
    }
    Ok(b
        .into_iter()
        .map(|(lo, hi)| {
            let w = hi - lo;
            if w > 0.0 {
                (lo - margin * w, hi + margin * w)
            } else {
                (lo - 1.0, hi + 1.0)
            }
        })
        .collect())
}

/// Values of a function on a regular grid over a 1D or 2D box.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the axes, the last axis varying fastest.
    pub values: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

impl Grid {
    /// Evaluate `f` (a batch map `n x m -> n`) on `size` points per axis.
    pub fn evaluate(bounds: &[(f64, f64)], size: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        if size == 0 {
            return Err(invalid("grid size must be at least 1"));
        }
        let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| linspace(lo, hi, size)).collect();
        let pts = match axes.as_slice() {
            [a] => Tensor::new(vec![size, 1], a.clone())?,
            [a, b] => {
                let mut d = Vec::with_capacity(2 * size * size);
                for &u in a {
                    for &v in b {
                        d.push(u);
                        d.push(v);
                    }
                }
                Tensor::new(vec![size * size, 2], d)?
            }
            _ => return Err(invalid("grids are only drawn for 1D or 2D data")),
        };
        let values = f(&pts)?.into_data();
        if values.len() != pts.nrows() {
            return Err(invalid("grid function returned the wrong number of values"));
        }
        Ok(Self { axes, values })
    }

    /// CSV with columns `x0[,x1],value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.axes.as_slice() {
            [a] => {
                out.push_str("x0,value\n");
                for (x, v) in a.iter().zip(&self.values) {
                    let _ = writeln!(out, "{},{}", fmt_float(*x), fmt_float(*v));
                }
            }
            [a, b] => {
                out.push_str("x0,x1,value\n");
                let mut k = 0;
                for x in a {
                    for y in b {
                        let _ = writeln!(out, "{},{},{}", fmt_float(*x), fmt_float(*y), fmt_float(self.values[k]));
                        k += 1;
                    }
                }
            }
            _ => {}
        }
        out
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        PAD + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, v: f64) -> f64 {
        H - PAD - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn header(title: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (v, x) in [(f.x.0, PAD), (f.x.1, W - PAD)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 14.0, tick(v));
    }
    for (v, y) in [(f.y.0, H - PAD), (f.y.1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, PAD - 4.0, tick(v));
    }
    s
}

fn tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot of the first two coordinates (1D data is plotted against
/// the particle index).
pub fn scatter_svg(points: &Tensor, title: &str) -> Result<String> {
    if points.rank() != 2 || points.ncols() == 0 || points.ncols() > 2 {
        return Err(invalid("scatter plots need 1D or 2D points"));
    }
    let n = points.nrows();
    let xy: Vec<(f64, f64)> = points
        .rows()
        .enumerate()
        .map(|(i, r)| if r.len() == 2 { (r[0], r[1]) } else { (r[0], i as f64 / n.max(1) as f64) })
        .collect();
    let f = Frame {
        x: range(xy.iter().map(|p| p.0)),
        y: range(xy.iter().map(|p| p.1)),
    };
    let mut s = header(title, &f);
    s.push_str("<g fill=\"steelblue\" fill-opacity=\"0.5\">\n");
    for (x, y) in xy {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, f.px(x), f.py(y));
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

fn colour(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let u = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let c = |p: f64, q: f64| (p + u * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

/// Heat map of a 2D grid, or a curve for a 1D grid.
pub fn grid_svg(grid: &Grid, title: &str) -> Result<String> {
    match grid.axes.as_slice() {
        [a] => {
            let pts: Vec<(f64, f64)> = a.iter().copied().zip(grid.values.iter().copied()).collect();
            Ok(line_svg(&[("value".into(), pts)], title))
        }
        [a, b] => {
            let f = Frame {
                x: range(a.iter().copied()),
                y: range(b.iter().copied()),
            };
            let (lo, hi) = range(grid.values.iter().copied());
            let cw = (W - 2.0 * PAD) / a.len() as f64;
            let ch = (H - 2.0 * PAD) / b.len() as f64;
            let mut s = header(title, &f);
            let mut k = 0;
            for (i, _) in a.iter().enumerate() {
                for (j, _) in b.iter().enumerate() {
                    let v = grid.values[k];
                    k += 1;
                    if !v.is_finite() {
                        continue;
                    }
                    let x = PAD + i as f64 * cw;
                    let y = H - PAD - (j + 1) as f64 * ch;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        cw + 0.05,
                        ch + 0.05,
                        colour((v - lo) / (hi - lo))
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">range [{}, {}]</text>"#,
                W - PAD,
                H - 8.0,
                tick(lo),
                tick(hi)
            );
            s.push_str("</svg>\n");
            Ok(s)
        }
        _ => Err(invalid("grids are only drawn for 1D or 2D data")),
    }
}

/// Line chart of named `(x, y)` series; non-finite points are skipped.
pub fn line_svg(series: &[(String, Vec<(f64, f64)>)], title: &str) -> String {
    const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let all = || series.iter().flat_map(|(_, p)| p.iter());
    let f = Frame {
        x: range(all().map(|p| p.0)),
        y: range(all().map(|p| p.1)),
    };
    let mut s = header(title, &f);
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = COLOURS[k % COLOURS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in pts {
            if !(x.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, f.px(x), f.py(y));
            pen_down = true;
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.2"/>"#, d.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            PAD + 6.0,
            PAD + 14.0 * (k + 1) as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
