// SPDX-License-Identifier: Apache-2.0

//! Self-contained SVG scatter of MUI against performance with the fitted log curve.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::Result;
use crate::metrics::{fit_utility, read_points_csv, write_fit_csv, EvalPoint, UtilityFit};

/// Pixel mapping of the plot area; the x domain is performance in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotFrame {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl PlotFrame {
    pub const X_MAX: f64 = 100.0;

    fn new(y_min: f64, y_max: f64) -> Self {
        Self {
            width: 640.0,
            height: 420.0,
            left: 60.0,
            right: 20.0,
            top: 20.0,
            bottom: 50.0,
            y_min,
            y_max,
        }
    }

    pub fn x_px(&self, performance: f64) -> f64 {
        self.left + performance / Self::X_MAX * (self.width - self.left - self.right)
    }

    pub fn y_px(&self, mui: f64) -> f64 {
        let span = self.height - self.top - self.bottom;
        self.height - self.bottom - (mui - self.y_min) / (self.y_max - self.y_min) * span
    }
}

/// Curve vertices at integer P in `[1, 100]`; `ln P` is undefined at 0.
pub fn curve_samples(fit: &UtilityFit) -> Vec<(f64, f64)> {
    (1..=100).map(|p| (p as f64, fit.extrapolate(p as f64))).collect()
}

fn nice_ceil(v: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let step = 10f64.powf(v.log10().floor());
    (v / step).ceil() * step
}

fn frame_for(points: &[EvalPoint], curve: &[(f64, f64)]) -> PlotFrame {
    let ys = points.iter().map(|p| p.mui).chain(curve.iter().map(|c| c.1));
    let (lo, hi) = ys.fold((0.0f64, 1.0f64), |(lo, hi), y| (lo.min(y), hi.max(y)));
    PlotFrame::new(-nice_ceil(-lo), nice_ceil(hi))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_scatter(points: &[EvalPoint], fit: Option<&UtilityFit>) -> String {
    let curve = fit.map(curve_samples).unwrap_or_default();
    let f = frame_for(points, &curve);
    let mut s = String::new();
    let (x0, x1) = (f.x_px(0.0), f.x_px(PlotFrame::X_MAX));
    let (y0, y1) = (f.y_px(f.y_min), f.y_px(f.y_max));
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        f.width, f.height, f.width, f.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<g id="axes" stroke="black">"#);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="ticks" text-anchor="middle">"#);
    for i in 0..=5 {
        let p = 20.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{p}</text>"#, f.x_px(p), y0 + 15.0);
        let m = f.y_min + (f.y_max - f.y_min) * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, x0 - 5.0, f.y_px(m) + 4.0, m);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Performance (%)</text>"#, (x0 + x1) / 2.0, f.height - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">MUI (%)</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);
    let _ = writeln!(s, r#"<g id="points" fill="steelblue">"#);
    for p in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3"><title>{} / {}: P {:.1}, MUI {:.2}</title></circle>"#,
            f.x_px(p.performance),
            f.y_px(p.mui),
            escape(&p.label),
            escape(&p.dataset),
            p.performance,
            p.mui
        );
    }
    let _ = writeln!(s, "</g>");
    if let Some(fit) = fit {
        let pts: Vec<String> = curve.iter().map(|&(p, m)| format!("{:.2},{:.2}", f.x_px(p), f.y_px(m))).collect();
        let _ = writeln!(s, r#"<polyline id="fit" fill="none" stroke="crimson" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="crimson">MUI = {:.3} ln P + {:.3} (R² {:.3})</text>"#,
            x1,
            f.top + 12.0,
            fit.a,
            fit.b,
            fit.r_squared
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub svg: PathBuf,
    pub fit: Option<UtilityFit>,
}

/// Reads `points.csv` from `dir`, writes `scatter.svg` and, when a fit exists, `fit.csv`.
pub fn report(dir: &Path) -> Result<ReportOutput> {
    let points = read_points_csv(File::open(dir.join("points.csv"))?)?;
    let fit = if points.len() >= 2 {
        fit_utility(&points).map_err(|e| warn!("no utility fit: {e}")).ok()
    } else {
        None
    };
    let svg = dir.join("scatter.svg");
    fs::write(&svg, render_scatter(&points, fit.as_ref()))?;
    if let Some(fit) = &fit {
        write_fit_csv(BufWriter::new(File::create(dir.join("fit.csv"))?), fit)?;
    }
    Ok(ReportOutput { svg, fit })
}
