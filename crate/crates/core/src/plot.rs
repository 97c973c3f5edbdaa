//! Minimal SVG rendering for learning curves and similarity heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::harness::AggregateRow;
use crate::maze::EpisodeType;
use crate::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 130.0;
const PAD_T: f64 = 30.0;
const PAD_B: f64 = 45.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// One line with a shaded +-SEM band.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line chart of excess steps against episode.
pub fn line_chart(title: &str, series: &[Series]) -> String {
    let points = series.iter().flat_map(|s| {
        s.x.iter()
            .zip(s.mean.iter().zip(&s.sem))
            .filter(|(_, (m, _))| m.is_finite())
            .map(|(&x, (&m, &e))| (x, m - e, m + e))
    });
    let (mut x0, mut x1, mut y0, mut y1) =
        (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for (x, lo, hi) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = W - PAD_L - PAD_R;
    let ph = H - PAD_T - PAD_B;
    let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| PAD_T + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        PAD_L + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{fy:.1}</text>"#,
            PAD_L - 5.0,
            sy(fy) + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{fx:.0}</text>"#,
            sx(fx),
            PAD_T + ph + 15.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">episode</text>"#,
        PAD_L + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(14 {}) rotate(-90)" text-anchor="middle">excess steps</text>"#,
        PAD_T + ph / 2.0
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64, f64)> =
            s.x.iter()
                .zip(s.mean.iter().zip(&s.sem))
                .filter(|(_, (m, _))| m.is_finite())
                .map(|(&x, (&m, &e))| (x, m, if e.is_finite() { e } else { 0.0 }))
                .collect();
        if pts.is_empty() {
            continue;
        }
        let mut band = String::new();
        for &(x, m, e) in &pts {
            let _ = write!(band, "{:.2},{:.2} ", sx(x), sy(m + e));
        }
        for &(x, m, e) in pts.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", sx(x), sy(m - e));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = pts
            .iter()
            .map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = PAD_T + 12.0 + 16.0 * k as f64;
        let lx = W - PAD_R + 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Diverging blue-white-red heatmap for values in [-1, 1]; NaN is grey.
pub fn heatmap(title: &str, m: &Array2<f64>) -> String {
    let (rows, cols) = m.dim();
    let cell = (360.0 / rows.max(cols).max(1) as f64).clamp(2.0, 24.0);
    let w = 40.0 + cell * cols as f64 + 20.0;
    let h = 40.0 + cell * rows as f64 + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="40" y="22">{}</text>"#, escape(title));
    for ((i, j), &v) in m.indexed_iter() {
        let fill = if v.is_nan() {
            "#999999".to_string()
        } else {
            let t = v.clamp(-1.0, 1.0);
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
        };
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"/>"#,
            40.0 + cell * j as f64,
            40.0 + cell * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Explore and exploit curves of one condition.
pub fn condition_series(rows: &[&AggregateRow]) -> Vec<Series> {
    [EpisodeType::Explore, EpisodeType::Exploit]
        .into_iter()
        .map(|t| {
            let mut pts: Vec<&&AggregateRow> =
                rows.iter().filter(|r| r.episode_type == t).collect();
            pts.sort_by_key(|r| r.episode_bucket);
            Series {
                label: t.as_str().to_string(),
                x: pts.iter().map(|r| r.episode_bucket as f64).collect(),
                mean: pts.iter().map(|r| r.mean_excess).collect(),
                sem: pts.iter().map(|r| r.sem).collect(),
            }
        })
        .collect()
}

/// Writes `<dir>/<condition>.svg` for every condition in `rows` and, when
/// there is more than one condition, `<dir>/exploit_comparison.svg`.
pub fn plot_aggregate(rows: &[AggregateRow], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_cond: BTreeMap<&str, Vec<&AggregateRow>> = BTreeMap::new();
    for r in rows {
        by_cond.entry(r.condition.as_str()).or_default().push(r);
    }
    let mut written = Vec::new();
    for (cond, rs) in &by_cond {
        let path = dir.join(format!("{cond}.svg"));
        std::fs::write(&path, line_chart(cond, &condition_series(rs)))
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if by_cond.len() > 1 {
        let series: Vec<Series> = by_cond
            .iter()
            .map(|(cond, rs)| {
                let mut s = condition_series(rs).remove(1);
                s.label = cond.to_string();
                s
            })
            .collect();
        let path = dir.join("exploit_comparison.svg");
        std::fs::write(&path, line_chart("exploit trials", &series))
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
