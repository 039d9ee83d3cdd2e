use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Comma-separated table with a header row; floats use the shortest
/// round-trip representation.
pub fn csv_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join(",");
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .map(|c| {
                if c.contains([',', '"', '\n']) {
                    format!("\"{}\"", c.replace('"', "\"\""))
                } else {
                    c.clone()
                }
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlotLayer {
    Path {
        label: String,
        color: String,
        points: Vec<[f64; 2]>,
    },
    /// Axis-aligned boxes, e.g. an obstacle track.
    Boxes {
        label: String,
        color: String,
        centers: Vec<[f64; 2]>,
        half_extents: [f64; 2],
    },
}

impl PlotLayer {
    fn label(&self) -> &str {
        match self {
            PlotLayer::Path { label, .. } | PlotLayer::Boxes { label, .. } => label,
        }
    }

    fn color(&self) -> &str {
        match self {
            PlotLayer::Path { color, .. } | PlotLayer::Boxes { color, .. } => color,
        }
    }

    fn extent(&self) -> Vec<[f64; 2]> {
        match self {
            PlotLayer::Path { points, .. } => points.clone(),
            PlotLayer::Boxes {
                centers, half_extents, ..
            } => centers
                .iter()
                .flat_map(|c| {
                    [
                        [c[0] - half_extents[0], c[1] - half_extents[1]],
                        [c[0] + half_extents[0], c[1] + half_extents[1]],
                    ]
                })
                .collect(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Top-down plot with x forward drawn to the right and y left drawn upward,
/// equal axis scale.
pub fn svg_trajectory_plot(title: &str, layers: &[PlotLayer]) -> String {
    const W: f64 = 640.0;
    const HGT: f64 = 480.0;
    const PAD: f64 = 40.0;
    let pts: Vec<[f64; 2]> = layers
        .iter()
        .flat_map(|l| l.extent())
        .filter(|p| p[0].is_finite() && p[1].is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (-1.0f64, 1.0f64, -1.0f64, 1.0f64);
    for p in &pts {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let scale = ((W - 2.0 * PAD) / (x1 - x0)).min((HGT - 2.0 * PAD) / (y1 - y0));
    let sx = |x: f64| PAD + (x - x0) * scale;
    let sy = |y: f64| HGT - PAD - (y - y0) * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{HGT}" viewBox="0 0 {W} {HGT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ccc"/>"##,
        sx(x0),
        sy(0.0),
        sx(x1),
        sy(0.0)
    );
    for (i, layer) in layers.iter().enumerate() {
        let color = escape(layer.color());
        match layer {
            PlotLayer::Path { points, .. } => {
                let d: Vec<String> = points
                    .iter()
                    .filter(|p| p[0].is_finite() && p[1].is_finite())
                    .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    d.join(" ")
                );
                for p in points.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(p[0]), sy(p[1]));
                }
            }
            PlotLayer::Boxes {
                centers, half_extents, ..
            } => {
                for c in centers {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.15" stroke="{color}"/>"#,
                        sx(c[0] - half_extents[0]),
                        sy(c[1] + half_extents[1]),
                        2.0 * half_extents[0] * scale,
                        2.0 * half_extents[1] * scale
                    );
                }
            }
        }
        let ly = 44.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.0}" y="{ly}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - 160.0,
            escape(layer.label())
        );
    }
    s.push_str("</svg>\n");
    s
}
