//! SVG scatter plots of 2D points.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};

/// Fixed particle colours: lah blue, meh orange, hor green.
pub const PARTICLE_COLORS: [(&str, &str); 3] = [("lah", "#1f77b4"), ("meh", "#ff7f0e"), ("hor", "#2ca02c")];

/// Colours for cluster ids and any key without a fixed colour.
const CYCLE: [&str; 8] = [
    "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f", "#393b79",
];

const NOISE_COLOR: &str = "#c7c7c7";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorKey {
    Particle,
    Cluster,
}

/// Colour per distinct key, in first-seen order of the sorted key set.
fn palette(keys: &[String], by: ColorKey) -> BTreeMap<String, String> {
    let mut distinct: Vec<&String> = keys.iter().collect();
    distinct.sort();
    distinct.dedup();
    let mut out = BTreeMap::new();
    let mut next = 0;
    for k in distinct {
        let fixed = match by {
            ColorKey::Particle => PARTICLE_COLORS.iter().find(|(p, _)| p == k).map(|(_, c)| c.to_string()),
            ColorKey::Cluster if k == "noise" => Some(NOISE_COLOR.to_string()),
            ColorKey::Cluster => None,
        };
        let color = fixed.unwrap_or_else(|| {
            let c = CYCLE[next % CYCLE.len()].to_string();
            next += 1;
            c
        });
        out.insert(k.clone(), color);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `points` coloured by `keys` (particle names, or cluster labels
/// with `noise` for unclustered points). One `<circle>` per point.
pub fn scatter_svg(points: &[(f64, f64)], keys: &[String], by: ColorKey, title: &str) -> Result<String> {
    if points.is_empty() {
        bail!("cannot plot zero points");
    }
    if points.len() != keys.len() {
        bail!("{} points but {} colour keys", points.len(), keys.len());
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        bail!("non-finite coordinates in scatter plot");
    }
    let (w, h, margin, legend_w) = (640.0, 480.0, 30.0, 130.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span_x = (x1 - x0).max(1e-12);
    let span_y = (y1 - y0).max(1e-12);
    let plot_w = w - 2.0 * margin - legend_w;
    let plot_h = h - 2.0 * margin;
    let colors = palette(keys, by);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )?;
    writeln!(s, "<title>{}</title>", escape(title))?;
    writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>"##)?;
    writeln!(s, r#"<g class="points">"#)?;
    for (&(x, y), k) in points.iter().zip(keys) {
        let px = margin + (x - x0) / span_x * plot_w;
        let py = margin + (1.0 - (y - y0) / span_y) * plot_h;
        writeln!(
            s,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{}" fill-opacity="0.8"><title>{}</title></circle>"#,
            colors[k],
            escape(k)
        )?;
    }
    writeln!(s, "</g>")?;
    writeln!(s, r#"<g class="legend" font-family="sans-serif" font-size="12">"#)?;
    let lx = w - legend_w;
    for (i, (k, c)) in colors.iter().enumerate() {
        let ly = margin + 18.0 * i as f64;
        writeln!(s, r#"<rect x="{lx}" y="{:.1}" width="10" height="10" fill="{c}"/>"#, ly - 9.0)?;
        writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 16.0, escape(k))?;
    }
    writeln!(s, "</g>")?;
    writeln!(s, "</svg>")?;
    Ok(s)
}
