//! CSV to SVG scatter and line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use lipode_core::experiments::atomic_write;
use lipode_core::Error;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 130.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Copy, ValueEnum)]
pub enum Kind {
    Scatter,
    Line,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    /// Column splitting the rows into separately coloured series.
    #[arg(long)]
    group: Option<String>,
    #[arg(long, value_enum, default_value = "scatter")]
    kind: Kind,
    #[arg(long)]
    title: Option<String>,
}

/// Numeric x values, or category labels in order of first appearance when
/// some value is not a finite number (e.g. `inf`).
enum XAxis {
    Numeric,
    Categorical(Vec<String>),
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn column(headers: &csv::StringRecord, name: &str) -> anyhow::Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("no column `{name}`; columns are {:?}", headers.iter().collect::<Vec<_>>())).into())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn render(series: &[Series], axis: &XAxis, kind: Kind, title: &str, xlabel: &str, ylabel: &str) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x_lo, x_hi) = match axis {
        XAxis::Numeric => padded(
            all().map(|p| p.0).fold(f64::INFINITY, f64::min),
            all().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        ),
        XAxis::Categorical(c) => (-0.5, c.len() as f64 - 0.5),
    };
    let (y_lo, y_hi) = padded(
        all().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for y in ticks(y_lo, y_hi) {
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="#444"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            py + 4.0,
            fmt_tick(y)
        );
    }
    let x_ticks: Vec<(f64, String)> = match axis {
        XAxis::Numeric => ticks(x_lo, x_hi).into_iter().map(|x| (x, fmt_tick(x))).collect(),
        XAxis::Categorical(c) => c.iter().enumerate().map(|(i, l)| (i as f64, l.clone())).collect(),
    };
    let base = MARGIN_TOP + plot_h;
    for (x, label) in x_ticks {
        let px = sx(x);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{base}" x2="{px:.2}" y2="{}" stroke="#444"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"##,
            base + 5.0,
            base + 19.0,
            escape(&label)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(ylabel)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match kind {
            Kind::Scatter => {
                for &(x, y) in &s.points {
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#,
                        sx(x),
                        sy(y)
                    );
                }
            }
            Kind::Line => {
                let mut pts = s.points.clone();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    path.join(" ")
                );
                for &(x, y) in &pts {
                    let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
        }
        if series.len() > 1 || !s.name.is_empty() {
            let ly = MARGIN_TOP + 12.0 + 18.0 * i as f64;
            let lx = WIDTH - MARGIN_RIGHT + 12.0;
            let _ = writeln!(
                svg,
                r#"<circle cx="{lx}" cy="{}" r="4" fill="{color}"/><text x="{}" y="{ly}">{}</text>"#,
                ly - 4.0,
                lx + 10.0,
                escape(&s.name)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn run(args: PlotArgs) -> anyhow::Result<()> {
    let mut reader = csv::Reader::from_path(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let headers = reader.headers()?.clone();
    let (xi, yi) = (column(&headers, &args.x)?, column(&headers, &args.y)?);
    let gi = args.group.as_deref().map(|g| column(&headers, g)).transpose()?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let y: f64 = record[yi]
            .trim()
            .parse()
            .map_err(|_| anyhow!("row {}: `{}` is not a number", line + 2, &record[yi]))?;
        let group = gi.map_or(String::new(), |g| record[g].to_string());
        rows.push((record[xi].trim().to_string(), y, group));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no data rows", args.input.display())).into());
    }
    let numeric = rows.iter().all(|(x, _, _)| x.parse::<f64>().is_ok_and(f64::is_finite));
    let mut categories: Vec<String> = Vec::new();
    if !numeric {
        for (x, _, _) in &rows {
            if !categories.contains(x) {
                categories.push(x.clone());
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (x, y, g) in rows {
        let xv = if numeric {
            x.parse().expect("checked numeric")
        } else {
            categories.iter().position(|c| *c == x).expect("collected above") as f64
        };
        groups.entry(g).or_default().push((xv, y));
    }
    let series: Vec<Series> = groups
        .into_iter()
        .map(|(g, points)| Series {
            name: gi.map_or(String::new(), |i| format!("{}={g}", &headers[i])),
            points,
        })
        .collect();
    let axis = if numeric { XAxis::Numeric } else { XAxis::Categorical(categories) };
    let title = args.title.clone().unwrap_or_else(|| format!("{} vs {}", args.y, args.x));
    let svg = render(&series, &axis, args.kind, &title, &args.x, &args.y);
    atomic_write(&args.output, svg.as_bytes())?;
    let manifest_path = args.output.with_extension("manifest.json");
    let config = serde_json::json!({
        "input": args.input, "x": args.x, "y": args.y, "group": args.group,
        "kind": match args.kind { Kind::Scatter => "scatter", Kind::Line => "line" },
        "title": title,
    });
    let output_name = args
        .output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    crate::write_manifest(&manifest_path, "plot", config, &[&output_name])?;
    Ok(())
}
