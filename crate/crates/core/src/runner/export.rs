//! Pareto-front export: frontier records, 2D scatter data for the first three
//! fronts of the archive, and SVG renderings of each projection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::instruction::{serialize_individual, Individual, ObjectiveVector};
use crate::moea::fast_nondominated_sort;

use super::archive::Archive;

pub const FRONTIER_FILE: &str = "frontier.jsonl";

/// How many archive fronts the scatter files carry.
pub const PLOTTED_FRONTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    PerformanceLength,
    PerformancePerplexity,
    LengthPerplexity,
}

impl Projection {
    pub const ALL: [Projection; 3] = [
        Projection::PerformanceLength,
        Projection::PerformancePerplexity,
        Projection::LengthPerplexity,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            Projection::PerformanceLength => "scatter_m_l",
            Projection::PerformancePerplexity => "scatter_m_r",
            Projection::LengthPerplexity => "scatter_l_r",
        }
    }

    pub fn axis_labels(self) -> (&'static str, &'static str) {
        match self {
            Projection::PerformanceLength => ("performance (1 / metric sum)", "length (chars)"),
            Projection::PerformancePerplexity => ("performance (1 / metric sum)", "perplexity"),
            Projection::LengthPerplexity => ("length (chars)", "perplexity"),
        }
    }

    pub fn project(self, o: &ObjectiveVector) -> (f64, f64) {
        let l = o.length as f64;
        match self {
            Projection::PerformanceLength => (o.performance, l),
            Projection::PerformancePerplexity => (o.performance, o.perplexity),
            Projection::LengthPerplexity => (l, o.perplexity),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub frontier_records: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `frontier.jsonl`, `scatter_*.csv` and `scatter_*.svg` into `out`.
pub fn export_pareto(archive: &Archive, out: &Path) -> Result<ExportSummary> {
    if archive.is_empty() {
        return Err(Error::Argument("cannot export an empty archive".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();

    let frontier = archive.frontier();
    let mut lines = String::new();
    for ind in &frontier {
        lines.push_str(&serialize_individual(ind)?);
        lines.push('\n');
    }
    files.push(write(out.join(FRONTIER_FILE), &lines)?);

    let members: Vec<&Individual> = archive.entries().iter().map(|e| &e.individual).collect();
    let objectives: Vec<ObjectiveVector> = members.iter().map(|i| i.objectives.unwrap()).collect();
    let fronts = fast_nondominated_sort(&objectives);
    let members = &members;
    let plotted: Vec<(usize, &Individual)> = fronts
        .fronts
        .iter()
        .take(PLOTTED_FRONTS)
        .enumerate()
        .flat_map(|(rank, front)| front.iter().map(move |&i| (rank, members[i])))
        .collect();

    for projection in Projection::ALL {
        let points: Vec<ScatterPoint> = plotted
            .iter()
            .map(|(rank, ind)| {
                let (x, y) = projection.project(ind.objectives.as_ref().unwrap());
                ScatterPoint { front: *rank, id: ind.id().0, x, y }
            })
            .collect();
        let mut csv = String::from("front,id,x,y\n");
        for p in &points {
            // `{}` on f64 prints the shortest exact round-trip form
            writeln!(csv, "{},{},{},{}", p.front, p.id, p.x, p.y).unwrap();
        }
        files.push(write(out.join(format!("{}.csv", projection.stem())), &csv)?);
        let (xl, yl) = projection.axis_labels();
        let svg = render_scatter_svg(&points, xl, yl);
        files.push(write(out.join(format!("{}.svg", projection.stem())), &svg)?);
    }

    Ok(ExportSummary {
        frontier_records: frontier.len(),
        files,
    })
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub front: usize,
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 110.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 55.0;
const FRONT_COLORS: [&str; 3] = ["#d62728", "#1f77b4", "#2ca02c"];

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad, hi + pad)
}

fn tick_label(v: f64) -> String {
    crate::instruction::format_sig4(v)
}

/// Minimal standalone SVG scatter plot; one color per front.
pub fn render_scatter_svg(points: &[ScatterPoint], x_label: &str, y_label: &str) -> String {
    let (x0, x1) = axis_range(points.iter().map(|p| p.x));
    let (y0, y1) = axis_range(points.iter().map(|p| p.y));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    )
    .unwrap();

    for i in 0..=4 {
        let t = f64::from(i) / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let bottom = MARGIN_TOP + plot_h;
        writeln!(s, r#"<line x1="{px:.2}" y1="{bottom}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 4.0).unwrap();
        writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick_label(xv)).unwrap();
        writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="black"/>"#, MARGIN_LEFT - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN_LEFT - 6.0, py + 4.0, tick_label(yv)).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    )
    .unwrap();

    // later fronts first so front 0 is drawn on top
    let mut ordered: Vec<&ScatterPoint> = points.iter().collect();
    ordered.sort_by_key(|p| std::cmp::Reverse(p.front));
    for p in ordered {
        let color = FRONT_COLORS[p.front.min(FRONT_COLORS.len() - 1)];
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}" fill-opacity="0.8" data-front="{}" data-id="{}"><title>#{} ({}, {})</title></circle>"#,
            sx(p.x),
            sy(p.y),
            p.front,
            p.id,
            p.id,
            p.x,
            p.y
        )
        .unwrap();
    }

    let fronts_present = points.iter().map(|p| p.front + 1).max().unwrap_or(0);
    for (f, color) in FRONT_COLORS.iter().enumerate().take(fronts_present) {
        let ly = MARGIN_TOP + 12.0 + 18.0 * f as f64;
        let lx = WIDTH - MARGIN_RIGHT + 14.0;
        writeln!(s, r#"<circle cx="{lx}" cy="{ly}" r="4" fill="{color}"/>"#).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">front {f}</text>"#, lx + 10.0, ly + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
