//! Report files.
//!
//! | file | columns |
//! |------|---------|
//! | `knn.csv` | `point,label,rank,neighbor,neighbor_label,distance` (N·k rows) |
//! | `ratios.csv` | `point,label,per_point,centroid` (N rows; empty cell = undefined) |
//! | `purity.csv` | `k,purity` for k = 1..=k |
//! | `summary.csv` | `metric,value` |
//! | `knn_heatmap.svg` | one row per point (grouped by label), one cell per neighbour coloured by its label |
//! | `ratio_histogram.svg` | histogram of per-point discriminant ratios |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{discriminant_ratio, knn_table, purity_curve, EmbeddingSet, Neighbor, RatioReport, RatioVariant};
use crate::error::{Error, Result};

pub const RAMP_STEPS: usize = 256;

/// Everything one report renders.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub source: String,
    pub labels: Vec<usize>,
    pub k: usize,
    pub knn: Vec<Vec<Neighbor>>,
    /// `purity[j]` is the purity at `k = j + 1`.
    pub purity: Vec<f64>,
    pub per_point: RatioReport,
    pub centroid: RatioReport,
}

impl AnalysisReport {
    pub fn compute(emb: &EmbeddingSet, k: usize) -> Result<Self> {
        Ok(AnalysisReport {
            source: emb.source().to_string(),
            labels: emb.labels().to_vec(),
            k,
            knn: knn_table(emb, k)?,
            purity: purity_curve(emb, k)?,
            per_point: discriminant_ratio(emb, RatioVariant::PerPoint)?,
            centroid: discriminant_ratio(emb, RatioVariant::Centroid)?,
        })
    }

    pub fn purity_at_k(&self) -> f64 {
        self.purity[self.k - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub knn_csv: PathBuf,
    pub ratios_csv: PathBuf,
    pub purity_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub heatmap_svg: PathBuf,
    pub histogram_svg: PathBuf,
}

/// Anchor colours of a viridis-like ramp, dark blue to yellow.
const ANCHORS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

/// Colour of step `i` of the fixed 256-step ramp.
pub fn ramp(i: usize) -> (u8, u8, u8) {
    let t = i.min(RAMP_STEPS - 1) as f64 / (RAMP_STEPS - 1) as f64 * (ANCHORS.len() - 1) as f64;
    let seg = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - seg as f64;
    let (a, b) = (ANCHORS[seg], ANCHORS[seg + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn label_colour(label: usize, classes: usize) -> String {
    let step = if classes <= 1 { 0 } else { label * (RAMP_STEPS - 1) / (classes - 1) };
    let (r, g, b) = ramp(step);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn knn_csv(r: &AnalysisReport) -> String {
    let mut s = String::from("point,label,rank,neighbor,neighbor_label,distance\n");
    for (i, row) in r.knn.iter().enumerate() {
        for (rank, nb) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{}",
                r.labels[i],
                rank + 1,
                nb.index,
                r.labels[nb.index],
                nb.distance
            );
        }
    }
    s
}

fn ratios_csv(r: &AnalysisReport) -> String {
    let mut s = String::from("point,label,per_point,centroid\n");
    for (i, (a, b)) in r.per_point.per_point.iter().zip(&r.centroid.per_point).enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", r.labels[i], opt(*a), opt(*b));
    }
    s
}

fn purity_csv(r: &AnalysisReport) -> String {
    let mut s = String::from("k,purity\n");
    for (j, p) in r.purity.iter().enumerate() {
        let _ = writeln!(s, "{},{p}", j + 1);
    }
    s
}

fn summary_csv(r: &AnalysisReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "source,{}", r.source.replace(',', ";"));
    let _ = writeln!(s, "points,{}", r.labels.len());
    let _ = writeln!(s, "k,{}", r.k);
    let _ = writeln!(s, "neighbor_purity,{}", r.purity_at_k());
    let _ = writeln!(s, "median_ratio_per_point,{}", r.per_point.median);
    let _ = writeln!(s, "median_ratio_centroid,{}", r.centroid.median);
    s
}

const CELL_W: usize = 16;

/// Rows are points grouped by label (stable within a label); columns are
/// neighbour ranks. Each cell takes the colour of the neighbour's label.
fn heatmap_svg(r: &AnalysisReport) -> String {
    let n = r.labels.len();
    let classes = r.labels.iter().max().map_or(1, |m| m + 1);
    let cell_h = if n <= 100 { 8 } else if n <= 400 { 2 } else { 1 };
    let label_w = CELL_W;
    let gap = 4;
    let width = label_w + gap + r.k * CELL_W;
    let height = n * cell_h;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| r.labels[i]);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" shape-rendering="crispEdges">"#
    );
    for (row, &i) in order.iter().enumerate() {
        let y = row * cell_h;
        let _ = writeln!(
            s,
            r#"<rect class="label" x="0" y="{y}" width="{label_w}" height="{cell_h}" fill="{}"/>"#,
            label_colour(r.labels[i], classes)
        );
        for (c, nb) in r.knn[i].iter().enumerate() {
            let x = label_w + gap + c * CELL_W;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{x}" y="{y}" width="{CELL_W}" height="{cell_h}" fill="{}"/>"#,
                label_colour(r.labels[nb.index], classes)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn histogram_svg(r: &RatioReport) -> String {
    let (w, h, pad) = (480usize, 240usize, 30usize);
    let counts = &r.histogram.counts;
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let bins = counts.len().max(1);
    let bar_w = (w - 2 * pad) as f64 / bins as f64;
    let plot_h = (h - 2 * pad) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>"##);
    for (b, &c) in counts.iter().enumerate() {
        let bh = plot_h * c as f64 / max as f64;
        let x = pad as f64 + b as f64 * bar_w;
        let y = (h - pad) as f64 - bh;
        let step = b * (RAMP_STEPS - 1) / (bins - 1).max(1);
        let (cr, cg, cb) = ramp(step);
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="#{cr:02x}{cg:02x}{cb:02x}"/>"##,
            bar_w
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="#000000"/>"##,
        y = h - pad,
        x2 = w - pad
    );
    if let (Some(lo), Some(hi)) = (r.histogram.edges.first(), r.histogram.edges.last()) {
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="{}" font-size="10" font-family="monospace">{lo:.3}</text>"#,
            h - pad / 3
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" font-family="monospace" text-anchor="end">{hi:.3}</text>"#,
            w - pad,
            h - pad / 3
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{}" font-size="11" font-family="monospace">{} ratio, median {:.4}</text>"#,
        pad / 2 + 4,
        r.variant.name(),
        r.median
    );
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the CSV and SVG files of `report` into `dir`, creating it if needed.
pub fn emit_report(report: &AnalysisReport, dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(ReportFiles {
        knn_csv: write(dir, "knn.csv", &knn_csv(report))?,
        ratios_csv: write(dir, "ratios.csv", &ratios_csv(report))?,
        purity_csv: write(dir, "purity.csv", &purity_csv(report))?,
        summary_csv: write(dir, "summary.csv", &summary_csv(report))?,
        heatmap_svg: write(dir, "knn_heatmap.svg", &heatmap_svg(report))?,
        histogram_svg: write(dir, "ratio_histogram.svg", &histogram_svg(&report.per_point))?,
    })
}
