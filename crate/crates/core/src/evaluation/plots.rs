//! SVG plots, each rendered from the CSV written next to it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

/// Published foreground F1 (percent) by forecasting range for detection and
/// forecasting models under two initializations.
pub const REFERENCE_F1_CSV: &str = include_str!("../../data/reference_f1_by_range.csv");
pub const REFERENCE_F1_FILE: &str = "reference_f1_by_range.csv";

pub const F1_FILE: &str = "f1_by_range";
pub const PRECISION_RECALL_FILE: &str = "precision_recall_by_range";
pub const PR_CURVE_FILE: &str = "pr_curve";
pub const CONFUSION_FILE: &str = "timerange_confusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Row {
    pub series: String,
    pub range_months: u32,
    pub f1_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallRow {
    pub series: String,
    pub range_months: u32,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurveRow {
    pub series: String,
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub truth: String,
    pub predicted: String,
    pub count: u64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &Series, y_max: f64) -> Result<()> {
    let x_max = series.values().flatten().map(|p| p.0).fold(1.0f64, f64::max);
    let x_min = series.values().flatten().map(|p| p.0).fold(x_max, f64::min).min(0.0);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x_min..x_max * 1.02, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn sorted(mut s: Series) -> Series {
    for v in s.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    s
}

pub fn render_f1_by_range(rows: &[F1Row], svg: &Path) -> Result<()> {
    let mut s = Series::new();
    for r in rows {
        s.entry(r.series.clone()).or_default().push((f64::from(r.range_months), r.f1_percent));
    }
    let y_max = rows.iter().map(|r| r.f1_percent).fold(10.0, f64::max) * 1.1;
    line_chart(svg, "Foreground F1 by range", "range [months]", "F1 [%]", &sorted(s), y_max)
}

pub fn render_precision_recall(rows: &[PrecisionRecallRow], svg: &Path) -> Result<()> {
    let mut s = Series::new();
    for r in rows {
        let x = f64::from(r.range_months);
        s.entry(format!("{} precision", r.series)).or_default().push((x, r.precision));
        s.entry(format!("{} recall", r.series)).or_default().push((x, r.recall));
    }
    line_chart(svg, "Precision and recall by range", "range [months]", "value", &sorted(s), 1.05)
}

pub fn render_pr_curve(rows: &[PrCurveRow], svg: &Path) -> Result<()> {
    let mut s = Series::new();
    for r in rows {
        s.entry(r.series.clone()).or_default().push((r.recall, r.precision));
    }
    line_chart(svg, "Precision-recall curve", "recall", "precision", &sorted(s), 1.05)
}

pub fn render_confusion(rows: &[ConfusionRow], svg: &Path) -> Result<()> {
    let labels = ["early", "late"];
    let index = |name: &str| labels.iter().position(|l| *l == name);
    let mut cells = [[0u64; 2]; 2];
    for r in rows {
        match (index(&r.truth), index(&r.predicted)) {
            (Some(t), Some(p)) => cells[t][p] = r.count,
            _ => return Err(Error::invalid(format!("unknown confusion cell {}/{}", r.truth, r.predicted))),
        }
    }
    let max = cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let root = SVGBackend::new(svg, (480, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Early/late confusion (rows: truth)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..2.0, 0.0..2.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(0)
        .y_labels(0)
        .x_desc("predicted: early | late")
        .y_desc("truth: late | early")
        .draw()
        .map_err(plot_err)?;
    for (t, row) in cells.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            let shade = 1.0 - 0.8 * count as f64 / max;
            let color = RGBColor((255.0 * shade) as u8, (255.0 * shade) as u8, 255);
            let (x0, y0) = (p as f64, 1.0 - t as f64);
            chart
                .draw_series(std::iter::once(Rectangle::new([(x0, y0), (x0 + 1.0, y0 + 1.0)], color.filled())))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Text::new(
                    format!("{} {}: {count}", labels[t], labels[p]),
                    (x0 + 0.15, y0 + 0.5),
                    ("sans-serif", 16),
                )))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.svg")))
}

/// Write every plot's CSV for `reports`, then render each SVG from its CSV.
/// Returns the files written.
pub fn emit_plots(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to plot"));
    }
    fs::create_dir_all(dir)?;
    let mut f1 = Vec::new();
    let mut pr_by_range = Vec::new();
    let mut pr_curve = Vec::new();
    let mut confusion = Vec::new();
    for report in reports {
        for r in &report.ranges {
            f1.push(F1Row {
                series: report.label.clone(),
                range_months: r.range_months,
                f1_percent: 100.0 * r.metrics.f1,
            });
            pr_by_range.push(PrecisionRecallRow {
                series: report.label.clone(),
                range_months: r.range_months,
                precision: r.metrics.precision,
                recall: r.metrics.recall,
            });
        }
        pr_curve.extend(report.pr_curve.iter().map(|p| PrCurveRow {
            series: report.label.clone(),
            recall: p.recall,
            precision: p.precision,
            threshold: p.threshold,
        }));
        if let Some(tr) = &report.timerange {
            for (t, truth) in ["early", "late"].iter().enumerate() {
                for (p, predicted) in ["early", "late"].iter().enumerate() {
                    confusion.push(ConfusionRow {
                        truth: truth.to_string(),
                        predicted: predicted.to_string(),
                        count: tr.confusion[t][p],
                    });
                }
            }
        }
    }
    let mut written = Vec::new();
    if !f1.is_empty() {
        written.extend(emit(dir, F1_FILE, &f1, render_f1_by_range)?);
        written.extend(emit(dir, PRECISION_RECALL_FILE, &pr_by_range, render_precision_recall)?);
    }
    if !pr_curve.is_empty() {
        written.extend(emit(dir, PR_CURVE_FILE, &pr_curve, render_pr_curve)?);
    }
    if !confusion.is_empty() {
        written.extend(emit(dir, CONFUSION_FILE, &confusion, render_confusion)?);
    }
    Ok(written)
}

fn emit<T: Serialize + DeserializeOwned>(
    dir: &Path,
    stem: &str,
    rows: &[T],
    render: fn(&[T], &Path) -> Result<()>,
) -> Result<Vec<PathBuf>> {
    let (csv_path, svg_path) = paths(dir, stem);
    write_csv(&csv_path, rows)?;
    // the CSV is the source of truth for the picture
    render(&read_csv::<T>(&csv_path)?, &svg_path)?;
    Ok(vec![csv_path, svg_path])
}

/// Re-render every known plot whose CSV exists in `dir`.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut go = |stem: &str, f: &dyn Fn(&Path, &Path) -> Result<()>| -> Result<()> {
        let (csv_path, svg_path) = paths(dir, stem);
        if csv_path.exists() {
            f(&csv_path, &svg_path)?;
            written.push(svg_path);
        }
        Ok(())
    };
    go(F1_FILE, &|c, s| render_f1_by_range(&read_csv(c)?, s))?;
    go("reference_f1_by_range", &|c, s| render_f1_by_range(&read_csv(c)?, s))?;
    go(PRECISION_RECALL_FILE, &|c, s| render_precision_recall(&read_csv(c)?, s))?;
    go(PR_CURVE_FILE, &|c, s| render_pr_curve(&read_csv(c)?, s))?;
    go(CONFUSION_FILE, &|c, s| render_confusion(&read_csv(c)?, s))?;
    if written.is_empty() {
        return Err(Error::MissingData(format!("no plot CSVs found in {}", dir.display())));
    }
    Ok(written)
}

/// Bundled reference rows.
pub fn reference_f1_rows() -> Result<Vec<F1Row>> {
    let mut r = csv::Reader::from_reader(REFERENCE_F1_CSV.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Write the bundled reference CSV verbatim and render it.
pub fn write_reference(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let (csv_path, svg_path) = paths(dir, "reference_f1_by_range");
    fs::write(&csv_path, REFERENCE_F1_CSV)?;
    render_f1_by_range(&read_csv(&csv_path)?, &svg_path)?;
    Ok((csv_path, svg_path))
}
