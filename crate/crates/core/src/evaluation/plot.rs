use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use super::sweep::SweepRow;
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

fn line_chart(
    title: &str,
    labels: (&str, &str),
    series: &BTreeMap<String, Vec<(f64, f64)>>,
    area: DrawingArea<SVGBackend<'_>, plotters::coord::Shift>,
) -> Result<()> {
    let (x0, x1) = bounds(series.values().flatten().map(|p| p.0));
    let (y0, y1) = bounds(series.values().flatten().map(|p| p.1));
    let mut chart = ChartBuilder::on(&area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(labels.0).y_desc(labels.1).draw().map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

/// Accuracy against latency, one curve per variant and test PSNR.
pub fn plot_rate_distortion(rows: &[SweepRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Plot("no rows to plot".into()));
    }
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry(format!("{} @ {} dB", r.variant, r.psnr_db)).or_default().push((r.latency_ms, r.accuracy_pct));
    }
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    line_chart("Rate-distortion", ("latency (ms)", "accuracy (%)"), &series, root.clone())?;
    root.present().map_err(plot_err)
}

/// Latency and accuracy against test PSNR, one curve per variant and
/// estimator mode.
pub fn plot_dynamic(rows: &[SweepRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Plot("no rows to plot".into()));
    }
    let mut latency: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut accuracy: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let name = format!("{} ({})", r.variant, r.estimator_mode);
        latency.entry(name.clone()).or_default().push((r.psnr_db, r.latency_ms));
        accuracy.entry(name).or_default().push((r.psnr_db, r.accuracy_pct));
    }
    let root = SVGBackend::new(path, (1200, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(600);
    line_chart("Latency", ("PSNR (dB)", "latency (ms)"), &latency, left)?;
    line_chart("Accuracy", ("PSNR (dB)", "accuracy (%)"), &accuracy, right)?;
    root.present().map_err(plot_err)
}
