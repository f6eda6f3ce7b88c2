//! Static SVG line plots of decay and loss CSVs.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};

/// Header and numeric rows of a CSV, skipping `#` comment lines.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| match f {
                "true" => Ok(1.0),
                "false" => Ok(0.0),
                "" => Ok(f64::NAN),
                s => s.parse::<f64>(),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    if header.is_empty() || rows.is_empty() {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    Ok(Table { header, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Decay,
    Loss,
}

pub fn plot_kind(t: &Table) -> Result<PlotKind> {
    let has = |c: &str| t.header.iter().any(|h| h == c);
    if has("m") && has("max_cert") {
        Ok(PlotKind::Decay)
    } else if has("step") && has("loss") {
        Ok(PlotKind::Loss)
    } else {
        Err(Error::Config(format!("unrecognized CSV columns {:?}", t.header)))
    }
}

fn log_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| *v > 0.0 && v.is_finite())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (1e-3, 1.0);
    }
    (lo / 2.0, hi * 2.0)
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Config(format!("plot failed: {e:?}"))
}

/// Renders the SVG as a string.
pub fn render(t: &Table, kind: PlotKind, title: &str) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        match kind {
            PlotKind::Decay => {
                let m = t.column("m").unwrap_or_default();
                let cert = t.column("max_cert").unwrap_or_default();
                let eps = t.column("epsilon_target").unwrap_or_default();
                let (x0, x1) = log_range(m.iter().copied());
                let (y0, y1) = log_range(cert.iter().chain(&eps).copied());
                let mut chart = ChartBuilder::on(&root)
                    .caption(title, ("sans-serif", 20))
                    .margin(15)
                    .x_label_area_size(40)
                    .y_label_area_size(70)
                    .build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale())
                    .map_err(plot_err)?;
                chart
                    .configure_mesh()
                    .x_desc("m")
                    .y_desc("layer deviation")
                    .draw()
                    .map_err(plot_err)?;
                let series = |ys: &[f64]| -> Vec<(f64, f64)> {
                    m.iter().zip(ys).filter(|(_, y)| **y > 0.0).map(|(a, b)| (*a, *b)).collect()
                };
                chart
                    .draw_series(LineSeries::new(series(&cert), &BLUE))
                    .map_err(plot_err)?
                    .label("max certified")
                    .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
                chart
                    .draw_series(series(&cert).into_iter().map(|p| Circle::new(p, 3, BLUE.filled())))
                    .map_err(plot_err)?;
                if !eps.is_empty() {
                    chart
                        .draw_series(LineSeries::new(series(&eps), &RED))
                        .map_err(plot_err)?
                        .label("epsilon target")
                        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
                }
                chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
            }
            PlotKind::Loss => {
                let step = t.column("step").unwrap_or_default();
                let loss = t.column("loss").unwrap_or_default();
                let x1 = step.iter().copied().fold(1.0, f64::max);
                let positive = loss.iter().all(|v| *v > 0.0);
                let pts: Vec<(f64, f64)> = step.iter().copied().zip(loss.iter().copied()).collect();
                if positive {
                    let (y0, y1) = log_range(loss.iter().copied());
                    let mut chart = ChartBuilder::on(&root)
                        .caption(title, ("sans-serif", 20))
                        .margin(15)
                        .x_label_area_size(40)
                        .y_label_area_size(70)
                        .build_cartesian_2d(0.0..x1, (y0..y1).log_scale())
                        .map_err(plot_err)?;
                    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(plot_err)?;
                    chart.draw_series(LineSeries::new(pts, &BLUE)).map_err(plot_err)?;
                } else {
                    let hi = loss.iter().copied().fold(0.0, f64::max);
                    let lo = loss.iter().copied().fold(0.0, f64::min);
                    let pad = ((hi - lo) * 0.05).max(1e-12);
                    let mut chart = ChartBuilder::on(&root)
                        .caption(title, ("sans-serif", 20))
                        .margin(15)
                        .x_label_area_size(40)
                        .y_label_area_size(70)
                        .build_cartesian_2d(0.0..x1, (lo - pad)..(hi + pad))
                        .map_err(plot_err)?;
                    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(plot_err)?;
                    chart.draw_series(LineSeries::new(pts, &BLUE)).map_err(plot_err)?;
                }
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}
