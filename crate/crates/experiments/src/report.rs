use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nucleiseg::eval::{aggregate_reports, MeanSe};
use nucleiseg::segtrain::Scheme;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::runner::{write_json_atomic, write_text, RunRecord};
use crate::{Error, Result};

/// Mean and standard error over repeats of one (noise, scheme, subset) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub noise: String,
    pub scheme: Scheme,
    pub subset_index: usize,
    pub n_train: usize,
    pub n_runs: usize,
    pub ap: MeanSe,
    pub seg: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
    pub manifest: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    runs: Vec<String>,
    table: &'a Path,
    plots: &'a [PathBuf],
    rows: &'a [AggregateRow],
}

pub fn aggregate_records(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(String, Scheme, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.key.noise.clone(), r.key.scheme, r.key.subset_index))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((noise, scheme, subset_index), rs)| {
            let reports: Vec<_> = rs.iter().map(|r| r.metrics.clone()).collect();
            let summary = aggregate_reports(&reports)?;
            Ok(AggregateRow {
                noise,
                scheme,
                subset_index,
                n_train: rs[0].subset_size,
                n_runs: rs.len(),
                ap: summary.ap,
                seg: summary.seg,
            })
        })
        .collect()
}

pub fn table_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("noise,scheme,subset_index,n_train,n_runs,ap_mean,ap_se,seg_mean,seg_se\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.noise, r.scheme, r.subset_index, r.n_train, r.n_runs, r.ap.mean, r.ap.se, r.seg.mean, r.seg.se
        ));
    }
    out
}

/// Writes `summary.csv`, one `ap_<noise>.svg` and `seg_<noise>.svg` per
/// noise level, and `report.json`.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = aggregate_records(records)?;
    let table = out_dir.join("summary.csv");
    write_text(&table, &table_csv(&rows))?;

    let mut plots = Vec::new();
    let noises: Vec<&String> = rows
        .iter()
        .map(|r| &r.noise)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for noise in noises {
        let sub: Vec<&AggregateRow> = rows.iter().filter(|r| &r.noise == noise).collect();
        for metric in [Metric::Ap, Metric::Seg] {
            let path = out_dir.join(format!("{}_{noise}.svg", metric.name()));
            plot(&sub, metric, noise, &path)?;
            plots.push(path);
        }
    }

    let manifest = out_dir.join("report.json");
    let mut runs: Vec<String> = records.iter().map(|r| r.key.id()).collect();
    runs.sort();
    write_json_atomic(
        &manifest,
        &Manifest {
            runs,
            table: &table,
            plots: &plots,
            rows: &rows,
        },
    )?;
    Ok(ReportFiles { table, plots, manifest })
}

#[derive(Clone, Copy)]
enum Metric {
    Ap,
    Seg,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Ap => "ap",
            Metric::Seg => "seg",
        }
    }

    fn of(self, r: &AggregateRow) -> MeanSe {
        match self {
            Metric::Ap => r.ap,
            Metric::Seg => r.seg,
        }
    }
}

/// Score against training-set size on a log axis, one line per scheme with
/// a shaded ±SE band.
fn plot(rows: &[&AggregateRow], metric: Metric, noise: &str, path: &Path) -> Result<()> {
    let perr = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));
    let (lo, hi) = rows.iter().fold((f64::MAX, f64::MIN), |(lo, hi), r| {
        (lo.min(r.n_train as f64), hi.max(r.n_train as f64))
    });
    let x_range = (lo.max(1.0) / 1.5)..(hi.max(1.0) * 1.5);

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| perr(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({noise})", metric.name().to_uppercase()), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x_range.log_scale(), 0f64..1f64)
        .map_err(|e| perr(&e))?;
    chart
        .configure_mesh()
        .x_desc("training images")
        .y_desc(metric.name().to_uppercase())
        .draw()
        .map_err(|e| perr(&e))?;

    let mut by_scheme: BTreeMap<Scheme, Vec<(f64, MeanSe)>> = BTreeMap::new();
    for r in rows {
        by_scheme.entry(r.scheme).or_default().push((r.n_train as f64, metric.of(r)));
    }
    for (i, (scheme, mut pts)) in by_scheme.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(i).to_rgba();
        let mut band: Vec<(f64, f64)> = pts.iter().map(|(x, m)| (*x, (m.mean + m.se).min(1.0))).collect();
        band.extend(pts.iter().rev().map(|(x, m)| (*x, (m.mean - m.se).max(0.0))));
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(|e| perr(&e))?;
        chart
            .draw_series(LineSeries::new(pts.iter().map(|(x, m)| (*x, m.mean)), color.stroke_width(2)))
            .map_err(|e| perr(&e))?
            .label(scheme.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|(x, m)| Circle::new((*x, m.mean), 3, color.filled())))
            .map_err(|e| perr(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| perr(&e))?;
    root.present().map_err(|e| perr(&e))?;
    Ok(())
}
