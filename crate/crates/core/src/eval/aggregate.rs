use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::{Error, Result};

/// Mean and standard error (sample standard deviation / √n).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<MeanSe> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list of runs"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / (n as f64).sqrt()
    };
    Ok(MeanSe { mean, se, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub ap: MeanSe,
    pub seg: MeanSe,
}

pub fn aggregate_reports(runs: &[MetricsReport]) -> Result<SummaryReport> {
    let ap: Vec<f64> = runs.iter().map(|r| r.ap).collect();
    let seg: Vec<f64> = runs.iter().map(|r| r.seg).collect();
    Ok(SummaryReport {
        ap: aggregate(&ap)?,
        seg: aggregate(&seg)?,
    })
}
