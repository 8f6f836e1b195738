//! Per-step metrics rows, the objective dump and EMA smoothing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: u8,
    pub mode: String,
    pub mean_main_reward: f64,
    pub mean_sub_reward: Option<f64>,
    pub eval_success: Option<f64>,
    #[serde(rename = "grad_norm_M")]
    pub grad_norm_main: f64,
    #[serde(rename = "grad_norm_S")]
    pub grad_norm_sub: Option<f64>,
}

/// Group statistics and surrogate value for one query and role at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub step: u64,
    pub role: String,
    pub query_id: String,
    pub mean: f64,
    pub std: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Decode(e.to_string())
}

pub fn write_rows<T: Serialize, W: std::io::Write>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(std::io::BufWriter::new(f), rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// `y_0 = x_0`, `y_t = alpha x_t + (1 - alpha) y_{t-1}`.
pub fn ema(xs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::contract(format!("EMA alpha {alpha} outside (0, 1]")));
    }
    let Some(&first) = xs.first() else {
        return Err(Error::contract("EMA of an empty series"));
    };
    let mut out = Vec::with_capacity(xs.len());
    let mut y = first;
    out.push(y);
    for &x in &xs[1..] {
        y += alpha * (x - y);
        out.push(y);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedRow {
    pub step: u64,
    pub value: f64,
    pub ema: f64,
}

/// Smooths one numeric column of a metrics file, skipping empty cells.
pub fn smooth_column(rows: &[MetricsRow], column: &str, alpha: f64) -> Result<Vec<SmoothedRow>> {
    let pick = |r: &MetricsRow| -> Result<Option<f64>> {
        Ok(match column {
            "mean_main_reward" => Some(r.mean_main_reward),
            "mean_sub_reward" => r.mean_sub_reward,
            "eval_success" => r.eval_success,
            "grad_norm_M" => Some(r.grad_norm_main),
            "grad_norm_S" => r.grad_norm_sub,
            other => {
                return Err(Error::Config(vec![format!(
                    "no numeric column {other:?} in metrics"
                )]))
            }
        })
    };
    let mut steps = Vec::new();
    let mut xs = Vec::new();
    for r in rows {
        if let Some(x) = pick(r)? {
            steps.push(r.step);
            xs.push(x);
        }
    }
    let ys = ema(&xs, alpha)?;
    Ok(steps
        .into_iter()
        .zip(xs)
        .zip(ys)
        .map(|((step, value), ema)| SmoothedRow { step, value, ema })
        .collect())
}
