//! Layer trend statistics: mean and variance of every linear/conv layer
//! output across model snapshots, instability flags, and the warmup/decay
//! learning-rate schedule.

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, RunContext};
use crate::profiler::synthetic_features;
use crate::streaming::ChunkWindow;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStatRecord {
    pub snapshot_id: u64,
    pub layer_path: String,
    pub mean: f64,
    /// Population variance; NaN when the layer output was non-finite.
    pub variance: f64,
}

pub const DEFAULT_BATCH: usize = 4;
pub const DEFAULT_FRAMES: usize = 64;

/// Standard-normal probe batch `[batch, frames, feat]`.
pub fn gaussian_batch(batch: usize, frames: usize, feat: usize, seed: u64) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let data = synthetic_features::<f32>(&mut rng, batch * frames, feat).into_data();
    Tensor::new(vec![batch, frames, feat], data).expect("shape matches")
}

/// Mean and population variance over all elements, accumulated in f64.
pub fn mean_variance<E: Element>(values: &[E]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Runs a traced, NaN-tolerant encoder pass over each batch item and returns
/// one record per linear/conv layer in execution order, with statistics over
/// the layer outputs of the whole batch.
pub fn collect_layer_stats<E: Element>(
    model: &Model<E>,
    batch: &Tensor<E>,
    snapshot_id: u64,
) -> Result<Vec<LayerStatRecord>> {
    let (b, frames, feat) = match batch.shape() {
        &[b, t, f] => (b, t, f),
        other => {
            return Err(Error::dim(
                "collect_layer_stats",
                format!("batch must be [B, T, feat], got {other:?}"),
            ))
        }
    };
    let mut order: Vec<String> = Vec::new();
    let mut values: HashMap<String, Vec<E>> = HashMap::new();
    for i in 0..b {
        let x = Tensor::new(
            vec![frames, feat],
            batch.data()[i * frames * feat..(i + 1) * frames * feat].to_vec(),
        )?;
        let mut ctx = RunContext::new().with_trace().nan_tolerant();
        model.encoder_forward_with(&x, ChunkWindow::FULL, &mut ctx)?;
        for entry in ctx.take_trace() {
            let slot = values.entry(entry.path.clone()).or_insert_with(|| {
                order.push(entry.path.clone());
                Vec::new()
            });
            slot.extend_from_slice(entry.output.data());
        }
    }
    Ok(order
        .into_iter()
        .map(|path| {
            let (mean, variance) = mean_variance(&values[&path]);
            LayerStatRecord {
                snapshot_id,
                layer_path: path,
                mean,
                variance,
            }
        })
        .collect())
}

/// Statistics for each snapshot on the same probe batch, ordered by layer
/// (execution order) and then snapshot id.
pub fn ltp_over_snapshots<E: Element>(
    snapshots: &[(u64, Model<E>)],
    batch: &Tensor<E>,
) -> Result<Vec<LayerStatRecord>> {
    let Some((_, first)) = snapshots.first() else {
        return Ok(Vec::new());
    };
    for (id, m) in snapshots {
        if m.config != first.config {
            return Err(Error::InvalidArgument(format!(
                "snapshot {id} has a different config from snapshot {}",
                snapshots[0].0
            )));
        }
    }
    let mut all = Vec::new();
    let mut rank: HashMap<String, usize> = HashMap::new();
    for (id, m) in snapshots {
        for r in collect_layer_stats(m, batch, *id)? {
            let next = rank.len();
            rank.entry(r.layer_path.clone()).or_insert(next);
            all.push(r);
        }
    }
    all.sort_by(|a, b| {
        rank[&a.layer_path]
            .cmp(&rank[&b.layer_path])
            .then(a.snapshot_id.cmp(&b.snapshot_id))
    });
    Ok(all)
}

pub fn write_csv<W: Write>(records: &[LayerStatRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<LayerStatRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstabilityReason {
    Nan,
    Inf,
    Mean,
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityFlag {
    pub layer_path: String,
    pub snapshot_id: u64,
    pub reason: InstabilityReason,
}

pub const DEFAULT_MEAN_BOUND: f64 = 100.0;
pub const DEFAULT_VAR_BOUND: f64 = 1e4;

/// Flags each record that is NaN, infinite, or out of bounds. A record gets
/// at most one flag, the first of nan, inf, mean, variance that applies.
pub fn detect_instability(records: &[LayerStatRecord], mean_bound: f64, var_bound: f64) -> Vec<InstabilityFlag> {
    records
        .iter()
        .filter_map(|r| {
            let reason = if r.mean.is_nan() || r.variance.is_nan() {
                InstabilityReason::Nan
            } else if r.mean.is_infinite() || r.variance.is_infinite() {
                InstabilityReason::Inf
            } else if r.mean.abs() > mean_bound {
                InstabilityReason::Mean
            } else if r.variance > var_bound {
                InstabilityReason::Variance
            } else {
                return None;
            };
            Some(InstabilityFlag {
                layer_path: r.layer_path.clone(),
                snapshot_id: r.snapshot_id,
                reason,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub lr_peak: f64,
    pub warmup: u64,
    pub step: u64,
}

/// Warmup/decay schedule with the peak decoupled from the model width:
/// `lr_peak * T0^0.5 * min(t^-0.5, t * T0^-1.5)`, evaluated as
/// `lr_peak * t / T0` before the peak and `lr_peak * sqrt(T0 / t)` after, so
/// that `t = T0` gives `lr_peak` exactly.
pub fn noam_lr(p: ScheduleParams) -> Result<f64> {
    if !(p.lr_peak > 0.0) || p.warmup == 0 || p.step == 0 {
        return Err(Error::InvalidArgument(format!(
            "need lr_peak > 0, warmup >= 1, step >= 1 (got {}, {}, {})",
            p.lr_peak, p.warmup, p.step
        )));
    }
    let (t, t0) = (p.step as f64, p.warmup as f64);
    Ok(if p.step < p.warmup {
        p.lr_peak * t / t0
    } else {
        p.lr_peak * (t0 / t).sqrt()
    })
}
