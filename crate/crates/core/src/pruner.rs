//! Memory-aware structured pruning of MLP channels.
//!
//! A channel is one output row of `intermediate.dense` together with the
//! matching input column of `output.dense`; both are removed together so the
//! pruned model stays a dense, valid ViT. Channels are ranked by the mean
//! absolute activation of `intermediate.dense` and the lowest
//! `floor(p * C)` are dropped per layer per step. Steps repeat until the
//! analytic peak memory estimate fits the budget.
//!
//! ## Peak-memory liveness table
//!
//! During block `l` at batch `B` with `T` tokens the estimate assumes these
//! buffers are live at the same time:
//!
//! | buffer              | shape                 | dtype                               |
//! |---------------------|-----------------------|-------------------------------------|
//! | block input         | `[B, T, hidden]`      | f32 (residual stream)               |
//! | attention scores    | `[B, heads, T, T]`    | f32 (softmax runs in f32)           |
//! | MLP intermediate    | `[B, T, mlp_l]`       | storage dtype of `intermediate.dense` output |
//!
//! The peak activation term is the maximum of that sum over blocks.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{intermediate_name, Linear, Projection, VitModel};
use crate::profiler::{profile, ActivationStats, CalibrationSet};
use crate::pattern::LayerPattern;
use crate::tensor::{Dtype, Tensor, TensorData};

pub const DEFAULT_PERCENTILE: f64 = 0.10;
pub const DEFAULT_MIN_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub weight_bytes: u64,
    pub peak_activation_bytes: u64,
    pub batch_size: usize,
}

impl MemoryModel {
    pub fn peak_estimate(&self) -> u64 {
        self.weight_bytes + self.peak_activation_bytes
    }
}

/// Live bytes of block `l` per the liveness table.
pub fn block_activation_bytes(model: &VitModel, layer: usize, batch: usize) -> u64 {
    let c = &model.config;
    let (b, t, h) = (batch as u64, c.seq_len() as u64, c.hidden_size as u64);
    let f32_bytes = Dtype::F32.bytes_per_element() as u64;
    let block = &model.layers[layer];
    let inputs = b * t * h * f32_bytes;
    let scores = b * c.num_heads as u64 * t * t * f32_bytes;
    let mlp = b * t * block.mlp_size() as u64 * block.intermediate.activation_dtype().bytes_per_element() as u64;
    inputs + scores + mlp
}

pub fn estimate_peak(model: &VitModel, batch: usize) -> MemoryModel {
    let peak = (0..model.layers.len())
        .map(|l| block_activation_bytes(model, l, batch))
        .max()
        .unwrap_or(0);
    MemoryModel {
        weight_bytes: model.weight_bytes(),
        peak_activation_bytes: peak,
        batch_size: batch,
    }
}

/// Bytes of every MLP linear output over all blocks at `batch`; the quantity
/// the profiler's per-layer `activation_bytes` sum to under the default filter.
pub fn mlp_activation_bytes(model: &VitModel, batch: usize) -> u64 {
    let c = &model.config;
    let rows = (batch * c.seq_len()) as u64;
    model
        .layers
        .iter()
        .map(|l| {
            rows * (l.mlp_size() * l.intermediate.activation_dtype().bytes_per_element()
                + c.hidden_size * l.output.activation_dtype().bytes_per_element()) as u64
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Surviving channels as indices into the original, unpruned channel space.
    pub keep: Vec<usize>,
    pub percentile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Keyed by the layer's `intermediate.dense` name.
    pub layers: BTreeMap<String, LayerPlan>,
    pub steps: usize,
}

impl PruningPlan {
    /// Plan describing `model` as it stands, with no pruning steps recorded.
    pub fn identity(model: &VitModel, percentile: f64) -> Self {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (
                    intermediate_name(l),
                    LayerPlan {
                        keep: layer.mlp_channels.clone(),
                        percentile,
                        warning: None,
                    },
                )
            })
            .collect();
        PruningPlan { layers, steps: 0 }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("pruning plan: {e}")))
    }
}

/// Channel positions of `layer` sorted by ascending mean |activation|, ties
/// broken by ascending index.
pub fn rank_channels(stats: &ActivationStats, layer: &str) -> Result<Vec<usize>> {
    let s = stats.layer(layer)?;
    Ok(rank_by(&s.channel_mean_abs))
}

fn rank_by(means: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    order
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let width = t.len() / t.shape()[0];
    let pick = |i: usize| i * width..(i + 1) * width;
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    let data = match t.data() {
        TensorData::F32(v) => TensorData::F32(rows.iter().flat_map(|&r| v[pick(r)].to_vec()).collect()),
        TensorData::F16(v) => TensorData::F16(rows.iter().flat_map(|&r| v[pick(r)].to_vec()).collect()),
        TensorData::I8(_) => return Err(Error::PrecisionState("cannot prune an INT8 tensor".into())),
    };
    Tensor::new(shape, data)
}

fn select_cols(t: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let &[rows, width] = t.shape() else {
        return Err(Error::Dimension("column selection needs a matrix".into()));
    };
    let data = match t.data() {
        TensorData::F32(v) => {
            TensorData::F32((0..rows).flat_map(|r| cols.iter().map(move |&c| v[r * width + c])).collect())
        }
        TensorData::F16(v) => {
            TensorData::F16((0..rows).flat_map(|r| cols.iter().map(move |&c| v[r * width + c])).collect())
        }
        TensorData::I8(_) => return Err(Error::PrecisionState("cannot prune an INT8 tensor".into())),
    };
    Tensor::new(vec![rows, cols.len()], data)
}

/// Keeps the MLP channels of `layer` at the given current positions (ascending).
fn keep_positions(model: &mut VitModel, layer: usize, positions: &[usize]) -> Result<()> {
    let block = &mut model.layers[layer];
    let (Projection::Float(inter), Projection::Float(out)) = (&block.intermediate, &block.output) else {
        return Err(Error::PrecisionState(format!(
            "layer {layer} MLP is quantized; prune before quantization"
        )));
    };
    let new_inter = Linear::new(select_rows(&inter.weight, positions)?, select_rows(&inter.bias, positions)?)?;
    let new_out = Linear::new(select_cols(&out.weight, positions)?, out.bias.clone())?;
    block.intermediate = Projection::Float(new_inter);
    block.output = Projection::Float(new_out);
    block.mlp_channels = positions.iter().map(|&p| block.mlp_channels[p]).collect();
    Ok(())
}

/// Removes the lowest-ranked `floor(percentile * C)` channels of every MLP
/// block. Layers that would fall below `min_channels` are left alone and
/// flagged in the plan.
pub fn prune_step(
    model: &VitModel,
    stats: &ActivationStats,
    percentile: f64,
    min_channels: usize,
) -> Result<(VitModel, PruningPlan)> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Config(format!("pruning percentile {percentile} outside (0, 1)")));
    }
    let mut pruned = model.clone();
    let mut plan = PruningPlan::identity(model, percentile);
    for l in 0..model.layers.len() {
        let name = intermediate_name(l);
        let layer_stats = stats.layer(&name)?;
        let ids = &model.layers[l].mlp_channels;
        let means = ids
            .iter()
            .map(|&id| layer_stats.mean_for_channel(id).ok_or_else(|| Error::Lookup(format!("{name} channel {id}"))))
            .collect::<Result<Vec<f64>>>()?;
        let count = ids.len();
        let k = (percentile * count as f64).floor() as usize;
        if count - k < min_channels {
            let msg = format!(
                "skipped: removing {k} of {count} channels would leave fewer than {min_channels}"
            );
            warn!("{name}: {msg}");
            plan.layers.get_mut(&name).unwrap().warning = Some(msg);
            continue;
        }
        if k == 0 {
            continue;
        }
        let order = rank_by(&means);
        let mut keep: Vec<usize> = order[k..].to_vec();
        keep.sort_unstable();
        keep_positions(&mut pruned, l, &keep)?;
        plan.layers.get_mut(&name).unwrap().keep = pruned.layers[l].mlp_channels.clone();
    }
    plan.steps = 1;
    Ok((pruned, plan))
}

/// Restricts every MLP block to the channels listed in `plan`. Channels the
/// model no longer has are ignored, so applying a plan twice is a no-op.
pub fn apply_plan(model: &VitModel, plan: &PruningPlan) -> Result<VitModel> {
    let mut out = model.clone();
    for l in 0..model.layers.len() {
        let name = intermediate_name(l);
        let Some(lp) = plan.layers.get(&name) else { continue };
        let positions: Vec<usize> = model.layers[l]
            .mlp_channels
            .iter()
            .enumerate()
            .filter(|(_, id)| lp.keep.binary_search(id).is_ok())
            .map(|(p, _)| p)
            .collect();
        if positions.is_empty() {
            return Err(Error::Config(format!("plan keeps no channel of {name}")));
        }
        if positions.len() != model.layers[l].mlp_size() {
            keep_positions(&mut out, l, &positions)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOptions {
    pub percentile: f64,
    pub min_channels: usize,
    pub batch: usize,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            percentile: DEFAULT_PERCENTILE,
            min_channels: DEFAULT_MIN_CHANNELS,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BudgetOutcome {
    pub model: VitModel,
    /// One plan per step; the last carries the cumulative keep lists.
    pub plans: Vec<PruningPlan>,
    pub initial: MemoryModel,
    pub final_memory: MemoryModel,
}

impl BudgetOutcome {
    pub fn steps(&self) -> usize {
        self.plans.len()
    }

    /// Cumulative plan (identity plan when no step ran).
    pub fn final_plan(&self, percentile: f64) -> PruningPlan {
        self.plans
            .last()
            .cloned()
            .unwrap_or_else(|| PruningPlan::identity(&self.model, percentile))
    }
}

/// Repeats [`prune_step`] until the peak estimate is within `budget_bytes`.
///
/// The original statistics are reused for every step unless `reprofile` is
/// given, in which case the pruned model is profiled again between steps.
pub fn prune_to_budget(
    model: &VitModel,
    stats: &ActivationStats,
    budget_bytes: u64,
    opts: PruneOptions,
    reprofile: Option<&CalibrationSet>,
) -> Result<BudgetOutcome> {
    let initial = estimate_peak(model, opts.batch);
    let infeasible = |best: u64| Error::BudgetInfeasible {
        budget_bytes,
        best_peak_bytes: best,
    };
    let mut current = model.clone();
    let mut current_stats = stats.clone();
    let mut plans: Vec<PruningPlan> = Vec::new();
    let mut memory = initial;
    loop {
        if memory.peak_estimate() <= budget_bytes {
            break;
        }
        if budget_bytes == 0 {
            return Err(infeasible(memory.peak_estimate()));
        }
        let (next, mut plan) = prune_step(&current, &current_stats, opts.percentile, opts.min_channels)?;
        let next_memory = estimate_peak(&next, opts.batch);
        if next_memory.weight_bytes >= memory.weight_bytes {
            return Err(infeasible(memory.peak_estimate()));
        }
        plan.steps = plans.len() + 1;
        plans.push(plan);
        current = next;
        memory = next_memory;
        if let Some(calib) = reprofile {
            let filter = [LayerPattern::new("encoder.layer.*.intermediate.dense")];
            current_stats = profile(&current, calib, &filter)?;
        }
    }
    Ok(BudgetOutcome {
        model: current,
        plans,
        initial,
        final_memory: memory,
    })
}
