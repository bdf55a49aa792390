//! Activation-aware INT8 quantization.
//!
//! Weights are quantized symmetrically per output channel. Before rounding,
//! every input channel `c` is rescaled by an equalization factor `s_c`
//! derived from calibration activation magnitudes: the weight column is
//! multiplied by `s_c` and the activation divided by it, which is an identity
//! in exact arithmetic and only moves rounding error between weights and
//! activations. The exponent `alpha` of the factors is picked per layer by a
//! grid search on calibration reconstruction error.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, Projection, VitModel};
use crate::pattern::{any_match, LayerPattern};
use crate::profiler::{ActivationStats, CalibrationSet, LayerCapture};
use crate::tensor::{self, Dtype, Tensor};

pub const QMAX: f32 = 127.0;

/// Alpha grid searched by [`quantize_layer_awq`]: 0.0, 0.1, ..., 1.0.
pub const ALPHA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationScaling {
    /// One activation scale per layer, fixed from calibration.
    #[default]
    Static,
    /// Activation scale recomputed from each input batch.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    /// Dequantization multiplier per output channel (`w ~= q * scale`).
    pub weight_scales: Vec<f32>,
    /// Equalization factor per input channel.
    pub eq_scales: Vec<f32>,
    pub act_scale: f32,
    pub alpha: f32,
    pub scaling: ActivationScaling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub q_weight: Tensor,
    pub bias: Tensor,
    pub params: QuantParams,
}

/// Symmetric scale for a row: `max|row| / 127`, or 1 for an all-zero row.
fn symmetric_scale(max_abs: f32) -> f32 {
    if max_abs > 0.0 {
        max_abs / QMAX
    } else {
        1.0
    }
}

/// Round half away from zero, clamped to [-127, 127]. The ratio is formed in
/// f64 so an f32 division cannot round a value across a half-integer.
fn quantize_value(v: f32, scale: f32) -> i8 {
    (f64::from(v) / f64::from(scale)).round().clamp(-127.0, 127.0) as i8
}

/// Per-row symmetric INT8 quantization of an `[out, in]` f32 matrix.
pub fn quantize_tensor_per_channel(w: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let &[out, inp] = w.shape() else {
        return Err(Error::Dimension(format!(
            "per-channel quantization expects a matrix, got {:?}",
            w.shape()
        )));
    };
    let values = w.as_f32()?;
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "weight element {bad} is not finite ({})",
            values[bad]
        )));
    }
    let mut q = Vec::with_capacity(out * inp);
    let mut scales = Vec::with_capacity(out);
    for row in values.chunks(inp) {
        let scale = symmetric_scale(row.iter().fold(0.0f32, |m, v| m.max(v.abs())));
        q.extend(row.iter().map(|&v| quantize_value(v, scale)));
        scales.push(scale);
    }
    Ok((Tensor::from_i8(vec![out, inp], q)?, scales))
}

/// Equalization factors from per-input-channel mean magnitudes:
/// `(m_c / geomean(m))^alpha`. Zero means are raised to the smallest positive
/// mean first; if no mean is positive every factor is 1.
pub fn eq_scales_from_means(means: &[f64], alpha: f64) -> Vec<f64> {
    let floor = means.iter().copied().filter(|&m| m > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return vec![1.0; means.len()];
    }
    let floored: Vec<f64> = means.iter().map(|&m| if m > 0.0 { m } else { floor }).collect();
    let log_mean = floored.iter().map(|m| m.ln()).sum::<f64>() / floored.len() as f64;
    floored.iter().map(|m| (m.ln() - log_mean) * alpha).map(f64::exp).collect()
}

/// Equalization factors for `layer`'s input channels from profiled statistics.
pub fn compute_eq_scales(stats: &ActivationStats, layer: &str, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(eq_scales_from_means(&stats.layer(layer)?.input_mean_abs, alpha))
}

fn max_abs(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

fn int_gemm_rows(xq: &[i8], wt: &[i32], rows: usize, inp: usize, out: usize) -> Vec<i32> {
    let mut acc = vec![0i32; rows * out];
    acc.par_chunks_mut(out).enumerate().for_each(|(r, dst)| {
        let x_row = &xq[r * inp..(r + 1) * inp];
        for (c, &xv) in x_row.iter().enumerate() {
            if xv == 0 {
                continue;
            }
            let xv = i32::from(xv);
            for (d, &w) in dst.iter_mut().zip(&wt[c * out..(c + 1) * out]) {
                *d += xv * w;
            }
        }
    });
    acc
}

impl QuantizedLinear {
    pub fn out_features(&self) -> usize {
        self.q_weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.q_weight.shape()[1]
    }

    /// INT8 payload, f32 bias, and the f32 quantization parameters
    /// (per-output scales, per-input factors, activation scale, alpha).
    pub fn byte_size(&self) -> usize {
        self.q_weight.byte_size()
            + self.bias.byte_size()
            + 4 * (self.params.weight_scales.len() + self.params.eq_scales.len() + 2)
    }

    /// Divides `x` by the equalization factors, quantizes it with the
    /// activation scale, multiplies in i32 and rescales to f32 before adding
    /// the bias.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out, inp) = (self.out_features(), self.in_features());
        if x.last_dim() != inp {
            return Err(Error::Dimension(format!(
                "quantized linear expects {inp} input features, got {:?}",
                x.shape()
            )));
        }
        let xv = x.to_f32_vec();
        let eq = &self.params.eq_scales;
        let scaled: Vec<f32> = xv
            .chunks(inp)
            .flat_map(|row| row.iter().zip(eq).map(|(v, s)| v / s))
            .collect();
        let act_scale = match self.params.scaling {
            ActivationScaling::Static => self.params.act_scale,
            ActivationScaling::Dynamic => symmetric_scale(max_abs(&scaled)),
        };
        let xq: Vec<i8> = scaled.iter().map(|&v| quantize_value(v, act_scale)).collect();
        let w = self.q_weight.as_i8()?;
        let mut wt = vec![0i32; inp * out];
        for r in 0..out {
            for c in 0..inp {
                wt[c * out + r] = i32::from(w[r * inp + c]);
            }
        }
        let rows = x.rows();
        let acc = int_gemm_rows(&xq, &wt, rows, inp, out);
        let combined: Vec<f32> = self.params.weight_scales.iter().map(|s| s * act_scale).collect();
        let bias = self.bias.as_f32()?;
        let y: Vec<f32> = acc
            .chunks(out)
            .flat_map(|row| {
                row.iter()
                    .zip(&combined)
                    .zip(bias)
                    .map(|((&a, &s), &b)| a as f32 * s + b)
            })
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        Tensor::from_f32(shape, y)
    }

    /// Weights as the f32 values the integer path represents, `q * scale / s_c`.
    pub fn dequantized_weight(&self) -> Result<Tensor> {
        let (out, inp) = (self.out_features(), self.in_features());
        let q = self.q_weight.as_i8()?;
        let mut w = Vec::with_capacity(out * inp);
        for r in 0..out {
            let s = self.params.weight_scales[r];
            for c in 0..inp {
                w.push(f32::from(q[r * inp + c]) * s / self.params.eq_scales[c]);
            }
        }
        Tensor::from_f32(vec![out, inp], w)
    }
}

/// The equalized linear without any rounding: `(x / s) (W diag(s))^T + b`.
/// Equal to the plain linear up to f32 reassociation for any factors `s`.
pub fn equalized_linear_f32(layer: &Linear, eq_scales: &[f32], x: &Tensor) -> Result<Tensor> {
    let w = layer.weight.as_f32()?;
    let inp = layer.in_features();
    if eq_scales.len() != inp {
        return Err(Error::Dimension(format!(
            "{} equalization factors for {inp} input features",
            eq_scales.len()
        )));
    }
    let w_eq: Vec<f32> = w
        .chunks(inp)
        .flat_map(|row| row.iter().zip(eq_scales).map(|(v, s)| v * s))
        .collect();
    let x_eq: Vec<f32> = x
        .to_f32_vec()
        .chunks(inp)
        .flat_map(|row| row.iter().zip(eq_scales).map(|(v, s)| v / s).collect::<Vec<_>>())
        .collect();
    tensor::linear(
        &Tensor::from_f32(x.shape().to_vec(), x_eq)?,
        &Tensor::from_f32(layer.weight.shape().to_vec(), w_eq)?,
        Some(&layer.bias),
    )
}

/// Quantizes `layer` with fixed equalization factors and scaling mode.
pub fn quantize_with_scales(
    layer: &Linear,
    eq_scales: &[f32],
    alpha: f32,
    calib_inputs: &Tensor,
    scaling: ActivationScaling,
) -> Result<QuantizedLinear> {
    if layer.dtype() != Dtype::F32 {
        return Err(Error::PrecisionState(format!(
            "only f32 layers can be quantized, found {}",
            layer.dtype()
        )));
    }
    let inp = layer.in_features();
    let w = layer.weight.as_f32()?;
    let w_eq: Vec<f32> = w
        .chunks(inp)
        .flat_map(|row| row.iter().zip(eq_scales).map(|(v, s)| v * s))
        .collect();
    let (q_weight, weight_scales) =
        quantize_tensor_per_channel(&Tensor::from_f32(layer.weight.shape().to_vec(), w_eq)?)?;
    let x = calib_inputs.to_f32_vec();
    let x_max = x
        .chunks(inp)
        .flat_map(|row| row.iter().zip(eq_scales).map(|(v, s)| (v / s).abs()))
        .fold(0.0f32, f32::max);
    Ok(QuantizedLinear {
        q_weight,
        bias: layer.bias.clone(),
        params: QuantParams {
            weight_scales,
            eq_scales: eq_scales.to_vec(),
            act_scale: symmetric_scale(x_max),
            alpha,
            scaling,
        },
    })
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Debug, Clone)]
pub struct AwqOutcome {
    pub layer: QuantizedLinear,
    pub alpha: f64,
    /// Calibration MSE against the f32 layer, one entry per [`ALPHA_GRID`] point.
    pub mse_by_alpha: Vec<f64>,
}

impl AwqOutcome {
    pub fn selected_mse(&self) -> f64 {
        let i = ALPHA_GRID.iter().position(|&a| a == self.alpha).unwrap();
        self.mse_by_alpha[i]
    }
}

/// Grid search over [`ALPHA_GRID`] for the equalization exponent minimizing
/// calibration MSE against the f32 output. Ties go to the smaller alpha.
pub fn quantize_layer_awq(
    layer: &Linear,
    input_mean_abs: &[f64],
    calib_inputs: &Tensor,
    scaling: ActivationScaling,
) -> Result<AwqOutcome> {
    if calib_inputs.last_dim() != layer.in_features() {
        return Err(Error::Dimension(format!(
            "calibration inputs {:?} do not feed a layer with {} inputs",
            calib_inputs.shape(),
            layer.in_features()
        )));
    }
    if input_mean_abs.len() != layer.in_features() {
        return Err(Error::Dimension(format!(
            "{} input statistics for a layer with {} inputs",
            input_mean_abs.len(),
            layer.in_features()
        )));
    }
    let reference = layer.forward(calib_inputs)?;
    let reference = reference.as_f32()?;
    let mut best: Option<(f64, f64, QuantizedLinear)> = None;
    let mut mse_by_alpha = Vec::with_capacity(ALPHA_GRID.len());
    for &alpha in &ALPHA_GRID {
        let eq: Vec<f32> = eq_scales_from_means(input_mean_abs, alpha)
            .into_iter()
            .map(|s| s as f32)
            .collect();
        let q = quantize_with_scales(layer, &eq, alpha as f32, calib_inputs, scaling)?;
        let err = mse(q.forward(calib_inputs)?.as_f32()?, reference);
        mse_by_alpha.push(err);
        if best.as_ref().is_none_or(|(_, b, _)| err < *b) {
            best = Some((alpha, err, q));
        }
    }
    let (alpha, _, layer) = best.expect("grid is non-empty");
    Ok(AwqOutcome {
        layer,
        alpha,
        mse_by_alpha,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct QuantReport {
    /// Per quantized layer: selected alpha and calibration MSE at each grid point.
    pub layers: BTreeMap<String, LayerQuantReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerQuantReport {
    pub alpha: f64,
    pub mse_by_alpha: Vec<f64>,
}

/// Replaces every f32 linear whose name matches `targets` with an
/// activation-aware INT8 layer. Calibration inputs are captured from `model`
/// in a single pass before any layer is replaced.
pub fn quantize_model(
    model: &VitModel,
    stats: &ActivationStats,
    calib: &CalibrationSet,
    targets: &[LayerPattern],
    scaling: ActivationScaling,
) -> Result<(VitModel, QuantReport)> {
    let mut names = Vec::new();
    for (name, proj) in model.projections() {
        if !any_match(targets, &name) {
            continue;
        }
        match proj {
            Projection::Float(l) if l.dtype() == Dtype::F32 => names.push(name),
            Projection::Float(_) => {
                return Err(Error::PrecisionState(format!(
                    "`{name}` is f16; quantize the f32 model (quantization and fp16 conversion are separate branches)"
                )))
            }
            Projection::Quantized(_) => {
                return Err(Error::PrecisionState(format!("`{name}` is already quantized")))
            }
        }
    }
    let mut out = model.clone();
    let mut report = QuantReport::default();
    if names.is_empty() {
        return Ok((out, report));
    }
    let patterns: Vec<LayerPattern> = names.iter().map(|n| LayerPattern::new(n.as_str())).collect();
    let captured = LayerCapture::run(model, calib, &patterns)?;
    for (name, proj) in out.projections_mut() {
        if !names.contains(&name) {
            continue;
        }
        let Projection::Float(linear) = &*proj else {
            unreachable!("checked above")
        };
        let inputs = captured.input(&name)?;
        let means = &stats.layer(&name)?.input_mean_abs;
        let outcome = quantize_layer_awq(linear, means, &inputs, scaling)?;
        report.layers.insert(
            name.clone(),
            LayerQuantReport {
                alpha: outcome.alpha,
                mse_by_alpha: outcome.mse_by_alpha,
            },
        );
        *proj = Projection::Quantized(outcome.layer);
    }
    Ok((out, report))
}
