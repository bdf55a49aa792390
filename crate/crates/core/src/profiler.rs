//! Activation profiling over a calibration set.
//!
//! For every observed linear the profiler records the mean absolute value of
//! each output channel and of each input feature, averaged over all
//! calibration samples and all tokens. Sums are kept in f64 and accumulated
//! sample by sample, token by token, channel by channel, so the statistics are
//! a pure function of the model and the calibration images.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NORM_MEAN, NORM_STD};
use crate::error::{Error, Result};
use crate::model::{ForwardObserver, Projection, VitModel};
use crate::pattern::{any_match, LayerPattern};
use crate::rng::Rng;
use crate::tensor::{Dtype, Tensor};

pub const DEFAULT_CALIB_SAMPLES: usize = 32;

/// Images pushed through the model per forward call while profiling.
const PROFILE_CHUNK: usize = 32;

/// Layers observed when no filter is given: both MLP linears of every block.
pub fn default_filter() -> Vec<LayerPattern> {
    vec![
        LayerPattern::new("encoder.layer.*.intermediate.dense"),
        LayerPattern::new("encoder.layer.*.output.dense"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl CalibrationSet {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "calibration images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(CalibrationSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Calibration set of `n` samples drawn without replacement from
    /// `dataset`, selection seeded by `seed`.
    pub fn sample_from(dataset: &Dataset, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("calibration set needs at least one sample".into()));
        }
        if n > dataset.len() {
            return Err(Error::Input(format!(
                "requested {n} calibration samples from a dataset of {}",
                dataset.len()
            )));
        }
        let idx = Rng::new(seed).sample_indices(dataset.len(), n);
        let sub = dataset.select(&idx)?;
        CalibrationSet::new(sub.images, sub.labels)
    }

    /// Images `start..end` as their own tensor.
    pub(crate) fn chunk(&self, start: usize, end: usize) -> Result<Tensor> {
        slice_images(&self.images, start, end)
    }
}

pub(crate) fn slice_images(images: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let shape = images.shape();
    let per: usize = shape[1..].iter().product();
    let data = images.as_f32()?[start * per..end * per].to_vec();
    let mut s = shape.to_vec();
    s[0] = end - start;
    Tensor::from_f32(s, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Mean |activation| per output channel.
    pub channel_mean_abs: Vec<f64>,
    /// Mean |input| per input feature.
    pub input_mean_abs: Vec<f64>,
    /// Original channel index of each output position (MLP intermediate
    /// layers of a pruned model report their surviving channels).
    pub channel_ids: Vec<usize>,
    pub samples_seen: usize,
    pub tokens_seen: usize,
    /// Bytes of this layer's output at the calibration batch size.
    pub activation_bytes: u64,
}

impl LayerStats {
    /// Mean |activation| of the channel with original index `id`.
    pub fn mean_for_channel(&self, id: usize) -> Option<f64> {
        self.channel_ids
            .iter()
            .position(|&c| c == id)
            .map(|i| self.channel_mean_abs[i])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: BTreeMap<String, LayerStats>,
}

impl ActivationStats {
    pub fn layer(&self, name: &str) -> Result<&LayerStats> {
        self.layers.get(name).ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Sum of `activation_bytes` over every observed layer.
    pub fn total_activation_bytes(&self) -> u64 {
        self.layers.values().map(|l| l.activation_bytes).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("activation stats: {e}")))
    }
}

struct Accumulator {
    output_sums: Vec<f64>,
    input_sums: Vec<f64>,
    rows: usize,
    bytes_per_row: u64,
}

fn accumulate_abs(sums: &mut [f64], t: &Tensor) {
    let width = sums.len();
    let v = t.to_f32_vec();
    for row in v.chunks(width) {
        for (s, x) in sums.iter_mut().zip(row) {
            *s += x.abs() as f64;
        }
    }
}

struct StatsObserver<'a> {
    filter: &'a [LayerPattern],
    acc: BTreeMap<String, Accumulator>,
}

impl ForwardObserver for StatsObserver<'_> {
    fn wants(&self, layer: &str) -> bool {
        any_match(self.filter, layer)
    }

    fn observe(&mut self, layer: &str, input: &Tensor, output: &Tensor) {
        let entry = self.acc.entry(layer.to_string()).or_insert_with(|| Accumulator {
            output_sums: vec![0.0; output.last_dim()],
            input_sums: vec![0.0; input.last_dim()],
            rows: 0,
            bytes_per_row: (output.last_dim() * output.dtype().bytes_per_element()) as u64,
        });
        accumulate_abs(&mut entry.output_sums, output);
        accumulate_abs(&mut entry.input_sums, input);
        entry.rows += output.rows();
    }
}

fn ensure_f32_state(model: &VitModel) -> Result<()> {
    for (name, p) in model.projections() {
        if p.weight_dtype() != Dtype::F32 {
            return Err(Error::PrecisionState(format!(
                "profiling needs an f32 model; `{name}` holds {} weights",
                p.weight_dtype()
            )));
        }
    }
    Ok(())
}

fn matched_layers(model: &VitModel, filter: &[LayerPattern]) -> Result<Vec<String>> {
    let names: Vec<String> = model
        .projections()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| any_match(filter, n))
        .collect();
    if names.is_empty() {
        let pats: Vec<&str> = filter.iter().map(LayerPattern::as_str).collect();
        return Err(Error::Config(format!("layer filter {pats:?} matches no layer")));
    }
    Ok(names)
}

/// Runs the calibration set through `model` and collects per-channel mean
/// absolute activations for every linear matched by `filter`.
pub fn profile(model: &VitModel, calib: &CalibrationSet, filter: &[LayerPattern]) -> Result<ActivationStats> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    ensure_f32_state(model)?;
    matched_layers(model, filter)?;
    let mut obs = StatsObserver {
        filter,
        acc: BTreeMap::new(),
    };
    let n = calib.len();
    for start in (0..n).step_by(PROFILE_CHUNK) {
        let end = (start + PROFILE_CHUNK).min(n);
        model.forward(&calib.chunk(start, end)?, Some(&mut obs))?;
    }
    let channel_ids: BTreeMap<String, Vec<usize>> = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| (crate::model::intermediate_name(l), layer.mlp_channels.clone()))
        .collect();
    let layers = obs
        .acc
        .into_iter()
        .map(|(name, a)| {
            let rows = a.rows as f64;
            let ids = channel_ids
                .get(&name)
                .cloned()
                .unwrap_or_else(|| (0..a.output_sums.len()).collect());
            let stats = LayerStats {
                channel_mean_abs: a.output_sums.iter().map(|s| s / rows).collect(),
                input_mean_abs: a.input_sums.iter().map(|s| s / rows).collect(),
                channel_ids: ids,
                samples_seen: n,
                tokens_seen: a.rows,
                activation_bytes: a.rows as u64 * a.bytes_per_row,
            };
            (name, stats)
        })
        .collect();
    Ok(ActivationStats { layers })
}

/// Inputs captured per layer over the whole calibration set.
pub struct LayerCapture {
    inputs: BTreeMap<String, (Vec<f32>, usize)>,
}

struct CaptureObserver<'a> {
    filter: &'a [LayerPattern],
    inputs: BTreeMap<String, (Vec<f32>, usize)>,
}

impl ForwardObserver for CaptureObserver<'_> {
    fn wants(&self, layer: &str) -> bool {
        any_match(self.filter, layer)
    }

    fn observe(&mut self, layer: &str, input: &Tensor, _output: &Tensor) {
        let e = self
            .inputs
            .entry(layer.to_string())
            .or_insert_with(|| (Vec::new(), input.last_dim()));
        e.0.extend(input.to_f32_vec());
    }
}

impl LayerCapture {
    pub fn run(model: &VitModel, calib: &CalibrationSet, filter: &[LayerPattern]) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Input("calibration set is empty".into()));
        }
        let mut obs = CaptureObserver {
            filter,
            inputs: BTreeMap::new(),
        };
        let n = calib.len();
        for start in (0..n).step_by(PROFILE_CHUNK) {
            let end = (start + PROFILE_CHUNK).min(n);
            model.forward(&calib.chunk(start, end)?, Some(&mut obs))?;
        }
        Ok(LayerCapture { inputs: obs.inputs })
    }

    /// Calibration inputs of `layer` as `[rows, in_features]`.
    pub fn input(&self, layer: &str) -> Result<Tensor> {
        let (data, width) = self.inputs.get(layer).ok_or_else(|| Error::Lookup(layer.to_string()))?;
        Tensor::from_f32(vec![data.len() / width, *width], data.clone())
    }
}

/// Maps a standardized value back to its 8-bit pixel.
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v * NORM_STD + NORM_MEAN) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `k` seeded-random calibration images as binary PPM files plus a
/// `manifest.csv` listing `index,label`. Returns the selected indices.
pub fn dump_samples(calib: &CalibrationSet, k: usize, out_dir: &Path, seed: u64) -> Result<Vec<usize>> {
    if k > calib.len() {
        return Err(Error::Input(format!(
            "cannot dump {k} samples from a calibration set of {}",
            calib.len()
        )));
    }
    let shape = calib.images.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if c != 3 {
        return Err(Error::Input(format!("PPM dump needs 3-channel images, got {c}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let picked = Rng::new(seed).sample_indices(calib.len(), k);
    let pixels = calib.images.as_f32()?;
    let mut manifest = String::from("index,label\n");
    for &i in &picked {
        let img = &pixels[i * c * h * w..(i + 1) * c * h * w];
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    bytes.push(denormalize_pixel(img[ch * h * w + y * w + x]));
                }
            }
        }
        let path = out_dir.join(format!("sample_{i:05}.ppm"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{i},{}\n", calib.labels[i]));
    }
    let path = out_dir.join("manifest.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(picked)
}

/// True when every linear of `model` is an f32 float layer.
pub fn is_f32_model(model: &VitModel) -> bool {
    model
        .projections()
        .iter()
        .all(|(_, p)| matches!(p, Projection::Float(l) if l.dtype() == Dtype::F32))
}
