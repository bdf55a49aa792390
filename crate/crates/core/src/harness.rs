//! Variant evaluation and benchmark reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::VitModel;
use crate::profiler::slice_images;
use crate::pruner::estimate_peak;
use crate::tensor::Tensor;

pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// Evaluated model variants, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fp32,
    PrunedFp32,
    PrunedFp16,
    PrunedInt8,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fp32, Variant::PrunedFp32, Variant::PrunedFp16, Variant::PrunedInt8];

    pub const fn name(self) -> &'static str {
        match self {
            Variant::Fp32 => "fp32",
            Variant::PrunedFp32 => "pruned_fp32",
            Variant::PrunedFp16 => "pruned_fp16",
            Variant::PrunedInt8 => "pruned_int8",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`; expected one of fp32, pruned_fp32, pruned_fp16, pruned_int8")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn fixed6<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    let raw = RawValue::from_string(format!("{v:.6}")).map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

fn from_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(D::Error::custom("timing must be finite"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub accuracy: f64,
    #[serde(serialize_with = "fixed6", deserialize_with = "from_number")]
    pub avg_batch_latency_s: f64,
    #[serde(serialize_with = "fixed6", deserialize_with = "from_number")]
    pub total_inference_s: f64,
    pub analytic_peak_mb: f64,
    pub measured_peak_mb: Option<f64>,
    pub flops: u64,
    pub weight_bytes: u64,
}

/// Report fields that hold wall-clock measurements.
pub const TIMING_FIELDS: [&str; 2] = ["avg_batch_latency_s", "total_inference_s"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variants: BTreeMap<Variant, VariantReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Top-1 class of every row of a `[N, classes]` logit tensor.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let v = logits.as_f32()?;
    Ok(v.chunks(logits.last_dim()).map(argmax).collect())
}

/// Runs `model` over `dataset` in batches and measures accuracy and latency.
///
/// Every batch is timed with a monotonic clock. The first batch is treated
/// as warmup: it counts toward `total_inference_s` but not toward
/// `avg_batch_latency_s`, which averages the remaining batches (and equals
/// the single batch time when there is only one).
pub fn evaluate(model: &VitModel, dataset: &Dataset, batch_size: usize) -> Result<VariantReport> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    let n = dataset.len();
    let mut correct = 0usize;
    let mut times = Vec::with_capacity(n.div_ceil(batch_size));
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let images = slice_images(&dataset.images, start, end)?;
        let t0 = Instant::now();
        let logits = model.forward(&images, None)?;
        times.push(t0.elapsed().as_secs_f64());
        correct += predictions(&logits)?
            .iter()
            .zip(&dataset.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    let total: f64 = times.iter().sum();
    let avg = if times.len() > 1 {
        times[1..].iter().sum::<f64>() / (times.len() - 1) as f64
    } else {
        total
    };
    let memory = estimate_peak(model, batch_size);
    Ok(VariantReport {
        accuracy: correct as f64 / n as f64,
        avg_batch_latency_s: avg,
        total_inference_s: total,
        analytic_peak_mb: memory.peak_estimate() as f64 / BYTES_PER_MB,
        measured_peak_mb: None,
        flops: model.count_flops(batch_size),
        weight_bytes: model.weight_bytes(),
    })
}

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => table(report),
    }
}

fn table(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>14} {:>12} {:>12} {:>16} {:>13}",
        "variant", "accuracy", "avg_latency_s", "total_s", "peak_mb", "flops", "weight_bytes"
    );
    for (v, r) in &report.variants {
        let _ = writeln!(
            out,
            "{:<12} {:>9.4} {:>14.6} {:>12.6} {:>12.3} {:>16} {:>13}",
            v.name(),
            r.accuracy,
            r.avg_batch_latency_s,
            r.total_inference_s,
            r.analytic_peak_mb,
            r.flops,
            r.weight_bytes
        );
    }
    out
}

/// Parses report JSON and drops the timing fields, leaving only the values
/// that (config, seed, data) determine.
pub fn strip_timing(json: &str) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::Format(format!("report JSON: {e}")))?;
    if let Some(variants) = v.get_mut("variants").and_then(|x| x.as_object_mut()) {
        for entry in variants.values_mut() {
            if let Some(obj) = entry.as_object_mut() {
                for f in TIMING_FIELDS {
                    obj.remove(f);
                }
            }
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, DataSource};
    use crate::model::{Linear, ModelConfig, Projection};

    fn rigged_class_zero() -> VitModel {
        let mut m = VitModel::init(ModelConfig::vit_toy(), 0).unwrap();
        let mut bias = vec![0.0; 10];
        bias[0] = 1.0;
        m.head = Projection::Float(
            Linear::new(
                Tensor::zeros(vec![10, 64]).unwrap(),
                Tensor::from_f32(vec![10], bias).unwrap(),
            )
            .unwrap(),
        );
        m
    }

    #[test]
    fn rigged_model_accuracy() {
        let m = rigged_class_zero();
        let mut d = synthetic_dataset(20, 0).unwrap();
        let r = evaluate(&m, &d, 8).unwrap();
        assert_eq!(r.accuracy, 0.1);
        d.labels = vec![0; 20];
        let r = evaluate(&m, &d, 8).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn batch_size_zero_is_config_error() {
        let m = rigged_class_zero();
        let d = synthetic_dataset(2, 0).unwrap();
        assert!(matches!(evaluate(&m, &d, 0), Err(Error::Config(_))));
    }

    #[test]
    fn latency_invariant_holds() {
        let m = VitModel::init(ModelConfig::vit_toy(), 1).unwrap();
        let d = synthetic_dataset(10, 1).unwrap();
        let r = evaluate(&m, &d, 3).unwrap();
        assert!(r.total_inference_s >= r.avg_batch_latency_s * 3.0);
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(d.source, DataSource::Synthetic { seed: 1 });
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn empty_report_json() {
        let s = emit_report(&BenchReport::default(), ReportFormat::Json);
        assert_eq!(s, "{\n  \"variants\": {}\n}\n");
    }

    fn fixed_report() -> BenchReport {
        let mut r = BenchReport::default();
        r.variants.insert(
            Variant::PrunedInt8,
            VariantReport {
                accuracy: 0.125,
                avg_batch_latency_s: 0.0123456789,
                total_inference_s: 1.5,
                analytic_peak_mb: 2.25,
                measured_peak_mb: None,
                flops: 123456,
                weight_bytes: 4096,
            },
        );
        r.variants.insert(
            Variant::Fp32,
            VariantReport {
                accuracy: 0.5,
                avg_batch_latency_s: 0.2,
                total_inference_s: 3.0,
                analytic_peak_mb: 8.0,
                measured_peak_mb: Some(9.5),
                flops: 999,
                weight_bytes: 16384,
            },
        );
        r
    }

    #[test]
    fn golden_json() {
        let expected = include_str!("../tests/golden/report.json");
        assert_eq!(emit_report(&fixed_report(), ReportFormat::Json), expected);
        let back: BenchReport = serde_json::from_str(expected).unwrap();
        assert_eq!(back.variants.len(), 2);
    }

    #[test]
    fn golden_table() {
        let expected = include_str!("../tests/golden/report.txt");
        let t = emit_report(&fixed_report(), ReportFormat::Table);
        assert_eq!(t, expected);
        assert_eq!(t.lines().count() - 1, 2);
    }

    #[test]
    fn timing_is_stripped() {
        let s = emit_report(&fixed_report(), ReportFormat::Json);
        let v = strip_timing(&s).unwrap();
        assert!(v["variants"]["fp32"].get("total_inference_s").is_none());
        assert_eq!(v["variants"]["fp32"]["flops"], 999);
    }
}
