//! End-to-end pipeline: profile, prune, then the FP16 and INT8 branches, then
//! evaluation of every requested variant.
//!
//! Configuration is a TOML document; every key is optional:
//!
//! ```toml
//! model = "vit-toy"          # preset name, ignored when `checkpoint` is set
//! checkpoint = "model.eflx"
//! calib_samples = 32
//! batch_size = 32
//! prune_percentile = 0.10
//! min_channels = 8
//! budget_mb = 5.0            # absent: a single pruning step
//! reprofile = false          # re-profile between pruning steps
//! fp16_policy = ["**"]
//! quant_patterns = ["**"]
//! activation_scaling = "static"
//! seed = 0
//! variants = ["fp32", "pruned_fp32", "pruned_fp16", "pruned_int8"]
//!
//! [data]
//! source = "synthetic"       # or "cifar10" with `path`
//! path = "cifar-10-batches-bin"
//! samples = 256              # evaluation samples; cifar10 default is the whole file
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_cifar10, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::harness::{emit_report, evaluate, BenchReport, ReportFormat, Variant};
use crate::model::{ModelConfig, VitModel};
use crate::pattern::LayerPattern;
use crate::precision::{to_fp16, PrecisionPolicy};
use crate::profiler::{default_filter, profile, CalibrationSet, DEFAULT_CALIB_SAMPLES};
use crate::pruner::{prune_step, prune_to_budget, PruneOptions, PruningPlan, DEFAULT_MIN_CHANNELS, DEFAULT_PERCENTILE};
use crate::quantizer::{quantize_model, ActivationScaling, QuantReport};

pub const DEFAULT_SYNTHETIC_SAMPLES: usize = 256;
pub const REPORT_FILE: &str = "report.json";
pub const PLAN_FILE: &str = "plan.json";
pub const QUANT_REPORT_FILE: &str = "quant_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    pub path: Option<PathBuf>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: String,
    pub checkpoint: Option<PathBuf>,
    pub calib_samples: usize,
    pub batch_size: usize,
    pub prune_percentile: f64,
    pub min_channels: usize,
    pub budget_mb: Option<f64>,
    pub reprofile: bool,
    pub fp16_policy: Vec<LayerPattern>,
    pub quant_patterns: Vec<LayerPattern>,
    pub activation_scaling: ActivationScaling,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub data: DataConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: "vit-toy".into(),
            checkpoint: None,
            calib_samples: DEFAULT_CALIB_SAMPLES,
            batch_size: 32,
            prune_percentile: DEFAULT_PERCENTILE,
            min_channels: DEFAULT_MIN_CHANNELS,
            budget_mb: None,
            reprofile: false,
            fp16_policy: PrecisionPolicy::default().convert,
            quant_patterns: vec![LayerPattern::new("**")],
            activation_scaling: ActivationScaling::Static,
            seed: 0,
            variants: Variant::ALL.to_vec(),
            data: DataConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.calib_samples < 1 {
            return Err(Error::Config("calib_samples must be at least 1".into()));
        }
        if !(self.prune_percentile > 0.0 && self.prune_percentile < 1.0) {
            return Err(Error::Config(format!(
                "prune_percentile {} outside (0, 1)",
                self.prune_percentile
            )));
        }
        if let Some(b) = self.budget_mb {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::Config(format!("budget_mb {b} must be a non-negative number")));
            }
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        if self.data.source == SourceKind::Cifar10 && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"cifar10\" needs data.path".into()));
        }
        if self.data.samples == Some(0) {
            return Err(Error::Config("data.samples must be at least 1".into()));
        }
        if self.checkpoint.is_none() {
            ModelConfig::preset(&self.model)?;
        }
        Ok(())
    }

    pub fn prune_options(&self) -> PruneOptions {
        PruneOptions {
            percentile: self.prune_percentile,
            min_channels: self.min_channels,
            batch: self.batch_size,
        }
    }

    pub fn budget_bytes(&self) -> Option<u64> {
        self.budget_mb.map(|mb| (mb * crate::harness::BYTES_PER_MB).floor() as u64)
    }

    fn wants(&self, v: Variant) -> bool {
        self.variants.contains(&v)
    }
}

pub fn load_model(config: &PipelineConfig) -> Result<VitModel> {
    match &config.checkpoint {
        Some(path) => load_checkpoint(path),
        None => VitModel::init(ModelConfig::preset(&config.model)?, config.seed),
    }
}

pub fn load_dataset(config: &PipelineConfig) -> Result<Dataset> {
    match config.data.source {
        SourceKind::Synthetic => synthetic_dataset(config.data.samples.unwrap_or(DEFAULT_SYNTHETIC_SAMPLES), config.seed),
        SourceKind::Cifar10 => {
            let path = config.data.path.as_deref().expect("validated");
            let d = load_cifar10(path)?;
            match config.data.samples {
                Some(n) => d.take(n),
                None => Ok(d),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: BenchReport,
    pub plan: Option<PruningPlan>,
    pub quant_report: Option<QuantReport>,
    /// Models of every requested variant, in report order.
    pub models: Vec<(Variant, VitModel)>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Builds every requested variant and evaluates it.
///
/// Pruning runs a single step when `budget_mb` is absent. The INT8 branch
/// profiles the pruned model again so that its equalization statistics
/// describe the layers actually being quantized. Nothing is written to disk.
pub fn build_variants(config: &PipelineConfig) -> Result<PipelineOutcome> {
    stage("config", config.validate())?;
    let base = stage("load", load_model(config))?;
    let dataset = stage("data", load_dataset(config))?;
    let needs_pruning = config.variants.iter().any(|&v| v != Variant::Fp32);

    let mut models = Vec::new();
    let mut plan = None;
    let mut quant_report = None;
    if config.wants(Variant::Fp32) {
        models.push((Variant::Fp32, base.clone()));
    }
    if needs_pruning {
        let calib = stage(
            "profile",
            CalibrationSet::sample_from(&dataset, config.calib_samples, config.seed),
        )?;
        let stats = stage("profile", profile(&base, &calib, &default_filter()))?;
        let opts = config.prune_options();
        let (pruned, p) = match config.budget_bytes() {
            Some(budget) => {
                let reprofile = config.reprofile.then_some(&calib);
                let out = stage("prune", prune_to_budget(&base, &stats, budget, opts, reprofile))?;
                let p = out.final_plan(opts.percentile);
                (out.model, p)
            }
            None => stage("prune", prune_step(&base, &stats, opts.percentile, opts.min_channels))?,
        };
        info!("pruned MLP widths: {:?}", pruned.mlp_sizes());
        plan = Some(p);
        if config.wants(Variant::PrunedFp32) {
            models.push((Variant::PrunedFp32, pruned.clone()));
        }
        if config.wants(Variant::PrunedFp16) {
            let policy = PrecisionPolicy::new(config.fp16_policy.clone());
            models.push((Variant::PrunedFp16, stage("fp16", to_fp16(&pruned, &policy))?));
        }
        if config.wants(Variant::PrunedInt8) {
            let qstats = stage("quantize", profile(&pruned, &calib, &config.quant_patterns))?;
            let (q, r) = stage(
                "quantize",
                quantize_model(&pruned, &qstats, &calib, &config.quant_patterns, config.activation_scaling),
            )?;
            models.push((Variant::PrunedInt8, q));
            quant_report = Some(r);
        }
    }

    let mut report = BenchReport::default();
    for (variant, model) in &models {
        info!("evaluating {variant}");
        let entry = stage("evaluate", evaluate(model, &dataset, config.batch_size))?;
        report.variants.insert(*variant, entry);
    }
    Ok(PipelineOutcome {
        report,
        plan,
        quant_report,
        models,
    })
}

/// Runs [`build_variants`] and writes `report.json`, `plan.json` (when
/// pruning ran), `quant_report.json` (when quantization ran) and one
/// `<variant>.eflx` checkpoint per variant into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    let outcome = build_variants(config)?;
    stage("write", fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e)))?;
    stage(
        "write",
        write(out_dir.join(REPORT_FILE), &emit_report(&outcome.report, ReportFormat::Json)),
    )?;
    if let Some(p) = &outcome.plan {
        stage("write", write(out_dir.join(PLAN_FILE), &p.to_json()))?;
    }
    if let Some(q) = &outcome.quant_report {
        let text = serde_json::to_string_pretty(q).expect("quant report serializes");
        stage("write", write(out_dir.join(QUANT_REPORT_FILE), &text))?;
    }
    for (variant, model) in &outcome.models {
        let path = out_dir.join(format!("{variant}.eflx"));
        stage("write", save_checkpoint(model, &path))?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(c.calib_samples, 32);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.prune_percentile, 0.10);
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn parses_partial_config() {
        let c = PipelineConfig::from_toml(
            "seed = 4\nvariants = [\"fp32\", \"pruned_int8\"]\nbudget_mb = 3.5\n[data]\nsamples = 16\n",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.variants, vec![Variant::Fp32, Variant::PrunedInt8]);
        assert_eq!(c.budget_bytes(), Some(3_670_016));
        assert_eq!(c.data.samples, Some(16));
    }

    #[test]
    fn rejects_bad_config() {
        for text in [
            "prune_percentile = 1.0",
            "batch_size = 0",
            "model = \"vit-giant\"",
            "variants = []",
            "unknown_key = 1",
            "variants = [\"int4\"]",
            "[data]\nsource = \"cifar10\"",
        ] {
            let err = PipelineConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn fp32_only_has_no_pruning_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let c = PipelineConfig {
            variants: vec![Variant::Fp32],
            data: DataConfig {
                samples: Some(8),
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_pipeline(&c, dir.path()).unwrap();
        assert_eq!(out.report.variants.len(), 1);
        assert!(out.plan.is_none());
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("fp32.eflx").exists());
        assert!(!dir.path().join("plan.json").exists());
    }

    #[test]
    fn stage_errors_are_annotated() {
        let c = PipelineConfig {
            budget_mb: Some(0.0),
            calib_samples: 4,
            variants: vec![Variant::PrunedFp32],
            data: DataConfig {
                samples: Some(4),
                ..Default::default()
            },
            ..Default::default()
        };
        let err = build_variants(&c).unwrap_err();
        assert!(err.to_string().contains("prune"), "{err}");
        assert!(matches!(err.root(), Error::BudgetInfeasible { .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
