use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use vitopt::checkpoint::{load_checkpoint, save_checkpoint};
use vitopt::harness::{emit_report, evaluate, BenchReport, ReportFormat, Variant};
use vitopt::pattern::LayerPattern;
use vitopt::pipeline::{load_dataset, load_model, run_pipeline, PipelineConfig, SourceKind};
use vitopt::precision::{to_fp16, PrecisionPolicy};
use vitopt::profiler::{default_filter, dump_samples, profile, CalibrationSet};
use vitopt::pruner::{prune_step, prune_to_budget};
use vitopt::quantizer::{quantize_model, ActivationScaling};
use vitopt::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vitopt", version, about = "Profile, prune, convert and quantize Vision Transformers")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags named after the pipeline config keys; each overrides the config file.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Input checkpoint (replaces the preset).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    calib_samples: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    prune_percentile: Option<f64>,
    #[arg(long, global = true)]
    min_channels: Option<usize>,
    #[arg(long, global = true)]
    budget_mb: Option<f64>,
    #[arg(long, global = true)]
    reprofile: bool,
    #[arg(long, global = true, num_args = 1..)]
    fp16_policy: Option<Vec<String>>,
    #[arg(long, global = true, num_args = 1..)]
    quant_patterns: Option<Vec<String>>,
    #[arg(long, global = true)]
    activation_scaling: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, num_args = 1..)]
    variants: Option<Vec<String>>,
    /// `synthetic` or `cifar10`.
    #[arg(long, global = true)]
    data_source: Option<String>,
    #[arg(long, global = true)]
    data_path: Option<PathBuf>,
    #[arg(long, global = true)]
    data_samples: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Profile MLP activations and write the statistics as JSON.
    Profile {
        #[arg(long, default_value = "stats.json")]
        output: PathBuf,
        /// Layer patterns to observe (default: MLP linears).
        #[arg(long, num_args = 1..)]
        filter: Option<Vec<String>>,
    },
    /// Prune MLP channels (one step, or to `--budget-mb`) and write the model and plan.
    Prune {
        #[arg(long, default_value = "pruned.eflx")]
        output: PathBuf,
        #[arg(long, default_value = "plan.json")]
        plan: PathBuf,
    },
    /// Convert matched linears to FP16.
    Fp16 {
        #[arg(long, default_value = "fp16.eflx")]
        output: PathBuf,
    },
    /// Quantize matched linears to INT8 with activation-aware scaling.
    Quantize {
        #[arg(long, default_value = "int8.eflx")]
        output: PathBuf,
    },
    /// Evaluate a model and print its report entry.
    Eval {
        #[arg(long, default_value = "table")]
        format: String,
        /// Variant label for the report row.
        #[arg(long, default_value = "fp32")]
        label: String,
    },
    /// Run the full pipeline and write all artifacts.
    Pipeline {
        #[arg(long, default_value = "vitopt-out")]
        out_dir: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Write calibration samples as PPM images plus a label manifest.
    DumpSamples {
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value = "samples")]
        out_dir: PathBuf,
    },
}

fn patterns(v: &[String]) -> Vec<LayerPattern> {
    v.iter().map(|s| LayerPattern::new(s.as_str())).collect()
}

fn build_config(a: &CommonArgs) -> Result<PipelineConfig> {
    let mut c = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &a.model {
        c.model = v.clone();
    }
    if let Some(v) = &a.checkpoint {
        c.checkpoint = Some(v.clone());
    }
    if let Some(v) = a.calib_samples {
        c.calib_samples = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.prune_percentile {
        c.prune_percentile = v;
    }
    if let Some(v) = a.min_channels {
        c.min_channels = v;
    }
    if let Some(v) = a.budget_mb {
        c.budget_mb = Some(v);
    }
    if a.reprofile {
        c.reprofile = true;
    }
    if let Some(v) = &a.fp16_policy {
        c.fp16_policy = patterns(v);
    }
    if let Some(v) = &a.quant_patterns {
        c.quant_patterns = patterns(v);
    }
    if let Some(v) = &a.activation_scaling {
        c.activation_scaling = match v.as_str() {
            "static" => ActivationScaling::Static,
            "dynamic" => ActivationScaling::Dynamic,
            other => return Err(Error::Config(format!("unknown activation scaling `{other}`"))),
        };
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = &a.variants {
        c.variants = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    if let Some(v) = &a.data_source {
        c.data.source = match v.as_str() {
            "synthetic" => SourceKind::Synthetic,
            "cifar10" => SourceKind::Cifar10,
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        };
    }
    if let Some(v) = &a.data_path {
        c.data.path = Some(v.clone());
    }
    if let Some(v) = a.data_samples {
        c.data.samples = Some(v);
    }
    c.validate()?;
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn calibration(c: &PipelineConfig) -> Result<CalibrationSet> {
    let data = load_dataset(c)?;
    CalibrationSet::sample_from(&data, c.calib_samples, c.seed)
}

fn run(cli: Cli) -> Result<()> {
    let c = build_config(&cli.common)?;
    match cli.command {
        Command::Profile { output, filter } => {
            let model = load_model(&c)?;
            let calib = calibration(&c)?;
            let filter = filter.map(|f| patterns(&f)).unwrap_or_else(default_filter);
            let stats = profile(&model, &calib, &filter)?;
            write_text(&output, &stats.to_json())?;
            info!("wrote statistics for {} layers to {}", stats.layers.len(), output.display());
        }
        Command::Prune { output, plan } => {
            let model = load_model(&c)?;
            let calib = calibration(&c)?;
            let stats = profile(&model, &calib, &default_filter())?;
            let opts = c.prune_options();
            let (pruned, p) = match c.budget_bytes() {
                Some(budget) => {
                    let out = prune_to_budget(&model, &stats, budget, opts, c.reprofile.then_some(&calib))?;
                    let p = out.final_plan(opts.percentile);
                    (out.model, p)
                }
                None => prune_step(&model, &stats, opts.percentile, opts.min_channels)?,
            };
            save_checkpoint(&pruned, &output)?;
            write_text(&plan, &p.to_json())?;
            println!("MLP widths: {:?} after {} step(s)", pruned.mlp_sizes(), p.steps);
        }
        Command::Fp16 { output } => {
            let model = load_model(&c)?;
            let converted = to_fp16(&model, &PrecisionPolicy::new(c.fp16_policy.clone()))?;
            save_checkpoint(&converted, &output)?;
            println!("weight bytes: {} -> {}", model.weight_bytes(), converted.weight_bytes());
        }
        Command::Quantize { output } => {
            let model = load_model(&c)?;
            let calib = calibration(&c)?;
            let stats = profile(&model, &calib, &c.quant_patterns)?;
            let (q, report) = quantize_model(&model, &stats, &calib, &c.quant_patterns, c.activation_scaling)?;
            save_checkpoint(&q, &output)?;
            println!(
                "quantized {} layers; weight bytes: {} -> {}",
                report.layers.len(),
                model.weight_bytes(),
                q.weight_bytes()
            );
        }
        Command::Eval { format, label } => {
            let format: ReportFormat = format.parse()?;
            let variant: Variant = label.parse()?;
            let model = match &c.checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => load_model(&c)?,
            };
            let data = load_dataset(&c)?;
            let mut report = BenchReport::default();
            report.variants.insert(variant, evaluate(&model, &data, c.batch_size)?);
            print!("{}", emit_report(&report, format));
        }
        Command::Pipeline { out_dir, format } => {
            let format: ReportFormat = format.parse()?;
            let outcome = run_pipeline(&c, &out_dir)?;
            print!("{}", emit_report(&outcome.report, format));
        }
        Command::DumpSamples { k, out_dir } => {
            let calib = calibration(&c)?;
            let written = dump_samples(&calib, k, &out_dir, c.seed)?;
            println!("wrote {} samples to {}", written.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
