//! Acceptance criteria 1 to 12. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{reference_logits, Accounting};
use vitopt::checkpoint::{from_bytes, to_bytes};
use vitopt::data::{parse_cifar10, synthetic_dataset, CIFAR_RECORD};
use vitopt::harness::{strip_timing, Variant};
use vitopt::model::{intermediate_name, mlp_flops, ModelConfig, Projection, VitModel};
use vitopt::pattern::LayerPattern;
use vitopt::pipeline::{build_variants, run_pipeline, DataConfig, PipelineConfig, PipelineOutcome};
use vitopt::precision::{to_fp16, PrecisionPolicy};
use vitopt::profiler::{default_filter, profile, CalibrationSet, LayerCapture};
use vitopt::pruner::{estimate_peak, prune_step, prune_to_budget, PruneOptions};
use vitopt::quantizer::{
    eq_scales_from_means, quantize_model, quantize_tensor_per_channel, quantize_with_scales, ActivationScaling,
    ALPHA_GRID,
};
use vitopt::rng::Rng;
use vitopt::tensor::{Dtype, Tensor};
use vitopt::Error;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, Duration, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const TOY_EVAL_SAMPLES: usize = 32;

fn default_toy_config() -> PipelineConfig {
    PipelineConfig {
        data: DataConfig {
            samples: Some(TOY_EVAL_SAMPLES),
            ..Default::default()
        },
        ..Default::default()
    }
}

fn default_pipeline() -> &'static PipelineOutcome {
    static OUT: OnceLock<PipelineOutcome> = OnceLock::new();
    OUT.get_or_init(|| build_variants(&default_toy_config()).expect("default pipeline runs"))
}

fn c1_param_anchor() -> Check {
    let c = ModelConfig::vit_huge();
    let closed = c.param_count();
    // patch embed + cls + pos + L * (4 attention linears + 2 MLP linears + 2 norms) + final norm + head
    let (h, m, l, t, pd, k) = (1280u64, 5120u64, 32u64, 257u64, 588u64, 1000u64);
    let oracle = (pd * h + h) + h + t * h + l * (4 * (h * h + h) + (h * m + m) + (m * h + h) + 4 * h) + 2 * h + (h * k + k);
    ensure!(closed == oracle, "closed form {closed} != oracle {oracle}");
    ensure!((625_000_000..=639_000_000).contains(&closed), "{closed} outside [625M, 639M]");
    Ok(format!("count_params(vit-huge) = {closed}"))
}

fn c2_memory_ratio() -> Check {
    let out = default_pipeline();
    let fp32 = &out.report.variants[&Variant::Fp32];
    let int8 = &out.report.variants[&Variant::PrunedInt8];
    let acct = Accounting {
        config: ModelConfig::vit_toy(),
    };
    let full = [256; 4];
    let pruned = [231; 4];
    ensure!(
        fp32.weight_bytes == acct.f32_weight_bytes(&full),
        "fp32 weight bytes {} != oracle {}",
        fp32.weight_bytes,
        acct.f32_weight_bytes(&full)
    );
    ensure!(
        int8.weight_bytes == acct.int8_weight_bytes(&pruned),
        "int8 weight bytes {} != oracle {}",
        int8.weight_bytes,
        acct.int8_weight_bytes(&pruned)
    );
    let weight_ratio = int8.weight_bytes as f64 / fp32.weight_bytes as f64;

    let batch = 32;
    let peak_fp32 = acct.f32_weight_bytes(&full) + acct.peak_activation_bytes(&full, batch, 4);
    let peak_int8 = acct.int8_weight_bytes(&pruned) + acct.peak_activation_bytes(&pruned, batch, 4);
    let mb = |b: u64| b as f64 / (1024.0 * 1024.0);
    ensure!(
        (fp32.analytic_peak_mb - mb(peak_fp32)).abs() < 1e-12 && (int8.analytic_peak_mb - mb(peak_int8)).abs() < 1e-12,
        "analytic peaks {} / {} MB disagree with oracle {} / {} MB",
        fp32.analytic_peak_mb,
        int8.analytic_peak_mb,
        mb(peak_fp32),
        mb(peak_int8)
    );
    let peak_ratio = int8.analytic_peak_mb / fp32.analytic_peak_mb;
    // Residual stream plus f32 attention scores stay live in every variant.
    let fixed = acct.peak_activation_bytes(&[0], batch, 0);
    let floor_ratio = fixed as f64 / peak_fp32 as f64;
    let detail = format!(
        "weight ratio {weight_ratio:.4} (<= 0.30), analytic peak ratio {peak_ratio:.4} (<= 0.35); \
         unprunable residual+scores alone are {floor_ratio:.4} of the fp32 peak"
    );
    ensure!(weight_ratio <= 0.30 && peak_ratio <= 0.35, "{detail}");
    Ok(detail)
}

fn c3_fp16_halving() -> Check {
    let m = ok(VitModel::init(ModelConfig::vit_toy(), 0))?;
    let h = ok(to_fp16(&m, &PrecisionPolicy::default()))?;
    let mut before = 0usize;
    let mut after = 0usize;
    for ((name, a), (_, b)) in m.projections().into_iter().zip(h.projections()) {
        ensure!(b.weight_dtype() == Dtype::F16, "{name} not converted");
        ensure!(2 * b.byte_size() == a.byte_size(), "{name}: {} -> {}", a.byte_size(), b.byte_size());
        before += a.byte_size();
        after += b.byte_size();
    }
    let rest_before = m.weight_bytes() - before as u64;
    let rest_after = h.weight_bytes() - after as u64;
    ensure!(rest_before == rest_after, "non-linear bytes changed {rest_before} -> {rest_after}");
    Ok(format!("linear bytes {before} -> {after}; remaining f32 bytes {rest_after}"))
}

fn c4_pruning_exactness() -> Check {
    let data = ok(synthetic_dataset(32, 99))?;
    let calib = ok(CalibrationSet::new(data.images.clone(), data.labels.clone()))?;
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut m = ok(VitModel::init(ModelConfig::vit_toy(), seed))?;
        let mut rng = Rng::new(1000 + seed);
        let k = (0.10f64 * 256.0).floor() as usize;
        let mut dead = Vec::new();
        for layer in &mut m.layers {
            let set: BTreeSet<usize> = rng.sample_indices(256, k).into_iter().collect();
            let Projection::Float(lin) = &mut layer.intermediate else { unreachable!() };
            let h = lin.in_features();
            let w = ok(lin.weight.as_f32_mut())?;
            for &ch in &set {
                w[ch * h..(ch + 1) * h].fill(0.0);
            }
            let b = ok(lin.bias.as_f32_mut())?;
            for &ch in &set {
                b[ch] = 0.0;
            }
            dead.push(set);
        }
        let stats = ok(profile(&m, &calib, &default_filter()))?;
        let (pruned, plan) = ok(prune_step(&m, &stats, 0.10, 8))?;
        for (l, set) in dead.iter().enumerate() {
            let keep: BTreeSet<usize> = plan.layers[&intermediate_name(l)].keep.iter().copied().collect();
            ensure!(keep.is_disjoint(set) && keep.len() == 256 - k, "seed {seed} layer {l}: dead channels not pruned");
        }
        let a = ok(m.forward(&calib.images, None))?.into_f32_vec();
        let b = ok(pruned.forward(&calib.images, None))?.into_f32_vec();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    ensure!(worst <= 1e-6, "max logit difference {worst:e} > 1e-6");
    Ok(format!("50 models, max |logit diff| = {worst:e}"))
}

fn c5_prune_arithmetic() -> Check {
    let config = ModelConfig {
        num_layers: 1,
        hidden_size: 16,
        mlp_size: 5120,
        num_heads: 2,
        image_size: 8,
        patch_size: 4,
        num_channels: 3,
        num_classes: 10,
    };
    let m = ok(VitModel::init(config, 0))?;
    let data = ok(synthetic_dataset(2, 0))?;
    let images: Vec<f32> = data.images.to_f32_vec().chunks(3 * 32 * 32).flat_map(|img| {
        // top-left 8x8 crop of every channel
        (0..3).flat_map(move |c| (0..8).flat_map(move |y| (0..8).map(move |x| img[c * 1024 + y * 32 + x])))
    }).collect();
    let calib = ok(CalibrationSet::new(ok(Tensor::from_f32(vec![2, 3, 8, 8], images))?, data.labels))?;
    let stats = ok(profile(&m, &calib, &default_filter()))?;
    let (pruned, plan) = ok(prune_step(&m, &stats, 0.10, 8))?;
    let kept = pruned.layers[0].mlp_size();
    let removed = 5120 - kept;
    ensure!(removed == 512 && kept == 4608, "removed {removed}, kept {kept}");
    ensure!(plan.layers[&intermediate_name(0)].keep.len() == 4608, "plan keep list length");
    Ok(format!("C=5120, p=0.10: {removed} pruned, {kept} kept"))
}

fn c6_quant_roundtrip() -> Check {
    let mut rng = Rng::new(6);
    let mut violations = 0usize;
    let mut elements = 0usize;
    for i in 0..1000 {
        let rows = 1 + rng.below(16) as usize;
        let cols = 1 + rng.below(64) as usize;
        let magnitude = 10f64.powi(rng.below(9) as i32 - 4);
        let w: Vec<f32> = (0..rows * cols)
            .map(|_| ((rng.uniform() * 2.0 - 1.0) * magnitude) as f32)
            .collect();
        let t = ok(Tensor::from_f32(vec![rows, cols], w.clone()))?;
        let (q, scales) = ok(quantize_tensor_per_channel(&t))?;
        let q = ok(q.as_i8())?;
        for (r, &scale) in scales.iter().enumerate().take(rows) {
            let s = f64::from(scale);
            for c in 0..cols {
                let idx = r * cols + c;
                let err = (f64::from(w[idx]) - f64::from(q[idx]) * s).abs();
                elements += 1;
                if err > s / 2.0 {
                    violations += 1;
                    if violations == 1 {
                        eprintln!("matrix {i} element ({r},{c}): |w - q*s| = {err:e} > {:e}", s / 2.0);
                    }
                }
            }
        }
    }
    ensure!(violations == 0, "{violations} violations over {elements} elements");
    Ok(format!("1000 matrices, {elements} elements, 0 violations"))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / a.len() as f64
}

fn c7_awq_dominance() -> Check {
    let out = default_pipeline();
    let qr = out.quant_report.as_ref().ok_or("pipeline produced no quantization report")?;
    ensure!(qr.layers.len() == 26, "expected 26 quantized layers, found {}", qr.layers.len());
    for (name, r) in &qr.layers {
        let i = ALPHA_GRID.iter().position(|&a| a == r.alpha).ok_or("alpha off grid")?;
        ensure!(r.mse_by_alpha[i] <= r.mse_by_alpha[0], "{name}: alpha {} mse {} > alpha-0 mse {}", r.alpha, r.mse_by_alpha[i], r.mse_by_alpha[0]);
        let min = r.mse_by_alpha.iter().cloned().fold(f64::INFINITY, f64::min);
        ensure!(r.mse_by_alpha[i] == min, "{name}: selected alpha is not the grid minimum");
    }

    // Recompute two layers' errors outside the grid search.
    let config = default_toy_config();
    let data = ok(synthetic_dataset(TOY_EVAL_SAMPLES, config.seed))?;
    let calib = ok(CalibrationSet::sample_from(&data, config.calib_samples, config.seed))?;
    let pruned = &out.models.iter().find(|(v, _)| *v == Variant::PrunedFp32).ok_or("no pruned model")?.1;
    let all = [LayerPattern::new("**")];
    let stats = ok(profile(pruned, &calib, &all))?;
    let capture = ok(LayerCapture::run(pruned, &calib, &all))?;
    let mut checked = 0;
    for name in ["encoder.layer.0.intermediate.dense", "encoder.layer.3.output.dense"] {
        let layer = ok(pruned.projection(name))?.as_float().ok_or("not float")?.clone();
        let x = ok(capture.input(name))?;
        let reference = ok(layer.forward(&x))?.into_f32_vec();
        let err_at = |alpha: f64| -> Result<f64, String> {
            let eq: Vec<f32> = eq_scales_from_means(&stats.layers[name].input_mean_abs, alpha).iter().map(|&s| s as f32).collect();
            let q = ok(quantize_with_scales(&layer, &eq, alpha as f32, &x, ActivationScaling::Static))?;
            Ok(mse(&ok(q.forward(&x))?.into_f32_vec(), &reference))
        };
        let r = &qr.layers[name];
        let (e0, es) = (err_at(0.0)?, err_at(r.alpha)?);
        ensure!(es <= e0, "{name}: recomputed mse {es} at alpha {} > {e0} at alpha 0", r.alpha);
        ensure!(e0 == r.mse_by_alpha[0], "{name}: recomputed alpha-0 mse {e0} != reported {}", r.mse_by_alpha[0]);
        checked += 1;
    }
    let nonzero = qr.layers.values().filter(|r| r.alpha > 0.0).count();
    Ok(format!("{} layers dominate alpha=0 ({nonzero} chose alpha > 0); {checked} recomputed independently", qr.layers.len()))
}

fn c8_forward_oracle() -> Check {
    let m = ok(VitModel::init(ModelConfig::vit_toy(), 8))?;
    let data = ok(synthetic_dataset(32, 8))?;
    let got = ok(m.forward(&data.images, None))?.into_f32_vec();
    let want = reference_logits(&m, &data.images.to_f32_vec(), 32);
    let mut worst = 0.0f64;
    for (g, w) in got.chunks(10).zip(&want) {
        for (a, b) in g.iter().zip(w) {
            worst = worst.max((f64::from(*a) - b).abs());
        }
    }
    ensure!(worst < 1e-4, "max |diff| {worst:e} >= 1e-4");
    Ok(format!("32 samples, max |logit diff| vs f64 reference = {worst:e}"))
}

/// Step count predicted from widths alone, or `None` when the loop stalls.
fn simulate_budget(acct: &Accounting, budget: u64, p: f64, min: usize, batch: usize) -> Option<usize> {
    let mut widths = vec![acct.config.mlp_size; acct.config.num_layers];
    let peak = |w: &[usize]| acct.f32_weight_bytes(w) + acct.peak_activation_bytes(w, batch, 4);
    let mut steps = 0;
    while peak(&widths) > budget {
        let next: Vec<usize> = widths
            .iter()
            .map(|&c| {
                let k = (p * c as f64).floor() as usize;
                if c - k < min { c } else { c - k }
            })
            .collect();
        if next == widths {
            return None;
        }
        widths = next;
        steps += 1;
    }
    Some(steps)
}

fn c9_budget_loop() -> Check {
    let m = ok(VitModel::init(ModelConfig::vit_toy(), 9))?;
    let data = ok(synthetic_dataset(32, 9))?;
    let calib = ok(CalibrationSet::new(data.images, data.labels))?;
    let stats = ok(profile(&m, &calib, &default_filter()))?;
    let opts = PruneOptions::default();
    let acct = Accounting { config: m.config };
    let initial = estimate_peak(&m, opts.batch).peak_estimate();
    let bound = ((256.0f64 / 8.0).ln() / -(0.9f64).ln()).ceil() as usize + 1;
    let mut summary = Vec::new();
    for frac in [1.00, 0.95, 0.90, 0.80] {
        let budget = (initial as f64 * frac).floor() as u64;
        let predicted = simulate_budget(&acct, budget, opts.percentile, opts.min_channels, opts.batch);
        match (prune_to_budget(&m, &stats, budget, opts, None), predicted) {
            (Ok(out), Some(steps)) => {
                ensure!(out.final_memory.peak_estimate() <= budget, "{frac}: peak above budget");
                ensure!(out.steps() == steps, "{frac}: {} steps, oracle {steps}", out.steps());
                ensure!(out.steps() <= bound, "{frac}: {} steps exceeds bound {bound}", out.steps());
                summary.push(format!("{:.0}%: {} steps", frac * 100.0, out.steps()));
            }
            (Err(Error::BudgetInfeasible { .. }), None) => summary.push(format!("{:.0}%: infeasible", frac * 100.0)),
            (r, p) => return Err(format!("{frac}: library {:?} vs oracle {p:?}", r.map(|o| o.steps()))),
        }
    }
    Ok(summary.join(", "))
}

fn c10_determinism() -> Check {
    let config = PipelineConfig {
        data: DataConfig {
            samples: Some(64),
            ..Default::default()
        },
        ..Default::default()
    };
    let a = ok(tempfile::tempdir())?;
    let b = ok(tempfile::tempdir())?;
    ok(run_pipeline(&config, a.path()))?;
    ok(run_pipeline(&config, b.path()))?;
    let read = |dir: &std::path::Path, f: &str| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
    let ra = String::from_utf8(read(a.path(), "report.json")?).map_err(|e| e.to_string())?;
    let rb = String::from_utf8(read(b.path(), "report.json")?).map_err(|e| e.to_string())?;
    ensure!(ok(strip_timing(&ra))? == ok(strip_timing(&rb))?, "reports differ outside timing fields");
    let mut files = vec!["plan.json".to_string(), "quant_report.json".to_string()];
    files.extend(Variant::ALL.iter().map(|v| format!("{v}.eflx")));
    for f in &files {
        ensure!(read(a.path(), f)? == read(b.path(), f)?, "{f} differs between runs");
    }
    Ok(format!("report (minus timing) and {} artifacts identical", files.len()))
}

fn c11_format_fidelity() -> Check {
    let m = ok(VitModel::init(ModelConfig::vit_toy(), 11))?;
    let h = ok(to_fp16(&m, &PrecisionPolicy::default()))?;
    let data = ok(synthetic_dataset(8, 11))?;
    let calib = ok(CalibrationSet::new(data.images, data.labels))?;
    let all = [LayerPattern::new("**")];
    let stats = ok(profile(&m, &calib, &all))?;
    let (q, _) = ok(quantize_model(&m, &stats, &calib, &all, ActivationScaling::Static))?;
    for (label, model) in [("f32", &m), ("f16", &h), ("int8", &q)] {
        let bytes = ok(to_bytes(model))?;
        let back = ok(from_bytes(&bytes))?;
        ensure!(&back == model, "{label} model changed in roundtrip");
        ensure!(ok(to_bytes(&back))? == bytes, "{label} re-serialization differs");
        for ((n, a), (_, b)) in model.projections().into_iter().zip(back.projections()) {
            if let (Projection::Quantized(x), Projection::Quantized(y)) = (a, b) {
                let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                ensure!(bits(&x.params.weight_scales) == bits(&y.params.weight_scales), "{n} scales");
                ensure!(x.params.act_scale.to_bits() == y.params.act_scale.to_bits(), "{n} act scale");
            }
        }
    }

    let mut rec = vec![0u8; CIFAR_RECORD];
    rec[0] = 7;
    for (i, b) in rec[1..].iter_mut().enumerate() {
        *b = ((i * 37 + 11) % 256) as u8;
    }
    let d = ok(parse_cifar10(&rec))?;
    ensure!(d.labels == vec![7], "label {:?}", d.labels);
    ensure!(d.images.shape() == [1, 3, 32, 32], "shape {:?}", d.images.shape());
    let px = ok(d.images.as_f32())?;
    for (i, &v) in px.iter().enumerate() {
        let byte = rec[1 + i] as f32;
        let want = (byte / 255.0 - 0.5) / 0.5;
        ensure!(v.to_bits() == want.to_bits(), "pixel {i}: {v} != {want}");
    }
    Ok("f32/f16/int8 checkpoints bitwise; 3073-byte record exact".into())
}

fn c12_flop_ordering() -> Check {
    let out = default_pipeline();
    let fp32 = out.report.variants[&Variant::Fp32].flops;
    let pruned = out.report.variants[&Variant::PrunedFp32].flops;
    ensure!(pruned < fp32, "pruned flops {pruned} not below {fp32}");
    let c = ModelConfig::vit_toy();
    let model = &out.models.iter().find(|(v, _)| *v == Variant::PrunedFp32).ok_or("no pruned model")?.1;
    let mut saved = 0u64;
    for (l, &w) in model.mlp_sizes().iter().enumerate() {
        let before = mlp_flops(&c, 256, 32);
        let after = mlp_flops(&c, w, 32);
        // exact rational check: after / before == w / 256
        ensure!(after * 256 == before * w as u64, "layer {l}: MLP flop ratio != width ratio {w}/256");
        saved += before - after;
    }
    ensure!(fp32 - pruned == saved, "total saving {} != per-layer sum {saved}", fp32 - pruned);
    // 4 layers x 25 removed channels x (2 linears x 2 flops x B x T x H)
    let oracle_mlp_saving = 4 * 25 * (2 * 2 * 32 * 65 * 64);
    ensure!(saved == oracle_mlp_saving, "saving {saved} != hand count {oracle_mlp_saving}");
    Ok(format!("flops {fp32} -> {pruned}; every MLP at 231/256 width"))
}

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "parameter-count anchor", Duration::from_secs(1), c1_param_anchor),
        (2, "memory-ratio analogue", Duration::from_secs(10), c2_memory_ratio),
        (3, "fp16 halving", Duration::from_secs(1), c3_fp16_halving),
        (4, "pruning exactness oracle", Duration::from_secs(30), c4_pruning_exactness),
        (5, "pruning arithmetic", Duration::from_secs(1), c5_prune_arithmetic),
        (6, "quantization roundtrip bound", Duration::from_secs(5), c6_quant_roundtrip),
        (7, "awq dominance", Duration::from_secs(30), c7_awq_dominance),
        (8, "forward oracle", Duration::from_secs(30), c8_forward_oracle),
        (9, "budget loop", Duration::from_secs(30), c9_budget_loop),
        (10, "determinism", Duration::from_secs(60), c10_determinism),
        (11, "format fidelity", Duration::from_secs(5), c11_format_fidelity),
        (12, "flop ordering", Duration::from_secs(1), c12_flop_ordering),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > limit => Err(format!("{d}; took {:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs())),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} {name} ({:.2}s): {detail}", took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} ({:.2}s): {detail}", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
