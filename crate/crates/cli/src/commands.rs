use std::env;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mabn_core::fold::{bench_stacks, ConvStack};
use mabn_core::gradcheck::norm_gradcheck;
use mabn_core::io::{write_curve, write_json, write_trace, Checkpoint, RunConfigFile, FORMAT_VERSION};
use mabn_core::norm::NormForm;
use mabn_core::stats::{median, series_std, StatName};
use mabn_core::theorem::{verify_ema_variance, verify_sma_variance, verify_variance_gap, TheoremReport};
use mabn_core::train::{evaluate as evaluate_set, train as train_run, InferMode, RunSummary, TrainState, Trainer};
use mabn_core::{Error, Precision, Scalar, Tensor};

use crate::args::{
    BenchArgs, EvaluateArgs, FoldArgs, GradcheckArgs, LayerKind, StatsTraceArgs, TheoremArgs, TheoremKind, TrainArgs,
};

const GRADCHECK_THRESHOLD: f64 = 1e-6;
const FOLD_PROBE_SAMPLES: usize = 500;
const TRACED_STATS: [StatName; 5] = [
    StatName::Mu,
    StatName::Sigma2,
    StatName::Chi2,
    StatName::G,
    StatName::Psi,
];

pub enum Failure {
    CheckFailed(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

/// `--out`, then `$MABN_OUT_DIR`, then `./out`.
fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| env::var_os("MABN_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile, Error> {
    match path {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile::default()),
    }
}

fn check(pass: bool, msg: String) -> Outcome {
    if pass {
        Ok(())
    } else {
        Err(Failure::CheckFailed(msg))
    }
}

fn fmt_err(e: Option<f64>) -> String {
    e.map_or_else(|| "n/a".into(), |v| format!("{:.2}%", 100.0 * v))
}

#[derive(Serialize)]
struct SeedAggregate {
    format_version: u32,
    label: String,
    norm_batch: usize,
    seeds: Vec<u64>,
    median_final_val_err: Option<f64>,
    median_final_train_err: Option<f64>,
    diverged_runs: usize,
    runs: Vec<RunSummary>,
}

fn aggregate(runs: Vec<RunSummary>) -> SeedAggregate {
    let pick = |f: fn(&RunSummary) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
    SeedAggregate {
        format_version: FORMAT_VERSION,
        label: runs[0].label.clone(),
        norm_batch: runs[0].norm_batch,
        seeds: runs.iter().map(|r| r.seed).collect(),
        median_final_val_err: median(&pick(|r| r.final_val_err)),
        median_final_train_err: median(&pick(|r| r.final_train_err)),
        diverged_runs: runs.iter().filter(|r| r.diverged).count(),
        runs,
    }
}

/// Run to completion (or to `stop_at`) and write the per-seed artifacts.
fn drive<T: Scalar>(mut trainer: Trainer<T>, stop_at: Option<u64>, out: &Path) -> Result<Option<RunSummary>, Error> {
    let seed = trainer.state().seed;
    let checkpoint = out.join(format!("checkpoint_seed{seed}.json"));
    if let Some(k) = stop_at {
        trainer.run_until(k)?;
        if !trainer.is_done() {
            write_json(trainer.state(), &checkpoint)?;
            println!(
                "seed {seed}: stopped at iteration {}, checkpoint {}",
                trainer.state().iteration,
                checkpoint.display()
            );
            return Ok(None);
        }
    }
    trainer.run()?;
    let report = trainer.report();
    write_curve(&report.curve, &out.join(format!("curve_seed{seed}.csv")))?;
    write_trace(&report.trace, &out.join(format!("trace_seed{seed}.csv")))?;
    write_json(&report.summary, &out.join(format!("summary_seed{seed}.json")))?;
    write_json(trainer.state(), &checkpoint)?;
    let s = &report.summary;
    println!(
        "{} |B|={} seed {seed}: {} iterations, val error {}, train error {}{}",
        s.label,
        s.norm_batch,
        s.iterations,
        fmt_err(s.final_val_err),
        fmt_err(s.final_train_err),
        if s.diverged { " (diverged)" } else { "" }
    );
    Ok(Some(report.summary))
}

fn resume<T: Scalar>(state: TrainState<T>, stop_at: Option<u64>, out: &Path) -> Result<Option<RunSummary>, Error> {
    drive(Trainer::from_state(state)?, stop_at, out)
}

pub fn train(a: TrainArgs) -> Outcome {
    let out = out_dir(a.common.out);
    if let Some(path) = a.resume {
        match Checkpoint::load(&path)? {
            Checkpoint::F32(s) => resume(s, a.stop_at, &out)?,
            Checkpoint::F64(s) => resume(s, a.stop_at, &out)?,
        };
        return Ok(());
    }
    let file = load_config(a.common.config.as_deref())?;
    let mut cfg = file.train_config()?;
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let summary = match cfg.precision {
            Precision::F32 => drive(Trainer::<f32>::new(&cfg, seed)?, a.stop_at, &out)?,
            Precision::F64 => drive(Trainer::<f64>::new(&cfg, seed)?, a.stop_at, &out)?,
        };
        runs.extend(summary);
    }
    if runs.len() > 1 {
        let agg = aggregate(runs);
        println!(
            "median over {} seeds: val error {}",
            agg.seeds.len(),
            fmt_err(agg.median_final_val_err)
        );
        write_json(&agg, &out.join("summary.json"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    format_version: u32,
    seed: u64,
    iteration: u64,
    folded: bool,
    train_err: f64,
    val_err: f64,
}

fn evaluate_state<T: Scalar>(state: TrainState<T>, folded: bool) -> Result<EvalReport, Error> {
    let trainer = Trainer::from_state(state)?;
    let mode = if folded { InferMode::Folded } else { InferMode::Separate };
    let s = trainer.state();
    let data = trainer.dataset();
    Ok(EvalReport {
        format_version: FORMAT_VERSION,
        seed: s.seed,
        iteration: s.iteration,
        folded,
        train_err: evaluate_set(&s.model, &data.train, s.config.train_eval_samples, mode)?,
        val_err: evaluate_set(&s.model, &data.val, usize::MAX, mode)?,
    })
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let report = match Checkpoint::load(&a.checkpoint)? {
        Checkpoint::F32(s) => evaluate_state(s, a.folded)?,
        Checkpoint::F64(s) => evaluate_state(s, a.folded)?,
    };
    println!(
        "iteration {}: val error {}, train error {}",
        report.iteration,
        fmt_err(Some(report.val_err)),
        fmt_err(Some(report.train_err))
    );
    write_json(&report, &out_dir(a.out).join("eval.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    format_version: u32,
    layer: &'static str,
    shape: [usize; 4],
    seed: u64,
    epsilon: f64,
    max_rel_error: f64,
    threshold: f64,
    pass: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.batch == 0 || a.channels == 0 || a.spatial == 0 {
        return Err(Error::Config("batch, channels, and spatial must be positive".into()).into());
    }
    let (form, layer) = match a.layer {
        LayerKind::Bn => (NormForm::Vanilla, "bn"),
        LayerKind::Modified => (NormForm::Modified, "modified"),
    };
    let shape = [a.batch, a.channels, a.spatial, a.spatial];
    let report = norm_gradcheck(form, shape, a.seed, a.epsilon)?;
    let pass = report.max_rel_error < GRADCHECK_THRESHOLD;
    println!("{layer} {shape:?}: max relative error {:.3e}", report.max_rel_error);
    write_json(
        &GradcheckSummary {
            format_version: FORMAT_VERSION,
            layer,
            shape,
            seed: a.seed,
            epsilon: a.epsilon,
            max_rel_error: report.max_rel_error,
            threshold: GRADCHECK_THRESHOLD,
            pass,
        },
        &out_dir(a.out).join("gradcheck.json"),
    )?;
    check(
        pass,
        format!(
            "max relative error {:.3e} >= {GRADCHECK_THRESHOLD:e}",
            report.max_rel_error
        ),
    )
}

pub fn verify_theorem(a: TheoremArgs) -> Outcome {
    let file = load_config(a.common.config.as_deref())?;
    let (name, report): (&str, TheoremReport) = match a.which {
        TheoremKind::Ema | TheoremKind::Sma => {
            let mut mc = file.theorem.estimator;
            if a.tight {
                mc = mc.tightened();
            }
            if let Some(v) = a.alpha {
                mc.momentum = v;
            }
            if let Some(v) = a.trials {
                mc.trials = v;
            }
            if let Some(v) = a.horizon {
                mc.horizon = v;
            }
            if let Some(v) = a.window {
                mc.window = v;
            }
            if let Some(v) = a.drift {
                mc.source.drift_step = v;
            }
            if let Some(v) = a.seed {
                mc.seed = v;
            }
            if a.which == TheoremKind::Ema {
                ("ema", verify_ema_variance(&mc)?)
            } else {
                ("sma", verify_sma_variance(&mc)?)
            }
        }
        TheoremKind::Gap => {
            let mut gap = file.theorem.gap;
            if let Some(v) = a.trials {
                gap.trials = v;
            }
            if let Some(v) = a.batch {
                gap.batch = v;
            }
            if let Some(v) = a.seed {
                gap.seed = v;
            }
            ("gap", verify_variance_gap(&gap)?)
        }
    };
    println!(
        "{}: empirical {:.6}, predicted {:.6}, relative deviation {:+.4} -> {}",
        report.theorem,
        report.empirical,
        report.predicted,
        report.rel_dev,
        if report.pass { "pass" } else { "FAIL" }
    );
    write_json(&report, &out_dir(a.common.out).join(format!("theorem_{name}.json")))?;
    check(report.pass, format!("{} outside tolerance", report.theorem))
}

#[derive(Serialize)]
struct BenchSummary {
    format_version: u32,
    reports: Vec<mabn_core::fold::BenchReport>,
    folded_over_unfolded: f64,
    folded_over_instance: f64,
}

pub fn bench(a: BenchArgs) -> Outcome {
    let file = load_config(a.common.config.as_deref())?;
    let mut section = file.bench;
    let stack = &mut section.stack;
    for (slot, flag) in [
        (&mut stack.layers, a.layers),
        (&mut stack.width, a.width),
        (&mut stack.spatial, a.spatial),
        (&mut stack.kernel, a.kernel),
        (&mut stack.batch, a.batch),
        (&mut section.options.timed_reps, a.reps),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    section.stack.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(section.seed);
    let reports = bench_stacks(&section.stack, &section.options, &mut rng)?;
    let rate = |label: &str| {
        reports
            .iter()
            .find(|r| r.label == label)
            .map_or(f64::NAN, |r| r.iters_per_sec)
    };
    for r in &reports {
        println!("{:>9}: {:9.2} it/s over {} reps", r.label, r.iters_per_sec, r.reps);
    }
    let summary = BenchSummary {
        format_version: FORMAT_VERSION,
        folded_over_unfolded: rate("folded") / rate("unfolded"),
        folded_over_instance: rate("folded") / rate("instance"),
        reports,
    };
    println!(
        "folded/unfolded {:.3}, folded/instance {:.3}",
        summary.folded_over_unfolded, summary.folded_over_instance
    );
    write_json(&summary, &out_dir(a.common.out).join("bench.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct TraceSpread {
    norm_batch: usize,
    seed: u64,
    layer: String,
    stat: StatName,
    std: f64,
}

#[derive(Serialize)]
struct TraceMedian {
    norm_batch: usize,
    layer: String,
    stat: StatName,
    median_std: Option<f64>,
}

#[derive(Serialize)]
struct TraceSummary {
    format_version: u32,
    label: String,
    runs: Vec<TraceSpread>,
    medians: Vec<TraceMedian>,
}

pub fn stats_trace(a: StatsTraceArgs) -> Outcome {
    let out = out_dir(a.common.out);
    let file = load_config(a.common.config.as_deref())?;
    let mut base = file.train_config()?;
    if let Some(seeds) = a.seeds {
        base.seeds = seeds;
    }
    if let Some(n) = a.iterations {
        base.iterations = n;
    }
    let mut runs = Vec::new();
    let mut medians = Vec::new();
    for &nb in &a.norm_batches {
        let cfg = mabn_core::train::TrainConfig {
            norm_batch: nb,
            ..base.clone()
        };
        cfg.validate()?;
        let first = runs.len();
        for &seed in &cfg.seeds {
            let report = train_run(&cfg, seed)?;
            write_trace(&report.trace, &out.join(format!("trace_nb{nb}_seed{seed}.csv")))?;
            for &layer in &cfg.trace_layers {
                let name = format!("norm{layer}");
                for stat in TRACED_STATS {
                    runs.push(TraceSpread {
                        norm_batch: nb,
                        seed,
                        layer: name.clone(),
                        stat,
                        std: series_std(&report.trace.series(&name, stat)),
                    });
                }
            }
        }
        for &layer in &cfg.trace_layers {
            let name = format!("norm{layer}");
            for stat in TRACED_STATS {
                let spreads: Vec<f64> = runs[first..]
                    .iter()
                    .filter(|r| r.layer == name && r.stat == stat)
                    .map(|r| r.std)
                    .collect();
                let m = median(&spreads);
                println!(
                    "|B|={nb:>3} {name} {:>6}: median std {}",
                    stat.as_str(),
                    m.map_or("n/a".into(), |v| format!("{v:.4e}"))
                );
                medians.push(TraceMedian {
                    norm_batch: nb,
                    layer: name.clone(),
                    stat,
                    median_std: m,
                });
            }
        }
    }
    let summary = TraceSummary {
        format_version: FORMAT_VERSION,
        label: base.norm.label(),
        runs,
        medians,
    };
    write_json(&summary, &out.join("trace_summary.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct FoldSummary {
    format_version: u32,
    source: String,
    max_abs_diff: f64,
    matching_predictions: Option<usize>,
    samples: usize,
    tolerance: f64,
    pass: bool,
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn fold_state<T: Scalar>(state: TrainState<T>, tolerance: f64, source: String) -> Result<FoldSummary, Error> {
    let trainer = Trainer::from_state(state)?;
    let val = &trainer.dataset().val;
    let n = FOLD_PROBE_SAMPLES.min(val.len());
    let (x, _) = val.batch::<T>(&(0..n).collect::<Vec<_>>())?;
    let model = &trainer.state().model;
    let separate = model.infer(&x, InferMode::Separate)?;
    let folded = model.infer(&x, InferMode::Folded)?;
    let max_abs_diff = separate.max_abs_diff(&folded)?;
    let matching = argmax_rows(&separate)
        .iter()
        .zip(argmax_rows(&folded))
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(FoldSummary {
        format_version: FORMAT_VERSION,
        source,
        max_abs_diff,
        matching_predictions: Some(matching),
        samples: n,
        tolerance,
        pass: max_abs_diff <= tolerance,
    })
}

pub fn fold(a: FoldArgs) -> Outcome {
    let summary = match &a.checkpoint {
        Some(path) => {
            let source = path.display().to_string();
            match Checkpoint::load(path)? {
                Checkpoint::F32(s) => fold_state(s, a.tolerance, source)?,
                Checkpoint::F64(s) => fold_state(s, a.tolerance, source)?,
            }
        }
        None => {
            let file = load_config(a.common.config.as_deref())?;
            let cfg = file.bench.stack;
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(file.bench.seed);
            let stack = ConvStack::<f32>::random_linear(&cfg, &mut rng)?;
            let x = Tensor::random_uniform(&cfg.input_shape(), -1.0, 1.0, &mut rng);
            let max_abs_diff = stack.forward(&x)?.max_abs_diff(&stack.folded()?.forward(&x)?)?;
            FoldSummary {
                format_version: FORMAT_VERSION,
                source: format!("random {}-layer stack", cfg.layers),
                max_abs_diff,
                matching_predictions: None,
                samples: cfg.batch,
                tolerance: a.tolerance,
                pass: max_abs_diff <= a.tolerance,
            }
        }
    };
    println!(
        "{}: max |folded - unfolded| = {:.3e} (tolerance {:.1e})",
        summary.source, summary.max_abs_diff, summary.tolerance
    );
    write_json(&summary, &out_dir(a.common.out).join("fold.json"))?;
    check(
        summary.pass,
        format!(
            "fold difference {:.3e} exceeds {:.1e}",
            summary.max_abs_diff, summary.tolerance
        ),
    )
}
