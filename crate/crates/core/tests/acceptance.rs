//! End-to-end acceptance checks, run in order on one thread. Prints one
//! `criterion N: PASS|FAIL` line per check and exits non-zero if any fails.
//!
//! `cargo test -p mabn-core --test acceptance [-- NAME... | --skip NAME]`

use std::process::ExitCode;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mabn_core::fold::{bench_stacks, BenchOptions, BenchStackConfig, ConvStack};
use mabn_core::gradcheck::norm_gradcheck;
use mabn_core::io::{write_curve, write_json, write_trace};
use mabn_core::norm::{
    bn_backward, bn_forward, build_variant, modified_backward, modified_forward, NormForm, NormVariantConfig,
};
use mabn_core::stats::{median, series_std, StatName};
use mabn_core::theorem::{verify_ema_variance, verify_sma_variance, verify_variance_gap, GapConfig, McConfig};
use mabn_core::train::{train, RunReport, TrainConfig, Trainer};
use mabn_core::Tensor;

type Verdict = (bool, String);

fn per_channel_sums(x: &Tensor<f64>, weight: Option<&Tensor<f64>>, dx: &Tensor<f64>) -> Vec<f64> {
    let layout = x.channel_layout("sums").unwrap();
    (0..layout.c)
        .map(|ch| {
            let mut acc = 0.0;
            layout.for_channel(ch, |i| acc += weight.map_or(1.0, |w| w.data()[i]) * dx.data()[i]);
            acc
        })
        .collect()
}

fn criterion_01_normalization_gradients_match_finite_differences() -> Verdict {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for form in [NormForm::Vanilla, NormForm::Modified] {
        for b in [2, 4, 8] {
            for c in [1, 3, 16] {
                for seed in 0..20u64 {
                    let r = norm_gradcheck(form, [b, c, 2, 2], seed * 1000 + b as u64 * 17 + c as u64, 1e-5).unwrap();
                    worst = worst.max(r.max_rel_error);
                    cases += 1;
                }
            }
        }
    }
    (
        worst < 1e-6,
        format!("worst relative error {worst:.3e} over {cases} cases"),
    )
}

fn criterion_02_backward_projects_out_normalized_directions() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for &(b, c, s) in &[(2, 1, 1), (4, 3, 2), (8, 16, 3), (3, 5, 4)] {
        for _ in 0..10 {
            let x = Tensor::<f64>::random_normal(&[b, c, s, s], 2.0, &mut rng);
            let dz = Tensor::random_normal(&[b, c, s, s], 1.0, &mut rng);
            let gamma: Vec<f64> = (0..c).map(|i| 0.5 + i as f64 * 0.25).collect();
            let beta = vec![0.3; c];

            let (_, cache) = bn_forward(&x, &gamma, &beta, 0.0).unwrap();
            let dx = bn_backward(&dz, &cache).unwrap().dx;
            let sums = per_channel_sums(&x, None, &dx);
            let y_sums = per_channel_sums(&x, Some(cache.y()), &dx);

            let (_, cache) = modified_forward(&x, &gamma, &beta, 0.0).unwrap();
            let dx = modified_backward(&dz, &cache).unwrap().dx;
            let x_sums = per_channel_sums(&x, Some(&x), &dx);

            for v in sums.iter().chain(&y_sums).chain(&x_sums) {
                worst = worst.max(v.abs());
            }
        }
    }
    (worst < 1e-10, format!("largest per-channel residual {worst:.3e}"))
}

fn criterion_03_ema_variance_matches_closed_form() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for alpha in [0.9, 0.98] {
        let cfg = McConfig {
            momentum: alpha,
            horizon: 500,
            trials: 10_000,
            ..McConfig::default()
        };
        let r = verify_ema_variance(&cfg).unwrap();
        pass &= r.rel_dev.abs() < 0.10;
        lines.push(format!(
            "alpha={alpha}: {:.6} vs {:.6} ({:+.2}%)",
            r.empirical,
            r.predicted,
            100.0 * r.rel_dev
        ));
    }
    (pass, lines.join(", "))
}

fn criterion_04_sma_variance_matches_closed_form() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for window in [4, 16] {
        let mut cfg = McConfig {
            window,
            horizon: 500,
            trials: 10_000,
            ..McConfig::default()
        };
        cfg.source.drift_step = 1e-3;
        let r = verify_sma_variance(&cfg).unwrap();
        pass &= r.rel_dev.abs() < 0.10;
        lines.push(format!(
            "m={window}: {:.6} vs {:.6} ({:+.2}%)",
            r.empirical,
            r.predicted,
            100.0 * r.rel_dev
        ));
    }
    (pass, lines.join(", "))
}

fn criterion_05_modified_backward_has_lower_gradient_variance() -> Verdict {
    let gaps: Vec<_> = [2, 8, 32]
        .into_iter()
        .map(|batch| {
            verify_variance_gap(&GapConfig {
                batch,
                ..GapConfig::default()
            })
            .unwrap()
        })
        .collect();
    let at_two = &gaps[0];
    let bound_met = at_two.empirical >= 0.95 * at_two.predicted;
    let decreasing = gaps.windows(2).all(|w| w[1].empirical < w[0].empirical);
    (
        bound_met && decreasing,
        format!(
            "gap at B=2 {:.4} vs bound {:.4}; gaps over B=2,8,32: {:.4}, {:.4}, {:.4}",
            at_two.empirical, at_two.predicted, gaps[0].empirical, gaps[1].empirical, gaps[2].empirical
        ),
    )
}

fn criterion_06_mabn_with_unit_window_is_modified_batch_norm() -> Verdict {
    let cfg = NormVariantConfig {
        sma_capacity: 1,
        clip_bound: 1.0,
        warmup_iters: 0,
        ..NormVariantConfig::mabn()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let c = 1 + case % 5;
        let shape = [2 + case % 7, c, 1 + case % 3, 1 + case % 3];
        let mut layer = build_variant::<f64>(&cfg, c).unwrap();
        for (g, b) in layer.gamma_mut().iter_mut().zip(0..) {
            *g = 0.5 + 0.1 * b as f64;
        }
        // A few steps so the moving estimates carry history.
        for _ in 0..3 {
            let x = Tensor::random_normal(&shape, 1.0 + case as f64 * 0.05, &mut rng);
            let dz = Tensor::random_normal(&shape, 1.0, &mut rng);
            let z = layer.forward(&x, shape[0]).unwrap();
            let got = layer.backward(&dz).unwrap();
            let (out, cache) = modified_forward(&x, layer.gamma(), layer.beta(), cfg.epsilon).unwrap();
            let want = modified_backward(&dz, &cache).unwrap();
            worst = worst.max(z.max_abs_diff(&out.z).unwrap());
            worst = worst.max(got.dx.max_abs_diff(&want.dx).unwrap());
            for (a, b) in got
                .dgamma
                .iter()
                .zip(&want.dgamma)
                .chain(got.dbeta.iter().zip(&want.dbeta))
            {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (worst <= 1e-12, format!("largest difference {worst:.3e} over 100 cases"))
}

fn criterion_07_folding_is_exact_and_faster() -> Verdict {
    let cfg = BenchStackConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stack = ConvStack::<f32>::random_linear(&cfg, &mut rng).unwrap();
    let x = Tensor::random_uniform(&cfg.input_shape(), -1.0, 1.0, &mut rng);
    let diff = stack
        .forward(&x)
        .unwrap()
        .max_abs_diff(&stack.folded().unwrap().forward(&x).unwrap())
        .unwrap();

    let opts = BenchOptions {
        warmup_reps: 2,
        timed_reps: 7,
        min_rep_secs: 0.3,
    };
    let reports = bench_stacks(&cfg, &opts, &mut rng).unwrap();
    let rate = |label: &str| reports.iter().find(|r| r.label == label).unwrap().iters_per_sec;
    let over_unfolded = rate("folded") / rate("unfolded");
    let over_instance = rate("folded") / rate("instance");
    (
        diff <= 1e-4 && over_unfolded >= 1.0 && over_instance > 1.2,
        format!("max abs diff {diff:.3e}, folded/unfolded {over_unfolded:.3}, folded/instance {over_instance:.3}"),
    )
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Arm {
    label: &'static str,
    runs: Vec<RunReport>,
}

/// BN at 32 and BN, BRN, MABN at 2 per normalization group, three seeds each.
fn small_batch_runs() -> &'static [Arm] {
    static RUNS: OnceLock<Vec<Arm>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let arms = [
            ("BN@32", NormVariantConfig::bn(), 32),
            ("BN@2", NormVariantConfig::bn(), 2),
            ("BRN@2", NormVariantConfig::brn(), 2),
            ("MABN@2", NormVariantConfig::mabn(), 2),
        ];
        arms.into_iter()
            .map(|(label, norm, norm_batch)| {
                let cfg = TrainConfig {
                    norm,
                    norm_batch,
                    seeds: SEEDS.to_vec(),
                    ..TrainConfig::default()
                };
                let runs = SEEDS.iter().map(|&s| train(&cfg, s).unwrap()).collect();
                Arm { label, runs }
            })
            .collect()
    })
}

fn median_val_err(arm: &Arm) -> f64 {
    let errs: Vec<f64> = arm
        .runs
        .iter()
        .map(|r| r.summary.final_val_err.unwrap_or(f64::INFINITY))
        .collect();
    median(&errs).unwrap_or(f64::INFINITY)
}

fn criterion_08_small_batch_error_ordering() -> Verdict {
    let arms = small_batch_runs();
    let err: Vec<f64> = arms.iter().map(|a| 100.0 * median_val_err(a)).collect();
    let (bn32, bn2, brn2, mabn2) = (err[0], err[1], err[2], err[3]);
    let detail = arms
        .iter()
        .zip(&err)
        .map(|(a, e)| format!("{} {e:.2}%", a.label))
        .collect::<Vec<_>>()
        .join(", ");
    (
        bn2 > brn2 && brn2 > mabn2 && mabn2 <= bn32 + 1.0,
        format!("median val error: {detail}"),
    )
}

fn criterion_09_small_batches_make_statistics_unstable() -> Verdict {
    let arms = small_batch_runs();
    let spread = |arm: &Arm, stat: StatName| {
        let stds: Vec<f64> = arm
            .runs
            .iter()
            .map(|r| series_std(&r.trace.series("norm0", stat)))
            .collect();
        median(&stds).unwrap_or(f64::NAN)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for stat in [StatName::Mu, StatName::Sigma2, StatName::G, StatName::Psi] {
        let (small, large) = (spread(&arms[1], stat), spread(&arms[0], stat));
        pass &= small > large;
        parts.push(format!("{stat} {small:.3e} vs {large:.3e}"));
    }
    (pass, format!("std at |B|=2 vs 32: {}", parts.join(", ")))
}

fn criterion_10_reruns_and_resumes_are_bit_identical() -> Verdict {
    let cfg = TrainConfig {
        norm: NormVariantConfig::mabn(),
        norm_batch: 4,
        iterations: 60,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let artifacts = |tag: &str, report: &RunReport| -> Vec<Vec<u8>> {
        let paths = [
            dir.path().join(format!("{tag}_curve.csv")),
            dir.path().join(format!("{tag}_trace.csv")),
            dir.path().join(format!("{tag}_summary.json")),
        ];
        write_curve(&report.curve, &paths[0]).unwrap();
        write_trace(&report.trace, &paths[1]).unwrap();
        write_json(&report.summary, &paths[2]).unwrap();
        paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
    };

    let first = artifacts("a", &train(&cfg, 3).unwrap());
    let second = artifacts("b", &train(&cfg, 3).unwrap());

    let mut full = Trainer::<f32>::new(&cfg, 3).unwrap();
    full.run().unwrap();
    let mut stopped = Trainer::<f32>::new(&cfg, 3).unwrap();
    stopped.run_until(25).unwrap();
    let path = dir.path().join("checkpoint.json");
    write_json(stopped.state(), &path).unwrap();
    let mut resumed = Trainer::<f32>::from_state(mabn_core::io::read_json(&path).unwrap()).unwrap();
    resumed.run().unwrap();
    let resumed_artifacts = artifacts("c", &resumed.report());
    let same_state = serde_json::to_vec(full.state()).unwrap() == serde_json::to_vec(resumed.state()).unwrap();

    (
        first == second && first == resumed_artifacts && same_state,
        format!(
            "rerun identical: {}, resumed artifacts identical: {}, resumed state identical: {same_state}",
            first == second,
            first == resumed_artifacts
        ),
    )
}

const CRITERIA: [(&str, fn() -> Verdict); 10] = [
    (
        "criterion_01_normalization_gradients_match_finite_differences",
        criterion_01_normalization_gradients_match_finite_differences,
    ),
    (
        "criterion_02_backward_projects_out_normalized_directions",
        criterion_02_backward_projects_out_normalized_directions,
    ),
    (
        "criterion_03_ema_variance_matches_closed_form",
        criterion_03_ema_variance_matches_closed_form,
    ),
    (
        "criterion_04_sma_variance_matches_closed_form",
        criterion_04_sma_variance_matches_closed_form,
    ),
    (
        "criterion_05_modified_backward_has_lower_gradient_variance",
        criterion_05_modified_backward_has_lower_gradient_variance,
    ),
    (
        "criterion_06_mabn_with_unit_window_is_modified_batch_norm",
        criterion_06_mabn_with_unit_window_is_modified_batch_norm,
    ),
    (
        "criterion_07_folding_is_exact_and_faster",
        criterion_07_folding_is_exact_and_faster,
    ),
    (
        "criterion_08_small_batch_error_ordering",
        criterion_08_small_batch_error_ordering,
    ),
    (
        "criterion_09_small_batches_make_statistics_unstable",
        criterion_09_small_batches_make_statistics_unstable,
    ),
    (
        "criterion_10_reruns_and_resumes_are_bit_identical",
        criterion_10_reruns_and_resumes_are_bit_identical,
    ),
];

fn main() -> ExitCode {
    let mut filters = Vec::new();
    let mut skips = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--skip" => skips.extend(args.next()),
            a if a.starts_with('-') => {}
            _ => filters.push(arg),
        }
    }
    let mut failed = 0;
    let mut ran = 0;
    for (n, (name, check)) in (1..).zip(CRITERIA) {
        let selected = filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
        if !selected || skips.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        let (pass, detail) = check();
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        ran += 1;
        failed += usize::from(!pass);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
