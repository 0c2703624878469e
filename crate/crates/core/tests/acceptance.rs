//! Acceptance criteria 1-9. Runs without the libtest harness so that every
//! criterion prints its PASS/FAIL line; exits non-zero if any fails.
//!
//! Criteria 5, 6, 8 share one desk-scale experiment (about five minutes on
//! one core); criterion 9 repeats it.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use gds_core::config::RunConfig;
use gds_core::corpus::write_jsonl;
use gds_core::dynamics::{write_dynamics_csv, DynamicsOutcome, GroupKey};
use gds_core::eval::experiment::{dynamics_stage, prepare_corpus, pretrain, run_experiment, to_json_bytes, ExperimentOutput};
use gds_core::eval::metrics::midranks;
use gds_core::eval::{auroc, tpr_at_fpr, ScoredSet};
use gds_core::features::{self, matrix_features, FeatureName};
use gds_core::lora::{adapter_gradients, attach, LoraConfig};
use gds_core::synth::{generate, SynthConfig};
use gds_core::tinylm::{backward, forward_ids};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn zero_a_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut total_b, mut nonzero_b, mut nonzero_a) = (0, 0, 0);
    for triple in 0..20u64 {
        let cfg = random_config(&mut rng);
        let p = perturbed(&cfg, triple);
        let rank = rng.random_range(1..=16);
        let set = attach(&p, &LoraConfig { rank, ..Default::default() }, 500 + triple).unwrap();
        let s = random_sample(&mut rng, cfg.vocab_size);
        let (_, grads) = adapter_gradients(&p, &set, &s.ids).unwrap();
        for g in grads.values() {
            nonzero_a += g.a.iter().any(|&x| x != 0.0) as usize;
            total_b += 1;
            nonzero_b += g.b.iter().any(|&x| x != 0.0) as usize;
        }
    }
    check(
        nonzero_a == 0 && nonzero_b as f64 >= 0.99 * total_b as f64,
        format!("{nonzero_a} nonzero A matrices, {nonzero_b}/{total_b} B matrices nonzero"),
    )
}

fn feature_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for g in feature_corpus() {
        let want = naive(&g).ordered();
        let fast = matrix_features(&g);
        let single = [
            features::abs_mean(&g),
            features::row_mean_max(&g),
            features::ten_p_ratio(&g),
            features::sparsity(&g),
            features::std(&g),
            features::row_mean_std(&g),
            features::row_ecc(&g),
            features::col_ecc(&g),
        ];
        for f in FeatureName::ALL {
            let i = f.index();
            worst = worst.max((fast[i] - want[i]).abs()).max((single[i] - want[i]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-12 && secs < 10.0, format!("200 matrices, max abs error {worst:e}, {secs:.2}s"))
}

fn backprop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    for sample in 0..5u64 {
        let p = random_model(700 + sample);
        let ids = random_ids(&mut rng, 8, p.config.vocab_size);
        let grads = backward(&p, &forward_ids(&p, &ids, None).unwrap()).unwrap().into_params();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        for _ in 0..50 {
            let name = &names[rng.random_range(0..names.len())];
            let idx = rng.random_range(0..p.get(name).unwrap().len());
            let analytic = grads.get(name).unwrap().iter().nth(idx).copied().unwrap();
            let loss_at = |delta: f64| {
                let mut q = p.clone();
                for (n, mut t) in q.named_mut() {
                    if &n == name {
                        *t.iter_mut().nth(idx).unwrap() += delta;
                    }
                }
                forward_ids(&q, &ids, None).unwrap().loss()
            };
            let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            if analytic == 0.0 {
                // embedding rows of absent tokens
                zero_ok &= numeric.abs() < 1e-9;
            } else {
                worst = worst.max((analytic - numeric).abs() / (analytic.abs() + 1e-8));
            }
        }
    }
    check(worst < 1e-4 && zero_ok, format!("250 entries, max relative error {worst:.2e}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..80);
        let (s, l) = random_scored_set(&mut rng, n);
        let set = ScoredSet::new(s.clone(), l.clone(), true).unwrap();
        mismatches += (auroc(&set) != pairwise_auroc(&s, &l)) as usize;
        mismatches += (tpr_at_fpr(&set, 0.05) != scan_tpr(&s, &l, 0.05)) as usize;
    }
    check(mismatches == 0, format!("100 tied sets, {mismatches} mismatches"))
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn write_corpus(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("corpus.jsonl");
    write_jsonl(&path, &generate(&SynthConfig::default()).unwrap()).unwrap();
    path
}

/// 2 layers, d = 64, 500 members pretrained, 200 + 200 probed with a 3:7 split.
fn experiment_config(corpus: std::path::PathBuf) -> RunConfig {
    RunConfig { corpus_path: corpus, n_layers: 2, d_model: 64, probe_train_fraction: 0.3, ..Default::default() }
}

fn gds_experiment(out: &ExperimentOutput) -> Outcome {
    let d = &out.report.detection;
    let g = d.methods["gds"].auroc;
    let (best, best_auroc) = d
        .methods
        .iter()
        .filter(|(k, _)| k.as_str() != "gds")
        .map(|(k, v)| (k.clone(), v.auroc))
        .fold(("none".to_string(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    check(
        g >= 0.70 && g >= best_auroc - 0.05,
        format!(
            "GDS AUROC {g:.4} (TPR@5%FPR {:.3}), best baseline {best} {best_auroc:.4}, {} pretrain / {} probe-train / {} probe-eval",
            d.methods["gds"].tpr_at_5fpr, out.report.n_pretrain, d.n_probe_train, d.n_probe_eval
        ),
    )
}

fn feature_direction(out: &ExperimentOutput) -> Outcome {
    let dir = |f: FeatureName| out.report.feature_directions.iter().find(|d| d.feature == f).unwrap();
    let (a, s) = (dir(FeatureName::AbsMean), dir(FeatureName::Sparsity));
    check(
        a.member_mean < a.nonmember_mean
            && a.p_member_less < 0.05
            && s.member_mean > s.nonmember_mean
            && s.p_member_greater < 0.05,
        format!(
            "Abs_Mean member {:.3e} vs {:.3e} (p {:.1e}); Sparsity member {:.4} vs {:.4} (p {:.1e})",
            a.member_mean, a.nonmember_mean, a.p_member_less, s.member_mean, s.nonmember_mean, s.p_member_greater
        ),
    )
}

fn ablation_direction(out: &ExperimentOutput) -> Outcome {
    let full = out.report.detection.methods["gds"].auroc;
    let cats: Vec<_> =
        out.report.ablations.as_ref().unwrap().iter().filter(|r| r.kind == "category").collect();
    let within = cats.iter().all(|r| full >= r.auroc - 0.01);
    let degraded = cats.iter().filter(|r| r.auroc <= full).count();
    let detail: Vec<String> = cats.iter().map(|r| format!("-{} {:.4}", r.name, r.auroc)).collect();
    check(
        cats.len() == 3 && within && degraded >= 2,
        format!("full {full:.4}; {}; {degraded}/3 degrade or tie", detail.join(", ")),
    )
}

/// 3 layers so every layer tertile is populated.
fn dynamics_config(corpus: std::path::PathBuf) -> RunConfig {
    RunConfig { corpus_path: corpus, n_layers: 3, d_model: 64, pretrain_epochs: 5, ..Default::default() }
}

fn run_dynamics_once(cfg: &RunConfig) -> DynamicsOutcome {
    let corpus = prepare_corpus(cfg).unwrap();
    let trained = pretrain(cfg, &corpus).unwrap();
    dynamics_stage(cfg, &trained.params, &corpus).unwrap()
}

fn dynamics_trends(out: &DynamicsOutcome) -> Outcome {
    let mut lines = Vec::new();
    let (mut falling, mut rising_s, mut t_ok) = (0, 0, true);
    for key in GroupKey::all() {
        let snaps: Vec<_> = out.snapshots.iter().filter(|s| s.key == key).collect();
        let t: Vec<f64> = snaps.iter().map(|s| s.epoch as f64).collect();
        let dt: Vec<f64> = snaps.iter().map(|s| s.delta_theta).collect();
        let s: Vec<f64> = snaps.iter().map(|s| s.sparsity).collect();
        let rho = spearman(&dt, &t);
        let s_up = s.windows(2).all(|w| w[1] >= w[0]);
        falling += (rho <= -0.8) as usize;
        rising_s += s_up as usize;
        let (lo, hi) = snaps.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(s.top10_ratio), hi.max(s.top10_ratio)));
        t_ok &= lo >= 0.1 && hi <= 0.6;
        lines.push(format!(
            "    {}/{}: rho {rho:+.2}, S {:?}, T10 [{lo:.3}, {hi:.3}]",
            key.module_group,
            key.layer_group,
            s.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>()
        ));
    }
    check(
        falling == 6 && rising_s >= 5 && t_ok,
        format!(
            "Spearman <= -0.8 in {falling}/6, S non-decreasing in {rising_s}/6, T10 in band: {t_ok}\n{}",
            lines.join("\n")
        ),
    )
}

fn dynamics_bytes(out: &DynamicsOutcome) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dynamics_csv(&mut buf, &out.snapshots).unwrap();
    buf
}

fn report(n: usize, name: &str, outcome: &Outcome, secs: f64) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} ({name}): {tag} [{secs:.1}s] {detail}");
    outcome.is_ok()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    // `cargo test -- --list` support; the suite itself is not filterable
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let mut all = true;

    let (o, s) = timed(zero_a_gradient);
    all &= report(1, "zero A gradient", &o, s);
    let (o, s) = timed(feature_oracles);
    all &= report(2, "feature oracles", &o, s);
    let (o, s) = timed(backprop);
    all &= report(3, "backprop vs finite differences", &o, s);
    let (o, s) = timed(metric_oracles);
    all &= report(4, "AUROC and TPR oracles", &o, s);

    let cfg = experiment_config(corpus.clone());
    let (exp, exp_secs) = timed(|| run_experiment(&cfg, true).unwrap());
    all &= report(5, "desk-scale detection", &gds_experiment(&exp), exp_secs);
    all &= report(6, "feature directions", &feature_direction(&exp), 0.0);

    let dcfg = dynamics_config(corpus);
    let (dynamics, dyn_secs) = timed(|| run_dynamics_once(&dcfg));
    all &= report(7, "dynamics trends", &dynamics_trends(&dynamics), dyn_secs);
    all &= report(8, "category ablations", &ablation_direction(&exp), 0.0);

    let (o, s) = timed(|| {
        let again = run_experiment(&cfg, true).unwrap();
        let same_report = to_json_bytes(&exp.report).unwrap() == to_json_bytes(&again.report).unwrap();
        let same_dyn = dynamics_bytes(&dynamics) == dynamics_bytes(&run_dynamics_once(&dcfg));
        check(
            same_report && same_dyn,
            format!("experiment report identical: {same_report}, dynamics CSV identical: {same_dyn}"),
        )
    });
    all &= report(9, "determinism", &o, s);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
