//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing the harness's output capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use demem_core::attacks::{self, AttackParams};
use demem_core::data::{self, Dataset};
use demem_core::lab::{self, attack, report, shadow, ExperimentConfig, Manifest};
use demem_core::memorization::{self, Predictor};
use demem_core::mia::{self, AttackMethod, AttackScores, GaussianStats};
use demem_core::seed;
use demem_core::trainers::{self, DpConfig, PreparedBatch, TrainConfig, TrainMethod, Trainer};
use demem_core::{loss, Model, ModelConfig, Result, Tape, Tensor};
use rand::Rng as _;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {}: {name} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn uniform_matrix(rng: &mut seed::Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

// ---------------------------------------------------------------------------
// 1. Gradients

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..100 {
        let input = rng.random_range(1..=4);
        let mut widths = vec![input];
        for _ in 0..rng.random_range(1..=2) {
            widths.push(rng.random_range(2..=6));
        }
        let classes = rng.random_range(2..=4);
        widths.push(classes);
        // Random biases too: zero biases behind dead units put pre-activations
        // exactly on the ReLU kink, where finite differences are one-sided.
        let mut model = Model::init(&ModelConfig::mlp(widths), 0).unwrap();
        let params: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_flat_params(&params).unwrap();
        let n = rng.random_range(2..=6);
        let method = [TrainMethod::Standard, TrainMethod::PgdAt, TrainMethod::Trades][rng.random_range(0..3)];
        let batch = PreparedBatch {
            clean: uniform_matrix(&mut rng, n, input),
            adversarial: (method != TrainMethod::Standard).then(|| uniform_matrix(&mut rng, n, input)),
            labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
        };
        let cfg = TrainConfig {
            method,
            demem_lambda: rng.random_range(0.0..2.0),
            trades_beta: rng.random_range(0.0..6.0),
            ..Default::default()
        };
        let (_, grad) = trainers::objective_and_gradient(&cfg, &model, &batch).unwrap();
        let base = model.flat_params();
        let mut fd = vec![0.0; base.len()];
        let mut probe = model.clone();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.set_flat_params(&p).unwrap();
            let up = trainers::objective_and_gradient(&cfg, &probe, &batch).unwrap().0;
            p[k] = base[k] - h;
            probe.set_flat_params(&p).unwrap();
            let down = trainers::objective_and_gradient(&cfg, &probe, &batch).unwrap().0;
            fd[k] = (up - down) / (2.0 * h);
        }
        let diff: Vec<f64> = fd.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let scale = max_abs(&fd).max(max_abs(&grad)).max(1e-8);
        worst = worst.max(max_abs(&diff) / scale);
    }

    // Variance gradient on [1, 2, 3, 4]: (2/N)(ℓ − mean).
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let psi = tape.variance(v).unwrap();
    let g = tape.backward(psi).unwrap().get(v).unwrap().to_vec();
    let expected = [-0.75, -0.25, 0.25, 0.75];
    let psi_err = g.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "autodiff vs finite differences",
        worst <= 1e-4 && psi_err <= 1e-9 && secs < 10.0,
        &format!("worst rel err {worst:.2e}, variance grad err {psi_err:.1e}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. DeMem objective

#[test]
fn c02_demem_formula() {
    let l = loss::BatchLosses::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let total = trainers::demem_total_loss(&l, 0.2).unwrap();
    let constant = loss::batch_variance(&[0.7; 9]).unwrap();

    // λ = 0 trainer against a hand-written mean-cross-entropy SGD loop.
    let data = data::generate_dataset(data::DatasetKind::TwoGaussians, 48, 1.0, 3).unwrap();
    let mc = ModelConfig::mlp(vec![2, 8, 2]);
    let cfg = TrainConfig { epochs: 1, batch_size: 8, demem_lambda: 0.0, seed: 9, ..Default::default() };
    let mut trainer = Trainer::new(cfg.clone(), &mc, &data).unwrap();
    let mut plain = Model::init(&mc, cfg.seed).unwrap();
    let mut velocity = vec![0.0; plain.n_params()];
    let mut steps = 0;
    let mut bit_equal = true;
    for epoch in 0..4 {
        for chunk in trainer.epoch_order(epoch).chunks(cfg.batch_size) {
            trainer.step(chunk).unwrap();
            let (x, y) = data.batch(chunk);
            let mut tape = Tape::new();
            let pv = plain.register(&mut tape, true);
            let input = tape.constant(x);
            let logits = plain.forward_on(&mut tape, &pv, input).unwrap();
            let ce = tape.cross_entropy(logits, &y).unwrap();
            let mean = tape.mean(ce).unwrap();
            let grad = tape.backward(mean).unwrap().flatten();
            let mut p = plain.flat_params();
            for ((p, v), g) in p.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
            plain.set_flat_params(&p).unwrap();
            let a: Vec<u64> = trainer.model().flat_params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = plain.flat_params().iter().map(|v| v.to_bits()).collect();
            bit_equal &= a == b;
            steps += 1;
        }
    }
    verdict(
        2,
        "DeMem formula and λ = 0 trajectory",
        total == 2.75 && constant == 0.0 && bit_equal,
        &format!("total {total}, constant-batch Ψ {constant}, {steps} steps bit-equal: {bit_equal}"),
    );
}

// ---------------------------------------------------------------------------
// 3. DP-SGD degeneration

#[test]
fn c03_dp_degeneration() {
    let data = data::generate_dataset(data::DatasetKind::TwoGaussians, 64, 1.0, 4).unwrap();
    let mc = ModelConfig::mlp(vec![2, 16, 2]);
    let plain_cfg = TrainConfig { batch_size: 8, momentum: 0.0, demem_lambda: 0.2, seed: 5, ..Default::default() };
    let dp_cfg = TrainConfig {
        dp: DpConfig { enabled: true, noise_multiplier: 0.0, clip_norm: 1e9 },
        ..plain_cfg.clone()
    };
    let mut plain = Trainer::new(plain_cfg, &mc, &data).unwrap();
    let mut private = Trainer::new(dp_cfg, &mc, &data).unwrap();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    'outer: for epoch in 0.. {
        for chunk in plain.epoch_order(epoch).chunks(8) {
            plain.step(chunk).unwrap();
            private.step(chunk).unwrap();
            let d: Vec<f64> = plain
                .model()
                .flat_params()
                .iter()
                .zip(private.model().flat_params())
                .map(|(a, b)| a - b)
                .collect();
            worst = worst.max(max_abs(&d));
            steps += 1;
            if steps == 100 {
                break 'outer;
            }
        }
    }

    // Noise alone: σ = 0.05, C = 10, N = 4 zero gradients.
    let dp = DpConfig { enabled: true, noise_multiplier: 0.05, clip_norm: 10.0 };
    let (n, dim, calls) = (4usize, 1000usize, 100usize);
    let zeros = vec![vec![0.0; dim]; n];
    let mut rng = seed::rng(77);
    let mut draws = Vec::with_capacity(dim * calls);
    for _ in 0..calls {
        draws.extend(trainers::privatize_gradients(&zeros, &dp, &mut rng).unwrap());
    }
    let k = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / k;
    let std = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)).sqrt();
    let target = 0.05 * 10.0 / n as f64;
    let se = target / (2.0 * (k - 1.0)).sqrt();
    verdict(
        3,
        "DP-SGD degeneration",
        worst <= 1e-12 && (std - target).abs() <= 3.0 * se,
        &format!(
            "max param gap {worst:.1e} over {steps} steps; noise std {std:.5} vs {target:.5} (3 SE = {:.5}, {} draws)",
            3.0 * se,
            draws.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. PGD constraints

fn ce_sum(model: &Model, x: &Tensor, y: &[usize]) -> f64 {
    loss::softmax_cross_entropy(&model.forward(x).unwrap(), y).unwrap().per_sample().iter().sum()
}

#[test]
fn c04_pgd_constraints() {
    let mut rng = seed::rng(404);
    let (mut violations, mut fgsm_mismatch, mut attacks_run) = (0usize, 0usize, 0usize);
    let models: Vec<Model> = (0..20)
        .map(|i| Model::init(&ModelConfig::mlp(vec![3, 8, 3]), 1000 + i).unwrap())
        .collect();
    for a in 0..10_000 {
        let model = &models[a % models.len()];
        let n = rng.random_range(1..=4);
        let x = uniform_matrix(&mut rng, n, 3);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let eps = rng.random_range(0.0..0.5);
        let params = AttackParams {
            epsilon: eps,
            step_size: eps * rng.random_range(0.05..2.0),
            steps: rng.random_range(1..=10),
            random_start: rng.random(),
        };
        let adv = if a % 4 == 3 {
            attacks::pgd_kl(model, &x, &params, &mut rng).unwrap()
        } else {
            attacks::pgd(model, &x, &y, &params, &mut rng).unwrap()
        };
        attacks_run += 1;
        for (v, o) in adv.values().iter().zip(x.values()) {
            if (v - o).abs() > eps + 1e-12 || !(0.0..=1.0).contains(v) {
                violations += 1;
            }
        }
        if a % 10 == 0 {
            let one = AttackParams { epsilon: eps, step_size: eps, steps: 1, random_start: false };
            let p = attacks::pgd(model, &x, &y, &one, &mut rng).unwrap();
            let f = attacks::fgsm(model, &x, &y, eps).unwrap();
            fgsm_mismatch += (p.values() != f.values()) as usize;
        }
    }

    // Linear 2-D models: the loss is monotone along each axis inside the box,
    // so the maximum sits at one of the four corners.
    let mut worst_gap: f64 = 0.0;
    for t in 0..200 {
        let model = Model::init(&ModelConfig::mlp(vec![2, 2]), 5000 + t).unwrap();
        let x = uniform_matrix(&mut rng, 1, 2);
        let y = vec![rng.random_range(0..2)];
        let eps = rng.random_range(0.01..0.3);
        let adv = attacks::pgd(&model, &x, &y, &AttackParams::training(eps), &mut rng).unwrap();
        let (x0, x1) = (x.values()[0], x.values()[1]);
        let lo = |v: f64| (v - eps).max(0.0);
        let hi = |v: f64| (v + eps).min(1.0);
        let best = [(lo(x0), lo(x1)), (lo(x0), hi(x1)), (hi(x0), lo(x1)), (hi(x0), hi(x1))]
            .iter()
            .map(|&(a, b)| ce_sum(&model, &Tensor::matrix(1, 2, vec![a, b]).unwrap(), &y))
            .fold(f64::NEG_INFINITY, f64::max);
        worst_gap = worst_gap.max((best - ce_sum(&model, &adv, &y)).abs());
    }
    verdict(
        4,
        "PGD constraints",
        violations == 0 && fgsm_mismatch == 0 && worst_gap <= 1e-9,
        &format!(
            "{attacks_run} attacks, {violations} violations, {fgsm_mismatch} FGSM mismatches, corner gap {worst_gap:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. LiRA

#[test]
fn c05_lira_oracle() {
    let mut rng = seed::rng(505);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let stats = |rng: &mut seed::Rng| GaussianStats {
            mean: rng.random_range(-10.0..10.0),
            var: rng.random_range(1e-3..25.0),
            count: 8,
        };
        let (ins, outs) = (stats(&mut rng), stats(&mut rng));
        let phi = rng.random_range(-15.0..15.0);
        let got = mia::lira_online_score(phi, &ins, &outs).unwrap();
        let brute = 0.5 * (outs.var / ins.var).ln() - (phi - ins.mean).powi(2) / (2.0 * ins.var)
            + (phi - outs.mean).powi(2) / (2.0 * outs.var);
        worst = worst.max((got - brute).abs() / brute.abs().max(1.0));
    }
    let hand = mia::lira_online_score(
        2.0,
        &GaussianStats { mean: 2.0, var: 1.0, count: 2 },
        &GaussianStats { mean: -2.0, var: 1.0, count: 2 },
    )
    .unwrap();
    verdict(
        5,
        "LiRA oracle",
        worst <= 1e-9 && (hand - 8.0).abs() <= 1e-12,
        &format!("worst rel err {worst:.1e} over 1000 triples, hand case {hand}"),
    );
}

// ---------------------------------------------------------------------------
// 6. ROC / TPR at FPR

#[test]
fn c06_roc_oracle() {
    let mut rng = seed::rng(606);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.random_range(0..5) as f64 } else { rng.random::<f64>() })
            .collect();
        let mut member: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        member[0] = true;
        member[1] = false;
        let target = rng.random_range(0.001..0.999);
        let (pos, neg) = (member.iter().filter(|&&m| m).count(), member.iter().filter(|&&m| !m).count());
        let mut thresholds = scores.clone();
        thresholds.push(f64::INFINITY);
        let mut best = 0usize;
        for &t in &thresholds {
            let tp = (0..n).filter(|&i| member[i] && scores[i] >= t).count();
            let fp = (0..n).filter(|&i| !member[i] && scores[i] >= t).count();
            if fp as f64 / neg as f64 <= target {
                best = best.max(tp);
            }
        }
        let got = mia::tpr_at_fpr(&AttackScores::new(scores, member).unwrap(), target).unwrap();
        if got.tpr != best as f64 / pos as f64 || got.fpr > target {
            mismatches += 1;
        }
    }

    // Identical score multisets for both classes.
    let n = 500;
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let scores: Vec<f64> = values.iter().chain(&values).copied().collect();
    let member: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
    let s = AttackScores::new(scores, member).unwrap();
    let step = 1.0 / n as f64;
    let curve_gap = mia::roc_curve(&s).unwrap().iter().map(|p| (p.tpr - p.fpr).abs()).fold(0.0, f64::max);
    let mut target_gap: f64 = 0.0;
    for target in [0.001, 0.01, 0.1, 0.5, 0.9] {
        let p = mia::tpr_at_fpr(&s, target).unwrap();
        target_gap = target_gap.max((p.tpr - p.fpr).abs()).max((p.tpr - target).abs() - step);
    }
    verdict(
        6,
        "ROC oracle",
        mismatches == 0 && curve_gap <= step && target_gap <= step,
        &format!("{mismatches}/1000 mismatches; identical-distribution gap {curve_gap:.4} (step {step:.4})"),
    );
}

// ---------------------------------------------------------------------------
// 7. Memorization

/// 1-nearest-neighbour learner; ties go to the lowest index, and an empty
/// training set predicts class 0.
struct NearestNeighbour(Dataset);

impl Predictor for NearestNeighbour {
    fn predict_batch(&self, data: &Dataset) -> Result<Vec<usize>> {
        Ok((0..data.len()).map(|i| nearest_label(&self.0, data.x(i))).collect())
    }
}

fn nearest_label(train: &Dataset, x: &[f64]) -> usize {
    let dist = |j: usize| train.x(j).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..train.len())
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)))
        .map_or(0, |j| train.labels()[j])
}

#[test]
fn c07_memorization_oracle() {
    let start = Instant::now();
    // Two clusters, a duplicated pair inside the first and one mislabeled
    // point at the edge of the second.
    let points = [
        ([0.10, 0.10], 0),
        ([0.15, 0.20], 0),
        ([0.20, 0.12], 0),
        ([0.12, 0.25], 0),
        ([0.18, 0.18], 0),
        ([0.18, 0.18], 0),
        ([0.80, 0.80], 1),
        ([0.85, 0.90], 1),
        ([0.90, 0.82], 1),
        ([0.82, 0.88], 1),
        ([0.88, 0.75], 1),
        ([0.97, 0.98], 0),
    ];
    let data = Dataset::new(
        points.iter().flat_map(|p| p.0).collect(),
        points.iter().map(|p| p.1).collect(),
        2,
        2,
    )
    .unwrap();
    let n = data.len();
    let learner = |d: &Dataset, _seed: u64| Ok(NearestNeighbour(d.clone()));

    // Independent oracle: full-data model vs model without i.
    let oracle: Vec<f64> = (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let y = data.labels()[i];
            let with = (nearest_label(&data, data.x(i)) == y) as u8 as f64;
            let without = (nearest_label(&data.subset(&keep).unwrap(), data.x(i)) == y) as u8 as f64;
            with - without
        })
        .collect();
    let loo = memorization::leave_one_out_memorization(&data, learner, 8, 7, memorization::LOO_DEFAULT_BOUND).unwrap();
    let loo_matches = loo.per_sample.iter().zip(&oracle).all(|(a, b)| *a == Some(*b));

    let est = memorization::estimate_memorization(&data, learner, 64, 0.5, 7).unwrap();
    let mad = est
        .per_sample
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a.expect("coverage") - b).abs())
        .sum::<f64>()
        / n as f64;
    let dup = est.per_sample[4].unwrap().abs().max(est.per_sample[5].unwrap().abs());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "memorization oracle",
        loo_matches && mad <= 0.15 && dup <= 0.15 && secs < 300.0,
        &format!("MAD {mad:.3}, duplicate |mem| {dup:.3}, mislabeled mem {:.3}, {secs:.2}s", est.per_sample[11].unwrap()),
    );
}

// ---------------------------------------------------------------------------
// 8 and 9. DeMem on adversarially trained shadow ensembles

const LAMBDAS: [&str; 3] = ["0", "0.2", "1.0"];
const SEEDS: u64 = 10;

#[derive(Debug, Clone, Copy)]
struct LambdaRun {
    tpr: f64,
    nat_acc: f64,
    loss_var: f64,
}

struct SweepResults {
    /// `runs[seed][lambda]`.
    runs: Vec<Vec<LambdaRun>>,
    secs: f64,
}

fn lambda_sweep() -> &'static SweepResults {
    static RESULTS: OnceLock<SweepResults> = OnceLock::new();
    RESULTS.get_or_init(|| {
        let start = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        let runs = (0..SEEDS)
            .map(|s| {
                LAMBDAS
                    .iter()
                    .map(|lam| {
                        let cfg = ExperimentConfig::default()
                            .with("data.seed", &s.to_string())
                            .and_then(|c| c.with("train.seed", &s.to_string()))
                            .and_then(|c| c.with("train.demem_lambda", lam))
                            .unwrap();
                        let dir = tmp.path().join(format!("s{s}_l{lam}"));
                        lab::run_shadow(&cfg, &dir, 0).unwrap();
                        let out = lab::run_attack(&dir, Some(&[AttackMethod::LiraOnline]), Some(&[0.01]), 0).unwrap();
                        let run = lab::load_shadow(&dir).unwrap();
                        let mean = |f: fn(&shadow::ModelSummary) -> f64| {
                            run.models.iter().map(f).sum::<f64>() / run.models.len() as f64
                        };
                        LambdaRun {
                            tpr: out.summary[0].tpr_mean,
                            nat_acc: mean(|m| m.nat_acc),
                            loss_var: mean(|m| m.member_loss_var),
                        }
                    })
                    .collect()
            })
            .collect();
        SweepResults { runs, secs: start.elapsed().as_secs_f64() }
    })
}

fn seed_mean(r: &SweepResults, l: usize, f: fn(&LambdaRun) -> f64) -> f64 {
    r.runs.iter().map(|s| f(&s[l])).sum::<f64>() / r.runs.len() as f64
}

#[test]
fn c08_demem_lowers_leakage() {
    let r = lambda_sweep();
    let lower = r.runs.iter().filter(|s| s[1].tpr < s[0].tpr).count();
    let drop = seed_mean(r, 0, |x| x.nat_acc) - seed_mean(r, 1, |x| x.nat_acc);
    verdict(
        8,
        "PGD-AT + DeMem (λ = 0.2) vs PGD-AT",
        lower >= 8 && drop <= 0.02 && r.secs < 1800.0,
        &format!(
            "TPR@1% lower in {lower}/{SEEDS} seeds (mean {:.5} vs {:.5}); accuracy drop {:.2} pp; sweep {:.0}s",
            seed_mean(r, 1, |x| x.tpr),
            seed_mean(r, 0, |x| x.tpr),
            100.0 * drop,
            r.secs
        ),
    );
}

#[test]
fn c09_lambda_sweep() {
    let r = lambda_sweep();
    let tprs: Vec<f64> = (0..LAMBDAS.len()).map(|l| seed_mean(r, l, |x| x.tpr)).collect();
    let monotone = tprs.windows(2).all(|w| w[1] <= w[0]);
    let var_decreasing = r
        .runs
        .iter()
        .filter(|s| s.windows(2).all(|w| w[1].loss_var < w[0].loss_var))
        .count();
    verdict(
        9,
        "λ sweep {0, 0.2, 1.0}",
        monotone && var_decreasing >= 8,
        &format!(
            "seed-mean TPR@1% {:?}; training-loss variance strictly decreasing in {var_decreasing}/{SEEDS} seeds (means {:?})",
            tprs.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>(),
            (0..LAMBDAS.len()).map(|l| format!("{:.4}", seed_mean(r, l, |x| x.loss_var))).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Memorization vs leakage on an overfit baseline

/// Long-tailed grid data: 25 checkerboard cells with cluster sizes from 16
/// down to singletons, so some samples can only be fit by memorizing them.
fn long_tail(s: u64) -> Dataset {
    let mut rng = seed::rng(500 + s);
    let g = 5usize;
    let sizes = [16usize, 12, 10, 8, 6, 5, 4, 4, 3, 3, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
    let mut cells: Vec<usize> = (0..g * g).collect();
    for i in (1..cells.len()).rev() {
        let j = rng.random_range(0..=i);
        cells.swap(i, j);
    }
    let spread = 0.05;
    let (mut features, mut labels) = (Vec::new(), Vec::new());
    for (k, &c) in cells.iter().enumerate() {
        let cx = ((c % g) as f64 + 0.5) / g as f64;
        let cy = ((c / g) as f64 + 0.5) / g as f64;
        for _ in 0..sizes[k] {
            features.push((cx + spread * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            features.push((cy + spread * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            labels.push(((c % g) + (c / g)) % 2);
        }
    }
    Dataset::new(features, labels, 2, 2).unwrap()
}

struct SeedStats {
    bin_rho: f64,
    bins: Vec<(f64, f64)>,
    rho_member: f64,
    rho_nonmember: f64,
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn spearman_or_zero(x: &[f64], y: &[f64]) -> f64 {
    memorization::spearman(x, y).unwrap_or(0.0)
}

fn overfit_seed(s: u64, root: &Path) -> SeedStats {
    let dir = root.join(format!("seed{s}"));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("long_tail.csv");
    long_tail(s).write_csv(&csv).unwrap();
    let cfg = ExperimentConfig::parse(&format!(
        "data.csv={}\n\
         train.method=standard\n\
         train.epochs=2000\n\
         train.batch_size=8\n\
         train.learning_rate=0.02\n\
         train.seed={s}\n\
         ensemble.n_models=24\n\
         mia.methods=lira_online\n\
         mia.fpr_targets=0.01\n",
        csv.display()
    ))
    .unwrap();
    let run_dir = dir.join("run");
    lab::run_shadow(&cfg, &run_dir, 0).unwrap();
    lab::run_attack(&run_dir, None, None, 0).unwrap();
    let est = lab::run_memorize(&run_dir).unwrap();
    let run = lab::load_shadow(&run_dir).unwrap();
    let scores = attack::read_scores(&run_dir, run.n_models(), run.n_samples()).unwrap();
    let bins = report::bin_leakage(&run, &scores[0], &est.bins(), 0.01).unwrap();
    let bins: Vec<(f64, f64)> = bins.iter().filter_map(|b| b.tpr.map(|t| (b.bin as f64, t))).collect();
    let (bx, by): (Vec<f64>, Vec<f64>) = bins.iter().copied().unzip();

    let (m, n) = (run.n_models(), run.n_samples());
    let (mut rho_in, mut rho_out) = (Vec::new(), Vec::new());
    for t in 0..m {
        let (mut li, mut mi, mut lo, mut mo) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for j in 0..n {
            let Some(mem) = est.per_sample[j] else { continue };
            let l = -run.ensemble.confidence(t, j).max(f64::MIN_POSITIVE).ln();
            if run.ensemble.is_member(t, j) {
                li.push(l);
                mi.push(mem);
            } else {
                lo.push(l);
                mo.push(mem);
            }
        }
        rho_in.push(spearman_or_zero(&li, &mi));
        rho_out.push(spearman_or_zero(&lo, &mo));
    }
    SeedStats {
        bin_rho: spearman_or_zero(&bx, &by),
        bins,
        rho_member: mean_of(&rho_in),
        rho_nonmember: mean_of(&rho_out),
    }
}

#[test]
fn c10_memorization_predicts_leakage() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let seeds: Vec<SeedStats> = (0..SEEDS).map(|s| overfit_seed(s, tmp.path())).collect();
    let observed = mean_of(&seeds.iter().map(|s| s.bin_rho).collect::<Vec<_>>());

    // Shuffle each seed's per-bin TPRs across its bins.
    let mut rng = seed::rng(1010);
    let mut at_least = 0;
    for _ in 0..1000 {
        let rhos: Vec<f64> = seeds
            .iter()
            .map(|s| {
                let bx: Vec<f64> = s.bins.iter().map(|b| b.0).collect();
                let mut by: Vec<f64> = s.bins.iter().map(|b| b.1).collect();
                for i in (1..by.len()).rev() {
                    by.swap(i, rng.random_range(0..=i));
                }
                spearman_or_zero(&bx, &by)
            })
            .collect();
        at_least += (mean_of(&rhos) >= observed) as usize;
    }
    let p = (at_least + 1) as f64 / 1001.0;
    let rho_in = mean_of(&seeds.iter().map(|s| s.rho_member).collect::<Vec<_>>());
    let rho_out = mean_of(&seeds.iter().map(|s| s.rho_nonmember).collect::<Vec<_>>());
    let out_larger = seeds.iter().filter(|s| s.rho_nonmember > s.rho_member).count();
    verdict(
        10,
        "memorization bins vs leakage",
        observed > 0.0 && p < 0.05 && rho_in > 0.0 && rho_out > 0.0 && out_larger >= 7,
        &format!(
            "bin Spearman {observed:.3} (permutation p {p:.4}); loss/mem Spearman members {rho_in:.3}, non-members {rho_out:.3}, non-member larger in {out_larger}/{SEEDS}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Plumbing

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest_sans_clock(dir: &Path) -> Manifest {
    let mut m = Manifest::require(dir).unwrap();
    m.created_unix = 0;
    m.updated_unix = 0;
    m
}

#[test]
fn c11_plumbing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data::generate_dataset(data::DatasetKind::Rings, 80, 0.2, 11).unwrap();
    let cfg = TrainConfig { method: TrainMethod::Trades, epochs: 3, batch_size: 16, demem_lambda: 0.2, ..Default::default() };
    let (model, _) = trainers::train(&cfg, &ModelConfig::mlp(vec![2, 16, 16, 2]), &data).unwrap();
    let path = tmp.path().join("model.ckpt");
    model.save_checkpoint(&path).unwrap();
    let back = Model::load_checkpoint(&path).unwrap();
    let bits = |m: &Model| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = bits(&model) == bits(&back)
        && back.to_checkpoint_bytes() == std::fs::read(&path).unwrap()
        && model.forward(&data.inputs()).unwrap() == back.forward(&data.inputs()).unwrap();

    let exp = ExperimentConfig::parse(
        "data.n=60\n\
         train.epochs=3\n\
         train.batch_size=16\n\
         train.demem_lambda=0.2\n\
         ensemble.n_models=8\n\
         mia.fpr_targets=0.1\n",
    )
    .unwrap();
    let dirs: Vec<_> = [1usize, 3].iter().map(|w| (tmp.path().join(format!("w{w}")), *w)).collect();
    for (dir, workers) in &dirs {
        let run = dir.join("run");
        lab::run_shadow(&exp, &run, *workers).unwrap();
        lab::run_attack(&run, None, None, *workers).unwrap();
        lab::run_memorize(&run).unwrap();
        lab::run_report(&[run.clone()], Some(&run.join("memorization.csv")), &dir.join("report")).unwrap();
    }
    let (a, b) = (&dirs[0].0, &dirs[1].0);
    let snap = snapshot(a);
    let deterministic = snap == snapshot(b) && manifest_sans_clock(&a.join("run")) == manifest_sans_clock(&b.join("run"));
    let rows = String::from_utf8_lossy(&snap["run/confidences.csv"]).lines().count() - 1;
    verdict(
        11,
        "plumbing",
        round_trip && deterministic && rows == 8 * 60,
        &format!(
            "checkpoint bit-exact {round_trip}; {} files identical across 1 and 3 workers: {deterministic}; {rows} dump rows",
            snap.len()
        ),
    );
}
