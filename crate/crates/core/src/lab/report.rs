//! Leakage reports over one or more attacked shadow runs.
//!
//! * `method_comparison.csv`: accuracy and TPR per run and attack.
//! * `mem_bins.csv`: per-memorization-bin TPR and test accuracy (needs a
//!   memorization dump).
//! * `sweep_lambda.csv`, `sweep_epsilon.csv`: long-format sweeps, emitted
//!   when the runs differ in `train.demem_lambda` or `attack.epsilon`.
//!
//! Every file starts with `# run=... config_hash=... seed=...` comment lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::attack::{mean_std, read_scores, read_summary, AttackSummaryRow, MethodScores};
use super::create_dir;
use super::manifest::write_atomic;
use super::memorize::read_memorization_dump;
use super::shadow::{load_shadow, ShadowRun};
use crate::error::{ensure, Error, Result};
use crate::mia::{self, AttackScores};

pub const METHOD_COMPARISON: &str = "method_comparison.csv";
pub const MEM_BINS: &str = "mem_bins.csv";
pub const SWEEP_LAMBDA: &str = "sweep_lambda.csv";
pub const SWEEP_EPSILON: &str = "sweep_epsilon.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub run: String,
    pub train_method: String,
    pub demem_lambda: String,
    pub epsilon: String,
    pub dp: bool,
    pub attack_name: String,
    pub fpr_target: f64,
    pub nat_acc_mean: f64,
    pub nat_acc_std: Option<f64>,
    pub rob_acc_mean: f64,
    pub rob_acc_std: Option<f64>,
    pub tpr_mean: f64,
    pub tpr_std: Option<f64>,
    pub n_targets: usize,
    pub resolvable: bool,
}

/// Leakage and accuracy of the samples in one memorization bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub run: String,
    pub attack_name: String,
    pub fpr_target: f64,
    pub bin: usize,
    pub n_samples: usize,
    pub n_member_obs: usize,
    /// Member observations flagged at the pooled threshold.
    pub tpr: Option<f64>,
    /// Accuracy of OUT models on the bin's samples.
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub methods: Vec<MethodRow>,
    pub bins: Vec<BinRow>,
}

/// Per-bin leakage with one threshold at `fpr_target` over all pooled
/// `(target, sample)` pairs, so bins are compared at a common operating point.
pub fn bin_leakage(run: &ShadowRun, scores: &MethodScores, bins: &[Option<usize>], fpr_target: f64) -> Result<Vec<BinRow>> {
    let (m, s) = (run.n_models(), run.n_samples());
    ensure!(bins.len() == s, Conflict, "memorization dump covers {} samples, run has {s}", bins.len());
    let (mut pooled, mut is_member) = (Vec::new(), Vec::new());
    for t in 0..m {
        for j in 0..s {
            if let (Some(v), Some(_)) = (scores.scores[t * s + j], bins[j]) {
                pooled.push(v);
                is_member.push(run.ensemble.is_member(t, j));
            }
        }
    }
    let threshold = mia::tpr_at_fpr(&AttackScores::new(pooled, is_member)?, fpr_target)?.threshold;
    let n_bins = bins.iter().flatten().max().map_or(0, |b| b + 1);
    let mut rows = Vec::new();
    for b in 0..n_bins {
        let samples: Vec<usize> = (0..s).filter(|&j| bins[j] == Some(b)).collect();
        if samples.is_empty() {
            continue;
        }
        let (mut hits, mut obs, mut right, mut outs) = (0usize, 0usize, 0usize, 0usize);
        for t in 0..m {
            for &j in &samples {
                if run.ensemble.is_member(t, j) {
                    if let Some(v) = scores.scores[t * s + j] {
                        obs += 1;
                        hits += (v >= threshold) as usize;
                    }
                } else {
                    outs += 1;
                    right += run.correct[t * s + j] as usize;
                }
            }
        }
        rows.push(BinRow {
            run: run_name(&run.dir),
            attack_name: scores.method.to_string(),
            fpr_target,
            bin: b,
            n_samples: samples.len(),
            n_member_obs: obs,
            tpr: (obs > 0).then(|| hits as f64 / obs as f64),
            test_acc: (outs > 0).then(|| right as f64 / outs as f64),
        });
    }
    Ok(rows)
}

pub fn method_rows(run: &ShadowRun, summary: &[AttackSummaryRow]) -> Vec<MethodRow> {
    let nat: Vec<f64> = run.models.iter().map(|m| m.nat_acc).collect();
    let rob: Vec<f64> = run.models.iter().map(|m| m.rob_acc).collect();
    let (nat_mean, nat_std) = mean_std(&nat);
    let (rob_mean, rob_std) = mean_std(&rob);
    let cfg = &run.config;
    summary
        .iter()
        .map(|s| MethodRow {
            run: run_name(&run.dir),
            train_method: cfg.train.method.to_string(),
            demem_lambda: cfg.get("train.demem_lambda").unwrap_or_default().to_string(),
            epsilon: cfg.get("attack.epsilon").unwrap_or_default().to_string(),
            dp: cfg.train.dp.enabled,
            attack_name: s.attack_name.clone(),
            fpr_target: s.fpr_target,
            nat_acc_mean: nat_mean,
            nat_acc_std: nat_std,
            rob_acc_mean: rob_mean,
            rob_acc_std: rob_std,
            tpr_mean: s.tpr_mean,
            tpr_std: s.tpr_std,
            n_targets: s.n_targets,
            resolvable: s.resolvable,
        })
        .collect()
}

/// Builds the report tables for `dirs` into `out`.
pub fn run_report(dirs: &[PathBuf], mem_dump: Option<&Path>, out: &Path) -> Result<ReportOutput> {
    ensure!(!dirs.is_empty(), Usage, "report needs at least one run directory");
    let runs: Vec<ShadowRun> = dirs.iter().map(|d| load_shadow(d)).collect::<Result<_>>()?;
    let fingerprint = &runs[0].manifest.dataset_fingerprint;
    for r in &runs[1..] {
        if &r.manifest.dataset_fingerprint != fingerprint {
            return Err(Error::Conflict(format!(
                "{} and {} were run on different datasets",
                runs[0].dir.display(),
                r.dir.display()
            )));
        }
    }
    let summaries: Vec<Vec<AttackSummaryRow>> = dirs.iter().map(|d| read_summary(d)).collect::<Result<_>>()?;
    create_dir(out)?;
    let header = header_comment(&runs);
    let mut output = ReportOutput::default();

    for (run, summary) in runs.iter().zip(&summaries) {
        output.methods.extend(method_rows(run, summary));
    }
    write_table(&out.join(METHOD_COMPARISON), &header, &output.methods)?;
    output.files.push(out.join(METHOD_COMPARISON));

    if let Some(path) = mem_dump {
        let dump = read_memorization_dump(path)?;
        let bins: Vec<Option<usize>> = dump.iter().map(|r| r.bin).collect();
        for (run, summary) in runs.iter().zip(&summaries) {
            let scores = read_scores(&run.dir, run.n_models(), run.n_samples())?;
            for ms in &scores {
                let mut fprs: Vec<f64> = summary
                    .iter()
                    .filter(|s| s.attack_name == ms.method.as_str())
                    .map(|s| s.fpr_target)
                    .collect();
                fprs.dedup();
                for fpr in fprs {
                    output.bins.extend(bin_leakage(run, ms, &bins, fpr)?);
                }
            }
        }
        write_table(&out.join(MEM_BINS), &header, &output.bins)?;
        output.files.push(out.join(MEM_BINS));
    }

    for (key, file, column) in [
        ("train.demem_lambda", SWEEP_LAMBDA, "lambda"),
        ("attack.epsilon", SWEEP_EPSILON, "epsilon"),
    ] {
        let values: Vec<&str> = runs.iter().map(|r| r.config.get(key).unwrap_or_default()).collect();
        if values.iter().any(|v| *v != values[0]) {
            let text = sweep_table(&runs, &summaries, key, column, &header)?;
            write_atomic(&out.join(file), text.as_bytes())?;
            output.files.push(out.join(file));
        }
    }
    Ok(output)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn header_comment(runs: &[ShadowRun]) -> String {
    let mut h = String::new();
    for r in runs {
        let _ = writeln!(
            h,
            "# run={} config_hash={} seed={}",
            run_name(&r.dir),
            r.manifest.config_hash,
            r.config.train.seed
        );
    }
    h
}

fn write_table<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut bytes = header.as_bytes().to_vec();
    bytes.extend(body);
    write_atomic(path, &bytes)
}

/// One row per `(value, attack)`, with a TPR mean/std column pair per FPR
/// target. Values are echoed exactly as written in each run's config.
fn sweep_table(runs: &[ShadowRun], summaries: &[Vec<AttackSummaryRow>], key: &str, column: &str, header: &str) -> Result<String> {
    let mut fprs: Vec<f64> = Vec::new();
    for s in summaries.iter().flatten() {
        if !fprs.contains(&s.fpr_target) {
            fprs.push(s.fpr_target);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec![column.to_string(), "attack_name".to_string()];
    for f in &fprs {
        head.push(format!("tpr_mean@{f}"));
        head.push(format!("tpr_std@{f}"));
    }
    head.extend(
        ["nat_acc_mean", "rob_acc_mean", "final_psi_mean", "n_targets"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&head)?;
    for (run, summary) in runs.iter().zip(summaries) {
        let value = run.config.get(key).unwrap_or_default();
        let nat = mean_std(&run.models.iter().map(|m| m.nat_acc).collect::<Vec<_>>()).0;
        let rob = mean_std(&run.models.iter().map(|m| m.rob_acc).collect::<Vec<_>>()).0;
        let psi = mean_std(&run.models.iter().map(|m| m.final_psi).collect::<Vec<_>>()).0;
        let mut methods: Vec<&str> = Vec::new();
        for s in summary {
            if !methods.contains(&s.attack_name.as_str()) {
                methods.push(&s.attack_name);
            }
        }
        for method in methods {
            let mut rec = vec![value.to_string(), method.to_string()];
            let mut n_targets = 0;
            for f in &fprs {
                match summary.iter().find(|s| s.attack_name == method && s.fpr_target == *f) {
                    Some(s) => {
                        rec.push(s.tpr_mean.to_string());
                        rec.push(s.tpr_std.map(|v| v.to_string()).unwrap_or_default());
                        n_targets = s.n_targets;
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            rec.extend([nat.to_string(), rob.to_string(), psi.to_string(), n_targets.to_string()]);
            w.write_record(&rec)?;
        }
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!("{header}{}", String::from_utf8_lossy(&body)))
}
