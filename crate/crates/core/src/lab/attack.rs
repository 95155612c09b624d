//! Leave-one-model-out attack evaluation over a shadow run.
//!
//! Each ensemble member is the target once; the other `M − 1` models are its
//! shadows. Samples without enough IN/OUT shadows for a method are skipped
//! for that target and counted.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shadow::{load_shadow, ShadowRun};
use super::{csv_reader, csv_writer};
use crate::error::{Error, Result};
use crate::mia::{self, AttackMethod, AttackScores, ShadowEnsemble};

pub const REPORT: &str = "attack_report.csv";
pub const SUMMARY: &str = "attack_summary.csv";
pub const SCORES: &str = "scores.csv";

/// One `(method, target, fpr_target)` operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack_name: String,
    pub fpr_target: f64,
    pub tpr: f64,
    pub threshold: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub target_model: usize,
    pub achieved_fpr: f64,
    pub n_skipped: usize,
    /// False when `fpr_target < 1 / n_nonmembers`.
    pub resolvable: bool,
}

/// Mean and spread over target models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummaryRow {
    pub attack_name: String,
    pub fpr_target: f64,
    pub tpr_mean: f64,
    /// Sample standard deviation; empty with fewer than two targets.
    pub tpr_std: Option<f64>,
    pub n_targets: usize,
    pub resolvable: bool,
}

/// Scores of every `(target, sample)` pair for one method, `None` if skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub method: AttackMethod,
    /// `M×S`, row-major by target.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    attack_name: String,
    model_id: usize,
    sample_id: usize,
    score: Option<f64>,
}

/// Scores all targets with `method`.
pub fn score_all(ensemble: &ShadowEnsemble, method: AttackMethod) -> Result<MethodScores> {
    let per_target: Vec<Vec<Option<f64>>> = (0..ensemble.n_models())
        .into_par_iter()
        .map(|t| mia::score_target(ensemble, t, method).map(|s| s.scores))
        .collect::<Result<_>>()?;
    Ok(MethodScores {
        method,
        scores: per_target.concat(),
    })
}

/// Member/non-member scores of one target, skipping uncovered samples.
pub fn target_scores(ensemble: &ShadowEnsemble, scores: &MethodScores, target: usize) -> Result<(AttackScores, usize)> {
    let s = ensemble.n_samples();
    let (mut values, mut members, mut skipped) = (Vec::new(), Vec::new(), 0);
    for j in 0..s {
        match scores.scores[target * s + j] {
            Some(v) => {
                values.push(v);
                members.push(ensemble.is_member(target, j));
            }
            None => skipped += 1,
        }
    }
    Ok((AttackScores::new(values, members)?, skipped))
}

/// Per-target rows for every method and FPR target.
pub fn evaluate(ensemble: &ShadowEnsemble, methods: &[AttackMethod], fpr_targets: &[f64]) -> Result<(Vec<AttackRow>, Vec<MethodScores>)> {
    let mut rows = Vec::new();
    let mut all_scores = Vec::new();
    for &method in methods {
        let scores = score_all(ensemble, method)?;
        for target in 0..ensemble.n_models() {
            let (s, skipped) = target_scores(ensemble, &scores, target)?;
            if s.n_members() == 0 || s.n_nonmembers() == 0 {
                log::warn!("{method}: target {target} has no covered members or non-members; skipped");
                continue;
            }
            for &fpr in fpr_targets {
                let p = mia::tpr_at_fpr(&s, fpr)?;
                rows.push(AttackRow {
                    attack_name: method.to_string(),
                    fpr_target: fpr,
                    tpr: p.tpr,
                    threshold: p.threshold,
                    n_members: s.n_members(),
                    n_nonmembers: s.n_nonmembers(),
                    target_model: target,
                    achieved_fpr: p.fpr,
                    n_skipped: skipped,
                    resolvable: !mia::fpr_unresolvable(fpr, s.n_nonmembers()),
                });
            }
        }
        all_scores.push(scores);
    }
    Ok((rows, all_scores))
}

/// Aggregates per-target rows in first-seen `(method, fpr)` order.
pub fn summarize(rows: &[AttackRow]) -> Vec<AttackSummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.attack_name && k.1 == r.fpr_target) {
            keys.push((r.attack_name.clone(), r.fpr_target));
        }
    }
    keys.into_iter()
        .map(|(name, fpr)| {
            let group: Vec<&AttackRow> = rows
                .iter()
                .filter(|r| r.attack_name == name && r.fpr_target == fpr)
                .collect();
            let tprs: Vec<f64> = group.iter().map(|r| r.tpr).collect();
            let (mean, std) = mean_std(&tprs);
            AttackSummaryRow {
                attack_name: name,
                fpr_target: fpr,
                tpr_mean: mean,
                tpr_std: std,
                n_targets: group.len(),
                resolvable: group.iter().all(|r| r.resolvable),
            }
        })
        .collect()
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub rows: Vec<AttackRow>,
    pub summary: Vec<AttackSummaryRow>,
}

/// Attacks a finished shadow run and writes the report, summary and score
/// dump next to it. `None` uses the methods and targets from the run's config.
pub fn run_attack(dir: &Path, methods: Option<&[AttackMethod]>, fpr_targets: Option<&[f64]>, workers: usize) -> Result<AttackOutcome> {
    let run = load_shadow(dir)?;
    let methods = methods.unwrap_or(&run.config.mia.methods).to_vec();
    let fprs = fpr_targets.unwrap_or(&run.config.mia.fpr_targets).to_vec();
    let (rows, scores) = super::with_workers(workers, || evaluate(&run.ensemble, &methods, &fprs))?;
    let summary = summarize(&rows);
    write_outputs(&run, &rows, &summary, &scores)?;
    Ok(AttackOutcome { rows, summary })
}

fn write_outputs(run: &ShadowRun, rows: &[AttackRow], summary: &[AttackSummaryRow], scores: &[MethodScores]) -> Result<()> {
    let dir = &run.dir;
    let mut w = csv_writer(&dir.join(REPORT))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(REPORT), e))?;
    let mut w = csv_writer(&dir.join(SUMMARY))?;
    for r in summary {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(SUMMARY), e))?;
    let s = run.n_samples();
    let mut w = csv_writer(&dir.join(SCORES))?;
    for ms in scores {
        for (k, score) in ms.scores.iter().enumerate() {
            w.serialize(ScoreRow {
                attack_name: ms.method.to_string(),
                model_id: k / s,
                sample_id: k % s,
                score: *score,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(dir.join(SCORES), e))?;
    let mut manifest = run.manifest.clone();
    for f in [REPORT, SUMMARY, SCORES] {
        manifest.record_file(dir, f)?;
    }
    manifest.save(dir)
}

pub fn read_summary(dir: &Path) -> Result<Vec<AttackSummaryRow>> {
    let path = dir.join(SUMMARY);
    csv_reader(&path)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads `scores.csv` back into per-method score matrices.
pub fn read_scores(dir: &Path, n_models: usize, n_samples: usize) -> Result<Vec<MethodScores>> {
    let path = dir.join(SCORES);
    let mut out: Vec<MethodScores> = Vec::new();
    for row in csv_reader(&path)?.deserialize() {
        let r: ScoreRow = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let method: AttackMethod = r.attack_name.parse()?;
        if out.last().map(|m| m.method) != Some(method) {
            out.push(MethodScores {
                method,
                scores: Vec::with_capacity(n_models * n_samples),
            });
        }
        out.last_mut().expect("pushed").scores.push(r.score);
    }
    if out.iter().any(|m| m.scores.len() != n_models * n_samples) {
        return Err(Error::Format(format!("{}: expected {n_models}×{n_samples} rows per attack", path.display())));
    }
    Ok(out)
}
