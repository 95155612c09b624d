//! Membership inference over shadow ensembles: LiRA (online and offline),
//! the loss attack, and TPR at a fixed FPR.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};

/// Floor applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Ensembles smaller than this fit one pooled variance per side.
pub const PER_EXAMPLE_VARIANCE_MIN_MODELS: usize = 32;
const PROB_CLAMP: f64 = 1e-12;

/// `M×S` membership and true-class confidences, row-major by model.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEnsemble {
    n_models: usize,
    n_samples: usize,
    membership: Vec<bool>,
    confidences: Vec<f64>,
}

impl ShadowEnsemble {
    pub fn new(n_models: usize, n_samples: usize, membership: Vec<bool>, confidences: Vec<f64>) -> Result<Self> {
        ensure!(n_models >= 1 && n_samples >= 1, Input, "ensemble must be non-empty");
        ensure!(
            membership.len() == n_models * n_samples && confidences.len() == n_models * n_samples,
            Input,
            "expected {}×{} membership and confidence matrices",
            n_models,
            n_samples
        );
        ensure!(
            confidences.iter().all(|c| (0.0..=1.0).contains(c)),
            Input,
            "confidences must lie in [0, 1]"
        );
        Ok(Self {
            n_models,
            n_samples,
            membership,
            confidences,
        })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn is_member(&self, model: usize, sample: usize) -> bool {
        self.membership[model * self.n_samples + sample]
    }

    pub fn confidence(&self, model: usize, sample: usize) -> f64 {
        self.confidences[model * self.n_samples + sample]
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    /// Number of models that trained on `sample`.
    pub fn in_count(&self, sample: usize) -> usize {
        (0..self.n_models).filter(|&m| self.is_member(m, sample)).count()
    }

    /// Logit-scaled confidences of `sample`, split into IN and OUT models,
    /// skipping `exclude`.
    fn split(&self, sample: usize, exclude: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for m in (0..self.n_models).filter(|&m| Some(m) != exclude) {
            let phi = logit_scale_unchecked(self.confidence(m, sample));
            if self.is_member(m, sample) {
                ins.push(phi);
            } else {
                outs.push(phi);
            }
        }
        (ins, outs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStats {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

impl GaussianStats {
    /// Mean and population variance, variance floored at [`VARIANCE_FLOOR`].
    pub fn fit(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), Coverage, "cannot fit a Gaussian to no observations");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            var: var.max(VARIANCE_FLOOR),
            count: values.len(),
        })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (2.0 * PI * self.var).ln() - d * d / (2.0 * self.var)
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.mean.is_finite() && self.var.is_finite() && self.var >= VARIANCE_FLOOR && self.count >= 1,
            Input,
            "invalid Gaussian stats {self:?}"
        );
        Ok(())
    }
}

/// `log(p / (1 − p))` with `p` clamped to `[1e-12, 1 − 1e-12]`.
pub fn logit_scale(p: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&p), Input, "probability {p} outside [0, 1]");
    Ok(logit_scale_unchecked(p))
}

// Clamping `1 − p` directly keeps the saturated value at `ln((1 − 1e-12) / 1e-12)`;
// forming `1 − (1 − 1e-12)` in floating point would be off by ~1e-4 relative.
fn logit_scale_unchecked(p: f64) -> f64 {
    p.max(PROB_CLAMP).ln() - (1.0 - p).max(PROB_CLAMP).ln()
}

/// IN and OUT Gaussians of `sample`'s logit-scaled confidences, optionally
/// leaving out one (target) model.
pub fn fit_in_out(ensemble: &ShadowEnsemble, sample: usize, exclude: Option<usize>) -> Result<(GaussianStats, GaussianStats)> {
    ensure!(sample < ensemble.n_samples, Input, "sample {sample} out of range");
    let (ins, outs) = ensemble.split(sample, exclude);
    if ins.len() < 2 || outs.len() < 2 {
        return Err(Error::Coverage(format!(
            "sample {sample} has {} IN and {} OUT shadow models; need at least 2 of each",
            ins.len(),
            outs.len()
        )));
    }
    Ok((GaussianStats::fit(&ins)?, GaussianStats::fit(&outs)?))
}

/// `log N(φ; IN) − log N(φ; OUT)`.
pub fn lira_online_score(phi: f64, in_stats: &GaussianStats, out_stats: &GaussianStats) -> Result<f64> {
    in_stats.validate()?;
    out_stats.validate()?;
    Ok(in_stats.log_density(phi) - out_stats.log_density(phi))
}

/// `(φ − μ_out) / σ_out`.
pub fn lira_offline_score(phi: f64, out_stats: &GaussianStats) -> Result<f64> {
    out_stats.validate()?;
    Ok((phi - out_stats.mean) / out_stats.var.sqrt())
}

/// `−loss`.
pub fn loss_attack_score(loss: f64) -> Result<f64> {
    ensure!(loss.is_finite(), Input, "loss must be finite");
    Ok(-loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackMethod {
    LiraOnline,
    LiraOffline,
    Loss,
}

impl AttackMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMethod::LiraOnline => "lira_online",
            AttackMethod::LiraOffline => "lira_offline",
            AttackMethod::Loss => "loss",
        }
    }

    pub const ALL: [AttackMethod; 3] = [AttackMethod::LiraOnline, AttackMethod::LiraOffline, AttackMethod::Loss];
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lira_online" | "lira" => Ok(Self::LiraOnline),
            "lira_offline" => Ok(Self::LiraOffline),
            "loss" => Ok(Self::Loss),
            other => Err(Error::Config(format!(
                "unknown attack {other:?} (expected lira_online, lira_offline or loss)"
            ))),
        }
    }
}

/// Scores for one target model; `None` marks samples without enough shadow
/// coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScores {
    pub scores: Vec<Option<f64>>,
}

/// Scores every sample of `target` using the remaining models as shadows.
///
/// Ensembles below [`PER_EXAMPLE_VARIANCE_MIN_MODELS`] replace per-example
/// variances with one variance per side pooled over all samples.
pub fn score_target(ensemble: &ShadowEnsemble, target: usize, method: AttackMethod) -> Result<TargetScores> {
    ensure!(target < ensemble.n_models, Input, "target model {target} out of range");
    let s = ensemble.n_samples;
    if method == AttackMethod::Loss {
        let scores = (0..s)
            .map(|j| {
                let loss = -ensemble.confidence(target, j).max(f64::MIN_POSITIVE).ln();
                loss_attack_score(loss).map(Some)
            })
            .collect::<Result<_>>()?;
        return Ok(TargetScores { scores });
    }
    let splits: Vec<(Vec<f64>, Vec<f64>)> = (0..s).map(|j| ensemble.split(j, Some(target))).collect();
    let pooled = if ensemble.n_models < PER_EXAMPLE_VARIANCE_MIN_MODELS {
        Some(pooled_variances(&splits))
    } else {
        None
    };
    let scores = (0..s)
        .map(|j| {
            let (ins, outs) = &splits[j];
            let phi = logit_scale_unchecked(ensemble.confidence(target, j));
            let stats = |v: &[f64], pooled_var: Option<f64>| -> Result<GaussianStats> {
                let mut g = GaussianStats::fit(v)?;
                if let Some(pv) = pooled_var {
                    g.var = pv;
                }
                Ok(g)
            };
            match method {
                AttackMethod::LiraOnline if ins.len() >= 2 && outs.len() >= 2 => {
                    let i = stats(ins, pooled.map(|p| p.0))?;
                    let o = stats(outs, pooled.map(|p| p.1))?;
                    lira_online_score(phi, &i, &o).map(Some)
                }
                AttackMethod::LiraOffline if outs.len() >= 2 => {
                    let o = stats(outs, pooled.map(|p| p.1))?;
                    lira_offline_score(phi, &o).map(Some)
                }
                _ => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    Ok(TargetScores { scores })
}

/// Mean within-sample variance of IN and of OUT observations.
fn pooled_variances(splits: &[(Vec<f64>, Vec<f64>)]) -> (f64, f64) {
    let pool = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        let (mut ss, mut n) = (0.0, 0usize);
        for sp in splits {
            let v = pick(sp);
            if v.len() >= 2 {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                ss += v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                n += v.len();
            }
        }
        if n == 0 {
            VARIANCE_FLOOR
        } else {
            (ss / n as f64).max(VARIANCE_FLOOR)
        }
    };
    (pool(|s| &s.0), pool(|s| &s.1))
}

/// Attack scores (higher means more member-like) with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackScores {
    scores: Vec<f64>,
    is_member: Vec<bool>,
}

impl AttackScores {
    pub fn new(scores: Vec<f64>, is_member: Vec<bool>) -> Result<Self> {
        ensure!(scores.len() == is_member.len(), Input, "scores and labels differ in length");
        ensure!(scores.iter().all(|s| s.is_finite()), Input, "attack scores must be finite");
        Ok(Self { scores, is_member })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_member(&self) -> &[bool] {
        &self.is_member
    }

    pub fn n_members(&self) -> usize {
        self.is_member.iter().filter(|&&m| m).count()
    }

    pub fn n_nonmembers(&self) -> usize {
        self.is_member.len() - self.n_members()
    }
}

/// One operating point: predict "member" iff `score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC over all distinct thresholds, from `+∞` (nothing flagged) down to the
/// lowest score (everything flagged). Tied scores enter together.
pub fn roc_curve(scores: &AttackScores) -> Result<Vec<RocPoint>> {
    let (pos, neg) = (scores.n_members(), scores.n_nonmembers());
    ensure!(pos > 0 && neg > 0, Input, "ROC needs at least one member and one non-member");
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores.scores[order[i]];
        while i < order.len() && scores.scores[order[i]] == t {
            if scores.is_member[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(points)
}

/// Highest TPR over thresholds whose FPR does not exceed `fpr_target`.
pub fn tpr_at_fpr(scores: &AttackScores, fpr_target: f64) -> Result<RocPoint> {
    ensure!(
        fpr_target > 0.0 && fpr_target < 1.0,
        Input,
        "fpr target must lie in (0, 1), got {fpr_target}"
    );
    let roc = roc_curve(scores)?;
    // FPR is non-decreasing along the curve, so the last admissible point wins.
    Ok(*roc
        .iter()
        .take_while(|p| p.fpr <= fpr_target)
        .last()
        .expect("the +inf threshold always has FPR 0"))
}

/// True when `fpr_target` is finer than one non-member can resolve.
pub fn fpr_unresolvable(fpr_target: f64, n_nonmembers: usize) -> bool {
    n_nonmembers == 0 || fpr_target < 1.0 / n_nonmembers as f64
}
