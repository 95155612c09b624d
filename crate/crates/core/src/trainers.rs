//! Standard, PGD-AT and TRADES training loops with the DeMem penalty and
//! optional DP-SGD.
//!
//! Every method produces a vector of per-sample losses `ℓ_i` for the current
//! mini-batch and minimizes
//!
//! ```text
//! L_total = mean(ℓ) + λ · Ψ(ℓ),   Ψ(ℓ) = (1/N) Σ (ℓ_i − mean(ℓ))²
//! ```
//!
//! With DP-SGD enabled, sample `i` contributes the gradient of its own share
//! of `N · L_total`, i.e. `(1 + 2λ(ℓ_i − mean)) ∇ℓ_i`, which is clipped to
//! norm `C` before Gaussian noise `N(0, σ²C²)` is added to the sum. The
//! variance couples samples, so the coupling weight is frozen at its current
//! value when taking per-sample gradients.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::attacks::{self, AttackParams};
use crate::autodiff::{Tape, Var};
use crate::data::{self, Dataset};
use crate::error::{ensure, Error, Result};
use crate::loss::{self, BatchLosses};
use crate::models::{Model, ModelConfig};
use crate::seed::{self, stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMethod {
    #[default]
    Standard,
    PgdAt,
    Trades,
}

impl TrainMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMethod::Standard => "standard",
            TrainMethod::PgdAt => "pgd_at",
            TrainMethod::Trades => "trades",
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "pgd_at" => Ok(Self::PgdAt),
            "trades" => Ok(Self::Trades),
            other => Err(Error::Config(format!(
                "unknown training method {other:?} (expected standard, pgd_at or trades)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub enabled: bool,
    pub noise_multiplier: f64,
    pub clip_norm: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            noise_multiplier: 0.05,
            clip_norm: 10.0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            ensure!(
                self.clip_norm > 0.0 && self.clip_norm.is_finite(),
                Config,
                "dp.clip_norm must be positive"
            );
            ensure!(
                self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite(),
                Config,
                "dp.noise_multiplier must be non-negative"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub demem_lambda: f64,
    pub trades_beta: f64,
    pub attack: AttackParams,
    pub dp: DpConfig,
    pub seed: u64,
    /// Also record robust training accuracy each epoch (slow).
    pub track_robust: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Standard,
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            demem_lambda: 0.0,
            trades_beta: 6.0,
            attack: AttackParams::training(0.05),
            dp: DpConfig::default(),
            seed: 0,
            track_robust: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "train.epochs must be at least 1");
        ensure!(self.batch_size >= 1, Config, "train.batch_size must be at least 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "train.learning_rate must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "train.momentum must lie in [0, 1)"
        );
        ensure!(
            self.demem_lambda >= 0.0 && self.demem_lambda.is_finite(),
            Config,
            "train.demem_lambda must be non-negative"
        );
        ensure!(
            self.trades_beta >= 0.0 && self.trades_beta.is_finite(),
            Config,
            "train.trades_beta must be non-negative"
        );
        if self.method != TrainMethod::Standard {
            self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.dp.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub mean_loss: f64,
    /// Mean of the per-batch penalty `Ψ`.
    pub psi: f64,
    pub nat_acc: f64,
    pub rob_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// CSV with columns `epoch,mean_loss,psi,nat_acc,rob_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,psi,nat_acc,rob_acc\n");
        for r in &self.epochs {
            let rob = r.rob_acc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.mean_loss, r.psi, r.nat_acc, rob
            ));
        }
        out
    }
}

/// `mean(ℓ) + λ · Ψ(ℓ)`.
pub fn demem_total_loss(per_sample: &BatchLosses, lambda: f64) -> Result<f64> {
    ensure!(lambda >= 0.0, Input, "demem lambda must be non-negative, got {lambda}");
    let mean = per_sample.mean();
    if lambda == 0.0 {
        return Ok(mean);
    }
    Ok(mean + lambda * loss::batch_variance(per_sample.per_sample())?)
}

/// Records `mean(ℓ) + λ · Ψ(ℓ)` on the tape.
pub fn demem_objective(tape: &mut Tape, per_sample: Var, lambda: f64) -> Result<Var> {
    ensure!(lambda >= 0.0, Input, "demem lambda must be non-negative, got {lambda}");
    let mean = tape.mean(per_sample)?;
    let psi = tape.variance(per_sample)?;
    let penalty = tape.scale(psi, lambda)?;
    tape.add(mean, penalty)
}

/// `g · min(1, C / ‖g‖₂)`.
pub fn clip_per_sample_gradient(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    ensure!(clip_norm > 0.0, Input, "clip norm must be positive, got {clip_norm}");
    ensure!(
        g.iter().all(|v| v.is_finite()),
        Numeric,
        "per-sample gradient contains non-finite entries"
    );
    let norm = l2_norm(g);
    if norm <= clip_norm {
        return Ok(g.to_vec());
    }
    let scale = clip_norm / norm;
    Ok(g.iter().map(|v| v * scale).collect())
}

fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `(1/N) (Σ clip(g_i, C) + ζ)` with `ζ ~ N(0, σ²C² I)`.
pub fn privatize_gradients(per_sample_grads: &[Vec<f64>], dp: &DpConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    ensure!(
        !per_sample_grads.is_empty(),
        Input,
        "dp_sgd_step needs at least one per-sample gradient"
    );
    dp.validate()?;
    let dim = per_sample_grads[0].len();
    ensure!(
        per_sample_grads.iter().all(|g| g.len() == dim),
        Input,
        "per-sample gradients differ in length"
    );
    let mut sum = vec![0.0; dim];
    for g in per_sample_grads {
        let clipped = clip_per_sample_gradient(g, dp.clip_norm)?;
        debug_assert!(l2_norm(&clipped) <= dp.clip_norm * (1.0 + 1e-12));
        sum.iter_mut().zip(&clipped).for_each(|(s, c)| *s += c);
    }
    let std = dp.noise_multiplier * dp.clip_norm;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
        sum.iter_mut().for_each(|s| *s += normal.sample(rng));
    }
    let n = per_sample_grads.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Plain DP-SGD update `−lr · (1/N) (Σ clip(g_i, C) + ζ)`.
pub fn dp_sgd_step(per_sample_grads: &[Vec<f64>], dp: &DpConfig, lr: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    ensure!(dp.enabled, Input, "dp_sgd_step called with DP disabled");
    let noisy = privatize_gradients(per_sample_grads, dp, rng)?;
    Ok(noisy.into_iter().map(|g| -lr * g).collect())
}

/// Inputs of one mini-batch after the method's inner attack.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub clean: Tensor,
    pub adversarial: Option<Tensor>,
    pub labels: Vec<usize>,
}

struct Recorded {
    tape: Tape,
    params: Vec<Var>,
    per_sample: Var,
}

fn record_per_sample(config: &TrainConfig, model: &Model, batch: &PreparedBatch) -> Result<Recorded> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, true);
    let per_sample = match (config.method, &batch.adversarial) {
        (TrainMethod::Standard, _) => {
            let x = tape.constant(batch.clean.clone());
            let logits = model.forward_on(&mut tape, &pv, x)?;
            tape.cross_entropy(logits, &batch.labels)?
        }
        (TrainMethod::PgdAt, Some(adv)) => {
            let x = tape.constant(adv.clone());
            let logits = model.forward_on(&mut tape, &pv, x)?;
            tape.cross_entropy(logits, &batch.labels)?
        }
        (TrainMethod::Trades, Some(adv)) => {
            let x = tape.constant(batch.clean.clone());
            let xa = tape.constant(adv.clone());
            let clean_logits = model.forward_on(&mut tape, &pv, x)?;
            let adv_logits = model.forward_on(&mut tape, &pv, xa)?;
            let ce = tape.cross_entropy(clean_logits, &batch.labels)?;
            let kl = tape.kl_div(clean_logits, adv_logits)?;
            let robust = tape.scale(kl, config.trades_beta)?;
            tape.add(ce, robust)?
        }
        (method, None) => {
            return Err(Error::Usage(format!("{method} needs adversarial inputs")));
        }
    };
    Ok(Recorded {
        tape,
        params: pv.flat(),
        per_sample,
    })
}

/// `L_total` and its gradient (flattened like [`Model::flat_params`]) on a
/// prepared batch.
pub fn objective_and_gradient(config: &TrainConfig, model: &Model, batch: &PreparedBatch) -> Result<(f64, Vec<f64>)> {
    let mut rec = record_per_sample(config, model, batch)?;
    let total = demem_objective(&mut rec.tape, rec.per_sample, config.demem_lambda)?;
    let value = rec.tape.value(total)?.item();
    let grads = rec.tape.backward(total)?;
    Ok((value, grads.flatten()))
}

/// Per-sample losses on a prepared batch, without gradients.
pub fn per_sample_losses(config: &TrainConfig, model: &Model, batch: &PreparedBatch) -> Result<BatchLosses> {
    let rec = record_per_sample(config, model, batch)?;
    BatchLosses::new(rec.tape.value(rec.per_sample)?.values().to_vec())
}

/// Per-sample gradients of each sample's share of `N · L_total`.
pub fn per_sample_gradients(config: &TrainConfig, model: &Model, batch: &PreparedBatch) -> Result<Vec<Vec<f64>>> {
    let mut rec = record_per_sample(config, model, batch)?;
    let losses = rec.tape.value(rec.per_sample)?.values().to_vec();
    let weights = demem_sample_weights(&losses, config.demem_lambda);
    rec.tape.per_sample_grads(rec.per_sample, &weights, &rec.params)
}

/// `N · ∂L_total/∂ℓ_i = 1 + 2λ(ℓ_i − mean)`.
pub fn demem_sample_weights(losses: &[f64], lambda: f64) -> Vec<f64> {
    let mean = loss::mean(losses);
    losses.iter().map(|l| 1.0 + 2.0 * lambda * (l - mean)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_loss: f64,
    pub psi: f64,
    pub batch_size: usize,
}

/// Stateful SGD-with-momentum trainer over a fixed dataset.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    model: Model,
    velocity: Vec<f64>,
    attack_rng: Rng,
    noise_rng: Rng,
    epoch: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, model_config: &ModelConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        ensure!(!data.is_empty(), Input, "training set is empty");
        ensure!(
            model_config.input_dim() == data.dim() && model_config.n_classes() >= data.n_classes(),
            Config,
            "model widths {:?} do not fit data of dimension {} with {} classes",
            model_config.layer_widths,
            data.dim(),
            data.n_classes()
        );
        let model = Model::init(model_config, config.seed)?;
        let velocity = vec![0.0; model.n_params()];
        Ok(Self {
            attack_rng: seed::rng(seed::mix(config.seed, stream::ATTACK)),
            noise_rng: seed::rng(seed::mix(config.seed, stream::DP_NOISE)),
            config,
            data,
            model,
            velocity,
            epoch: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Batch order for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        data::epoch_order(self.data.len(), seed::mix(self.config.seed, stream::SHUFFLE), epoch)
    }

    /// Runs the method's inner attack for the given rows.
    pub fn prepare(&mut self, indices: &[usize]) -> Result<PreparedBatch> {
        let (clean, labels) = self.data.batch(indices);
        let adversarial = match self.config.method {
            TrainMethod::Standard => None,
            TrainMethod::PgdAt => Some(attacks::pgd(
                &self.model,
                &clean,
                &labels,
                &self.config.attack,
                &mut self.attack_rng,
            )?),
            TrainMethod::Trades => Some(attacks::pgd_kl(
                &self.model,
                &clean,
                &self.config.attack,
                &mut self.attack_rng,
            )?),
        };
        Ok(PreparedBatch {
            clean,
            adversarial,
            labels,
        })
    }

    /// One optimizer step on the given rows.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepStats> {
        let (epoch, step) = (self.epoch, self.step);
        let diverged = |reason: String| Error::Training { epoch, step, reason };
        let batch = self.prepare(indices)?;
        let mut rec = record_per_sample(&self.config, &self.model, &batch)
            .map_err(|e| diverged(e.to_string()))?;
        let losses = rec.tape.value(rec.per_sample)?.values().to_vec();
        let mean_loss = loss::mean(&losses);
        let psi = loss::batch_variance(&losses)?;
        if !mean_loss.is_finite() || !psi.is_finite() {
            return Err(diverged("non-finite loss".into()));
        }

        let grad = if self.config.dp.enabled {
            let weights = demem_sample_weights(&losses, self.config.demem_lambda);
            let per_sample = rec.tape.per_sample_grads(rec.per_sample, &weights, &rec.params)?;
            privatize_gradients(&per_sample, &self.config.dp, &mut self.noise_rng)?
        } else {
            let total = demem_objective(&mut rec.tape, rec.per_sample, self.config.demem_lambda)?;
            rec.tape
                .backward(total)
                .map_err(|e| diverged(e.to_string()))?
                .flatten()
        };

        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        let mut params = self.model.flat_params();
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(&grad) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        self.model
            .set_flat_params(&params)
            .map_err(|e| diverged(e.to_string()))?;
        self.step += 1;
        Ok(StepStats {
            mean_loss,
            psi,
            batch_size: indices.len(),
        })
    }

    /// One pass over the data in shuffled order; the last partial batch is kept.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let order = self.epoch_order(self.epoch);
        let mut loss_sum = 0.0;
        let mut psi_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let stats = self.step(chunk)?;
            loss_sum += stats.mean_loss * stats.batch_size as f64;
            psi_sum += stats.psi;
            batches += 1;
        }
        let nat_acc = attacks::natural_accuracy(&self.model, self.data)?;
        let rob_acc = if self.config.track_robust {
            let params = AttackParams::evaluation(self.config.attack.epsilon);
            let s = seed::mix(seed::mix(self.config.seed, stream::EVAL), self.epoch as u64);
            Some(attacks::robust_accuracy(&self.model, self.data, &params, s)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: loss_sum / self.data.len() as f64,
            psi: psi_sum / batches as f64,
            nat_acc,
            rob_acc,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Trains a fresh model; deterministic in `(config, model_config, data)`.
pub fn train(config: &TrainConfig, model_config: &ModelConfig, data: &Dataset) -> Result<(Model, TrainHistory)> {
    let mut trainer = Trainer::new(config.clone(), model_config, data)?;
    let mut history = TrainHistory::default();
    for _ in 0..config.epochs {
        history.epochs.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_model(), history))
}
