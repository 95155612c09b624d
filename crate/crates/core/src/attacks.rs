//! L∞ adversarial examples (FGSM, PGD) and robust accuracy.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::models::Model;
use crate::seed::{self, Rng};
use crate::tensor::Tensor;

/// L∞ attack budget; inputs live in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackParams {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackParams {
    /// Training-time attack: 10 steps, `α = ε/4`, random start.
    pub fn training(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            steps: 10,
            random_start: true,
        }
    }

    /// Evaluation attack: 20 steps, `α = ε/8`, random start.
    pub fn evaluation(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 8.0,
            steps: 20,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epsilon >= 0.0 && self.epsilon <= 1.0,
            Input,
            "epsilon must lie in [0, 1], got {}",
            self.epsilon
        );
        ensure!(self.steps >= 1, Input, "attack needs at least one step");
        if self.epsilon > 0.0 {
            ensure!(
                self.step_size > 0.0 && self.step_size.is_finite(),
                Input,
                "step size must be positive, got {}",
                self.step_size
            );
            if self.step_size > 2.0 * self.epsilon {
                log::warn!(
                    "step size {} exceeds 2·epsilon ({}); steps will saturate the ball",
                    self.step_size,
                    2.0 * self.epsilon
                );
            }
        }
        Ok(())
    }
}

/// Objective an attack ascends.
#[derive(Debug, Clone, Copy)]
enum Objective<'a> {
    /// Sum of cross-entropy against the true labels.
    CrossEntropy(&'a [usize]),
    /// Sum of `KL(f(x_clean) ‖ f(x))`, clean logits held fixed.
    Kl(&'a Tensor),
}

fn input_gradient(model: &Model, x: &Tensor, objective: Objective) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape, false);
    let input = tape.param(x.clone());
    let logits = model.forward_on(&mut tape, &params, input)?;
    let per_sample = match objective {
        Objective::CrossEntropy(labels) => tape.cross_entropy(logits, labels)?,
        Objective::Kl(clean) => {
            let clean = tape.constant(clean.clone());
            tape.kl_div(clean, logits)?
        }
    };
    let total = tape.sum(per_sample)?;
    let grads = tape.backward(total)?;
    Ok(grads.get(input).expect("input is a parameter").to_vec())
}

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_box(x: &Tensor) -> Result<()> {
    ensure!(
        x.values().iter().all(|v| (0.0..=1.0).contains(v)),
        Input,
        "attack inputs must lie in [0, 1]"
    );
    Ok(())
}

/// `clip_[0,1](x + ε · sign(∇_x ℓ))`.
pub fn fgsm(model: &Model, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    ensure!(
        (0.0..=1.0).contains(&epsilon),
        Input,
        "epsilon must lie in [0, 1], got {epsilon}"
    );
    check_box(x)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(model, x, Objective::CrossEntropy(y))?;
    let out = x
        .values()
        .iter()
        .zip(&g)
        .map(|(&v, &gi)| (v + epsilon * sign(gi)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

fn projected_ascent(model: &Model, x: &Tensor, params: &AttackParams, rng: &mut Rng, objective: Objective, start: Start) -> Result<Tensor> {
    params.validate()?;
    check_box(x)?;
    let eps = params.epsilon;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let origin = x.values();
    let project = |i: usize, v: f64| v.clamp(origin[i] - eps, origin[i] + eps).clamp(0.0, 1.0);
    let mut cur: Vec<f64> = match start {
        Start::Origin => origin.to_vec(),
        Start::Uniform => origin
            .iter()
            .enumerate()
            .map(|(i, &v)| project(i, v + rng.random_range(-eps..=eps)))
            .collect(),
        Start::Gaussian(scale) => origin
            .iter()
            .enumerate()
            .map(|(i, &v)| project(i, v + scale * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    };
    for _ in 0..params.steps {
        let xt = Tensor::new(x.shape().to_vec(), cur)?;
        let g = input_gradient(model, &xt, objective)?;
        cur = xt
            .into_values()
            .into_iter()
            .zip(&g)
            .enumerate()
            .map(|(i, (v, &gi))| project(i, v + params.step_size * sign(gi)))
            .collect();
    }
    Tensor::new(x.shape().to_vec(), cur)
}

#[derive(Debug, Clone, Copy)]
enum Start {
    Origin,
    Uniform,
    Gaussian(f64),
}

/// Projected gradient ascent on cross-entropy inside `B∞(x, ε) ∩ [0,1]^D`.
pub fn pgd(model: &Model, x: &Tensor, y: &[usize], params: &AttackParams, rng: &mut Rng) -> Result<Tensor> {
    let start = if params.random_start { Start::Uniform } else { Start::Origin };
    projected_ascent(model, x, params, rng, Objective::CrossEntropy(y), start)
}

/// PGD on `KL(f(x) ‖ f(x'))`, the TRADES inner maximization.
///
/// The KL gradient vanishes at `x' = x`, so with `random_start` the search
/// begins from `x + 0.001·N(0, I)`; without it the attack starts at `x`.
pub fn pgd_kl(model: &Model, x: &Tensor, params: &AttackParams, rng: &mut Rng) -> Result<Tensor> {
    let clean = model.forward(x)?;
    let start = if params.random_start {
        Start::Gaussian(1e-3)
    } else {
        Start::Origin
    };
    projected_ascent(model, x, params, rng, Objective::Kl(&clean), start)
}

pub fn natural_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    ensure!(!data.is_empty(), Input, "empty dataset");
    let pred = model.predict(&data.inputs())?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Per-sample robustness: a sample counts only if both the clean input and
/// its PGD example are classified correctly.
pub fn robust_correct(model: &Model, data: &Dataset, params: &AttackParams, seed: u64) -> Result<Vec<bool>> {
    ensure!(!data.is_empty(), Input, "empty dataset");
    let x = data.inputs();
    let clean = model.predict(&x)?;
    let mut rng = seed::rng(seed);
    let adv = pgd(model, &x, data.labels(), params, &mut rng)?;
    let attacked = model.predict(&adv)?;
    Ok(clean
        .iter()
        .zip(&attacked)
        .zip(data.labels())
        .map(|((c, a), y)| c == y && a == y)
        .collect())
}

/// Fraction of samples whose clean input and PGD example are both classified
/// correctly. The clean point lies in its own ε-ball, so this never exceeds
/// natural accuracy.
pub fn robust_accuracy(model: &Model, data: &Dataset, params: &AttackParams, seed: u64) -> Result<f64> {
    let ok = robust_correct(model, data, params, seed)?;
    Ok(ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64)
}
