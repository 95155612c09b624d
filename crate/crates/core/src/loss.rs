//! Per-sample classification losses and the mini-batch variance penalty.
//!
//! These are the value-only versions; [`crate::autodiff::Tape`] records the
//! same kernels with backward rules.

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Per-sample losses of one mini-batch, `ℓ(x_i, θ)` for `i in 0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLosses {
    per_sample: Vec<f64>,
}

impl BatchLosses {
    pub fn new(per_sample: Vec<f64>) -> Result<Self> {
        ensure!(!per_sample.is_empty(), Input, "batch must hold at least one loss");
        ensure!(
            per_sample.iter().all(|v| v.is_finite()),
            Numeric,
            "per-sample losses must be finite"
        );
        Ok(Self { per_sample })
    }

    pub fn per_sample(&self) -> &[f64] {
        &self.per_sample
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.per_sample)
    }
}

/// Two-pass mean; the correction term makes constant inputs exact.
pub(crate) fn mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| x - m).sum::<f64>() / n
}

/// `log Σ exp(z)` with the row max subtracted first.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Writes `log softmax(row)` into `out`.
pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

pub(crate) fn check_logits(logits: &Tensor, what: &str) -> Result<(usize, usize)> {
    ensure!(logits.is_matrix(), Input, "{what}: logits must be an N×K matrix");
    let (n, k) = (logits.rows(), logits.cols());
    ensure!(k >= 2, Input, "{what}: need at least 2 classes, got {k}");
    logits.check_finite(what)?;
    Ok((n, k))
}

pub(crate) fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    ensure!(
        labels.len() == n,
        Input,
        "expected {n} labels, got {}",
        labels.len()
    );
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::Input(format!(
            "label {y} at row {i} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = check_logits(logits, "softmax")?;
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut out[i * k..(i + 1) * k];
        log_softmax_into(logits.row(i), row);
        row.iter_mut().for_each(|v| *v = v.exp());
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// `−log softmax(logits_i)[label_i]` for each row.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<BatchLosses> {
    let (n, k) = check_logits(logits, "softmax_cross_entropy")?;
    check_labels(labels, n, k)?;
    let per_sample = (0..n)
        .map(|i| {
            let row = logits.row(i);
            // lse ≥ row[label]; clamp away the −0 / rounding dust.
            (log_sum_exp(row) - row[labels[i]]).max(0.0)
        })
        .collect();
    BatchLosses::new(per_sample)
}

/// `KL(softmax(p_i) ‖ softmax(q_i))` for each row.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<BatchLosses> {
    let (n, k) = check_logits(p_logits, "kl_divergence")?;
    ensure!(
        p_logits.shape() == q_logits.shape(),
        Input,
        "kl_divergence: shape mismatch {:?} vs {:?}",
        p_logits.shape(),
        q_logits.shape()
    );
    q_logits.check_finite("kl_divergence")?;
    let mut log_p = vec![0.0; k];
    let mut log_q = vec![0.0; k];
    let per_sample = (0..n)
        .map(|i| {
            log_softmax_into(p_logits.row(i), &mut log_p);
            log_softmax_into(q_logits.row(i), &mut log_q);
            kl_row(&log_p, &log_q)
        })
        .collect();
    BatchLosses::new(per_sample)
}

pub(crate) fn kl_row(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    kl.max(0.0)
}

/// Population variance `(1/N) Σ (v_i − mean)²`.
pub fn batch_variance(values: &[f64]) -> Result<f64> {
    ensure!(!values.is_empty(), Input, "batch_variance of an empty vector");
    let m = mean(values);
    Ok(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64)
}

/// `∂Ψ/∂v_i = (2/N)(v_i − mean)`.
pub fn batch_variance_grad(values: &[f64]) -> Result<Vec<f64>> {
    ensure!(!values.is_empty(), Input, "batch_variance of an empty vector");
    let m = mean(values);
    let scale = 2.0 / values.len() as f64;
    Ok(values.iter().map(|v| scale * (v - m)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::matrix(rows.len(), k, rows.concat()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let l = softmax_cross_entropy(&logits(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!((l.per_sample()[0] - 2f64.ln()).abs() < 1e-15);

        let l = softmax_cross_entropy(&logits(&[&[1000.0, 0.0]]), &[0]).unwrap();
        assert!(l.per_sample()[0] < 1e-12);

        let l = softmax_cross_entropy(&logits(&[&[1.0, 0.0]]), &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.per_sample()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(matches!(
            softmax_cross_entropy(&logits(&[&[0.0, 0.0]]), &[2]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&logits(&[&[0.0]]), &[0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let p = logits(&[&[0.0, 0.0]]);
        let q = logits(&[&[0.0, 3f64.ln()]]); // (0.25, 0.75)
        let forward = kl_divergence(&p, &q).unwrap().per_sample()[0];
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((forward - expected).abs() < 1e-14);
        assert!((forward - 0.143841).abs() < 1e-6);

        let backward = kl_divergence(&q, &p).unwrap().per_sample()[0];
        let expected = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((backward - expected).abs() < 1e-14);
        assert!((backward - 0.130812).abs() < 1e-6);

        let same = logits(&[&[3.0, -1.0, 7.5], &[0.1, 0.2, 0.3]]);
        assert!(kl_divergence(&same, &same)
            .unwrap()
            .per_sample()
            .iter()
            .all(|&v| v == 0.0));

        let other = logits(&[&[0.0, 0.0, 0.0]]);
        assert!(matches!(kl_divergence(&same, &other), Err(Error::Input(_))));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(batch_variance(&[0.7; 4]).unwrap(), 0.0);
        assert_eq!(batch_variance(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.25);
        assert_eq!(
            batch_variance_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![-0.75, -0.25, 0.25, 0.75]
        );
        assert!(matches!(batch_variance(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn variance_gradient_matches_finite_differences() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let h = 1e-5;
        let fd: Vec<f64> = (0..4)
            .map(|i| {
                let mut up = v;
                let mut down = v;
                up[i] += h;
                down[i] -= h;
                (batch_variance(&up).unwrap() - batch_variance(&down).unwrap()) / (2.0 * h)
            })
            .collect();
        for (a, b) in fd.iter().zip([-0.75, -0.25, 0.25, 0.75]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let l = logits(&[&[1e4, -1e4, 0.0], &[-1e4, -1e4, -1e4]]);
        let ce = softmax_cross_entropy(&l, &[1, 2]).unwrap();
        assert!(ce.per_sample().iter().all(|v| v.is_finite()));
        assert!((ce.per_sample()[0] - 2e4).abs() < 1e-9);
        let kl = kl_divergence(&l, &logits(&[&[0.0, 1e4, 0.0], &[1e4, 0.0, 0.0]])).unwrap();
        assert!(kl.per_sample().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e4f64..1e4, 6)) {
            let s = softmax(&Tensor::matrix(2, 3, vals).unwrap()).unwrap();
            for i in 0..2 {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_non_negative(
            a in prop::collection::vec(-50f64..50.0, 4),
            b in prop::collection::vec(-50f64..50.0, 4),
        ) {
            let p = Tensor::matrix(2, 2, a).unwrap();
            let q = Tensor::matrix(2, 2, b).unwrap();
            prop_assert!(softmax_cross_entropy(&p, &[0, 1]).unwrap().per_sample().iter().all(|&v| v >= 0.0));
            prop_assert!(kl_divergence(&p, &q).unwrap().per_sample().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn variance_shift_and_permutation_invariant(
            v in prop::collection::vec(-10f64..10.0, 1..20),
            c in -10f64..10.0,
        ) {
            let base = batch_variance(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((batch_variance(&shifted).unwrap() - base).abs() < 1e-12);
            let mut rev = v.clone();
            rev.reverse();
            prop_assert!((batch_variance(&rev).unwrap() - base).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }
    }
}
