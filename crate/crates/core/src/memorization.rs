//! Label memorization scores
//!
//! `mem(i) = Pr[h(x_i) = y_i | i ∈ train] − Pr[h(x_i) = y_i | i ∉ train]`,
//! estimated either from a Bernoulli-subsampled ensemble or exactly by
//! leave-one-out retraining. Also hosts Spearman correlation and the 22-bin
//! memorization histogram (`{0}` plus 21 equal bins of `(0, 1]`).

use rayon::prelude::*;

use crate::data::{sample_membership, Dataset};
use crate::error::{ensure, Error, Result};
use crate::models::Model;
use crate::seed::{self, stream};

/// Anything that labels a batch of inputs.
pub trait Predictor {
    fn predict_batch(&self, data: &Dataset) -> Result<Vec<usize>>;
}

impl Predictor for Model {
    fn predict_batch(&self, data: &Dataset) -> Result<Vec<usize>> {
        self.predict(&data.inputs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationEstimate {
    /// `None` where a sample had no IN or no OUT observation.
    pub per_sample: Vec<Option<f64>>,
    pub in_counts: Vec<usize>,
    pub out_counts: Vec<usize>,
}

impl MemorizationEstimate {
    /// Estimates from a membership matrix and a correctness matrix, both
    /// `M×S` row-major.
    pub fn from_ensemble(n_models: usize, membership: &[bool], correct: &[bool]) -> Result<Self> {
        ensure!(n_models >= 1, Input, "empty ensemble");
        ensure!(
            membership.len() == correct.len() && membership.len() % n_models == 0,
            Input,
            "membership and correctness matrices must both be M×S"
        );
        let s = membership.len() / n_models;
        let mut in_counts = vec![0; s];
        let mut out_counts = vec![0; s];
        let mut in_hits = vec![0usize; s];
        let mut out_hits = vec![0usize; s];
        for m in 0..n_models {
            for j in 0..s {
                let k = m * s + j;
                if membership[k] {
                    in_counts[j] += 1;
                    in_hits[j] += correct[k] as usize;
                } else {
                    out_counts[j] += 1;
                    out_hits[j] += correct[k] as usize;
                }
            }
        }
        let per_sample = (0..s)
            .map(|j| {
                (in_counts[j] > 0 && out_counts[j] > 0).then(|| {
                    in_hits[j] as f64 / in_counts[j] as f64 - out_hits[j] as f64 / out_counts[j] as f64
                })
            })
            .collect();
        Ok(Self {
            per_sample,
            in_counts,
            out_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }

    pub fn missing(&self) -> usize {
        self.per_sample.iter().filter(|v| v.is_none()).count()
    }

    /// Bin per sample (negative estimates clamp to bin 0), `None` if missing.
    pub fn bins(&self) -> Vec<Option<usize>> {
        self.per_sample
            .iter()
            .map(|v| v.map(|m| bin_assign(m).expect("estimates lie in [-1, 1]")))
            .collect()
    }

    pub fn clamped(&self) -> usize {
        self.per_sample.iter().flatten().filter(|&&v| v < 0.0).count()
    }
}

/// Subsampled estimate: `M` models on independent Bernoulli(`p`) subsets;
/// model `m` uses seed `mix(base_seed, m)`.
pub fn estimate_memorization<F, P>(data: &Dataset, train_fn: F, ensemble_size: usize, inclusion_prob: f64, base_seed: u64) -> Result<MemorizationEstimate>
where
    F: Fn(&Dataset, u64) -> Result<P> + Sync,
    P: Predictor,
{
    ensure!(ensemble_size >= 2, Input, "ensemble size must be at least 2");
    ensure!(
        inclusion_prob > 0.0 && inclusion_prob < 1.0,
        Input,
        "inclusion probability must be in (0, 1)"
    );
    let rows: Vec<(Vec<bool>, Vec<bool>)> = (0..ensemble_size)
        .into_par_iter()
        .map(|m| {
            let member_seed = seed::mix(base_seed, m as u64);
            let mask = sample_membership(data.len(), inclusion_prob, seed::mix(member_seed, stream::MEMBERSHIP))?;
            let idx: Vec<usize> = (0..data.len()).filter(|&i| mask[i]).collect();
            let model = train_fn(&data.subset(&idx)?, member_seed)?;
            let pred = model.predict_batch(data)?;
            let correct = pred.iter().zip(data.labels()).map(|(p, y)| p == y).collect();
            Ok((mask, correct))
        })
        .collect::<Result<_>>()?;
    let membership: Vec<bool> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    let correct: Vec<bool> = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    MemorizationEstimate::from_ensemble(ensemble_size, &membership, &correct)
}

/// Largest dataset accepted by [`leave_one_out_memorization`] by default.
pub const LOO_DEFAULT_BOUND: usize = 64;

/// Exact leave-one-out scores averaged over `repeats` learner seeds. Each
/// repeat trains one full-data model and `n` models with one sample removed.
pub fn leave_one_out_memorization<F, P>(data: &Dataset, train_fn: F, repeats: usize, base_seed: u64, max_size: usize) -> Result<MemorizationEstimate>
where
    F: Fn(&Dataset, u64) -> Result<P> + Sync,
    P: Predictor,
{
    let n = data.len();
    if n > max_size {
        return Err(Error::Usage(format!(
            "leave-one-out needs {} trainings for {n} samples; above the bound of {max_size}, use estimate_memorization",
            repeats * (n + 1)
        )));
    }
    ensure!(repeats >= 1, Input, "repeats must be at least 1");
    ensure!(n >= 2, Input, "leave-one-out needs at least 2 samples");
    let per_repeat: Vec<Vec<f64>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let s = seed::mix(base_seed, r as u64);
            let full = train_fn(data, s)?.predict_batch(data)?;
            (0..n)
                .map(|i| {
                    let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    let without = train_fn(&data.subset(&keep)?, s)?;
                    let pred = without.predict_batch(&data.subset(&[i])?)?[0];
                    let y = data.labels()[i];
                    Ok((full[i] == y) as u8 as f64 - (pred == y) as u8 as f64)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let per_sample = (0..n)
        .map(|i| Some(per_repeat.iter().map(|r| r[i]).sum::<f64>() / repeats as f64))
        .collect();
    Ok(MemorizationEstimate {
        per_sample,
        in_counts: vec![repeats; n],
        out_counts: vec![repeats; n],
    })
}

/// Fractional ranks starting at 1; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure!(x.len() == y.len(), Input, "spearman: lengths {} and {} differ", x.len(), y.len());
    ensure!(x.len() >= 2, Input, "spearman needs at least 2 points");
    ensure!(
        x.iter().chain(y).all(|v| v.is_finite()),
        Input,
        "spearman inputs must be finite"
    );
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    ensure!(
        sxx > 0.0 && syy > 0.0,
        Input,
        "spearman undefined for a constant input"
    );
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub const N_MEM_BINS: usize = 22;

/// `0 → 0`, otherwise `ceil(21 · mem)`: bin `k` covers `((k−1)/21, k/21]`.
/// Negative estimates (sampling noise) land in bin 0; callers count them via
/// [`MemorizationEstimate::clamped`].
pub fn bin_assign(mem: f64) -> Result<usize> {
    ensure!(
        (-1.0..=1.0).contains(&mem),
        Input,
        "memorization score {mem} outside [-1, 1]"
    );
    if mem <= 0.0 {
        return Ok(0);
    }
    // ceil(21·mem) can be off by one at k/21 boundaries in floating point;
    // settle against the exact interval test.
    let mut k = (21.0 * mem).ceil() as usize;
    if k > 1 && mem <= (k - 1) as f64 / 21.0 {
        k -= 1;
    }
    if k < 21 && mem > k as f64 / 21.0 {
        k += 1;
    }
    Ok(k.clamp(1, 21))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Constant(usize);

    impl Predictor for Constant {
        fn predict_batch(&self, data: &Dataset) -> Result<Vec<usize>> {
            Ok(vec![self.0; data.len()])
        }
    }

    #[test]
    fn constant_predictor_memorizes_nothing() {
        let data = Dataset::new((0..20).map(|i| i as f64 / 20.0).collect(), vec![1; 20], 1, 2).unwrap();
        let est = estimate_memorization(&data, |_, _| Ok(Constant(1)), 16, 0.5, 3).unwrap();
        for (v, (i, o)) in est.per_sample.iter().zip(est.in_counts.iter().zip(&est.out_counts)) {
            assert_eq!(i + o, 16);
            if let Some(v) = v {
                assert_eq!(*v, 0.0);
            }
        }
        let loo = leave_one_out_memorization(&data, |_, _| Ok(Constant(1)), 1, 0, 64).unwrap();
        assert!(loo.per_sample.iter().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn missing_values_are_flagged() {
        // sample 1 is IN for both models
        let est = MemorizationEstimate::from_ensemble(2, &[true, true, false, true], &[true; 4]).unwrap();
        assert_eq!(est.per_sample, vec![Some(0.0), None]);
        assert_eq!(est.missing(), 1);
        assert_eq!(est.bins(), vec![Some(0), None]);
    }

    #[test]
    fn extremal_leave_one_out() {
        // Learner memorizes exactly its training points and predicts 0
        // elsewhere; every label-1 sample scores 1.
        struct Lookup(Vec<(f64, usize)>);
        impl Predictor for Lookup {
            fn predict_batch(&self, data: &Dataset) -> Result<Vec<usize>> {
                Ok((0..data.len())
                    .map(|i| {
                        self.0
                            .iter()
                            .find(|(x, _)| *x == data.x(i)[0])
                            .map_or(0, |&(_, y)| y)
                    })
                    .collect())
            }
        }
        let data = Dataset::new(vec![0.1, 0.2, 0.3, 0.4], vec![0, 1, 0, 1], 1, 2).unwrap();
        let learner = |d: &Dataset, _| Ok(Lookup((0..d.len()).map(|i| (d.x(i)[0], d.labels()[i])).collect()));
        let loo = leave_one_out_memorization(&data, learner, 3, 0, 64).unwrap();
        assert_eq!(loo.per_sample, vec![Some(0.0), Some(1.0), Some(0.0), Some(1.0)]);
    }

    #[test]
    fn leave_one_out_enforces_bound() {
        let data = Dataset::new(vec![0.5; 10], vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 1, 2).unwrap();
        assert!(matches!(
            leave_one_out_memorization(&data, |_, _| Ok(Constant(0)), 1, 0, 8),
            Err(Error::Usage(_))
        ));
        assert!(estimate_memorization(&data, |_, _| Ok(Constant(0)), 1, 0.5, 0).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[2.0, 5.0, 9.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): sxy 4.5, sxx 4.5, syy 5
        let rho = spearman(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert!((rho - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
        assert!((rho - 0.9487).abs() < 1e-4);
        assert!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(spearman(&x, &[1.0]).is_err());
    }

    #[test]
    fn bin_examples() {
        assert_eq!(bin_assign(0.0).unwrap(), 0);
        assert_eq!(bin_assign(1.0).unwrap(), 21);
        assert_eq!(bin_assign(0.04).unwrap(), 1);
        assert_eq!(bin_assign(1e-300).unwrap(), 1);
        for k in 1..=21 {
            assert_eq!(bin_assign(k as f64 / 21.0).unwrap(), k, "boundary {k}/21");
        }
        assert!(bin_assign(1.0 + 1e-12).is_err());
        assert_eq!(bin_assign(-0.1).unwrap(), 0);
        assert!(bin_assign(-1.5).is_err());
    }

    proptest! {
        #[test]
        fn bins_partition_unit_interval(m in 0.0f64..=1.0) {
            let k = bin_assign(m).unwrap();
            if k == 0 {
                prop_assert!(m == 0.0);
            } else {
                prop_assert!(m > (k - 1) as f64 / 21.0 && m <= k as f64 / 21.0);
            }
        }

        #[test]
        fn spearman_symmetric_and_rank_invariant(
            pts in prop::collection::vec((-100f64..100.0, -100f64..100.0), 3..30),
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-12);
                let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
                prop_assert!((spearman(&tx, &y).unwrap() - a).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
