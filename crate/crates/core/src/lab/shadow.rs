//! Shadow-ensemble training and its on-disk artifacts.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json      config hash, seeds, completed models, checksums
//! config.txt         canonical configuration
//! dataset.csv        the (normalized) sample universe
//! membership.csv     model_id,membership (one 0/1 character per sample)
//! confidences.csv    model_id,sample_id,is_member,true_label,confidence
//! predictions.csv    model_id,sample_id,correct
//! models.csv         per-model accuracy and loss statistics
//! models/            model_XXXX.ckpt
//! history/           model_XXXX.csv training histories
//! parts/             per-model partial outputs merged by the finalizer
//! ```

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, QueryMode};
use super::manifest::{write_atomic, Manifest};
use super::{create_dir, csv_reader, csv_writer};
use crate::attacks;
use crate::data::{self, Dataset};
use crate::error::{ensure, Error, Result};
use crate::loss;
use crate::mia::ShadowEnsemble;
use crate::seed::{self, stream};
use crate::trainers;

pub const CONFIDENCES: &str = "confidences.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const MEMBERSHIP: &str = "membership.csv";
pub const MODELS: &str = "models.csv";
pub const CONFIG: &str = "config.txt";
pub const DATASET: &str = "dataset.csv";

/// Per-model statistics; accuracies are measured on the model's non-members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: usize,
    pub seed: u64,
    pub n_train: usize,
    pub nat_acc: f64,
    pub rob_acc: f64,
    /// Mean mini-batch loss variance over the final epoch.
    pub final_psi: f64,
    pub final_mean_loss: f64,
    /// Variance of clean per-sample losses over the training subset.
    pub member_loss_var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PartRow {
    model_id: usize,
    sample_id: usize,
    is_member: u8,
    true_label: usize,
    confidence: f64,
    correct: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfidenceRow {
    model_id: usize,
    sample_id: usize,
    is_member: u8,
    true_label: usize,
    confidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    model_id: usize,
    sample_id: usize,
    correct: u8,
}

/// Seed of shadow model `m`.
pub fn model_seed(config: &ExperimentConfig, m: usize) -> u64 {
    seed::mix(config.train.seed, m as u64)
}

/// Training mask of shadow model `m` over a universe of `n` samples.
pub fn model_membership(config: &ExperimentConfig, m: usize, n: usize) -> Result<Vec<bool>> {
    let s = seed::mix(model_seed(config, m), stream::MEMBERSHIP);
    data::sample_membership(n, config.ensemble.inclusion_prob, s)
}

fn part_name(m: usize) -> String {
    format!("parts/model_{m:04}.csv")
}

fn meta_name(m: usize) -> String {
    format!("parts/model_{m:04}.json")
}

fn ckpt_name(m: usize) -> String {
    format!("models/model_{m:04}.ckpt")
}

fn history_name(m: usize) -> String {
    format!("history/model_{m:04}.csv")
}

/// Trains every shadow model not yet recorded as complete, then merges the
/// per-model outputs. Reruns with the same configuration only redo the merge;
/// a different configuration in a non-empty directory is a conflict.
pub fn run_shadow(config: &ExperimentConfig, dir: &Path, workers: usize) -> Result<Manifest> {
    let data = config.data.load()?;
    ensure!(
        config.model.input_dim() == data.dim() && config.model.n_classes() >= data.n_classes(),
        Config,
        "model.layer_widths {:?} do not fit data with {} features and {} classes",
        config.model.layer_widths,
        data.dim(),
        data.n_classes()
    );
    for sub in ["", "models", "history", "parts"] {
        create_dir(&dir.join(sub))?;
    }
    let hash = config.hash();
    let mut manifest = match Manifest::load(dir)? {
        Some(m) if m.config_hash != hash => {
            return Err(Error::Conflict(format!(
                "{} holds a run with config hash {}, refusing to mix with {hash}",
                dir.display(),
                m.config_hash
            )))
        }
        Some(m) => m,
        None => Manifest::new("shadow", hash, data.fingerprint()),
    };
    manifest.seeds.insert("data".into(), config.data.seed);
    manifest.seeds.insert("train".into(), config.train.seed);
    for m in 0..config.ensemble.n_models {
        manifest.seeds.insert(format!("model_{m:04}"), model_seed(config, m));
    }
    write_atomic(&dir.join(CONFIG), config.canonical().as_bytes())?;
    data.write_csv(dir.join(DATASET))?;
    manifest.record_file(dir, CONFIG)?;
    manifest.record_file(dir, DATASET)?;
    manifest.save(dir)?;

    let pending: Vec<usize> = (0..config.ensemble.n_models)
        .filter(|m| !is_complete(&manifest, dir, *m))
        .collect();
    if pending.len() < config.ensemble.n_models {
        log::info!(
            "{}: {} of {} models already complete",
            dir.display(),
            config.ensemble.n_models - pending.len(),
            config.ensemble.n_models
        );
    }
    let manifest = Mutex::new(manifest);
    super::with_workers(workers, || {
        pending.par_iter().try_for_each(|&m| {
            train_member(config, &data, dir, m)?;
            let mut man = manifest.lock().expect("manifest lock");
            for rel in [ckpt_name(m), history_name(m), part_name(m), meta_name(m)] {
                man.record_file(dir, &rel)?;
            }
            man.completed_models.push(m);
            man.completed_models.sort_unstable();
            man.save(dir)?;
            log::info!("shadow model {m} done");
            Ok(())
        })
    })?;
    let mut manifest = manifest.into_inner().expect("manifest lock");
    finalize(config, &data, dir, &mut manifest)?;
    Ok(manifest)
}

fn is_complete(manifest: &Manifest, dir: &Path, m: usize) -> bool {
    manifest.completed_models.contains(&m)
        && [ckpt_name(m), history_name(m), part_name(m), meta_name(m)]
            .iter()
            .all(|rel| manifest.verify_file(dir, rel).is_ok())
}

fn train_member(config: &ExperimentConfig, data: &Dataset, dir: &Path, m: usize) -> Result<()> {
    let n = data.len();
    let seed = model_seed(config, m);
    let mask = model_membership(config, m, n)?;
    let members: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let outsiders: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let train_set = data.subset(&members)?;
    let mut tc = config.train.clone();
    tc.seed = seed;
    let (model, history) = trainers::train(&tc, &config.model, &train_set)?;

    let x = data.inputs();
    let eval_seed = seed::mix(seed, stream::EVAL);
    let query = match config.mia.query {
        QueryMode::Natural => x.clone(),
        QueryMode::Adversarial => {
            let mut rng = seed::rng(seed::mix(eval_seed, 1));
            attacks::pgd(&model, &x, data.labels(), &config.eval, &mut rng)?
        }
    };
    let probs = loss::softmax(&model.forward(&query)?)?;
    let predicted = model.predict(&x)?;
    let k = probs.cols();

    let mut w = csv_writer(&dir.join(part_name(m)))?;
    for i in 0..n {
        let y = data.labels()[i];
        w.serialize(PartRow {
            model_id: m,
            sample_id: i,
            is_member: mask[i] as u8,
            true_label: y,
            confidence: probs.values()[i * k + y],
            correct: (predicted[i] == y) as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io(dir.join(part_name(m)), e))?;

    let (nat_acc, rob_acc) = if outsiders.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let test = data.subset(&outsiders)?;
        (
            attacks::natural_accuracy(&model, &test)?,
            attacks::robust_accuracy(&model, &test, &config.eval, eval_seed)?,
        )
    };
    let member_losses = loss::softmax_cross_entropy(&model.forward(&train_set.inputs())?, train_set.labels())?;
    let last = history.last().expect("at least one epoch");
    let summary = ModelSummary {
        model_id: m,
        seed,
        n_train: members.len(),
        nat_acc,
        rob_acc,
        final_psi: last.psi,
        final_mean_loss: last.mean_loss,
        member_loss_var: loss::batch_variance(member_losses.per_sample())?,
    };
    model.save_checkpoint(dir.join(ckpt_name(m)))?;
    write_atomic(&dir.join(history_name(m)), history.to_csv().as_bytes())?;
    // The meta file is written last; its presence marks the model complete.
    write_atomic(&dir.join(meta_name(m)), serde_json::to_string_pretty(&summary)?.as_bytes())
}

/// Merges part files in model order into the run-level CSVs.
fn finalize(config: &ExperimentConfig, data: &Dataset, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let n = data.len();
    let mut conf = csv_writer(&dir.join(CONFIDENCES))?;
    let mut pred = csv_writer(&dir.join(PREDICTIONS))?;
    let mut memb = csv_writer(&dir.join(MEMBERSHIP))?;
    let mut models = csv_writer(&dir.join(MODELS))?;
    memb.write_record(["model_id", "membership"])?;
    for m in 0..config.ensemble.n_models {
        manifest.verify_file(dir, &part_name(m))?;
        manifest.verify_file(dir, &meta_name(m))?;
        let mut bits = String::with_capacity(n);
        let mut rows = 0;
        for row in csv_reader(&dir.join(part_name(m)))?.deserialize() {
            let r: PartRow = row?;
            ensure!(
                r.model_id == m && r.sample_id == rows,
                Format,
                "{}: rows out of order",
                part_name(m)
            );
            bits.push(if r.is_member == 1 { '1' } else { '0' });
            conf.serialize(ConfidenceRow {
                model_id: m,
                sample_id: r.sample_id,
                is_member: r.is_member,
                true_label: r.true_label,
                confidence: r.confidence,
            })?;
            pred.serialize(PredictionRow {
                model_id: m,
                sample_id: r.sample_id,
                correct: r.correct,
            })?;
            rows += 1;
        }
        ensure!(rows == n, Format, "{}: expected {n} rows, found {rows}", part_name(m));
        memb.write_record([m.to_string(), bits])?;
        let meta_path = dir.join(meta_name(m));
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let summary: ModelSummary = serde_json::from_str(&text)?;
        models.serialize(summary)?;
    }
    for (w, name) in [(conf, CONFIDENCES), (pred, PREDICTIONS), (memb, MEMBERSHIP), (models, MODELS)] {
        let mut w = w;
        w.flush().map_err(|e| Error::io(dir.join(name), e))?;
        manifest.record_file(dir, name)?;
    }
    manifest.save(dir)
}

/// A completed shadow run loaded back from disk.
#[derive(Debug, Clone)]
pub struct ShadowRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub config: ExperimentConfig,
    pub ensemble: ShadowEnsemble,
    pub labels: Vec<usize>,
    /// `M×S` natural-input correctness, row-major by model.
    pub correct: Vec<bool>,
    pub models: Vec<ModelSummary>,
}

impl ShadowRun {
    pub fn n_models(&self) -> usize {
        self.ensemble.n_models()
    }

    pub fn n_samples(&self) -> usize {
        self.ensemble.n_samples()
    }
}

/// Loads a finished run, refusing files whose checksums changed.
pub fn load_shadow(dir: &Path) -> Result<ShadowRun> {
    let manifest = Manifest::require(dir)?;
    for name in [CONFIG, CONFIDENCES, PREDICTIONS, MODELS] {
        if !dir.join(name).exists() {
            return Err(Error::io(
                dir.join(name),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing shadow output"),
            ));
        }
        manifest.verify_file(dir, name)?;
    }
    let config = ExperimentConfig::from_file(dir.join(CONFIG))?;
    let m_count = config.ensemble.n_models;
    let mut confidences = Vec::new();
    let mut membership = Vec::new();
    let mut labels = Vec::new();
    for (k, row) in csv_reader(&dir.join(CONFIDENCES))?.deserialize().enumerate() {
        let r: ConfidenceRow = row?;
        if r.model_id == 0 {
            ensure!(r.sample_id == labels.len(), Format, "{CONFIDENCES}: row {} out of order", k + 1);
            labels.push(r.true_label);
        }
        confidences.push(r.confidence);
        membership.push(r.is_member == 1);
    }
    let n = labels.len();
    ensure!(
        n > 0 && confidences.len() == m_count * n,
        Format,
        "{CONFIDENCES}: expected {m_count}×{n} rows, found {}",
        confidences.len()
    );
    let mut correct = Vec::with_capacity(m_count * n);
    for row in csv_reader(&dir.join(PREDICTIONS))?.deserialize() {
        let r: PredictionRow = row?;
        correct.push(r.correct == 1);
    }
    ensure!(correct.len() == m_count * n, Format, "{PREDICTIONS}: wrong row count");
    let models = csv_reader(&dir.join(MODELS))?
        .deserialize()
        .collect::<std::result::Result<Vec<ModelSummary>, _>>()?;
    ensure!(models.len() == m_count, Format, "{MODELS}: wrong row count");
    Ok(ShadowRun {
        dir: dir.to_path_buf(),
        ensemble: ShadowEnsemble::new(m_count, n, membership, confidences)
            .map_err(|e| Error::Format(format!("{CONFIDENCES}: {e}")))?,
        manifest,
        config,
        labels,
        correct,
        models,
    })
}
