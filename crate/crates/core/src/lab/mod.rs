//! Experiment orchestration: configuration, shadow runs, attacks, reports
//! and sweeps, all persisted as CSV plus a checksummed manifest.

pub mod attack;
pub mod config;
pub mod manifest;
pub mod memorize;
pub mod report;
pub mod shadow;
pub mod sweep;

use std::fs::File;
use std::path::Path;

pub use attack::{run_attack, AttackRow, AttackSummaryRow};
pub use config::{ExperimentConfig, QueryMode};
pub use manifest::Manifest;
pub use memorize::{read_memorization_dump, run_memorize, MemRow};
pub use report::{run_report, ReportOutput};
pub use shadow::{load_shadow, run_shadow, ModelSummary, ShadowRun};
pub use sweep::run_sweep;

use crate::error::{Error, Result};
use crate::trainers;

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Reader that skips `#` comment lines.
pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// Runs `f` on a pool of `workers` threads (`0` = one per core).
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

/// Writes the configured dataset to `dir/dataset.csv`.
pub fn run_gen_data(config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    create_dir(dir)?;
    let data = config.data.load()?;
    data.write_csv(dir.join(shadow::DATASET))?;
    let mut manifest = Manifest::new("data", config.hash(), data.fingerprint());
    manifest.seeds.insert("data".into(), config.data.seed);
    manifest.record_file(dir, shadow::DATASET)?;
    manifest.save(dir)?;
    Ok(manifest)
}

/// Trains one model on the full dataset; writes `model.ckpt` and
/// `history.csv` (with per-epoch robust accuracy).
pub fn run_train(config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    create_dir(dir)?;
    let data = config.data.load()?;
    let mut tc = config.train.clone();
    tc.track_robust = true;
    let (model, history) = trainers::train(&tc, &config.model, &data)?;
    model.save_checkpoint(dir.join("model.ckpt"))?;
    manifest::write_atomic(&dir.join("history.csv"), history.to_csv().as_bytes())?;
    manifest::write_atomic(&dir.join(shadow::CONFIG), config.canonical().as_bytes())?;
    let mut manifest = Manifest::new("train", config.hash(), data.fingerprint());
    manifest.seeds.insert("data".into(), config.data.seed);
    manifest.seeds.insert("train".into(), config.train.seed);
    for f in ["model.ckpt", "history.csv", shadow::CONFIG] {
        manifest.record_file(dir, f)?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}
