//! Memorization dump: `sample_id,mem_estimate,in_count,out_count,bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::shadow::load_shadow;
use super::{csv_reader, csv_writer};
use crate::error::{Error, Result};
use crate::memorization::MemorizationEstimate;

pub const MEM_DUMP: &str = "memorization.csv";

/// One dump row; `mem_estimate` and `bin` are empty when a sample lacks IN
/// or OUT models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRow {
    pub sample_id: usize,
    pub mem_estimate: Option<f64>,
    pub in_count: usize,
    pub out_count: usize,
    pub bin: Option<usize>,
}

pub fn memorization_rows(est: &MemorizationEstimate) -> Vec<MemRow> {
    est.bins()
        .into_iter()
        .enumerate()
        .map(|(i, bin)| MemRow {
            sample_id: i,
            mem_estimate: est.per_sample[i],
            in_count: est.in_counts[i],
            out_count: est.out_counts[i],
            bin,
        })
        .collect()
}

pub fn write_memorization_dump(est: &MemorizationEstimate, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in memorization_rows(est) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_memorization_dump(path: &Path) -> Result<Vec<MemRow>> {
    let rows: Vec<MemRow> = csv_reader(path)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for (i, r) in rows.iter().enumerate() {
        if r.sample_id != i {
            return Err(Error::Format(format!("{}: row {} has sample_id {}", path.display(), i + 1, r.sample_id)));
        }
    }
    Ok(rows)
}

/// Subsampled memorization scores from a finished shadow run, written to
/// `dir/memorization.csv`.
pub fn run_memorize(dir: &Path) -> Result<MemorizationEstimate> {
    let run = load_shadow(dir)?;
    let est = MemorizationEstimate::from_ensemble(run.n_models(), run.ensemble.membership(), &run.correct)?;
    if est.missing() > 0 {
        log::warn!("{} samples lack IN or OUT models; their estimates are empty", est.missing());
    }
    if est.clamped() > 0 {
        log::info!("{} negative estimates binned as 0", est.clamped());
    }
    write_memorization_dump(&est, &dir.join(MEM_DUMP))?;
    let mut manifest = run.manifest;
    manifest.record_file(dir, MEM_DUMP)?;
    manifest.save(dir)?;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_keeps_missing_values() {
        let est = MemorizationEstimate::from_ensemble(2, &[true, true, false, true], &[true, false, false, true]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MEM_DUMP);
        write_memorization_dump(&est, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "sample_id,mem_estimate,in_count,out_count,bin\n0,1.0,1,1,21\n1,,2,0,\n");
        let rows = read_memorization_dump(&path).unwrap();
        assert_eq!(rows, memorization_rows(&est));
    }
}
