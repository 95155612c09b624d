//! Flat `section.key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attacks::AttackParams;
use crate::data::{self, Dataset, DatasetKind};
use crate::error::{ensure, Error, Result};
use crate::mia::AttackMethod;
use crate::models::ModelConfig;
use crate::trainers::{DpConfig, TrainConfig, TrainMethod};

/// Every accepted key with its default (`""` = unset) and a one-line summary.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.kind", "two_gaussians", "two_gaussians, rings or xor_grid"),
    ("data.n", "2000", "number of generated samples"),
    ("data.noise", "1", "generator noise scale"),
    ("data.seed", "0", "generator seed"),
    ("data.csv", "", "load this CSV instead of generating"),
    ("model.layer_widths", "2,32,32,2", "MLP widths, input to output"),
    ("train.method", "pgd_at", "standard, pgd_at or trades"),
    ("train.epochs", "20", "passes over each training subset"),
    ("train.batch_size", "32", "mini-batch size"),
    ("train.learning_rate", "0.05", "SGD step size"),
    ("train.momentum", "0.9", "heavy-ball momentum"),
    ("train.demem_lambda", "0", "weight of the loss-variance penalty"),
    ("train.trades_beta", "6", "TRADES robustness weight"),
    ("train.seed", "0", "experiment seed; model m uses mix(seed, m)"),
    ("attack.epsilon", "0.05", "L-infinity radius for training and evaluation"),
    ("attack.steps", "10", "inner PGD steps during training"),
    ("attack.step_size", "", "inner PGD step (default epsilon/4)"),
    ("attack.random_start", "true", "uniform start inside the ball"),
    ("eval.steps", "20", "PGD steps for robust accuracy"),
    ("eval.step_size", "", "evaluation PGD step (default epsilon/8)"),
    ("eval.random_start", "true", "uniform start for evaluation PGD"),
    ("dp.enabled", "false", "train with DP-SGD"),
    ("dp.noise_multiplier", "0.05", "noise std as a multiple of the clip norm"),
    ("dp.clip_norm", "10", "per-sample gradient L2 bound"),
    ("ensemble.n_models", "32", "shadow models"),
    ("ensemble.inclusion_prob", "0.5", "Bernoulli inclusion probability"),
    ("mia.methods", "lira_online,lira_offline,loss", "attacks to run"),
    ("mia.fpr_targets", "0.01,0.001", "false-positive rates to report"),
    ("mia.query", "natural", "natural or adversarial inputs when querying"),
    ("output.dir", "", "default output directory"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Natural,
    Adversarial,
}

impl QueryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Natural => "natural",
            QueryMode::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub csv: Option<PathBuf>,
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match &self.csv {
            Some(path) => data::load_csv(path),
            None => data::generate_dataset(self.kind, self.n, self.noise, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub n_models: usize,
    pub inclusion_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiaSpec {
    pub methods: Vec<AttackMethod>,
    pub fpr_targets: Vec<f64>,
    pub query: QueryMode,
}

/// Parsed configuration. Holds the raw entries so single keys can be
/// overridden and the whole thing re-validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: AttackParams,
    pub ensemble: EnsembleSpec,
    pub mia: MiaSpec,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_entries(BTreeMap::new()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            let key = key.trim();
            if !is_known(key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Self::from_entries(entries)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Returns a copy with `key` set to `value`, fully re-validated.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        ensure!(is_known(key), Config, "unknown key {key:?}");
        let mut entries = self.entries.clone();
        entries.insert(key.to_string(), value.trim().to_string());
        Self::from_entries(entries)
    }

    /// Raw value of `key` as written (or its default).
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|k| k.0 == key).map(|k| k.1))
    }

    fn from_entries(entries: BTreeMap<String, String>) -> Result<Self> {
        let r = Reader { entries: &entries };
        let data = DataSpec {
            kind: r.parse_with("data.kind", |s| s.parse::<DatasetKind>().map_err(|e| e.to_string()))?,
            n: r.num("data.n")?,
            noise: r.num("data.noise")?,
            seed: r.num("data.seed")?,
            csv: r.opt("data.csv").map(PathBuf::from),
        };
        let model = ModelConfig::mlp(r.list("model.layer_widths")?);
        let epsilon: f64 = r.num("attack.epsilon")?;
        let attack = AttackParams {
            epsilon,
            steps: r.num("attack.steps")?,
            step_size: r.opt_num("attack.step_size")?.unwrap_or(epsilon / 4.0),
            random_start: r.num("attack.random_start")?,
        };
        let eval = AttackParams {
            epsilon,
            steps: r.num("eval.steps")?,
            step_size: r.opt_num("eval.step_size")?.unwrap_or(epsilon / 8.0),
            random_start: r.num("eval.random_start")?,
        };
        let train = TrainConfig {
            method: r.parse_with("train.method", |s| s.parse::<TrainMethod>().map_err(|e| e.to_string()))?,
            epochs: r.num("train.epochs")?,
            batch_size: r.num("train.batch_size")?,
            learning_rate: r.num("train.learning_rate")?,
            momentum: r.num("train.momentum")?,
            demem_lambda: r.num("train.demem_lambda")?,
            trades_beta: r.num("train.trades_beta")?,
            attack,
            dp: DpConfig {
                enabled: r.num("dp.enabled")?,
                noise_multiplier: r.num("dp.noise_multiplier")?,
                clip_norm: r.num("dp.clip_norm")?,
            },
            seed: r.num("train.seed")?,
            track_robust: false,
        };
        let ensemble = EnsembleSpec {
            n_models: r.num("ensemble.n_models")?,
            inclusion_prob: r.num("ensemble.inclusion_prob")?,
        };
        let methods = r
            .raw("mia.methods")
            .split(',')
            .map(|s| s.trim().parse::<AttackMethod>())
            .collect::<Result<Vec<_>>>()?;
        let query = match r.raw("mia.query") {
            "natural" => QueryMode::Natural,
            "adversarial" => QueryMode::Adversarial,
            other => return Err(Error::Config(format!("mia.query: expected natural or adversarial, got {other:?}"))),
        };
        let cfg = Self {
            mia: MiaSpec {
                methods,
                fpr_targets: r.list("mia.fpr_targets")?,
                query,
            },
            output_dir: r.opt("output.dir").map(PathBuf::from),
            entries,
            data,
            model,
            train,
            eval,
            ensemble,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.data.n >= 4, Config, "data.n must be at least 4");
        ensure!(
            self.data.noise >= 0.0 && self.data.noise.is_finite(),
            Config,
            "data.noise must be non-negative"
        );
        self.model.validate()?;
        self.train.validate().map_err(as_config)?;
        self.eval.validate().map_err(as_config)?;
        ensure!(self.ensemble.n_models >= 2, Config, "ensemble.n_models must be at least 2");
        let p = self.ensemble.inclusion_prob;
        ensure!(p > 0.0 && p < 1.0, Config, "ensemble.inclusion_prob must lie in (0, 1)");
        ensure!(!self.mia.methods.is_empty(), Config, "mia.methods is empty");
        ensure!(
            !self.mia.fpr_targets.is_empty() && self.mia.fpr_targets.iter().all(|f| *f > 0.0 && *f < 1.0),
            Config,
            "mia.fpr_targets must be non-empty and inside (0, 1)"
        );
        Ok(())
    }

    /// Every key, sorted, one `key=value` per line. Explicit entries keep
    /// their spelling; defaults and derived values are filled in.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let join = |v: Vec<String>| v.join(",");
        let resolved: BTreeMap<&str, String> = [
            ("data.kind", self.data.kind.as_str().to_string()),
            ("data.n", self.data.n.to_string()),
            ("data.noise", self.data.noise.to_string()),
            ("data.seed", self.data.seed.to_string()),
            (
                "data.csv",
                self.data.csv.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            (
                "model.layer_widths",
                join(self.model.layer_widths.iter().map(|w| w.to_string()).collect()),
            ),
            ("train.method", t.method.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.demem_lambda", t.demem_lambda.to_string()),
            ("train.trades_beta", t.trades_beta.to_string()),
            ("train.seed", t.seed.to_string()),
            ("attack.epsilon", t.attack.epsilon.to_string()),
            ("attack.steps", t.attack.steps.to_string()),
            ("attack.step_size", t.attack.step_size.to_string()),
            ("attack.random_start", t.attack.random_start.to_string()),
            ("eval.steps", self.eval.steps.to_string()),
            ("eval.step_size", self.eval.step_size.to_string()),
            ("eval.random_start", self.eval.random_start.to_string()),
            ("dp.enabled", t.dp.enabled.to_string()),
            ("dp.noise_multiplier", t.dp.noise_multiplier.to_string()),
            ("dp.clip_norm", t.dp.clip_norm.to_string()),
            ("ensemble.n_models", self.ensemble.n_models.to_string()),
            ("ensemble.inclusion_prob", self.ensemble.inclusion_prob.to_string()),
            ("mia.methods", join(self.mia.methods.iter().map(|m| m.to_string()).collect())),
            ("mia.fpr_targets", join(self.mia.fpr_targets.iter().map(|f| f.to_string()).collect())),
            ("mia.query", self.mia.query.as_str().to_string()),
            (
                "output.dir",
                self.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]
        .into_iter()
        .collect();
        let mut out = String::new();
        for (k, v) in resolved {
            // Values written explicitly are kept verbatim so reports echo them.
            let v = self.entries.get(k).map(String::as_str).unwrap_or(&v);
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// sha256 of the canonical form without `output.dir`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.canonical().lines().filter(|l| !l.starts_with("output.dir=")) {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|k| k.0 == key)
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Input(m) => Error::Config(m),
        other => other,
    }
}

struct Reader<'a> {
    entries: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.entries
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| KEYS.iter().find(|k| k.0 == key).expect("known key").1)
    }

    fn opt(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|s| !s.is_empty())
    }

    fn parse_with<T>(&self, key: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        f(self.raw(key)).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn opt_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.opt(key).map(|_| self.num(key)).transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_form() {
        let d = ExperimentConfig::default();
        assert_eq!(d.ensemble.n_models, 32);
        assert_eq!(d.mia.fpr_targets, vec![0.01, 0.001]);
        assert_eq!(d.train.attack.step_size, 0.05 / 4.0);
        let again = ExperimentConfig::parse(&d.canonical()).unwrap();
        assert_eq!(again.canonical(), d.canonical());
        assert_eq!(again.hash(), d.hash());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = ExperimentConfig::parse(
            "# comment\ntrain.method = trades\n\nensemble.n_models=4 # four\ndp.enabled=true\n",
        )
        .unwrap();
        assert_eq!(c.train.method, TrainMethod::Trades);
        assert_eq!(c.ensemble.n_models, 4);
        assert!(c.train.dp.enabled);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "train.bogus=1",
            "train.epochs=abc",
            "train.method=sgd",
            "ensemble.n_models=1",
            "no equals sign",
            "data.n=10\ndata.n=20",
            "mia.query=both",
            "mia.fpr_targets=0",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = ExperimentConfig::default();
        let b = a.with("output.dir", "/tmp/x").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = a.with("train.demem_lambda", "0.2").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(c.get("train.demem_lambda"), Some("0.2"));
    }
}
