//! Plain key=value configuration with typed validation.
//!
//! Precedence: built-in defaults < config file < `--set key=value` overrides.
//! The canonical serialization (sorted key=value lines) is embedded in every
//! checkpoint and hashed into the config fingerprint.

use fewshot_core::episodes::Normalization;
use fewshot_core::model::Aggregate;
use fewshot_core::objective::{FixedWeights, LossKind, WeightMode};
use fewshot_core::streams::StreamSet;
use fewshot_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    pairs: BTreeMap<String, String>,

    pub precision: Precision,
    pub seed: u64,

    pub dataset_root: PathBuf,
    pub dataset_manifest: Option<PathBuf>,
    pub image_size: usize,
    pub channels: usize,
    pub norm: Normalization,

    pub ways: usize,
    pub shots: usize,
    pub train_queries: usize,

    pub augment_rotations: bool,
    pub augment_flip_jitter: bool,

    pub streams: StreamSet,
    pub aggregate: Aggregate,
    pub mi_dense: bool,

    pub loss_kind: LossKind,
    pub weight_mode: WeightMode,
    pub fixed_weights: FixedWeights,

    pub lr: f64,
    pub iterations: u64,
    pub lr_interval: u64,
    pub batch_episodes: usize,
    pub eval_interval: u64,
    pub val_episodes: usize,

    pub eval_episodes: usize,
    pub eval_queries: usize,
}

fn defaults() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: &str| m.insert(k.to_string(), v.to_string());
    put("precision", "f64");
    put("seed", "0");
    put("dataset.root", "");
    put("dataset.manifest", "");
    put("dataset.image_size", "24");
    put("dataset.channels", "1");
    put("dataset.norm_mean", "0.5");
    put("dataset.norm_std", "0.5");
    put("episode.ways", "5");
    put("episode.shots", "1");
    put("episode.queries", "19");
    put("augment.rotations", "false");
    put("augment.flip_jitter", "false");
    put("streams.enabled", "app,corrC,corrD,mi");
    put("model.aggregate", "sum");
    put("model.mi_dense", "false");
    put("loss.kind", "mse");
    put("weights.mode", "learned");
    put("weights.fixed", "1,1,1,1");
    put("train.lr", "0.001");
    put("train.iterations", "2000");
    put("train.lr_interval", "2000");
    put("train.batch_episodes", "1");
    put("train.eval_interval", "500");
    put("train.eval_episodes", "100");
    put("eval.episodes", "600");
    put("eval.queries", "5");
    m
}

fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn from_sources(
        file: Option<&Path>,
        overrides: &[(String, String)],
        seed_flag: Option<u64>,
    ) -> Result<Config> {
        let mut pairs = defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v) in parse_kv_text(&text)? {
                if !pairs.contains_key(&k) {
                    return Err(Error::Config(format!("unknown config key '{k}'")));
                }
                pairs.insert(k, v);
            }
        }
        for (k, v) in overrides {
            if !pairs.contains_key(k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            pairs.insert(k.clone(), v.clone());
        }
        if let Some(seed) = seed_flag {
            pairs.insert("seed".into(), seed.to_string());
        }
        Self::from_pairs(pairs)
    }

    pub fn from_text(text: &str) -> Result<Config> {
        let mut pairs = defaults();
        for (k, v) in parse_kv_text(text)? {
            if !pairs.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            pairs.insert(k, v);
        }
        Self::from_pairs(pairs)
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Config> {
        let mut pairs = self.pairs.clone();
        for (k, v) in overrides {
            if !pairs.contains_key(k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            pairs.insert(k.clone(), v.clone());
        }
        Self::from_pairs(pairs)
    }

    fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Config> {
        let get = |k: &str| pairs.get(k).cloned().unwrap_or_default();
        let as_usize = |k: &str| -> Result<usize> {
            get(k).parse().map_err(|_| Error::Config(format!("bad integer for {k}: '{}'", get(k))))
        };
        let as_u64 = |k: &str| -> Result<u64> {
            get(k).parse().map_err(|_| Error::Config(format!("bad integer for {k}: '{}'", get(k))))
        };
        let as_f64 = |k: &str| -> Result<f64> {
            get(k).parse().map_err(|_| Error::Config(format!("bad number for {k}: '{}'", get(k))))
        };
        let as_bool = |k: &str| -> Result<bool> {
            match get(k).as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config(format!("bad boolean for {k}: '{other}'"))),
            }
        };

        let channels = as_usize("dataset.channels")?;
        let norm = {
            let parse_list = |k: &str| -> Result<Vec<f64>> {
                let raw = get(k);
                let vals: Result<Vec<f64>> = raw
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad number in {k}: '{p}'")))
                    })
                    .collect();
                let mut vals = vals?;
                if vals.len() == 1 && channels > 1 {
                    vals = vec![vals[0]; channels];
                }
                if vals.len() != channels {
                    return Err(Error::Config(format!(
                        "{k} needs 1 or {channels} values, got {}",
                        vals.len()
                    )));
                }
                Ok(vals)
            };
            let std = parse_list("dataset.norm_std")?;
            if std.iter().any(|&s| s <= 0.0) {
                return Err(Error::Config("dataset.norm_std entries must be > 0".into()));
            }
            Normalization { mean: parse_list("dataset.norm_mean")?, std }
        };

        let cfg = Config {
            precision: Precision::parse(&get("precision"))?,
            seed: as_u64("seed")?,
            dataset_root: PathBuf::from(get("dataset.root")),
            dataset_manifest: {
                let m = get("dataset.manifest");
                if m.is_empty() { None } else { Some(PathBuf::from(m)) }
            },
            image_size: as_usize("dataset.image_size")?,
            channels,
            norm,
            ways: as_usize("episode.ways")?,
            shots: as_usize("episode.shots")?,
            train_queries: as_usize("episode.queries")?,
            augment_rotations: as_bool("augment.rotations")?,
            augment_flip_jitter: as_bool("augment.flip_jitter")?,
            streams: StreamSet::parse(&get("streams.enabled"))?,
            aggregate: Aggregate::parse(&get("model.aggregate"))?,
            mi_dense: as_bool("model.mi_dense")?,
            loss_kind: LossKind::parse(&get("loss.kind"))?,
            weight_mode: WeightMode::parse(&get("weights.mode"))?,
            fixed_weights: FixedWeights::parse(&get("weights.fixed"))?,
            lr: as_f64("train.lr")?,
            iterations: as_u64("train.iterations")?,
            lr_interval: as_u64("train.lr_interval")?,
            batch_episodes: as_usize("train.batch_episodes")?,
            eval_interval: as_u64("train.eval_interval")?,
            val_episodes: as_usize("train.eval_episodes")?,
            eval_episodes: as_usize("eval.episodes")?,
            eval_queries: as_usize("eval.queries")?,
            pairs,
        };

        if cfg.iterations == 0 {
            return Err(Error::Config("train.iterations must be > 0".into()));
        }
        if cfg.lr <= 0.0 {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if cfg.lr_interval == 0 {
            return Err(Error::Config("train.lr_interval must be > 0".into()));
        }
        if cfg.ways == 0 || cfg.shots == 0 || cfg.train_queries == 0 || cfg.eval_queries == 0 {
            return Err(Error::Config("episode ways/shots/queries must be > 0".into()));
        }
        if cfg.batch_episodes == 0 {
            return Err(Error::Config("train.batch_episodes must be > 0".into()));
        }
        if cfg.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "dataset.image_size {} must be divisible by 4",
                cfg.image_size
            )));
        }
        Ok(cfg)
    }

    /// Canonical sorted key=value serialization.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    /// FNV-1a hash of the canonical serialization.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset_manifest
            .clone()
            .unwrap_or_else(|| self.dataset_root.join("splits.txt"))
    }

    /// Learning rate for 1-based iteration `i`: halved every lr_interval.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr * 0.5f64.powi((iteration / self.lr_interval) as i32)
    }

    pub fn model_config(&self) -> fewshot_core::ModelConfig {
        fewshot_core::ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            streams: self.streams,
            mi_dense: self.mi_dense,
            aggregate: self.aggregate,
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parse one `--set key=value` argument.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{arg}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_fingerprint_is_stable() {
        let a = Config::from_sources(None, &[], None).unwrap();
        let b = Config::from_sources(None, &[], None).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.ways, 5);
        assert_eq!(a.precision, Precision::F64);
    }

    #[test]
    fn overrides_change_fingerprint() {
        let a = Config::from_sources(None, &[], None).unwrap();
        let b = Config::from_sources(None, &[("episode.ways".into(), "20".into())], None).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(b.ways, 20);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = Config::from_sources(None, &[("episode.wayz".into(), "5".into())], None);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn text_roundtrip() {
        let a = Config::from_sources(None, &[("train.lr".into(), "0.01".into())], Some(42)).unwrap();
        let b = Config::from_text(&a.to_text()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(b.seed, 42);
        assert_eq!(b.lr, 0.01);
    }

    #[test]
    fn lr_schedule_halves_at_interval() {
        let cfg = Config::from_sources(
            None,
            &[
                ("train.lr".into(), "0.001".into()),
                ("train.lr_interval".into(), "100".into()),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.lr_at(1), 0.001);
        assert_eq!(cfg.lr_at(99), 0.001);
        assert_eq!(cfg.lr_at(100), 0.0005);
        assert_eq!(cfg.lr_at(199), 0.0005);
        assert_eq!(cfg.lr_at(200), 0.00025);
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(Config::from_sources(None, &[("train.iterations".into(), "0".into())], None).is_err());
        assert!(Config::from_sources(None, &[("train.lr".into(), "-1".into())], None).is_err());
        assert!(Config::from_sources(None, &[("dataset.image_size".into(), "25".into())], None).is_err());
        assert!(Config::from_sources(None, &[("streams.enabled".into(), "".into())], None).is_err());
    }
}
