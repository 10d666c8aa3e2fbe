//! Harness library behind the `fewshot` binary: configuration, checkpoint
//! format, training loop, evaluation, ablation, feature dumps and the MI
//! consistency probe. Every entry point is generic over the scalar type and
//! dispatched on the `precision` config key.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluator;
pub mod features;
pub mod miprobe;
pub mod trainer;

use config::{Config, Precision};
use evaluator::EvalReport;
use fewshot_core::episodes::{self, ClassDataset, Split, SplitManifest};
use fewshot_core::{Result, Scalar};
use std::path::{Path, PathBuf};

pub fn run_train(cfg: &Config, out_dir: &Path, resume: Option<&Path>) -> Result<trainer::TrainArtifacts> {
    match cfg.precision {
        Precision::F64 => trainer::train::<f64>(cfg, out_dir, resume),
        Precision::F32 => trainer::train::<f32>(cfg, out_dir, resume),
    }
}

/// Load the dataset split named by a checkpoint's config (with overrides
/// already applied by the caller).
pub fn load_split(cfg: &Config, split: Split) -> Result<ClassDataset> {
    let manifest = SplitManifest::load(&cfg.manifest_path())?;
    let mut ds = episodes::load_dataset(&cfg.dataset_root, &manifest, split, cfg.image_size, cfg.channels)?;
    if cfg.augment_rotations {
        ds = episodes::augment_rotations(&ds)?;
    }
    Ok(ds)
}

fn eval_generic<S: Scalar>(
    data: &checkpoint::CheckpointData,
    cfg: &Config,
    split: Split,
    episodes: usize,
) -> Result<EvalReport> {
    let (_, model, _) = trainer::load_model::<S>(data)?;
    let ds = load_split(cfg, split)?;
    evaluator::evaluate(&model, &ds, cfg, cfg.seed, episodes)
}

/// Evaluate a checkpoint. `overrides` are applied on top of the checkpoint's
/// embedded config (seed, episode counts and the like; architecture keys must
/// stay compatible with the stored tensors).
pub fn run_eval(
    checkpoint_path: &Path,
    overrides: &[(String, String)],
    seed: Option<u64>,
    split: Split,
    episodes: Option<usize>,
) -> Result<EvalReport> {
    let data = checkpoint::load(checkpoint_path)?;
    let mut cfg = Config::from_text(&data.config_text)?.with_overrides(overrides)?;
    if let Some(s) = seed {
        cfg = cfg.with_overrides(&[("seed".into(), s.to_string())])?;
    }
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    match cfg.precision {
        Precision::F64 => eval_generic::<f64>(&data, &cfg, split, episodes),
        Precision::F32 => eval_generic::<f32>(&data, &cfg, split, episodes),
    }
}

pub fn run_ablate(cfg: &Config, cells: &[ablate::AblationCell], out_dir: &Path) -> Result<Vec<ablate::AblationRow>> {
    match cfg.precision {
        Precision::F64 => ablate::run_ablation::<f64>(cfg, cells, out_dir),
        Precision::F32 => ablate::run_ablation::<f32>(cfg, cells, out_dir),
    }
}

pub fn run_dump_features(
    checkpoint_path: &Path,
    overrides: &[(String, String)],
    images: &[PathBuf],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let data = checkpoint::load(checkpoint_path)?;
    let cfg = Config::from_text(&data.config_text)?.with_overrides(overrides)?;
    match cfg.precision {
        Precision::F64 => {
            let (_, model, _) = trainer::load_model::<f64>(&data)?;
            features::dump_features(&model, &cfg, images, out_dir)
        }
        Precision::F32 => {
            let (_, model, _) = trainer::load_model::<f32>(&data)?;
            features::dump_features(&model, &cfg, images, out_dir)
        }
    }
}

pub fn run_mi_probe(
    checkpoint_path: &Path,
    overrides: &[(String, String)],
    seed: Option<u64>,
    split: Split,
    episodes: Option<usize>,
) -> Result<f64> {
    let data = checkpoint::load(checkpoint_path)?;
    let mut cfg = Config::from_text(&data.config_text)?.with_overrides(overrides)?;
    if let Some(s) = seed {
        cfg = cfg.with_overrides(&[("seed".into(), s.to_string())])?;
    }
    let episodes = episodes.unwrap_or(100);
    let ds_split = split;
    match cfg.precision {
        Precision::F64 => {
            let (_, model, _) = trainer::load_model::<f64>(&data)?;
            let ds = load_split(&cfg, ds_split)?;
            miprobe::mi_probe(&model, &ds, &cfg, cfg.seed, episodes)
        }
        Precision::F32 => {
            let (_, model, _) = trainer::load_model::<f32>(&data)?;
            let ds = load_split(&cfg, ds_split)?;
            miprobe::mi_probe(&model, &ds, &cfg, cfg.seed, episodes)
        }
    }
}
