//! Episodic training loop: lr schedule, metrics CSV, NaN abort with a
//! diagnostic dump, periodic validation and best-checkpoint retention.

use crate::checkpoint;
use crate::config::Config;
use crate::evaluator;
use fewshot_core::adam::Adam;
use fewshot_core::episodes::{self, ClassDataset, FlipJitter, Split, SplitManifest};
use fewshot_core::objective::stream_index;
use fewshot_core::param::harvest_grads;
use fewshot_core::streams::StreamKind;
use fewshot_core::{Error, FewShotModel, Graph, ParamSet, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str =
    "iter,lr,L_total,L_app,L_corrC,L_corrD,L_mi,s_app,s_corrC,s_corrD,s_mi,val_acc";

// distinct rng streams for init / episode sampling / validation
const INIT_SALT: u64 = 0x1717_c0de_5eed_0001;
const VAL_SALT: u64 = 0x7a11_d5ee_d000_0001;

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub best: Option<PathBuf>,
    pub metrics: PathBuf,
    pub best_val_acc: Option<f64>,
}

/// Load the datasets a training run needs.
pub fn load_splits(cfg: &Config) -> Result<(ClassDataset, Option<ClassDataset>)> {
    let manifest = SplitManifest::load(&cfg.manifest_path())?;
    let mut train = episodes::load_dataset(
        &cfg.dataset_root,
        &manifest,
        Split::Train,
        cfg.image_size,
        cfg.channels,
    )?;
    if cfg.augment_rotations {
        train = episodes::augment_rotations(&train)?;
    }
    let val = if cfg.eval_interval > 0 && !manifest.val.is_empty() {
        let mut ds = episodes::load_dataset(
            &cfg.dataset_root,
            &manifest,
            Split::Val,
            cfg.image_size,
            cfg.channels,
        )?;
        if cfg.augment_rotations {
            ds = episodes::augment_rotations(&ds)?;
        }
        Some(ds)
    } else {
        None
    };
    Ok((train, val))
}

pub fn train<S: Scalar>(
    cfg: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let (train_ds, val_ds) = load_splits(cfg)?;
    train_with_data::<S>(cfg, out_dir, resume, &train_ds, val_ds.as_ref())
}

/// Training loop over pre-loaded datasets (the ablation runner and tests
/// reuse datasets across runs).
pub fn train_with_data<S: Scalar>(
    cfg: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
    train_ds: &ClassDataset,
    val_ds: Option<&ClassDataset>,
) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let mut model: FewShotModel<S> = FewShotModel::new(cfg.model_config(), &mut init_rng)?;
    let mut adam: Adam<S> = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start_iter = 1u64;

    if let Some(path) = resume {
        let data = checkpoint::load(path)?;
        if data.fingerprint != cfg.fingerprint() {
            return Err(Error::Config(
                "resume checkpoint was trained with a different config".into(),
            ));
        }
        checkpoint::restore(&data, &mut model, &mut adam)?;
        rng = ChaCha8Rng::from_seed(data.rng_seed);
        rng.set_word_pos(data.rng_word_pos);
        start_iter = data.iteration + 1;
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };

    let best_path = out_dir.join("best.ckpt");
    let mut best_val: Option<f64> = None;
    let jitter = FlipJitter::default();

    for iter in start_iter..=cfg.iterations {
        let lr = cfg.lr_at(iter);
        let mut g: Graph<S> = Graph::new();
        let mut per_stream_sums = [0.0f64; 4];
        let mut per_stream_seen = [false; 4];
        let mut episode_desc = String::new();
        let mut batch_loss: Option<fewshot_core::VarId> = None;

        for _ in 0..cfg.batch_episodes {
            let ep = episodes::sample_episode(train_ds, cfg.ways, cfg.shots, cfg.train_queries, &mut rng)?;
            let (support, query, slots) = if cfg.augment_flip_jitter {
                episodes::episode_tensors::<S, _>(train_ds, &ep, &cfg.norm, Some((&jitter, &mut rng)))
            } else {
                episodes::episode_tensors::<S, ChaCha8Rng>(train_ds, &ep, &cfg.norm, None)
            };
            let (loss, per_stream) = model.episode_loss(
                &mut g,
                &support,
                &query,
                &slots,
                cfg.ways,
                cfg.shots,
                cfg.loss_kind,
                cfg.weight_mode,
                &cfg.fixed_weights,
                true,
            )?;
            for (kind, value) in &per_stream {
                per_stream_sums[stream_index(*kind)] += *value;
                per_stream_seen[stream_index(*kind)] = true;
            }
            episode_desc = format!("classes {:?}", ep.class_ids);
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => g.add(acc, loss),
            });
        }
        let total = {
            let acc = batch_loss.expect("batch_episodes >= 1");
            let inv = S::from_f64(1.0 / cfg.batch_episodes as f64);
            g.mul_scalar(acc, inv)
        };
        let total_value = g.value(total).item().as_f64();
        if !total_value.is_finite() {
            let dump = out_dir.join("diagnostic.txt");
            let mut f = std::fs::File::create(&dump)?;
            writeln!(f, "non-finite loss at iteration {iter}")?;
            writeln!(f, "lr {lr}")?;
            writeln!(f, "last episode: {episode_desc}")?;
            for k in StreamKind::ALL {
                if per_stream_seen[stream_index(k)] {
                    writeln!(
                        f,
                        "L_{} = {}",
                        k.label(),
                        per_stream_sums[stream_index(k)] / cfg.batch_episodes as f64
                    )?;
                }
            }
            return Err(Error::Numeric(format!(
                "training aborted: non-finite loss at iteration {iter} (diagnostics in {})",
                dump.display()
            )));
        }

        g.backward(total);
        harvest_grads(&g, &mut model);
        adam.step(&mut model, lr);
        model.zero_grads();

        // validation + best checkpoint
        let mut val_cell = String::new();
        if cfg.eval_interval > 0 && iter % cfg.eval_interval == 0 {
            if let Some(ds) = val_ds {
                let report = evaluator::evaluate(
                    &model,
                    ds,
                    cfg,
                    cfg.seed ^ VAL_SALT ^ iter,
                    cfg.val_episodes,
                )?;
                val_cell = format!("{}", report.mean_acc);
                if best_val.map_or(true, |b| report.mean_acc > b) {
                    best_val = Some(report.mean_acc);
                    let tensors = checkpoint::gather(&mut model, &adam);
                    checkpoint::save(
                        &best_path,
                        cfg,
                        iter,
                        adam.step_count(),
                        rng.get_seed(),
                        rng.get_word_pos(),
                        &tensors,
                    )?;
                }
            }
        }

        let inv_b = 1.0 / cfg.batch_episodes as f64;
        let cell = |k: StreamKind| -> String {
            if per_stream_seen[stream_index(k)] {
                format!("{}", per_stream_sums[stream_index(k)] * inv_b)
            } else {
                String::new()
            }
        };
        let svals: Vec<String> = model
            .log_vars
            .iter()
            .map(|p| format!("{}", p.tensor.item().as_f64()))
            .collect();
        writeln!(
            metrics,
            "{iter},{lr},{total_value},{},{},{},{},{},{},{},{},{val_cell}",
            cell(StreamKind::Appearance),
            cell(StreamKind::CorrChannel),
            cell(StreamKind::CorrSpatial),
            cell(StreamKind::Mi),
            svals[0],
            svals[1],
            svals[2],
            svals[3],
        )?;
    }

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let tensors = checkpoint::gather(&mut model, &adam);
    checkpoint::save(
        &ckpt_path,
        cfg,
        cfg.iterations,
        adam.step_count(),
        rng.get_seed(),
        rng.get_word_pos(),
        &tensors,
    )?;

    Ok(TrainArtifacts {
        checkpoint: ckpt_path,
        best: best_val.map(|_| best_path),
        metrics: metrics_path,
        best_val_acc: best_val,
    })
}

/// Rebuild a model (and optimizer state) from a checkpoint.
pub fn load_model<S: Scalar>(data: &checkpoint::CheckpointData) -> Result<(Config, FewShotModel<S>, Adam<S>)> {
    let cfg = Config::from_text(&data.config_text)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let mut model: FewShotModel<S> = FewShotModel::new(cfg.model_config(), &mut init_rng)?;
    let mut adam: Adam<S> = Adam::new();
    checkpoint::restore(data, &mut model, &mut adam)?;
    Ok((cfg, model, adam))
}
