//! Episode-based evaluation with 95% confidence intervals.
//!
//! Episodes are keyed by index (seed xor a per-index salt), so results are
//! independent of evaluation order: distributing episodes across workers and
//! merging by index would produce the identical report.

use crate::config::Config;
use fewshot_core::episodes::{self, ClassDataset};
use fewshot_core::objective::{fuse_scores, stream_index};
use fewshot_core::streams::StreamKind;
use fewshot_core::{FewShotModel, Graph, Result, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPISODE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mean_acc: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub per_stream_acc: Vec<(StreamKind, f64)>,
    pub config_fingerprint: u64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "accuracy {:.4} +- {:.4} (95% CI over {} episodes)\n",
            self.mean_acc, self.ci95, self.episodes
        );
        for (kind, acc) in &self.per_stream_acc {
            s.push_str(&format!("  {:>6}: {:.4}\n", kind.label(), acc));
        }
        s.push_str(&format!("config fingerprint {:016x}\n", self.config_fingerprint));
        s
    }
}

/// Evaluate over `episodes` sampled tasks; deterministic for a given seed.
pub fn evaluate<S: Scalar>(
    model: &FewShotModel<S>,
    ds: &ClassDataset,
    cfg: &Config,
    seed: u64,
    episodes: usize,
) -> Result<EvalReport> {
    let weights = model.effective_weights(cfg.weight_mode, &cfg.fixed_weights);
    let mut per_episode_acc = Vec::with_capacity(episodes);
    let mut stream_correct: [usize; 4] = [0; 4];
    let mut stream_present = [false; 4];
    let mut total_queries = 0usize;

    for e in 0..episodes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (e as u64).wrapping_mul(EPISODE_SALT) ^ e as u64);
        let ep = episodes::sample_episode(ds, cfg.ways, cfg.shots, cfg.eval_queries, &mut rng)?;
        let (support, query, slots) =
            episodes::episode_tensors::<S, ChaCha8Rng>(ds, &ep, &cfg.norm, None);
        let mut g: Graph<S> = Graph::new();
        let scores = model.score_episode(&mut g, &support, &query, cfg.ways, cfg.shots, false)?;
        let plain: Vec<(StreamKind, Tensor<S>)> = scores
            .scores
            .iter()
            .map(|&(k, id)| (k, g.value(id).clone()))
            .collect();
        let (_, preds) = fuse_scores(&plain, &weights);
        let correct = preds.iter().zip(&slots).filter(|(p, s)| p == s).count();
        per_episode_acc.push(correct as f64 / slots.len() as f64);
        total_queries += slots.len();
        for (kind, tensor) in &plain {
            let mut w = [0.0; 4];
            w[stream_index(*kind)] = 1.0;
            let (_, sp) = fuse_scores(&[(*kind, tensor.clone())], &w);
            stream_correct[stream_index(*kind)] +=
                sp.iter().zip(&slots).filter(|(p, s)| p == s).count();
            stream_present[stream_index(*kind)] = true;
        }
    }

    let n = per_episode_acc.len() as f64;
    let mean = per_episode_acc.iter().sum::<f64>() / n;
    let ci95 = if per_episode_acc.len() > 1 {
        let var = per_episode_acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    let per_stream_acc = StreamKind::ALL
        .iter()
        .filter(|&&k| stream_present[stream_index(k)])
        .map(|&k| (k, stream_correct[stream_index(k)] as f64 / total_queries as f64))
        .collect();

    Ok(EvalReport {
        mean_acc: mean,
        ci95,
        episodes,
        per_stream_acc,
        config_fingerprint: cfg.fingerprint(),
    })
}
