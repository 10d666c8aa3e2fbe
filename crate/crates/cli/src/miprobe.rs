//! MI consistency probe: mean squared error between the MI stream's scores
//! and the 0/1 same-class indicator over sampled episode pairs. Lower means
//! the MI estimate agrees better with class identity; the number is used to
//! compare checkpoints trained with and without the MI objective.

use crate::config::Config;
use fewshot_core::episodes::{self, ClassDataset};
use fewshot_core::streams::{StreamKind, StreamSet};
use fewshot_core::{FewShotModel, Graph, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PROBE_SALT: u64 = 0x4d49_7072_6f62_6501;

pub fn mi_probe<S: Scalar>(
    model: &FewShotModel<S>,
    ds: &ClassDataset,
    cfg: &Config,
    seed: u64,
    episodes: usize,
) -> Result<f64> {
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    for e in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SALT ^ (e as u64).wrapping_mul(0x9e37));
        let ep = episodes::sample_episode(ds, cfg.ways, cfg.shots, cfg.eval_queries, &mut rng)?;
        let (support, query, slots) =
            episodes::episode_tensors::<S, ChaCha8Rng>(ds, &ep, &cfg.norm, None);
        let mut g: Graph<S> = Graph::new();
        let scores = model.score_episode_with(
            &mut g,
            &support,
            &query,
            cfg.ways,
            cfg.shots,
            StreamSet::only(StreamKind::Mi),
            false,
        )?;
        let id = scores.get(StreamKind::Mi).expect("mi stream scored");
        let values = g.value(id).data();
        for (j, &slot) in slots.iter().enumerate() {
            for c in 0..cfg.ways {
                let y = if c == slot { 1.0 } else { 0.0 };
                let p = values[j * cfg.ways + c].as_f64();
                sq_sum += (p - y) * (p - y);
                count += 1;
            }
        }
    }
    Ok(sq_sum / count as f64)
}
