//! Synthetic inputs shared by the benchmarks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvsynth_core::optimizer::TrialRecord;
use tvsynth_core::task_vector::Delta;
use tvsynth_core::TaskVector;

/// Task vector of `tensors` equally sized tensors with heavy-tailed entries.
pub fn synthetic_task_vector(params: usize, tensors: usize, seed: u64) -> TaskVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = params / tensors;
    let map: BTreeMap<String, Delta> = (0..tensors)
        .map(|t| {
            let values = (0..per)
                .map(|_| {
                    let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * 1e-3 * (-u.ln()).powf(1.5)
                })
                .collect();
            (
                format!("model.layers.{t}.mlp.up_proj.weight"),
                Delta {
                    shape: vec![per],
                    values,
                },
            )
        })
        .collect();
    TaskVector {
        tensors: map,
        source_base_id: "base".into(),
        source_ft_id: "ft".into(),
        sparsity: None,
    }
}

/// Completed trials with coefficients in the unit square scaled to `[0, 2]`.
pub fn synthetic_history(len: usize, seed: u64) -> Vec<TrialRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| {
            let c = [2.0 * rng.random::<f64>(), 2.0 * rng.random::<f64>()];
            let d = (c[0] - 0.8).powi(2) + (c[1] - 1.5).powi(2);
            TrialRecord::ok(i, c, (-d).exp(), 2.0 + d + rng.random::<f64>())
        })
        .collect()
}
