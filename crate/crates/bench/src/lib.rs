//! Fixtures shared by the benchmarks.

use fbmebe_core::{Mode, Result, RunConfig, Trainer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default desk configuration in `mode`, with enough random steps done
/// that the buffer can serve a batch.
pub fn warm_trainer(mode: Mode) -> Result<Trainer> {
    let cfg = RunConfig {
        mode,
        ..RunConfig::default()
    };
    let mut t = Trainer::new(cfg)?;
    let batch = t.cfg.batch_size;
    while t.replay.len() < batch {
        t.rollout(t.cfg.rollout_steps)?;
    }
    Ok(t)
}

/// Points spread over a ring, a shape the flow has to bend to fit.
pub fn ring_samples(n: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let r: f32 = 1.0 + 0.1 * rng.random_range(-1.0..1.0);
        row[0] = r * a.cos();
        row[1] = r * a.sin();
    }
    out
}
