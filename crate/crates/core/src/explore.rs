//! Choice of task embeddings for data collection and training, and the
//! behavior-entropy metric.
//!
//! Goal-directed embeddings come from `B(φ)` of replayed goal states. In the
//! inverse-density modes those states are drawn with probability
//! `∝ (q(φ) + ε)^(−β)` under the fitted flow density `q`.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::env::PROJ_DIM;
use crate::error::{Error, Result};
use crate::fb::{uniform_sphere_rows, FbModel, LatentZ, ZSource};
use crate::flow::FlowModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Uniform-sphere embeddings, no regularizer critic.
    Fb,
    /// Uniform-sphere embeddings with the regularized actor.
    FbCritic,
    /// Inverse-density goals for both exploration and training.
    Mebe,
    /// Inverse-density goals for exploration only; training goals are
    /// uniform over the pool.
    MebeAbl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fb, Mode::FbCritic, Mode::Mebe, Mode::MebeAbl];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fb => "FB",
            Mode::FbCritic => "FB-Critic",
            Mode::Mebe => "MEBE",
            Mode::MebeAbl => "MEBE-abl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s.trim()))
    }

    pub fn uses_goals(self) -> bool {
        matches!(self, Mode::Mebe | Mode::MebeAbl)
    }

    pub fn trains_critic(self) -> bool {
        self != Mode::Fb
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationConfig {
    pub mode: Mode,
    pub beta: f64,
    pub epsilon: f64,
    /// Share of embedding slots filled from goals in the goal modes.
    pub goal_fraction: f64,
    pub pool_size: usize,
    /// Per-worker environment steps between embedding refreshes.
    pub z_refresh: usize,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            mode: Mode::Mebe,
            beta: 2.0,
            epsilon: 0.1,
            goal_fraction: 0.8,
            pool_size: 1024,
            z_refresh: 100,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push("beta");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            bad.push("epsilon");
        }
        if !(0.0..=1.0).contains(&self.goal_fraction) {
            bad.push("goal_fraction");
        }
        if self.pool_size == 0 {
            bad.push("pool_size");
        }
        if self.z_refresh == 0 {
            bad.push("z_refresh");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid values for: {}", bad.join(", "))))
        }
    }

    /// Goal share actually used by a mode.
    pub fn effective_goal_fraction(&self) -> f64 {
        if self.mode.uses_goals() {
            self.goal_fraction
        } else {
            0.0
        }
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Normalized `(q + ε)^(−β)` from log densities, evaluated in log space.
pub fn inverse_density_weights(log_q: &[f64], epsilon: f64, beta: f64) -> Result<Vec<f64>> {
    if log_q.is_empty() {
        return Err(Error::NotReady("no candidates to weight".into()));
    }
    if !(epsilon > 0.0) || !(beta >= 0.0) {
        return Err(Error::Config(format!("need ε > 0 and β ≥ 0 (ε {epsilon}, β {beta})")));
    }
    if log_q.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::numeric("inverse_density_weights", "log density is not finite"));
    }
    let ln_eps = epsilon.ln();
    let logw: Vec<f64> = log_q.iter().map(|&l| -beta * logaddexp(l, ln_eps)).collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Candidate goal states with their sampling weights.
#[derive(Clone, Debug)]
pub struct GoalPool {
    pub states: Vec<[f32; PROJ_DIM]>,
    pub weights: Vec<f64>,
    sampler: Option<WeightedIndex<f64>>,
}

impl GoalPool {
    /// Weights the candidates by inverse flow density. Without a fitted flow,
    /// or with `β = 0`, weights are uniform.
    pub fn build(states: Vec<[f32; PROJ_DIM]>, flow: Option<&FlowModel<f32>>, cfg: &ExplorationConfig) -> Result<Self> {
        if states.is_empty() {
            return Ok(GoalPool {
                states,
                weights: Vec::new(),
                sampler: None,
            });
        }
        let log_q = match flow {
            Some(f) if f.fitted && cfg.beta > 0.0 => {
                let x = Array2::from_shape_fn((states.len(), PROJ_DIM), |(i, j)| states[i][j]);
                Some(f.log_density(x.view())?.iter().map(|&v| v as f64).collect::<Vec<_>>())
            }
            Some(_) if cfg.beta > 0.0 => {
                log::debug!("flow not fitted yet; goal pool uses uniform weights");
                None
            }
            None if cfg.beta > 0.0 => {
                log::debug!("no flow available; goal pool uses uniform weights");
                None
            }
            _ => None,
        };
        let weights = match log_q {
            Some(l) => inverse_density_weights(&l, cfg.epsilon, cfg.beta)?,
            None => vec![1.0 / states.len() as f64; states.len()],
        };
        Self::with_weights(states, weights)
    }

    pub fn with_weights(states: Vec<[f32; PROJ_DIM]>, weights: Vec<f64>) -> Result<Self> {
        if states.len() != weights.len() {
            return Err(Error::Config("pool weights do not match candidates".into()));
        }
        let sampler = if states.is_empty() {
            None
        } else {
            Some(
                WeightedIndex::new(&weights)
                    .map_err(|e| Error::numeric("inverse_density_weights", e.to_string()))?,
            )
        };
        Ok(GoalPool {
            states,
            weights,
            sampler,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Index drawn by the pool weights.
    pub fn sample_weighted<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        self.sampler.as_ref().map(|s| s.sample(rng))
    }

    /// Index drawn uniformly, ignoring weights.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        (!self.states.is_empty()).then(|| rng.random_range(0..self.states.len()))
    }
}

/// Fills `n` embedding slots: each slot independently becomes a goal slot
/// with probability `goal_fraction` (if the pool has candidates), else a
/// uniform-sphere draw.
fn fill_slots<R: Rng + ?Sized>(
    fb: &FbModel<f32>,
    pool: &GoalPool,
    goal_fraction: f64,
    weighted: bool,
    n: usize,
    rng: &mut R,
) -> Result<(Array2<f32>, Vec<ZSource>)> {
    let d = fb.z_dim();
    let mut z: Array2<f32> = uniform_sphere_rows(d, n, rng);
    let mut sources = vec![ZSource::Uniform; n];
    if pool.is_empty() || goal_fraction <= 0.0 {
        return Ok((z, sources));
    }
    let mut slots = Vec::new();
    let mut goals = Vec::new();
    for (i, src) in sources.iter_mut().enumerate() {
        if rng.random_bool(goal_fraction.min(1.0)) {
            let idx = if weighted {
                pool.sample_weighted(rng)
            } else {
                pool.sample_uniform(rng)
            }
            .expect("pool is nonempty");
            slots.push(i);
            goals.push(pool.states[idx]);
            *src = ZSource::Goal;
        }
    }
    if !goals.is_empty() {
        let g = Array2::from_shape_fn((goals.len(), PROJ_DIM), |(i, j)| goals[i][j]);
        let zg = fb.goal_embeddings(g.view())?;
        for (row, &slot) in slots.iter().enumerate() {
            z.row_mut(slot).assign(&zg.row(row));
        }
    }
    Ok((z, sources))
}

/// Embeddings for `k` exploration policies.
pub fn sample_exploration_z<R: Rng + ?Sized>(
    fb: &FbModel<f32>,
    pool: &GoalPool,
    cfg: &ExplorationConfig,
    k: usize,
    rng: &mut R,
) -> Result<Vec<LatentZ<f32>>> {
    let (z, sources) = fill_slots(fb, pool, cfg.effective_goal_fraction(), true, k, rng)?;
    Ok(z
        .rows()
        .into_iter()
        .zip(sources)
        .map(|(r, source)| LatentZ {
            vector: r.to_owned(),
            source,
        })
        .collect())
}

/// Embeddings for one training batch, one row per sample.
pub fn select_training_z<R: Rng + ?Sized>(
    fb: &FbModel<f32>,
    pool: &GoalPool,
    cfg: &ExplorationConfig,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f32>> {
    let weighted = cfg.mode != Mode::MebeAbl;
    Ok(fill_slots(fb, pool, cfg.effective_goal_fraction(), weighted, n, rng)?.0)
}

/// Fixed square histogram grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramGrid {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramGrid {
    fn default() -> Self {
        HistogramGrid {
            bins: 20,
            lo: -2.0,
            hi: 2.0,
        }
    }
}

impl HistogramGrid {
    /// Bin of one coordinate; values outside the range fall in edge bins.
    fn bin(&self, v: f64) -> usize {
        let t = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        if t.is_nan() {
            0
        } else {
            (t.max(0.0) as usize).min(self.bins - 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyEstimate {
    /// Shannon entropy in nats.
    pub entropy: f64,
    pub grid: HistogramGrid,
    pub samples: usize,
}

/// `−Σ p ln p` over nonempty bins.
pub fn entropy_from_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn behavior_entropy(samples: &[[f32; PROJ_DIM]], grid: &HistogramGrid) -> Result<EntropyEstimate> {
    if samples.is_empty() {
        return Err(Error::NotReady("behavior entropy needs at least one sample".into()));
    }
    let mut counts = vec![0u64; grid.bins * grid.bins];
    for s in samples {
        counts[grid.bin(s[0] as f64) * grid.bins + grid.bin(s[1] as f64)] += 1;
    }
    Ok(EntropyEstimate {
        entropy: entropy_from_counts(&counts),
        grid: *grid,
        samples: samples.len(),
    })
}
