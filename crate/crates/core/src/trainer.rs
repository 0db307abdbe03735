//! The online loop: pick exploration embeddings, roll out the workers, store
//! transitions, refit the density model on schedule, and interleave gradient
//! updates of the forward/backward maps, the regularizer critic and the
//! actor.
//!
//! Everything runs on one thread from a single seeded generator, so equal
//! configurations produce bit-identical metrics, and a checkpoint captures
//! enough state to resume exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{write_dir_atomic, TensorStore};
use crate::config::RunConfig;
use crate::critic::RegCritic;
use crate::env::{self, Action, EnvParams, EnvState, PointMass, ACTION_DIM, OBS_DIM, PROJ_DIM};
use crate::error::{format, Error, Result};
use crate::explore::{self, behavior_entropy, GoalPool, HistogramGrid};
use crate::fb::{FbLossTerms, FbModel};
use crate::flow::{Coupling, FlowModel, Whitener};
use crate::nn::{soft_update, AdamState};
use crate::replay::{write_atomic, ReplayBuffer, Transition};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPLAY_FILE: &str = "replay.bin";

pub const METRICS_COLUMNS: [&str; 11] = [
    "step",
    "mode",
    "seed",
    "fb_main",
    "fb_ortho",
    "fb_fz",
    "actor_loss",
    "regcritic_loss",
    "flow_nll",
    "behavior_entropy",
    "mean_action_rate",
];

/// One metrics CSV row. Losses are the most recent values; NaN means the
/// quantity has not been computed yet in this run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub mode: String,
    pub seed: u64,
    pub fb_main: f64,
    pub fb_ortho: f64,
    pub fb_fz: f64,
    pub actor_loss: f64,
    pub regcritic_loss: f64,
    pub flow_nll: f64,
    pub behavior_entropy: f64,
    /// Mean action-rate penalty magnitude over transitions collected since
    /// the previous row.
    pub mean_action_rate: f64,
}

impl MetricsRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.mode.clone(),
            self.seed.to_string(),
            self.fb_main.to_string(),
            self.fb_ortho.to_string(),
            self.fb_fz.to_string(),
            self.actor_loss.to_string(),
            self.regcritic_loss.to_string(),
            self.flow_nll.to_string(),
            self.behavior_entropy.to_string(),
            self.mean_action_rate.to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Option<Self> {
        let f = |i: usize| r.get(i)?.parse::<f64>().ok();
        Some(MetricsRow {
            step: r.get(0)?.parse().ok()?,
            mode: r.get(1)?.to_string(),
            seed: r.get(2)?.parse().ok()?,
            fb_main: f(3)?,
            fb_ortho: f(4)?,
            fb_fz: f(5)?,
            actor_loss: f(6)?,
            regcritic_loss: f(7)?,
            flow_nll: f(8)?,
            behavior_entropy: f(9)?,
            mean_action_rate: f(10)?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(METRICS_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record(r.record()).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "no metrics found; run `train` first".into(),
        },
        _ => format(path, e.to_string()),
    })?;
    let headers = rdr.headers().map_err(|e| format(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_COLUMNS {
        return Err(format(path, "unexpected metrics columns"));
    }
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| format(path, e.to_string()))?;
            MetricsRow::from_record(&r).ok_or_else(|| format(path, "malformed metrics row"))
        })
        .collect()
}

/// Paths and traces produced by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// `(step, behavior entropy)` per metrics row.
    pub entropy_trace: Vec<(usize, f64)>,
    /// `(step, weighted FB loss)` per metrics row.
    pub loss_trace: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
struct Worker {
    state: EnvState,
    z: Array1<f32>,
    steps_since_refresh: usize,
    episode: u32,
}

#[derive(Clone, Debug, PartialEq)]
struct Optimizers {
    forward: [AdamState<f32>; 2],
    backward: AdamState<f32>,
    actor: AdamState<f32>,
    critic: [AdamState<f32>; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LastLosses {
    fb: FbLossTerms,
    actor: f64,
    critic: f64,
    flow_nll: f64,
}

impl Default for LastLosses {
    fn default() -> Self {
        LastLosses {
            fb: FbLossTerms {
                main: f64::NAN,
                ortho: f64::NAN,
                fz: f64::NAN,
                total: f64::NAN,
            },
            actor: f64::NAN,
            critic: f64::NAN,
            flow_nll: f64::NAN,
        }
    }
}

/// Counts of work done by one [`Trainer::update_agent`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub fb_updates: usize,
    pub critic_updates: usize,
    pub actor_updates: usize,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub env: PointMass,
    pub fb: FbModel<f32>,
    pub critic: RegCritic<f32>,
    pub flow: FlowModel<f32>,
    pub replay: ReplayBuffer,
    pub pool: GoalPool,
    opt: Optimizers,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    global_step: usize,
    grad_steps_done: u64,
    next_episode: u32,
    last: LastLosses,
    action_rate_sum: f64,
    action_rate_count: u64,
    next_refresh: usize,
    pub metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(mut cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let env = PointMass::new(EnvParams::default());
        let fb = FbModel::<f32>::new(&cfg.arch(), &mut rng)?;
        let critic = RegCritic::<f32>::new(cfg.critic_hidden, cfg.critic_layers, &mut rng)?;
        let flow = FlowModel::<f32>::new(PROJ_DIM, cfg.flow_layers, cfg.flow_hidden, &mut rng)?;
        let opt = Optimizers {
            forward: [AdamState::for_net(&fb.forward[0]), AdamState::for_net(&fb.forward[1])],
            backward: AdamState::for_net(&fb.backward),
            actor: AdamState::for_net(&fb.actor),
            critic: [AdamState::for_net(&critic.q[0]), AdamState::for_net(&critic.q[1])],
        };
        let replay = ReplayBuffer::new(cfg.buffer_capacity, cfg.goal_capacity, env.params.clone());
        let mut workers = Vec::with_capacity(cfg.workers);
        for i in 0..cfg.workers {
            workers.push(Worker {
                state: env.reset_with(&mut rng),
                z: Array1::zeros(cfg.z_dim),
                steps_since_refresh: 0,
                episode: i as u32,
            });
        }
        let mut t = Trainer {
            next_refresh: cfg.flow_refresh,
            next_episode: cfg.workers as u32,
            cfg,
            env,
            fb,
            critic,
            flow,
            replay,
            pool: GoalPool::with_weights(Vec::new(), Vec::new())?,
            opt,
            workers,
            rng,
            global_step: 0,
            grad_steps_done: 0,
            last: LastLosses::default(),
            action_rate_sum: 0.0,
            action_rate_count: 0,
            metrics: Vec::new(),
        };
        t.refresh_embeddings()?;
        Ok(t)
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn grad_steps_done(&self) -> u64 {
        self.grad_steps_done
    }

    /// Current per-worker exploration embeddings, one row per worker.
    pub fn worker_embeddings(&self) -> Array2<f32> {
        let mut z = Array2::zeros((self.workers.len(), self.cfg.z_dim));
        for (i, w) in self.workers.iter().enumerate() {
            z.row_mut(i).assign(&w.z);
        }
        z
    }

    pub fn worker_states(&self) -> Vec<EnvState> {
        self.workers.iter().map(|w| w.state).collect()
    }

    /// Rebuilds the candidate pool and draws a new embedding for every
    /// worker.
    fn refresh_embeddings(&mut self) -> Result<()> {
        let ecfg = self.cfg.exploration();
        if ecfg.mode.uses_goals() && !self.replay.goals().is_empty() {
            let states = self.replay.sample_goal_states(ecfg.pool_size, &mut self.rng)?;
            let flow = self.flow.fitted.then_some(&self.flow);
            self.pool = GoalPool::build(states, flow, &ecfg)?;
        }
        let z = explore::sample_exploration_z(&self.fb, &self.pool, &ecfg, self.workers.len(), &mut self.rng)?;
        for (w, l) in self.workers.iter_mut().zip(z) {
            w.z = l.vector;
            w.steps_since_refresh = 0;
        }
        Ok(())
    }

    fn worker_actions(&mut self) -> Result<Vec<Action>> {
        let k = self.workers.len();
        if self.global_step < self.cfg.random_steps {
            return Ok((0..k)
                .map(|_| Action::new([self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)]))
                .collect());
        }
        let mut obs = Array2::zeros((k, OBS_DIM));
        for (i, w) in self.workers.iter().enumerate() {
            for (j, v) in self.env.observe(&w.state).into_iter().enumerate() {
                obs[[i, j]] = v;
            }
        }
        let mean = self.fb.actor_action(obs.view(), self.worker_embeddings().view())?;
        let noise = self.cfg.expl_noise;
        Ok((0..k)
            .map(|i| {
                let mut a = [0.0f32; ACTION_DIM];
                for (j, v) in a.iter_mut().enumerate() {
                    let e = if noise > 0.0 {
                        noise * self.rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    *v = (mean[[i, j]] as f64 + e).clamp(-1.0, 1.0) as f32;
                }
                Action(a)
            })
            .collect())
    }

    /// Steps every worker `steps` times, storing the transitions. Embeddings
    /// refresh every `z_refresh` worker steps; the density model refits and
    /// a metrics row is recorded whenever the global step count crosses a
    /// refresh boundary.
    pub fn rollout(&mut self, steps: usize) -> Result<Vec<Transition>> {
        let mut out = Vec::with_capacity(steps * self.workers.len());
        for _ in 0..steps {
            if self.workers.iter().any(|w| w.steps_since_refresh >= self.cfg.z_refresh) {
                self.refresh_embeddings()?;
            }
            let actions = self.worker_actions()?;
            for (i, a) in actions.into_iter().enumerate() {
                let w = &self.workers[i];
                let (next, done) = self
                    .env
                    .step(&w.state, a)
                    .map_err(|e| Error::Env(format!("worker {i}: {e}")))?;
                let prev = Action(w.state.prev_action);
                let terms = env::reg_terms(&next, &a, &prev);
                let t = Transition {
                    state: w.state,
                    action: a,
                    next,
                    reg_reward: terms.reward(),
                    done,
                    episode: w.episode,
                };
                self.replay.append(t)?;
                self.action_rate_sum += 0.1 * terms.action_rate as f64;
                self.action_rate_count += 1;
                out.push(t);
                let episode = if done {
                    self.next_episode += 1;
                    self.next_episode - 1
                } else {
                    w.episode
                };
                let state = if done { self.env.reset_with(&mut self.rng) } else { next };
                let w = &mut self.workers[i];
                w.state = state;
                w.episode = episode;
                w.steps_since_refresh += 1;
                self.global_step += 1;
            }
            while self.global_step >= self.next_refresh {
                self.next_refresh += self.cfg.flow_refresh;
                self.periodic()?;
            }
        }
        Ok(out)
    }

    fn periodic(&mut self) -> Result<()> {
        if self.cfg.mode.uses_goals() && !self.replay.goals().is_empty() {
            self.refit_flow()?;
        }
        self.record_metrics()
    }

    fn refit_flow(&mut self) -> Result<()> {
        let goals = self.replay.goals();
        let samples = if goals.len() <= self.cfg.flow_fit_samples {
            goals.to_vec()
        } else {
            goals.sample_goal_states(self.cfg.flow_fit_samples, &mut self.rng)?
        };
        let x = Array2::from_shape_fn((samples.len(), PROJ_DIM), |(i, j)| samples[i][j]);
        let seed = self.rng.random::<u64>();
        let trace = self.flow.fit(x.view(), &self.cfg.flow_fit(), seed)?;
        self.last.flow_nll = trace.last().copied().unwrap_or(f64::NAN);
        Ok(())
    }

    fn record_metrics(&mut self) -> Result<()> {
        let recent = self.replay.recent_projections(self.cfg.entropy_window);
        let grid = HistogramGrid {
            bins: self.cfg.entropy_bins,
            ..HistogramGrid::default()
        };
        let entropy = if recent.is_empty() {
            f64::NAN
        } else {
            behavior_entropy(&recent, &grid)?.entropy
        };
        let rate = if self.action_rate_count == 0 {
            f64::NAN
        } else {
            self.action_rate_sum / self.action_rate_count as f64
        };
        self.action_rate_sum = 0.0;
        self.action_rate_count = 0;
        self.metrics.push(MetricsRow {
            step: self.global_step,
            mode: self.cfg.mode.name().to_string(),
            seed: self.cfg.seed,
            fb_main: self.last.fb.main,
            fb_ortho: self.last.fb.ortho,
            fb_fz: self.last.fb.fz,
            actor_loss: self.last.actor,
            regcritic_loss: self.last.critic,
            flow_nll: self.last.flow_nll,
            behavior_entropy: entropy,
            mean_action_rate: rate,
        });
        Ok(())
    }

    /// `n` gradient steps. The actor update and all soft target updates run
    /// on every `policy_delay`-th step, counted across calls.
    pub fn update_agent(&mut self, n: usize) -> Result<UpdateStats> {
        let mut stats = UpdateStats::default();
        if self.replay.len() < self.cfg.batch_size {
            return Err(Error::NotReady(format!(
                "buffer holds {} transitions, batch needs {}",
                self.replay.len(),
                self.cfg.batch_size
            )));
        }
        let ecfg = self.cfg.exploration();
        let coefs = self.cfg.coefs();
        let lambda = self.cfg.effective_lambda();
        let train_critic = self.cfg.mode.trains_critic();
        for _ in 0..n {
            let batch = self.replay.sample_fb_batch(self.cfg.batch_size, &mut self.rng)?;
            let z = explore::select_training_z(&self.fb, &self.pool, &ecfg, batch.len(), &mut self.rng)?;
            let next_a = self.fb.target_action(
                batch.next_obs.view(),
                z.view(),
                self.cfg.target_noise,
                self.cfg.target_noise_clip,
                &mut self.rng,
            )?;

            let (terms, grads) = self.fb.fb_loss(&batch, z.view(), next_a.view(), &coefs)?;
            let critic_step = if train_critic {
                Some(self.critic.loss(&batch, next_a.view(), coefs.gamma)?)
            } else {
                None
            };
            for k in 0..2 {
                self.fb.forward[k].adam_step(
                    &mut self.opt.forward[k],
                    &grads.forward[k],
                    self.cfg.lr_forward as f32,
                    &format!("forward{}", k + 1),
                )?;
            }
            self.fb
                .backward
                .adam_step(&mut self.opt.backward, &grads.backward, self.cfg.lr_backward as f32, "backward")?;
            self.last.fb = terms;
            stats.fb_updates += 1;
            if let Some((loss, g)) = critic_step {
                for k in 0..2 {
                    self.critic.q[k].adam_step(
                        &mut self.opt.critic[k],
                        &g[k],
                        self.cfg.lr_critic as f32,
                        &format!("regcritic{}", k + 1),
                    )?;
                }
                self.last.critic = loss;
                stats.critic_updates += 1;
            }

            self.grad_steps_done += 1;
            if self.grad_steps_done % self.cfg.policy_delay as u64 == 0 {
                let reg = (lambda > 0.0).then_some((&self.critic, lambda));
                let (parts, g) = self.fb.actor_loss(batch.obs.view(), z.view(), reg)?;
                self.fb
                    .actor
                    .adam_step(&mut self.opt.actor, &g, self.cfg.lr_actor as f32, "actor")?;
                self.last.actor = parts.total;
                stats.actor_updates += 1;
                self.soft_update_targets()?;
            }
        }
        Ok(stats)
    }

    fn soft_update_targets(&mut self) -> Result<()> {
        let fb = &mut self.fb;
        for k in 0..2 {
            soft_update(&mut fb.forward_target[k], &fb.forward[k], self.cfg.tau_forward as f32)?;
        }
        soft_update(&mut fb.backward_target, &fb.backward, self.cfg.tau_backward as f32)?;
        soft_update(&mut fb.actor_target, &fb.actor, self.cfg.tau_actor as f32)?;
        if self.cfg.mode.trains_critic() {
            self.critic.soft_update_targets(self.cfg.tau_critic as f32)?;
        }
        Ok(())
    }

    /// One loop iteration: rollout, then an agent update once the buffer
    /// holds a full batch.
    pub fn iterate(&mut self) -> Result<()> {
        self.rollout(self.cfg.rollout_steps)?;
        if self.replay.len() >= self.cfg.batch_size {
            self.update_agent(self.cfg.grad_steps)?;
        }
        Ok(())
    }

    /// Iterates until at least `steps` global environment steps are done.
    pub fn run_until(&mut self, steps: usize) -> Result<()> {
        while self.global_step < steps {
            self.iterate()?;
            if !self.fb.is_finite() || !self.critic.is_finite() {
                return Err(Error::numeric("parameters", "network parameters became non-finite"));
            }
        }
        Ok(())
    }

    /// Appends a final metrics row unless one exists for the current step.
    pub fn finish(&mut self) -> Result<()> {
        if self.metrics.last().map(|r| r.step) != Some(self.global_step) && self.global_step > 0 {
            self.record_metrics()?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        metrics_csv(&self.metrics)
    }

    fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        for k in 0..2 {
            s.put_net(&format!("fb.forward{k}"), &self.fb.forward[k]);
            s.put_net(&format!("fb.forward_target{k}"), &self.fb.forward_target[k]);
            s.put_net(&format!("critic.q{k}"), &self.critic.q[k]);
            s.put_net(&format!("critic.q_target{k}"), &self.critic.q_target[k]);
            s.put_adam(&format!("adam.forward{k}"), &self.opt.forward[k]);
            s.put_adam(&format!("adam.critic{k}"), &self.opt.critic[k]);
        }
        s.put_net("fb.backward", &self.fb.backward);
        s.put_net("fb.backward_target", &self.fb.backward_target);
        s.put_net("fb.actor", &self.fb.actor);
        s.put_net("fb.actor_target", &self.fb.actor_target);
        s.put_adam("adam.backward", &self.opt.backward);
        s.put_adam("adam.actor", &self.opt.actor);

        for (l, c) in self.flow.layers.iter().enumerate() {
            s.put_net(&format!("flow.coupling{l}"), &c.net);
            s.put_u32(&format!("flow.coupling{l}.cond"), &[c.cond.len()], c.cond.iter().map(|&v| v as u32).collect());
            s.put_u32(&format!("flow.coupling{l}.trans"), &[c.trans.len()], c.trans.iter().map(|&v| v as u32).collect());
        }
        s.put_f32("flow.whitener.mean", &[PROJ_DIM], self.flow.whitener.mean.clone());
        s.put_f32("flow.whitener.scale", &[PROJ_DIM], self.flow.whitener.scale.clone());
        s.put_u32(
            "flow.meta",
            &[4],
            vec![self.flow.fitted as u32, self.flow.layers.len() as u32, self.flow.hidden() as u32, self.flow.dim() as u32],
        );

        let seed = self.rng.get_seed();
        s.put_u32("rng.seed", &[8], seed.chunks(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
        let pos = self.rng.get_word_pos();
        s.put_u64s("rng.stream_pos", &[self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        s.put_u64s(
            "trainer.counters",
            &[
                self.global_step as u64,
                self.grad_steps_done,
                self.next_episode as u64,
                self.next_refresh as u64,
                self.action_rate_count,
            ],
        );
        let l = &self.last;
        s.put_f64s(
            "trainer.last",
            &[l.fb.main, l.fb.ortho, l.fb.fz, l.fb.total, l.actor, l.critic, l.flow_nll, self.action_rate_sum],
        );

        let k = self.workers.len();
        let mut ws = Vec::with_capacity(k * 6);
        let mut wi = Vec::with_capacity(k * 3);
        for w in &self.workers {
            ws.extend(w.state.pos);
            ws.extend(w.state.vel);
            ws.extend(w.state.prev_action);
            wi.extend([w.state.step, w.episode, w.steps_since_refresh as u32]);
        }
        s.put_f32("workers.state", &[k, 6], ws);
        s.put_u32("workers.index", &[k, 3], wi);
        s.put_f32("workers.z", &[k, self.cfg.z_dim], self.worker_embeddings().iter().copied().collect());

        let n = self.pool.len();
        s.put_f32("pool.states", &[n, PROJ_DIM], self.pool.states.iter().flatten().copied().collect());
        s.put_f64s("pool.weights", &self.pool.weights);
        s
    }

    /// Writes a resumable checkpoint directory: tensors, config, replay
    /// snapshot and the metrics so far.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let store = self.to_store();
        let config = self.cfg.dump();
        let metrics = self.metrics_csv()?;
        write_dir_atomic(dir, |tmp| {
            store.write_into(tmp)?;
            fs::write(tmp.join(CONFIG_FILE), &config)?;
            fs::write(tmp.join(METRICS_FILE), &metrics)?;
            self.replay.write_snapshot(&tmp.join(REPLAY_FILE))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store = TensorStore::read_from(dir)?;
        let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let env = PointMass::new(EnvParams::default());
        let replay = ReplayBuffer::read_snapshot(&dir.join(REPLAY_FILE), env.params.clone())?;
        let metrics = read_metrics(&dir.join(METRICS_FILE))?;

        let mut fb = FbModel::from_parts(
            [store.get_net("fb.forward0")?, store.get_net("fb.forward1")?],
            store.get_net("fb.backward")?,
            store.get_net("fb.actor")?,
        )?;
        fb.forward_target = [store.get_net("fb.forward_target0")?, store.get_net("fb.forward_target1")?];
        fb.backward_target = store.get_net("fb.backward_target")?;
        fb.actor_target = store.get_net("fb.actor_target")?;
        if fb.z_dim() != cfg.z_dim {
            return Err(format(dir, "embedding width does not match config"));
        }
        let mut critic = RegCritic::from_nets([store.get_net("critic.q0")?, store.get_net("critic.q1")?])?;
        critic.q_target = [store.get_net("critic.q_target0")?, store.get_net("critic.q_target1")?];
        let opt = Optimizers {
            forward: [store.get_adam("adam.forward0")?, store.get_adam("adam.forward1")?],
            backward: store.get_adam("adam.backward")?,
            actor: store.get_adam("adam.actor")?,
            critic: [store.get_adam("adam.critic0")?, store.get_adam("adam.critic1")?],
        };
        let flow = load_flow(&store)?;

        let (_, seed_words) = store.get_u32("rng.seed")?;
        let mut seed = [0u8; 32];
        for (i, w) in seed_words.iter().enumerate().take(8) {
            seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
        }
        let sp = store.get_u64s("rng.stream_pos")?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(sp[0]);
        rng.set_word_pos(sp[1] as u128 | (sp[2] as u128) << 64);

        let c = store.get_u64s("trainer.counters")?;
        let l = store.get_f64s("trainer.last")?;
        if c.len() != 5 || l.len() != 8 {
            return Err(format(dir, "trainer counters have the wrong length"));
        }
        let (_, ws) = store.get_f32("workers.state")?;
        let (_, wi) = store.get_u32("workers.index")?;
        let (_, wz) = store.get_f32("workers.z")?;
        let k = wi.len() / 3;
        if k != cfg.workers || ws.len() != 6 * k || wz.len() != k * cfg.z_dim {
            return Err(format(dir, "worker state does not match config"));
        }
        let workers = (0..k)
            .map(|i| Worker {
                state: EnvState {
                    pos: [ws[6 * i], ws[6 * i + 1]],
                    vel: [ws[6 * i + 2], ws[6 * i + 3]],
                    prev_action: [ws[6 * i + 4], ws[6 * i + 5]],
                    step: wi[3 * i],
                },
                z: Array1::from(wz[i * cfg.z_dim..(i + 1) * cfg.z_dim].to_vec()),
                steps_since_refresh: wi[3 * i + 2] as usize,
                episode: wi[3 * i + 1],
            })
            .collect();
        let (_, ps) = store.get_f32("pool.states")?;
        let pool = GoalPool::with_weights(ps.chunks(PROJ_DIM).map(|c| [c[0], c[1]]).collect(), store.get_f64s("pool.weights")?)?;

        Ok(Trainer {
            cfg,
            env,
            fb,
            critic,
            flow,
            replay,
            pool,
            opt,
            workers,
            rng,
            global_step: c[0] as usize,
            grad_steps_done: c[1],
            next_episode: c[2] as u32,
            next_refresh: c[3] as usize,
            last: LastLosses {
                fb: FbLossTerms {
                    main: l[0],
                    ortho: l[1],
                    fz: l[2],
                    total: l[3],
                },
                actor: l[4],
                critic: l[5],
                flow_nll: l[6],
            },
            action_rate_sum: l[7],
            action_rate_count: c[4],
            metrics,
        })
    }
}

fn load_flow(store: &TensorStore) -> Result<FlowModel<f32>> {
    let (_, meta) = store.get_u32("flow.meta")?;
    let [fitted, n_layers, hidden, dim] = meta[..] else {
        return Err(format("flow.meta", "expected four entries"));
    };
    let idx = |name: String| -> Result<Vec<usize>> { Ok(store.get_u32(&name)?.1.iter().map(|&v| v as usize).collect()) };
    let layers = (0..n_layers as usize)
        .map(|l| {
            Ok(Coupling {
                cond: idx(format!("flow.coupling{l}.cond"))?,
                trans: idx(format!("flow.coupling{l}.trans"))?,
                net: store.get_net(&format!("flow.coupling{l}"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let whitener = Whitener {
        mean: store.get_f32("flow.whitener.mean")?.1.to_vec(),
        scale: store.get_f32("flow.whitener.scale")?.1.to_vec(),
    };
    FlowModel::from_parts(dim as usize, hidden as usize, layers, whitener, fitted != 0)
}

/// Runs a full training job into `out_dir`: an initial checkpoint, the
/// loop to the step budget, then the final checkpoint, metrics CSV and
/// config.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    let mut trainer = Trainer::new(cfg.clone())?;
    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_DIR);
    trainer.save(&ckpt)?;
    continue_training(&mut trainer, out_dir)
}

/// Resumes a run from its checkpoint and trains to the configured budget.
pub fn resume(out_dir: &Path) -> Result<TrainArtifacts> {
    let mut trainer = Trainer::load(&out_dir.join(CHECKPOINT_DIR))?;
    continue_training(&mut trainer, out_dir)
}

fn continue_training(trainer: &mut Trainer, out_dir: &Path) -> Result<TrainArtifacts> {
    let total = trainer.cfg.total_steps;
    trainer.run_until(total)?;
    trainer.finish()?;
    let ckpt = out_dir.join(CHECKPOINT_DIR);
    trainer.save(&ckpt)?;
    let metrics = out_dir.join(METRICS_FILE);
    write_atomic(&metrics, &trainer.metrics_csv()?)?;
    write_atomic(&out_dir.join(CONFIG_FILE), trainer.cfg.dump().as_bytes())?;
    Ok(TrainArtifacts {
        run_dir: out_dir.to_path_buf(),
        checkpoint: ckpt,
        metrics,
        entropy_trace: trainer.metrics.iter().map(|r| (r.step, r.behavior_entropy)).collect(),
        loss_trace: trainer
            .metrics
            .iter()
            .map(|r| (r.step, r.fb_main + trainer.cfg.ortho_coef * r.fb_ortho + trainer.cfg.fz_coef * r.fb_fz))
            .collect(),
    })
}
