//! Zero-shot evaluation on the task grid, task inference from reward
//! samples, and CSV exports of run results.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{self, project, Action, PointMass, TaskSpec, OBS_DIM, PROJ_DIM};
use crate::error::{format, Error, Result};
use crate::explore::{behavior_entropy, HistogramGrid};
use crate::fb::{FbModel, LatentZ};
use crate::replay::{write_atomic, ReplayBuffer};
use crate::trainer::{read_metrics, Trainer, CHECKPOINT_DIR, METRICS_FILE};

pub const EVAL_FILE: &str = "eval.csv";
pub const ENTROPY_EXPORT: &str = "entropy_vs_steps.csv";
pub const TASK_EXPORT: &str = "per_task_returns.csv";
pub const DENSITY_EXPORT: &str = "density_grid.csv";

const EVAL_COLUMNS: [&str; 10] = [
    "mode",
    "seed",
    "task",
    "target_vx",
    "target_vy",
    "speed",
    "mean_return",
    "std_return",
    "behavior_entropy",
    "mean_action_rate",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: TaskSpec,
    /// One return per evaluation episode.
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
}

impl TaskResult {
    pub fn from_returns(task: TaskSpec, returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        TaskResult {
            task,
            returns,
            mean_return: mean,
            std_return: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub tasks: Vec<TaskResult>,
    /// Entropy of recent achieved behaviors in the replay buffer.
    pub behavior_entropy: f64,
    /// Mean `0.1·|a_t − a_{t−1}|²` over every evaluation step.
    pub mean_action_rate: f64,
}

impl EvalReport {
    pub fn task(&self, target_vel: [f32; 2]) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task.target_vel == target_vel)
    }

    /// Mean return over the tasks whose commanded speed is within 1e-3 of
    /// `speed`.
    pub fn mean_return_at_speed(&self, speed: f32) -> Option<f64> {
        let r: Vec<f64> = self
            .tasks
            .iter()
            .filter(|t| (t.task.speed() - speed).abs() < 1e-3)
            .map(|t| t.mean_return)
            .collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Pools several reports (usually seeds of one mode): episode returns
    /// are concatenated per task, scalars averaged.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::Usage("nothing to merge".into()))?;
        let mut tasks = Vec::with_capacity(first.tasks.len());
        for (i, t) in first.tasks.iter().enumerate() {
            let mut all = Vec::new();
            for r in reports {
                let other = r
                    .tasks
                    .get(i)
                    .filter(|o| o.task == t.task)
                    .ok_or_else(|| Error::Usage("reports cover different tasks".into()))?;
                all.extend_from_slice(&other.returns);
            }
            tasks.push(TaskResult::from_returns(t.task, all));
        }
        let n = reports.len() as f64;
        Ok(EvalReport {
            mode: first.mode.clone(),
            seed: first.seed,
            tasks,
            behavior_entropy: reports.iter().map(|r| r.behavior_entropy).sum::<f64>() / n,
            mean_action_rate: reports.iter().map(|r| r.mean_action_rate).sum::<f64>() / n,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(EVAL_COLUMNS).map_err(csv_err)?;
        for t in &self.tasks {
            w.write_record([
                self.mode.clone(),
                self.seed.to_string(),
                t.task.label(),
                t.task.target_vel[0].to_string(),
                t.task.target_vel[1].to_string(),
                t.task.speed().to_string(),
                t.mean_return.to_string(),
                t.std_return.to_string(),
                self.behavior_entropy.to_string(),
                self.mean_action_rate.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub infer_samples: usize,
    pub episodes: usize,
    pub seed: u64,
    pub entropy_window: usize,
    pub entropy_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            infer_samples: 10_000,
            episodes: 10,
            seed: 0,
            entropy_window: 50_000,
            entropy_bins: 20,
        }
    }
}

/// `n` uniform draws (with replacement) of next-state projections from the
/// buffer, labeled with the task reward.
pub fn labeled_samples<R: Rng + ?Sized>(
    replay: &ReplayBuffer,
    task: &TaskSpec,
    n: usize,
    rng: &mut R,
) -> Result<(Array2<f32>, Vec<f32>)> {
    if replay.is_empty() {
        return Err(Error::NotReady("replay buffer is empty; nothing to infer from".into()));
    }
    let mut proj = Array2::zeros((n, PROJ_DIM));
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let t = replay.get(rng.random_range(0..replay.len()));
        let v = project(&t.next);
        proj[[i, 0]] = v[0];
        proj[[i, 1]] = v[1];
        rewards.push(env::task_reward_at(v, task));
    }
    Ok((proj, rewards))
}

/// Rolls `starts.len()` noiseless episodes of `π_z` in lockstep. Returns the
/// per-episode task returns and the summed action-rate penalty magnitude
/// with its step count.
pub fn rollout_returns(
    fb: &FbModel<f32>,
    env: &PointMass,
    z: &LatentZ<f32>,
    task: &TaskSpec,
    starts: &[env::EnvState],
) -> Result<(Vec<f64>, f64, usize)> {
    let k = starts.len();
    let mut states = starts.to_vec();
    let mut returns = vec![0.0; k];
    let mut rate = 0.0;
    let mut steps = 0;
    let zs = Array2::from_shape_fn((k, z.dim()), |(_, j)| z.vector[j]);
    let mut done = vec![false; k];
    while !done.iter().all(|&d| d) {
        let obs = Array2::from_shape_fn((k, OBS_DIM), |(i, j)| env.observe(&states[i])[j]);
        let a = fb.actor_action(obs.view(), zs.view())?;
        for i in 0..k {
            if done[i] {
                continue;
            }
            let act = Action([a[[i, 0]], a[[i, 1]]]);
            let (next, end) = env.step(&states[i], act)?;
            returns[i] += env::task_reward(&next, task) as f64;
            rate += 0.1 * env::reg_terms(&next, &act, &Action(states[i].prev_action)).action_rate as f64;
            steps += 1;
            states[i] = next;
            done[i] = end;
        }
    }
    Ok((returns, rate, steps))
}

/// Infers `z_r` for every task from buffer samples, then rolls noiseless
/// evaluation episodes from seeded start states.
pub fn evaluate(
    fb: &FbModel<f32>,
    replay: &ReplayBuffer,
    tasks: &[TaskSpec],
    cfg: &EvalConfig,
    mode: &str,
    run_seed: u64,
) -> Result<EvalReport> {
    if cfg.episodes == 0 || cfg.infer_samples == 0 {
        return Err(Error::Usage("evaluation needs at least one episode and sample".into()));
    }
    let env = PointMass::new(replay.params().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::with_capacity(tasks.len());
    let mut rate = 0.0;
    let mut steps = 0;
    for task in tasks {
        let (proj, rewards) = labeled_samples(replay, task, cfg.infer_samples, &mut rng)?;
        let z = fb.infer_task_embedding(proj.view(), &rewards)?;
        let starts: Vec<_> = (0..cfg.episodes).map(|_| env.reset_with(&mut rng)).collect();
        let (returns, r, s) = rollout_returns(fb, &env, &z, task, &starts)?;
        rate += r;
        steps += s;
        results.push(TaskResult::from_returns(*task, returns));
    }
    let recent = replay.recent_projections(cfg.entropy_window);
    let grid = HistogramGrid {
        bins: cfg.entropy_bins,
        ..HistogramGrid::default()
    };
    let entropy = if recent.is_empty() {
        f64::NAN
    } else {
        behavior_entropy(&recent, &grid)?.entropy
    };
    Ok(EvalReport {
        mode: mode.to_string(),
        seed: run_seed,
        tasks: results,
        behavior_entropy: entropy,
        mean_action_rate: if steps == 0 { f64::NAN } else { rate / steps as f64 },
    })
}

/// Evaluates a trainer's current model with the evaluation settings from
/// its config.
pub fn evaluate_trainer(t: &Trainer, tasks: &[TaskSpec], seed: u64) -> Result<EvalReport> {
    let cfg = EvalConfig {
        infer_samples: t.cfg.infer_samples,
        episodes: t.cfg.eval_episodes,
        seed,
        entropy_window: t.cfg.entropy_window,
        entropy_bins: t.cfg.entropy_bins,
    };
    evaluate(&t.fb, &t.replay, tasks, &cfg, t.cfg.mode.name(), t.cfg.seed)
}

/// Loads a checkpoint directory and evaluates it.
pub fn evaluate_checkpoint(dir: &Path, tasks: &[TaskSpec], seed: u64) -> Result<EvalReport> {
    let t = Trainer::load(dir)?;
    evaluate_trainer(&t, tasks, seed)
}

/// Reads `(projected state, reward)` samples: a header row, then
/// `vel_x, vel_y, reward` per line.
pub fn read_reward_samples(path: &Path) -> Result<(Array2<f32>, Vec<f32>)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "reward samples file not found".into(),
        },
        _ => Error::Io(e),
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format(path, e.to_string()))?;
        if rec.len() != PROJ_DIM + 1 {
            return Err(format(path, format!("row {} has {} columns, expected 3", line + 1, rec.len())));
        }
        let mut vals = [0.0f32; 3];
        for (v, field) in vals.iter_mut().zip(rec.iter()) {
            *v = field
                .parse()
                .ok()
                .filter(|x: &f32| x.is_finite())
                .ok_or_else(|| format(path, format!("row {}: bad number {field:?}", line + 1)))?;
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Usage(format!("{} holds no reward samples", path.display())));
    }
    let proj = Array2::from_shape_fn((rows.len(), PROJ_DIM), |(i, j)| rows[i][j]);
    Ok((proj, rows.iter().map(|r| r[2]).collect()))
}

pub fn infer_from_samples(fb: &FbModel<f32>, proj: ArrayView2<f32>, rewards: &[f32]) -> Result<LatentZ<f32>> {
    fb.infer_task_embedding(proj, rewards)
}

/// One header row `z0,…,z{d−1}` and one value row.
pub fn z_csv(z: &LatentZ<f32>) -> Vec<u8> {
    let header: Vec<String> = (0..z.dim()).map(|i| format!("z{i}")).collect();
    let values: Vec<String> = z.vector.iter().map(|v| v.to_string()).collect();
    format!("{}\n{}\n", header.join(","), values.join(",")).into_bytes()
}

/// A run directory's metrics, evaluation and model, as needed for export.
struct RunData {
    mode: String,
    seed: u64,
    metrics: Vec<crate::trainer::MetricsRow>,
    eval: Option<Vec<csv::StringRecord>>,
    density: Option<Vec<(f64, f64, f64)>>,
}

fn load_run(dir: &Path, grid_n: usize) -> Result<RunData> {
    let metrics_path = dir.join(METRICS_FILE);
    if !metrics_path.exists() {
        return Err(Error::MissingArtifact {
            path: metrics_path,
            hint: "run directory has no metrics; train first".into(),
        });
    }
    let metrics = read_metrics(&metrics_path)?;
    let (mode, seed) = metrics
        .first()
        .map(|r| (r.mode.clone(), r.seed))
        .ok_or_else(|| format(&metrics_path, "metrics file has no rows"))?;
    let eval_path = dir.join(EVAL_FILE);
    let eval = if eval_path.exists() {
        let mut rdr = csv::Reader::from_path(&eval_path).map_err(|e| format(&eval_path, e.to_string()))?;
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format(&eval_path, e.to_string()))?;
        Some(rows)
    } else {
        None
    };
    let ckpt = dir.join(CHECKPOINT_DIR);
    let density = if ckpt.exists() {
        let t = Trainer::load(&ckpt)?;
        if t.flow.fitted {
            Some(t.flow.density_grid(-2.0, 2.0, grid_n)?)
        } else {
            None
        }
    } else {
        None
    };
    Ok(RunData {
        mode,
        seed,
        metrics,
        eval,
        density,
    })
}

/// Writes plot data for one or more run directories into `out_dir`:
/// behavior entropy per metrics row, per-task returns keyed by mode (when
/// runs have been evaluated), and flow log-density grids (when fitted).
/// Every input is read before anything is written.
pub fn export_runs(runs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Usage("export needs at least one run directory".into()));
    }
    let data = runs.iter().map(|r| load_run(r, 41)).collect::<Result<Vec<_>>>()?;

    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "seed", "step", "behavior_entropy"]).map_err(csv_err)?;
    for d in &data {
        for r in &d.metrics {
            w.write_record([d.mode.clone(), d.seed.to_string(), r.step.to_string(), r.behavior_entropy.to_string()])
                .map_err(csv_err)?;
        }
    }
    files.push((out_dir.join(ENTROPY_EXPORT), w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?));

    if data.iter().any(|d| d.eval.is_some()) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "target_vx", "target_vy", "speed", "mode", "seed", "mean_return", "std_return"])
            .map_err(csv_err)?;
        let mut rows: Vec<Vec<String>> = Vec::new();
        for d in &data {
            for r in d.eval.iter().flatten() {
                rows.push(
                    [2, 3, 4, 5, 0, 1, 6, 7]
                        .iter()
                        .map(|&i| r.get(i).unwrap_or("").to_string())
                        .collect(),
                );
            }
        }
        rows.sort_by(|a, b| (&a[3], &a[0], &a[4], &a[5]).cmp(&(&b[3], &b[0], &b[4], &b[5])));
        for r in rows {
            w.write_record(&r).map_err(csv_err)?;
        }
        files.push((out_dir.join(TASK_EXPORT), w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?));
    }

    if data.iter().any(|d| d.density.is_some()) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "seed", "vel_x", "vel_y", "log_density"]).map_err(csv_err)?;
        for d in &data {
            for &(x, y, l) in d.density.iter().flatten() {
                w.write_record([d.mode.clone(), d.seed.to_string(), x.to_string(), y.to_string(), l.to_string()])
                    .map_err(csv_err)?;
            }
        }
        files.push((out_dir.join(DENSITY_EXPORT), w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?));
    }

    fs::create_dir_all(out_dir)?;
    for (p, bytes) in &files {
        write_atomic(p, bytes)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::env::{task_grid, EnvParams};
    use crate::explore::Mode;
    use crate::fb::FbArch;
    use crate::replay::Transition;

    fn small_cfg(mode: Mode, seed: u64) -> RunConfig {
        let mut c = RunConfig {
            mode,
            seed,
            total_steps: 1200,
            workers: 4,
            batch_size: 64,
            random_steps: 200,
            z_dim: 4,
            hidden_forward: 16,
            hidden_backward: 16,
            hidden_actor: 16,
            critic_hidden: 16,
            critic_layers: 2,
            pool_size: 64,
            z_refresh: 20,
            flow_refresh: 400,
            flow_layers: 2,
            flow_hidden: 8,
            flow_epochs: 2,
            flow_fit_samples: 512,
            entropy_window: 1000,
            infer_samples: 500,
            eval_episodes: 3,
            ..RunConfig::default()
        };
        c.validate().unwrap();
        c
    }

    fn random_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let env = PointMass::new(EnvParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(n, n, env.params.clone());
        let mut s = env.reset_with(&mut rng);
        for _ in 0..n {
            let a = Action([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]);
            let (next, done) = env.step(&s, a).unwrap();
            buf.append(Transition {
                state: s,
                action: a,
                next,
                reg_reward: env::reg_reward(&next, &a, &Action(s.prev_action)),
                done,
                episode: 0,
            })
            .unwrap();
            s = if done { env.reset_with(&mut rng) } else { next };
        }
        buf
    }

    #[test]
    fn returns_stay_within_episode_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fb = FbModel::<f32>::new(&FbArch { z_dim: 4, hidden_forward: 8, hidden_backward: 8, hidden_actor: 8 }, &mut rng).unwrap();
        let buf = random_buffer(2000, 1);
        let cfg = EvalConfig { infer_samples: 300, episodes: 2, ..EvalConfig::default() };
        let rep = evaluate(&fb, &buf, &task_grid(), &cfg, "FB", 0).unwrap();
        assert_eq!(rep.tasks.len(), 17);
        for t in &rep.tasks {
            assert_eq!(t.returns.len(), 2);
            assert!(t.returns.iter().all(|&r| (0.0..=250.0).contains(&r)));
        }
        assert!(rep.mean_action_rate >= 0.0 && rep.behavior_entropy > 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut t = Trainer::new(small_cfg(Mode::Mebe, 1)).unwrap();
        t.run_until(800).unwrap();
        let tasks = &task_grid()[..3];
        assert_eq!(evaluate_trainer(&t, tasks, 4).unwrap(), evaluate_trainer(&t, tasks, 4).unwrap());
    }

    #[test]
    fn stationary_policy_scores_full_reward_on_the_origin_task() {
        // a zero actor never moves, so every step has velocity 0
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut fb = FbModel::<f32>::new(&FbArch { z_dim: 4, hidden_forward: 8, hidden_backward: 8, hidden_actor: 8 }, &mut rng).unwrap();
        for l in fb.actor.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let env = PointMass::new(EnvParams::default());
        let z = LatentZ { vector: ndarray::Array1::from(vec![2.0f32, 0.0, 0.0, 0.0]), source: crate::fb::ZSource::Inferred };
        let starts = [env.reset(0), env.reset(1)];
        let (ret, rate, steps) = rollout_returns(&fb, &env, &z, &TaskSpec::new([0.0, 0.0]), &starts).unwrap();
        let len = env.params.episode_len as f64;
        assert!(ret.iter().all(|&r| (r - len).abs() < 1e-9), "{ret:?}");
        assert_eq!(rate, 0.0);
        assert_eq!(steps, 2 * env.params.episode_len as usize);
    }

    #[test]
    fn merge_pools_episode_returns() {
        let task = TaskSpec::new([0.0, 0.0]);
        let a = EvalReport { mode: "FB".into(), seed: 0, tasks: vec![TaskResult::from_returns(task, vec![1.0, 3.0])], behavior_entropy: 1.0, mean_action_rate: 0.2 };
        let b = EvalReport { seed: 1, tasks: vec![TaskResult::from_returns(task, vec![5.0])], behavior_entropy: 3.0, mean_action_rate: 0.4, ..a.clone() };
        let m = EvalReport::merge(&[a, b]).unwrap();
        assert_eq!(m.tasks[0].returns, vec![1.0, 3.0, 5.0]);
        assert!((m.tasks[0].mean_return - 3.0).abs() < 1e-12);
        assert!((m.tasks[0].std_return - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.behavior_entropy - 2.0).abs() < 1e-12 && (m.mean_action_rate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn reward_samples_parse_and_reject_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "vel_x,vel_y,reward\n0.1, 0.2, 1.0\n-0.5,0.0,0.25\n").unwrap();
        let (proj, r) = read_reward_samples(&p).unwrap();
        assert_eq!(proj.dim(), (2, 2));
        assert_eq!(r, vec![1.0, 0.25]);
        fs::write(&p, "").unwrap();
        assert!(matches!(read_reward_samples(&p), Err(Error::Usage(_))));
        fs::write(&p, "vel_x,vel_y,reward\n").unwrap();
        assert!(matches!(read_reward_samples(&p), Err(Error::Usage(_))));
        fs::write(&p, "vel_x,vel_y,reward\n1,2\n").unwrap();
        assert!(matches!(read_reward_samples(&p), Err(Error::Format { .. })));
        assert!(matches!(read_reward_samples(&dir.path().join("no.csv")), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn inferred_z_ignores_reward_scale_and_follows_mean_b_for_constant_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fb = FbModel::<f32>::new(&FbArch { z_dim: 4, hidden_forward: 8, hidden_backward: 8, hidden_actor: 8 }, &mut rng).unwrap();
        let proj = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.5f32..1.5));
        let r: Vec<f32> = (0..50).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let z1 = infer_from_samples(&fb, proj.view(), &r).unwrap();
        let r5: Vec<f32> = r.iter().map(|v| v * 5.0).collect();
        let z5 = infer_from_samples(&fb, proj.view(), &r5).unwrap();
        for (a, b) in z1.vector.iter().zip(z5.vector.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((z1.norm() - 2.0).abs() < 1e-5);
        let zc = infer_from_samples(&fb, proj.view(), &[0.7; 50]).unwrap();
        let mean_b = fb.backward.predict(proj.view()).unwrap().mean_axis(ndarray::Axis(0)).unwrap();
        let cos = zc.vector.dot(&mean_b) / (zc.norm() * mean_b.dot(&mean_b).sqrt());
        assert!(cos > 1.0 - 1e-5, "cos = {cos}");
    }

    #[test]
    fn z_file_layout() {
        let z = LatentZ { vector: ndarray::Array1::from(vec![1.0f32, -0.5]), source: crate::fb::ZSource::Inferred };
        assert_eq!(String::from_utf8(z_csv(&z)).unwrap(), "z0,z1\n1,-0.5\n");
    }

    #[test]
    fn export_writes_one_entropy_row_per_metrics_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        for (mode, seed) in [(Mode::Fb, 0), (Mode::Mebe, 0)] {
            let run = dir.path().join(format!("{}-{seed}", mode.name()));
            crate::trainer::train(&small_cfg(mode, seed), &run).unwrap();
            let rep = evaluate_checkpoint(&run.join(CHECKPOINT_DIR), &task_grid()[..2], 0).unwrap();
            fs::write(run.join(EVAL_FILE), rep.to_csv().unwrap()).unwrap();
            runs.push(run);
        }
        let out = dir.path().join("plots");
        let files = export_runs(&runs, &out).unwrap();
        assert_eq!(files.len(), 3);
        let ent = fs::read_to_string(out.join(ENTROPY_EXPORT)).unwrap();
        // metrics rows at 400, 800 and 1200 for each of the two runs
        assert_eq!(ent.lines().count(), 1 + 2 * 3);
        let tasks = fs::read_to_string(out.join(TASK_EXPORT)).unwrap();
        assert_eq!(tasks.lines().count(), 1 + 2 * 2);
        assert!(tasks.contains(",FB,") && tasks.contains(",MEBE,"));
        let density = fs::read_to_string(out.join(DENSITY_EXPORT)).unwrap();
        assert_eq!(density.lines().count(), 1 + 41 * 41);
    }

    #[test]
    fn export_of_empty_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        let out = dir.path().join("out");
        let err = export_runs(&[empty], &out).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
        assert!(!out.exists());
    }
}
