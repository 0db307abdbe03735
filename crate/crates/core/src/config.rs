//! Run configuration and its `key = value` text format.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Every key printed by [`RunConfig::dump`] is accepted by
//! [`RunConfig::parse`], and a dump parses back to an identical config.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::explore::{ExplorationConfig, Mode};
use crate::fb::{FbArch, FbCoefs};
use crate::flow::FlowFitConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Environment transitions summed over all workers.
    pub total_steps: usize,
    pub workers: usize,
    /// Per-worker environment steps between agent updates.
    pub rollout_steps: usize,
    pub grad_steps: usize,
    pub policy_delay: usize,
    pub batch_size: usize,
    pub random_steps: usize,
    pub lambda_reg: f64,
    pub gamma: f64,
    pub ortho_coef: f64,
    pub fz_coef: f64,

    pub z_dim: usize,
    pub hidden_forward: usize,
    pub hidden_backward: usize,
    pub hidden_actor: usize,
    pub critic_hidden: usize,
    pub critic_layers: usize,

    pub lr_forward: f64,
    pub lr_backward: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub tau_actor: f64,
    pub tau_critic: f64,

    pub expl_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,

    pub beta: f64,
    pub epsilon: f64,
    pub goal_fraction: f64,
    pub pool_size: usize,
    pub z_refresh: usize,

    pub flow_refresh: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_epochs: usize,
    pub flow_batch: usize,
    pub flow_lr: f64,
    /// Goal states drawn (with replacement) for each flow refit.
    pub flow_fit_samples: usize,

    pub buffer_capacity: usize,
    pub goal_capacity: usize,
    pub entropy_window: usize,
    pub entropy_bins: usize,

    pub infer_samples: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Mebe,
            seed: 0,
            total_steps: 100_000,
            workers: 16,
            rollout_steps: 10,
            grad_steps: 10,
            policy_delay: 2,
            batch_size: 512,
            random_steps: 1000,
            lambda_reg: 20.0,
            gamma: 0.98,
            ortho_coef: 100.0,
            fz_coef: 0.1,
            z_dim: 16,
            hidden_forward: 64,
            hidden_backward: 64,
            hidden_actor: 64,
            critic_hidden: 64,
            critic_layers: 4,
            lr_forward: 1e-3,
            lr_backward: 1e-3,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            tau_forward: 0.01,
            tau_backward: 0.01,
            tau_actor: 0.01,
            tau_critic: 0.005,
            expl_noise: 0.2,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            beta: 2.0,
            epsilon: 0.1,
            goal_fraction: 0.8,
            pool_size: 1024,
            z_refresh: 100,
            flow_refresh: 1000,
            flow_layers: 10,
            flow_hidden: 64,
            flow_epochs: 30,
            flow_batch: 256,
            flow_lr: 1e-3,
            flow_fit_samples: 10_000,
            buffer_capacity: 500_000,
            goal_capacity: 10_000,
            entropy_window: 50_000,
            entropy_bins: 20,
            infer_samples: 10_000,
            eval_episodes: 10,
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_count(v: &str) -> std::result::Result<usize, String> {
    parse_value::<usize>(&v.replace('_', ""))
}

macro_rules! fields {
    ($self:ident, $key:ident, $value:ident; counts: $($c:ident),*; floats: $($f:ident),*) => {
        impl RunConfig {
            /// Every key with its current value, in dump order.
            pub fn entries(&$self) -> Vec<(&'static str, String)> {
                let mut out = vec![
                    ("mode", $self.mode.name().to_string()),
                    ("seed", $self.seed.to_string()),
                ];
                $(out.push((stringify!($c), $self.$c.to_string()));)*
                $(out.push((stringify!($f), format!("{:?}", $self.$f)));)*
                out
            }

            /// Sets one key from text.
            pub fn set(&mut $self, $key: &str, $value: &str) -> Result<()> {
                let v = $value.trim();
                let res: std::result::Result<(), String> = match $key.trim() {
                    "mode" => Mode::parse(v)
                        .map(|m| $self.mode = m)
                        .ok_or_else(|| format!("unknown mode {v:?} (expected FB, FB-Critic, MEBE or MEBE-abl)")),
                    "seed" => parse_value(v).map(|x| $self.seed = x),
                    $(stringify!($c) => parse_count(v).map(|x| $self.$c = x),)*
                    $(stringify!($f) => parse_value(v).map(|x| $self.$f = x),)*
                    other => return Err(Error::Config(format!("unknown key: {other}"))),
                };
                res.map_err(|e| Error::Config(format!("{}: {e}", $key.trim())))
            }
        }
    };
}

fields!(self, key, value;
    counts: total_steps, workers, rollout_steps, grad_steps, policy_delay, batch_size, random_steps,
        z_dim, hidden_forward, hidden_backward, hidden_actor, critic_hidden, critic_layers,
        pool_size, z_refresh, flow_refresh, flow_layers, flow_hidden, flow_epochs, flow_batch,
        flow_fit_samples, buffer_capacity, goal_capacity, entropy_window, entropy_bins,
        infer_samples, eval_episodes;
    floats: lambda_reg, gamma, ortho_coef, fz_coef, lr_forward, lr_backward, lr_actor, lr_critic,
        tau_forward, tau_backward, tau_actor, tau_critic, expl_noise, target_noise,
        target_noise_clip, beta, epsilon, goal_fraction, flow_lr);

impl RunConfig {
    /// Parses config text on top of the defaults and validates the result.
    /// All offending keys are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(Error::Config(msg)) = cfg.set(k, v) {
                        errors.push(msg);
                    }
                }
                None => errors.push(format!("line {}: expected `key = value`", n + 1)),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    hint: "config file not found".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        Self::parse(&text)
    }

    /// Applies `(key, value)` overrides, collecting every bad key, then
    /// validates.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut errors = Vec::new();
        for (k, v) in overrides {
            if let Err(e) = self.set(k, v) {
                errors.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        self.validate()
    }

    pub fn dump(&self) -> String {
        let mut s = String::from("# run configuration: key = value, `#` starts a comment\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Checks ranges and cross-field consistency. Mode FB forces
    /// `lambda_reg = 0`.
    pub fn validate(&mut self) -> Result<()> {
        if self.mode == Mode::Fb {
            self.lambda_reg = 0.0;
        }
        let mut bad: Vec<&str> = Vec::new();
        for (k, v) in [
            ("workers", self.workers),
            ("rollout_steps", self.rollout_steps),
            ("grad_steps", self.grad_steps),
            ("policy_delay", self.policy_delay),
            ("batch_size", self.batch_size),
            ("hidden_forward", self.hidden_forward),
            ("hidden_backward", self.hidden_backward),
            ("hidden_actor", self.hidden_actor),
            ("critic_hidden", self.critic_hidden),
            ("critic_layers", self.critic_layers),
            ("flow_refresh", self.flow_refresh),
            ("flow_layers", self.flow_layers),
            ("flow_hidden", self.flow_hidden),
            ("flow_batch", self.flow_batch),
            ("flow_fit_samples", self.flow_fit_samples),
            ("buffer_capacity", self.buffer_capacity),
            ("goal_capacity", self.goal_capacity),
            ("entropy_window", self.entropy_window),
            ("entropy_bins", self.entropy_bins),
            ("infer_samples", self.infer_samples),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                bad.push(k);
            }
        }
        if self.z_dim < 2 {
            bad.push("z_dim");
        }
        if self.buffer_capacity < self.batch_size {
            bad.push("buffer_capacity");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bad.push("gamma");
        }
        for (k, v) in [
            ("tau_forward", self.tau_forward),
            ("tau_backward", self.tau_backward),
            ("tau_actor", self.tau_actor),
            ("tau_critic", self.tau_critic),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                bad.push(k);
            }
        }
        for (k, v) in [
            ("lr_forward", self.lr_forward),
            ("lr_backward", self.lr_backward),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("flow_lr", self.flow_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(k);
            }
        }
        for (k, v) in [
            ("lambda_reg", self.lambda_reg),
            ("ortho_coef", self.ortho_coef),
            ("fz_coef", self.fz_coef),
            ("expl_noise", self.expl_noise),
            ("target_noise", self.target_noise),
            ("target_noise_clip", self.target_noise_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(k);
            }
        }
        if let Err(Error::Config(msg)) = self.exploration().validate() {
            let keys = msg.trim_start_matches("invalid values for: ").to_string();
            let mut out = bad.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            out.push(keys);
            return Err(Error::Config(format!("invalid values for: {}", out.join(", "))));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid values for: {}", bad.join(", "))))
        }
    }

    pub fn exploration(&self) -> ExplorationConfig {
        ExplorationConfig {
            mode: self.mode,
            beta: self.beta,
            epsilon: self.epsilon,
            goal_fraction: self.goal_fraction,
            pool_size: self.pool_size,
            z_refresh: self.z_refresh,
        }
    }

    pub fn arch(&self) -> FbArch {
        FbArch {
            z_dim: self.z_dim,
            hidden_forward: self.hidden_forward,
            hidden_backward: self.hidden_backward,
            hidden_actor: self.hidden_actor,
        }
    }

    pub fn coefs(&self) -> FbCoefs {
        FbCoefs {
            gamma: self.gamma,
            ortho: self.ortho_coef,
            fz: self.fz_coef,
        }
    }

    pub fn flow_fit(&self) -> FlowFitConfig {
        FlowFitConfig {
            epochs: self.flow_epochs,
            batch_size: self.flow_batch,
            lr: self.flow_lr,
        }
    }

    /// Number of rollout-plus-update iterations for the step budget.
    pub fn iterations(&self) -> usize {
        self.total_steps.div_ceil(self.workers * self.rollout_steps)
    }

    /// `λ_reg` as used by the actor: zero whenever the critic is not trained.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.trains_critic() {
            self.lambda_reg
        } else {
            0.0
        }
    }
}
