//! Deterministic 2-D point-mass with bounded velocity.
//!
//! The behavior projection is the planar velocity. Task rewards track a target
//! velocity with a Gaussian-shaped kernel; the regularization reward penalizes
//! action changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
pub const PROJ_DIM: usize = 2;

/// Physical constants of the point-mass.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvParams {
    pub dt: f32,
    pub accel_scale: f32,
    pub drag: f32,
    pub v_max: f32,
    pub arena: f32,
    pub episode_len: u32,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            dt: 0.05,
            accel_scale: 4.0,
            drag: 0.5,
            v_max: 2.0,
            arena: 5.0,
            episode_len: 250,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f32; 2],
    pub vel: [f32; 2],
    pub prev_action: [f32; 2],
    pub step: u32,
}

/// Acceleration command, clipped to `[-1, 1]` per component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action(pub [f32; 2]);

impl Action {
    pub fn new(a: [f32; 2]) -> Self {
        Action(a.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn zero() -> Self {
        Action([0.0; 2])
    }
}

/// A velocity-tracking task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub target_vel: [f32; 2],
    pub sigma: f32,
}

impl TaskSpec {
    pub fn new(target_vel: [f32; 2]) -> Self {
        TaskSpec {
            target_vel,
            sigma: 0.3,
        }
    }

    pub fn speed(&self) -> f32 {
        norm2(self.target_vel)
    }

    pub fn label(&self) -> String {
        format!("({:.3},{:.3})", self.target_vel[0], self.target_vel[1])
    }
}

fn norm2(v: [f32; 2]) -> f32 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// The 17 evaluation commands: the origin plus four directions on each of the
/// rings 0.4, 0.8, 1.2 and 1.6. Rings 0.8 and 1.6 are rotated by 45°.
pub fn task_grid() -> Vec<TaskSpec> {
    let mut tasks = vec![TaskSpec::new([0.0, 0.0])];
    for (ring, speed) in [0.4f64, 0.8, 1.2, 1.6].into_iter().enumerate() {
        let offset = if ring % 2 == 1 { std::f64::consts::FRAC_PI_4 } else { 0.0 };
        for k in 0..4 {
            let angle = offset + k as f64 * std::f64::consts::FRAC_PI_2;
            let v = [(speed * angle.cos()) as f32, (speed * angle.sin()) as f32];
            // snap the tiny residuals of cos/sin at multiples of π/2
            tasks.push(TaskSpec::new(v.map(|c| if c.abs() < 1e-6 { 0.0 } else { c })));
        }
    }
    tasks
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointMass {
    pub params: EnvParams,
}

impl PointMass {
    pub fn new(params: EnvParams) -> Self {
        PointMass { params }
    }

    /// Start state with position uniform in `[-1, 1]²` and zero velocity.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset_with(&mut rng)
    }

    pub fn reset_with<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        EnvState {
            pos: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            vel: [0.0; 2],
            prev_action: [0.0; 2],
            step: 0,
        }
    }

    /// Advances one control step. Returns the successor and whether the
    /// episode step cap was reached.
    pub fn step(&self, s: &EnvState, a: Action) -> Result<(EnvState, bool)> {
        if !a.0.iter().all(|v| v.is_finite()) {
            return Err(Error::Env(format!("non-finite action {:?}", a.0)));
        }
        let a = Action::new(a.0);
        let p = &self.params;
        let mut next = *s;
        for i in 0..2 {
            let v = s.vel[i] + p.dt * (p.accel_scale * a.0[i] - p.drag * s.vel[i]);
            next.vel[i] = v.clamp(-p.v_max, p.v_max);
            next.pos[i] = (s.pos[i] + p.dt * next.vel[i]).clamp(-p.arena, p.arena);
        }
        next.prev_action = a.0;
        next.step = s.step + 1;
        Ok((next, next.step >= p.episode_len))
    }

    /// Network input features: position scaled by the arena, velocity scaled
    /// by `v_max`, and the previous action.
    pub fn observe(&self, s: &EnvState) -> [f32; OBS_DIM] {
        let p = &self.params;
        [
            s.pos[0] / p.arena,
            s.pos[1] / p.arena,
            s.vel[0] / p.v_max,
            s.vel[1] / p.v_max,
            s.prev_action[0],
            s.prev_action[1],
        ]
    }

    /// Appendix-B-style filter: the mass is pinned at a wall and still pushing
    /// outward.
    pub fn is_degenerate(&self, s: &EnvState) -> bool {
        let arena = self.params.arena;
        (0..2).any(|i| s.pos[i].abs() >= arena && s.pos[i] * s.vel[i] > 0.0)
    }

    pub fn state_is_valid(&self, s: &EnvState) -> bool {
        let p = &self.params;
        s.pos.iter().all(|v| v.is_finite() && v.abs() <= p.arena)
            && s.vel.iter().all(|v| v.is_finite() && v.abs() <= p.v_max)
            && s.prev_action.iter().all(|v| v.is_finite() && v.abs() <= 1.0)
    }
}

/// Behavior projection: the planar velocity.
pub fn project(s: &EnvState) -> [f32; PROJ_DIM] {
    s.vel
}

pub fn task_reward(next: &EnvState, task: &TaskSpec) -> f32 {
    task_reward_at(project(next), task)
}

/// `exp(-(‖v − v*‖ / σ)²)`.
pub fn task_reward_at(vel: [f32; 2], task: &TaskSpec) -> f32 {
    let e = norm2([vel[0] - task.target_vel[0], vel[1] - task.target_vel[1]]);
    (-(e / task.sigma).powi(2)).exp()
}

/// Individual regularization penalty terms (all ≥ 0).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegTerms {
    pub joint_acc: f32,
    pub action_rate: f32,
    pub feet_slide: f32,
}

impl RegTerms {
    pub fn reward(&self) -> f32 {
        -2.5e-7 * self.joint_acc - 0.1 * self.action_rate - 0.1 * self.feet_slide
    }
}

/// Only the action-rate term exists for the point-mass.
pub fn reg_terms(_next: &EnvState, a: &Action, a_prev: &Action) -> RegTerms {
    let d0 = a.0[0] - a_prev.0[0];
    let d1 = a.0[1] - a_prev.0[1];
    RegTerms {
        joint_acc: 0.0,
        action_rate: d0 * d0 + d1 * d1,
        feet_slide: 0.0,
    }
}

pub fn reg_reward(next: &EnvState, a: &Action, a_prev: &Action) -> f32 {
    reg_terms(next, a, a_prev).reward()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env() -> PointMass {
        PointMass::default()
    }

    fn at(pos: [f32; 2], vel: [f32; 2]) -> EnvState {
        EnvState {
            pos,
            vel,
            prev_action: [0.0; 2],
            step: 0,
        }
    }

    #[test]
    fn reset_is_deterministic_and_at_rest() {
        let e = env();
        assert_eq!(e.reset(42), e.reset(42));
        let s = e.reset(42);
        assert_eq!(s.vel, [0.0, 0.0]);
        assert_eq!(s.prev_action, [0.0, 0.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn reset_positions_are_centered() {
        let e = env();
        let n = 10_000;
        let mut mean = [0.0f64; 2];
        for seed in 0..n {
            let s = e.reset(seed);
            mean[0] += s.pos[0] as f64 / n as f64;
            mean[1] += s.pos[1] as f64 / n as f64;
            assert!(s.pos.iter().all(|v| v.abs() <= 1.0));
        }
        assert!(mean[0].abs() < 0.05 && mean[1].abs() < 0.05, "{mean:?}");
    }

    #[test]
    fn one_step_dynamics() {
        let e = env();
        let (s, done) = e.step(&at([0.0, 0.0], [0.0, 0.0]), Action::new([1.0, 0.0])).unwrap();
        assert!((s.vel[0] - 0.2).abs() < 1e-6 && s.vel[1] == 0.0);
        assert!((s.pos[0] - 0.01).abs() < 1e-7 && s.pos[1] == 0.0);
        assert_eq!(s.prev_action, [1.0, 0.0]);
        assert!(!done);
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let e = env();
        let s0 = at([0.3, -0.7], [0.0, 0.0]);
        let (s, _) = e.step(&s0, Action::zero()).unwrap();
        assert_eq!(s.pos, s0.pos);
    }

    #[test]
    fn constant_push_saturates_at_v_max() {
        // the unclipped fixed point 4/0.5 = 8 exceeds v_max
        let e = env();
        let mut s = at([0.0, 0.0], [0.0, 0.0]);
        for _ in 0..200 {
            s = e.step(&s, Action::new([1.0, 0.0])).unwrap().0;
        }
        assert_eq!(s.vel[0], 2.0);
    }

    #[test]
    fn episode_ends_at_step_cap() {
        let e = env();
        let mut s = e.reset(0);
        for i in 1..=250 {
            let (n, done) = e.step(&s, Action::zero()).unwrap();
            assert_eq!(done, i == 250);
            s = n;
        }
    }

    #[test]
    fn non_finite_action_is_rejected() {
        assert!(matches!(
            env().step(&env().reset(0), Action([f32::NAN, 0.0])),
            Err(Error::Env(_))
        ));
    }

    #[test]
    fn projection_is_velocity() {
        assert_eq!(project(&at([1.0, 2.0], [0.3, -0.1])), [0.3, -0.1]);
        assert_eq!(project(&env().reset(5)), [0.0, 0.0]);
        let s = at([0.0, 0.0], [0.3, -0.1]);
        let p = project(&s);
        assert_eq!(project(&at([4.0, 4.0], p)), p);
    }

    #[test]
    fn task_reward_values() {
        let task = TaskSpec::new([0.0, 0.0]);
        assert_eq!(task_reward(&at([0.0, 0.0], [0.0, 0.0]), &task), 1.0);
        let r1 = task_reward(&at([0.0, 0.0], [0.3, 0.0]), &task);
        assert!((r1 - (-1.0f32).exp()).abs() < 1e-6, "{r1}");
        let r2 = task_reward(&at([0.0, 0.0], [0.0, 0.6]), &task);
        assert!((r2 - 0.018316).abs() < 1e-6, "{r2}");
    }

    #[test]
    fn reg_reward_values() {
        let s = at([0.0, 0.0], [0.0, 0.0]);
        let a = Action::new([0.5, -0.5]);
        assert_eq!(reg_reward(&s, &a, &a), 0.0);
        assert!((reg_reward(&s, &Action::new([1.0, 0.0]), &Action::zero()) + 0.1).abs() < 1e-7);
        assert!((reg_reward(&s, &Action::new([1.0, 1.0]), &Action::zero()) + 0.2).abs() < 1e-7);
        let t = reg_terms(&s, &a, &Action::zero());
        assert_eq!((t.joint_acc, t.feet_slide), (0.0, 0.0));
    }

    #[test]
    fn degenerate_states() {
        let e = env();
        assert!(!e.is_degenerate(&at([0.0, 0.0], [1.0, 0.0])));
        assert!(e.is_degenerate(&at([5.0, 0.0], [1.0, 0.0])));
        assert!(!e.is_degenerate(&at([5.0, 0.0], [-1.0, 0.0])));
        assert!(e.is_degenerate(&at([0.0, -5.0], [0.0, -0.5])));
    }

    #[test]
    fn grid_has_17_reachable_tasks() {
        let grid = task_grid();
        assert_eq!(grid.len(), 17);
        assert_eq!(grid.iter().filter(|t| (t.speed() - 1.6).abs() < 1e-5).count(), 4);
        assert!(grid.iter().all(|t| t.speed() <= 2.0 && t.sigma > 0.0));
    }

    proptest! {
        #[test]
        fn bounds_hold_under_random_rollouts(seed in 0u64..10_000, actions in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 1..400)) {
            let e = env();
            let mut s = e.reset(seed);
            for (x, y) in actions {
                let (n, _) = e.step(&s, Action([x, y])).unwrap();
                prop_assert!(e.state_is_valid(&n));
                let again = e.step(&s, Action([x, y])).unwrap().0;
                prop_assert_eq!(n, again);
                s = n;
            }
        }

        #[test]
        fn task_reward_in_unit_interval(vx in -2.0f32..2.0, vy in -2.0f32..2.0, tx in -1.6f32..1.6, ty in -1.6f32..1.6) {
            let r = task_reward_at([vx, vy], &TaskSpec::new([tx, ty]));
            prop_assert!(r > 0.0 || (vx - tx).hypot(vy - ty) > 2.5);
            prop_assert!(r <= 1.0);
        }

        #[test]
        fn reg_reward_nonpositive(a in (-1.0f32..1.0, -1.0f32..1.0), b in (-1.0f32..1.0, -1.0f32..1.0)) {
            let s = at([0.0, 0.0], [0.0, 0.0]);
            let r = reg_reward(&s, &Action::new([a.0, a.1]), &Action::new([b.0, b.1]));
            prop_assert!(r <= 0.0);
            prop_assert_eq!(r == 0.0, a == b);
        }
    }
}
