//! Transition storage with FIFO eviction and the projected goal buffer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::env::{self, Action, EnvParams, EnvState, PointMass, ACTION_DIM, OBS_DIM, PROJ_DIM};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub action: Action,
    pub next: EnvState,
    pub reg_reward: f32,
    pub done: bool,
    pub episode: u32,
}

/// Fixed-capacity ring; once full the oldest entry is overwritten.
#[derive(Clone, Debug)]
struct Ring<T> {
    data: Vec<T>,
    head: usize,
    capacity: usize,
}

impl<T: Copy + PartialEq> PartialEq for Ring<T> {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.len() == other.len()
            && self.ordered().zip(other.ordered()).all(|(a, b)| a == b)
    }
}

impl<T: Copy> Ring<T> {
    fn new(capacity: usize) -> Self {
        Ring {
            data: Vec::new(),
            head: 0,
            capacity,
        }
    }

    fn push(&mut self, v: T) {
        if self.data.len() < self.capacity {
            self.data.push(v);
        } else {
            self.data[self.head] = v;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    /// Element `i` in insertion order (0 = oldest retained).
    fn get(&self, i: usize) -> T {
        self.data[(self.head + i) % self.data.len()]
    }

    fn ordered(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Projected next-states admitted for density fitting and goal sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalBuffer {
    ring: Ring<[f32; PROJ_DIM]>,
}

impl GoalBuffer {
    pub fn new(capacity: usize) -> Self {
        GoalBuffer {
            ring: Ring::new(capacity.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity
    }

    pub fn push(&mut self, g: [f32; PROJ_DIM]) {
        self.ring.push(g);
    }

    /// Oldest first.
    pub fn to_vec(&self) -> Vec<[f32; PROJ_DIM]> {
        self.ring.ordered().collect()
    }

    /// Uniform draws with replacement.
    pub fn sample_goal_states<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<[f32; PROJ_DIM]>> {
        if self.is_empty() {
            return Err(Error::NotReady("goal buffer is empty".into()));
        }
        Ok((0..n)
            .map(|_| self.ring.data[rng.random_range(0..self.ring.len())])
            .collect())
    }
}

/// A training minibatch: `(s, a, s′)` rows plus independently drawn future
/// states `s⁺`.
#[derive(Clone, Debug)]
pub struct FbBatch<T> {
    pub obs: Array2<T>,
    pub action: Array2<T>,
    pub next_obs: Array2<T>,
    /// `φ(s′)`, the backward-map input for the positive term.
    pub next_proj: Array2<T>,
    /// `φ(s⁺)`.
    pub future_proj: Array2<T>,
    pub reg_reward: Array1<T>,
    pub rows: Vec<usize>,
    pub future_rows: Vec<usize>,
}

impl<T: Real> FbBatch<T> {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }

    pub fn cast<U: Real>(&self) -> FbBatch<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        FbBatch {
            obs: c2(&self.obs),
            action: c2(&self.action),
            next_obs: c2(&self.next_obs),
            next_proj: c2(&self.next_proj),
            future_proj: c2(&self.future_proj),
            reg_reward: self.reg_reward.mapv(|v| U::of(v.as_f64())),
            rows: self.rows.clone(),
            future_rows: self.future_rows.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    ring: Ring<Transition>,
    goals: GoalBuffer,
    env: PointMass,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"FBMEBERB";
const SNAPSHOT_VERSION: u32 = 1;
/// Field order of one packed record; `step`, `done` and `episode` are u32,
/// everything else f32.
pub const SNAPSHOT_FIELDS: &str = "s.pos_x,s.pos_y,s.vel_x,s.vel_y,s.prev_ax,s.prev_ay,s.step,\
a_x,a_y,n.pos_x,n.pos_y,n.vel_x,n.vel_y,n.prev_ax,n.prev_ay,n.step,reg_reward,done,episode";
const RECORD_WORDS: usize = 19;

impl ReplayBuffer {
    pub fn new(capacity: usize, goal_capacity: usize, params: EnvParams) -> Self {
        ReplayBuffer {
            ring: Ring::new(capacity.max(1)),
            goals: GoalBuffer::new(goal_capacity),
            env: PointMass::new(params),
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity
    }

    pub fn params(&self) -> &EnvParams {
        &self.env.params
    }

    pub fn goals(&self) -> &GoalBuffer {
        &self.goals
    }

    /// Transition `i` in insertion order (0 = oldest retained).
    pub fn get(&self, i: usize) -> Transition {
        self.ring.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        self.ring.ordered()
    }

    /// Projected next-states of the `n` most recent transitions.
    pub fn recent_projections(&self, n: usize) -> Vec<[f32; PROJ_DIM]> {
        let len = self.len();
        (len.saturating_sub(n)..len)
            .map(|i| env::project(&self.get(i).next))
            .collect()
    }

    pub fn append(&mut self, t: Transition) -> Result<()> {
        if !self.env.state_is_valid(&t.state) {
            return Err(Error::InvalidTransition(format!(
                "state out of bounds: {:?}",
                t.state
            )));
        }
        if !self.env.state_is_valid(&t.next) {
            return Err(Error::InvalidTransition(format!(
                "next state out of bounds: {:?}",
                t.next
            )));
        }
        if !t.action.0.iter().all(|a| a.is_finite() && a.abs() <= 1.0) {
            return Err(Error::InvalidTransition(format!(
                "action outside [-1, 1]: {:?}",
                t.action.0
            )));
        }
        if !t.reg_reward.is_finite() {
            return Err(Error::InvalidTransition("non-finite reward".into()));
        }
        self.ring.push(t);
        if !self.env.is_degenerate(&t.next) {
            self.goals.push(env::project(&t.next));
        }
        Ok(())
    }

    pub fn sample_fb_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<FbBatch<f32>> {
        if self.len() < n || n == 0 {
            return Err(Error::NotReady(format!(
                "buffer holds {} transitions, batch needs {n}",
                self.len()
            )));
        }
        let len = self.len();
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
        let future_rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
        let mut obs = Array2::zeros((n, OBS_DIM));
        let mut action = Array2::zeros((n, ACTION_DIM));
        let mut next_obs = Array2::zeros((n, OBS_DIM));
        let mut next_proj = Array2::zeros((n, PROJ_DIM));
        let mut future_proj = Array2::zeros((n, PROJ_DIM));
        let mut reg_reward = Array1::zeros(n);
        for (i, (&r, &f)) in rows.iter().zip(&future_rows).enumerate() {
            let t = &self.ring.data[r];
            for (j, v) in self.env.observe(&t.state).into_iter().enumerate() {
                obs[[i, j]] = v;
            }
            for (j, v) in self.env.observe(&t.next).into_iter().enumerate() {
                next_obs[[i, j]] = v;
            }
            for j in 0..ACTION_DIM {
                action[[i, j]] = t.action.0[j];
            }
            let p = env::project(&t.next);
            let q = env::project(&self.ring.data[f].next);
            for j in 0..PROJ_DIM {
                next_proj[[i, j]] = p[j];
                future_proj[[i, j]] = q[j];
            }
            reg_reward[i] = t.reg_reward;
        }
        Ok(FbBatch {
            obs,
            action,
            next_obs,
            next_proj,
            future_proj,
            reg_reward,
            rows,
            future_rows,
        })
    }

    pub fn sample_goal_states<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<[f32; PROJ_DIM]>> {
        self.goals.sample_goal_states(n, rng)
    }

    /// Writes the buffer as packed little-endian 32-bit records.
    ///
    /// Layout: magic `FBMEBERB`, then u32 fields `version`, `record_words`,
    /// `record_count`, `capacity`, `goal_count`, `goal_capacity`,
    /// `field_list_len`, the ASCII field list ([`SNAPSHOT_FIELDS`]), the
    /// transition records oldest first, then `goal_count` pairs of f32.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(64 + self.len() * RECORD_WORDS * 4);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        let header = [
            SNAPSHOT_VERSION,
            RECORD_WORDS as u32,
            self.len() as u32,
            self.capacity() as u32,
            self.goals.len() as u32,
            self.goals.capacity() as u32,
            SNAPSHOT_FIELDS.len() as u32,
        ];
        for h in header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(SNAPSHOT_FIELDS.as_bytes());
        let f = |out: &mut Vec<u8>, v: f32| out.extend_from_slice(&v.to_le_bytes());
        let u = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        let state = |out: &mut Vec<u8>, s: &EnvState| {
            for v in s.pos.iter().chain(&s.vel).chain(&s.prev_action) {
                f(out, *v);
            }
            u(out, s.step);
        };
        for t in self.iter() {
            state(&mut out, &t.state);
            f(&mut out, t.action.0[0]);
            f(&mut out, t.action.0[1]);
            state(&mut out, &t.next);
            f(&mut out, t.reg_reward);
            u(&mut out, t.done as u32);
            u(&mut out, t.episode);
        }
        for g in self.goals.ring.ordered() {
            f(&mut out, g[0]);
            f(&mut out, g[1]);
        }
        write_atomic(path, &out)
    }

    pub fn read_snapshot(path: &Path, params: EnvParams) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact {
                    path: path.to_path_buf(),
                    hint: "no replay snapshot; train a run or export one first".into(),
                },
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        let bad = |d: &str| Error::format(path, d);
        if bytes.len() < 8 + 28 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(bad("not a replay snapshot"));
        }
        let mut cursor = 8;
        let word = |cursor: &mut usize| -> Result<[u8; 4]> {
            let w = bytes
                .get(*cursor..*cursor + 4)
                .ok_or_else(|| bad("truncated"))?;
            *cursor += 4;
            Ok([w[0], w[1], w[2], w[3]])
        };
        let mut h = [0u32; 7];
        for v in &mut h {
            *v = u32::from_le_bytes(word(&mut cursor)?);
        }
        let [version, words, count, capacity, goal_count, goal_capacity, fields_len] = h;
        if version != SNAPSHOT_VERSION || words as usize != RECORD_WORDS {
            return Err(bad("unsupported snapshot version"));
        }
        let fields = bytes
            .get(cursor..cursor + fields_len as usize)
            .ok_or_else(|| bad("truncated field list"))?;
        if fields != SNAPSHOT_FIELDS.as_bytes() {
            return Err(bad("unexpected field list"));
        }
        cursor += fields_len as usize;
        let expected = cursor + (count as usize * RECORD_WORDS + goal_count as usize * 2) * 4;
        if bytes.len() != expected {
            return Err(bad("record count does not match file size"));
        }
        let mut buf = ReplayBuffer::new(capacity as usize, goal_capacity as usize, params);
        let mut vals = [[0u8; 4]; RECORD_WORDS];
        let fl = |b: [u8; 4]| f32::from_le_bytes(b);
        let ul = |b: [u8; 4]| u32::from_le_bytes(b);
        for _ in 0..count {
            for v in &mut vals {
                *v = word(&mut cursor)?;
            }
            let st = |o: usize| EnvState {
                pos: [fl(vals[o]), fl(vals[o + 1])],
                vel: [fl(vals[o + 2]), fl(vals[o + 3])],
                prev_action: [fl(vals[o + 4]), fl(vals[o + 5])],
                step: ul(vals[o + 6]),
            };
            buf.ring.push(Transition {
                state: st(0),
                action: Action([fl(vals[7]), fl(vals[8])]),
                next: st(9),
                reg_reward: fl(vals[16]),
                done: ul(vals[17]) != 0,
                episode: ul(vals[18]),
            });
        }
        for _ in 0..goal_count {
            let x = fl(word(&mut cursor)?);
            let y = fl(word(&mut cursor)?);
            buf.goals.push([x, y]);
        }
        Ok(buf)
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
