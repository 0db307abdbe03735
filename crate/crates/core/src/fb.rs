//! Forward-backward representation: twin forward maps `F(s, a, z)`, a
//! backward map `B(φ(s))` on the behavior projection, a `z`-conditioned
//! actor, and their target copies.
//!
//! `F(s, a, z)ᵀ B(s⁺)` models the successor measure density of `π_z`
//! relative to the data distribution; `F(s, a, z)ᵀ z` is the Q-value of the
//! reward whose embedding is `z`.

use nalgebra::DMatrix;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::critic::RegCritic;
use crate::env::{Action, ACTION_DIM, OBS_DIM, PROJ_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, NetGrads};
use crate::real::Real;
use crate::replay::FbBatch;

/// Where a task embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZSource {
    Uniform,
    Goal,
    Inferred,
}

/// A task embedding on the sphere of radius `√d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ<T> {
    pub vector: Array1<T>,
    pub source: ZSource,
}

impl<T: Real> LatentZ<T> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> T {
        self.vector.dot(&self.vector).sqrt()
    }
}

/// Gaussian draws rescaled to norm `√d`, one per row.
pub fn uniform_sphere_rows<T: Real, R: Rng + ?Sized>(d: usize, count: usize, rng: &mut R) -> Array2<T> {
    let mut z = Array2::from_shape_simple_fn((count, d), || {
        T::of(rng.sample::<f64, _>(StandardNormal))
    });
    normalize_rows(&mut z);
    z
}

pub fn sample_uniform_sphere(d: usize, count: usize, seed: u64) -> Result<Vec<LatentZ<f32>>> {
    if d < 2 {
        return Err(Error::Config(format!("embedding dimension {d} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform_sphere_rows::<f32, _>(d, count, &mut rng);
    Ok(z
        .rows()
        .into_iter()
        .map(|r| LatentZ {
            vector: r.to_owned(),
            source: ZSource::Uniform,
        })
        .collect())
}

/// Rescales each row to norm `√d`. An all-zero row becomes `√d·e₀`.
pub fn normalize_rows<T: Real>(z: &mut Array2<T>) {
    let radius = T::of((z.ncols() as f64).sqrt());
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > T::zero() && n.is_finite() {
            row.mapv_inplace(|v| v * radius / n);
        } else {
            row.fill(T::zero());
            row[0] = radius;
        }
    }
}

pub(crate) fn row_dot<T: Real>(a: &Array2<T>, b: &ArrayView2<T>) -> Array1<T> {
    (a * b).sum_axis(Axis(1))
}

pub(crate) fn hcat<T: Real>(parts: &[ArrayView2<T>]) -> Result<Array2<T>> {
    concatenate(Axis(1), parts).map_err(|e| Error::Config(format!("row count mismatch: {e}")))
}

/// Network widths.
#[derive(Clone, Debug, PartialEq)]
pub struct FbArch {
    pub z_dim: usize,
    pub hidden_forward: usize,
    pub hidden_backward: usize,
    pub hidden_actor: usize,
}

/// Loss weights and discount.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbCoefs {
    pub gamma: f64,
    pub ortho: f64,
    pub fz: f64,
}

impl Default for FbCoefs {
    fn default() -> Self {
        FbCoefs {
            gamma: 0.98,
            ortho: 100.0,
            fz: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FbLossTerms {
    pub main: f64,
    pub ortho: f64,
    pub fz: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct FbGrads<T> {
    pub forward: [NetGrads<T>; 2],
    pub backward: NetGrads<T>,
}

/// Gradient-free quantities of the FB loss, computed from target networks
/// (and, for the stop-gradient sides, the online backward map).
#[derive(Clone, Debug)]
pub struct FbTargets<T> {
    /// `min_k F̄_k(s′_i, a′_i, z_i)ᵀ B̄(s⁺_j)`.
    pub target_m: Array2<T>,
    /// `B(s′)ᵀ Σ_B⁻¹ z + γ·min_k F̄_k(s′, a′, z)ᵀ z`.
    pub fz_target: Array1<T>,
    /// `B(s⁺)` held constant on one side of the orthonormality diagonal.
    pub stop_b: Array2<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorLossParts {
    pub total: f64,
    pub q_fb: f64,
    pub q_reg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbModel<T> {
    pub forward: [DenseNet<T>; 2],
    pub backward: DenseNet<T>,
    pub actor: DenseNet<T>,
    pub forward_target: [DenseNet<T>; 2],
    pub backward_target: DenseNet<T>,
    pub actor_target: DenseNet<T>,
    z_dim: usize,
}

impl<T: Real> FbModel<T> {
    pub fn new<R: Rng + ?Sized>(arch: &FbArch, rng: &mut R) -> Result<Self> {
        let d = arch.z_dim;
        if d < 2 {
            return Err(Error::Config(format!("embedding dimension {d} < 2")));
        }
        let relu = Activation::Relu;
        let hf = arch.hidden_forward;
        let f_widths = [OBS_DIM + ACTION_DIM + d, hf, hf, d];
        let f1 = DenseNet::new(&f_widths, relu, Activation::Linear, rng)?;
        let f2 = DenseNet::new(&f_widths, relu, Activation::Linear, rng)?;
        let hb = arch.hidden_backward;
        let b = DenseNet::new(&[PROJ_DIM, hb, hb, d], relu, Activation::Linear, rng)?;
        let ha = arch.hidden_actor;
        let actor = DenseNet::new(&[OBS_DIM + d, ha, ha, ACTION_DIM], relu, Activation::Tanh, rng)?;
        Ok(FbModel {
            forward_target: [f1.clone(), f2.clone()],
            forward: [f1, f2],
            backward_target: b.clone(),
            backward: b,
            actor_target: actor.clone(),
            actor,
            z_dim: d,
        })
    }

    pub fn from_parts(
        forward: [DenseNet<T>; 2],
        backward: DenseNet<T>,
        actor: DenseNet<T>,
    ) -> Result<Self> {
        let d = backward.output_width();
        if d < 2 {
            return Err(Error::Config(format!("embedding dimension {d} < 2")));
        }
        for f in &forward {
            if f.output_width() != d || f.input_width() != OBS_DIM + ACTION_DIM + d {
                return Err(Error::Config("forward map widths do not match embedding".into()));
            }
        }
        if backward.input_width() != PROJ_DIM
            || actor.input_width() != OBS_DIM + d
            || actor.output_width() != ACTION_DIM
        {
            return Err(Error::Config("backward/actor widths do not match".into()));
        }
        Ok(FbModel {
            forward_target: forward.clone(),
            forward,
            backward_target: backward.clone(),
            backward,
            actor_target: actor.clone(),
            actor,
            z_dim: d,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn cast<U: Real>(&self) -> FbModel<U> {
        FbModel {
            forward: [self.forward[0].cast(), self.forward[1].cast()],
            backward: self.backward.cast(),
            actor: self.actor.cast(),
            forward_target: [self.forward_target[0].cast(), self.forward_target[1].cast()],
            backward_target: self.backward_target.cast(),
            actor_target: self.actor_target.cast(),
            z_dim: self.z_dim,
        }
    }

    /// `B(φ)` for a batch of projected states.
    pub fn embed_backward(&self, proj: ArrayView2<T>) -> Result<Array2<T>> {
        self.backward.predict(proj)
    }

    /// Goal-reaching embeddings `B(φ)` rescaled to the sphere.
    pub fn goal_embeddings(&self, proj: ArrayView2<T>) -> Result<Array2<T>> {
        let mut z = self.backward.predict(proj)?;
        normalize_rows(&mut z);
        Ok(z)
    }

    /// Twin-min `F(s, a, z)ᵀ z`.
    pub fn q_value(&self, obs: ArrayView2<T>, action: ArrayView2<T>, z: ArrayView2<T>) -> Result<Array1<T>> {
        let input = hcat(&[obs, action, z])?;
        let q1 = row_dot(&self.forward[0].predict(input.view())?, &z);
        let q2 = row_dot(&self.forward[1].predict(input.view())?, &z);
        Ok(ndarray::Zip::from(&q1).and(&q2).map_collect(|&a, &b| a.min(b)))
    }

    /// Deterministic actor output in `[-1, 1]`.
    pub fn actor_action(&self, obs: ArrayView2<T>, z: ArrayView2<T>) -> Result<Array2<T>> {
        self.actor.predict(hcat(&[obs, z])?.view())
    }

    /// Target-actor action with clipped Gaussian smoothing noise.
    pub fn target_action<R: Rng + ?Sized>(
        &self,
        obs: ArrayView2<T>,
        z: ArrayView2<T>,
        noise_std: f64,
        noise_clip: f64,
        rng: &mut R,
    ) -> Result<Array2<T>> {
        let mut a = self.actor_target.predict(hcat(&[obs, z])?.view())?;
        if noise_std > 0.0 {
            a.mapv_inplace(|v| {
                let e = (noise_std * rng.sample::<f64, _>(StandardNormal)).clamp(-noise_clip, noise_clip);
                T::of((v.as_f64() + e).clamp(-1.0, 1.0))
            });
        }
        Ok(a)
    }

    /// Actor action at one state plus `N(0, noise_scale²)` exploration noise,
    /// clipped to the action box.
    pub fn policy_action<R: Rng + ?Sized>(
        &self,
        obs: &[f32; OBS_DIM],
        z: &Array1<T>,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Action> {
        let mut input = Array2::zeros((1, OBS_DIM + self.z_dim));
        for (j, &v) in obs.iter().enumerate() {
            input[[0, j]] = T::of(v as f64);
        }
        input.slice_mut(s![0, OBS_DIM..]).assign(z);
        let a = self.actor.predict(input.view())?;
        let mut out = [0.0f32; ACTION_DIM];
        for (j, o) in out.iter_mut().enumerate() {
            let mut v = a[[0, j]].as_f64();
            if noise_scale > 0.0 {
                v += noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            *o = v.clamp(-1.0, 1.0) as f32;
        }
        Ok(Action(out))
    }

    /// Computes the gradient-free parts of the FB loss. `next_action` is the
    /// target-actor action at `(s′, z)`.
    pub fn fb_targets(
        &self,
        batch: &FbBatch<T>,
        z: ArrayView2<T>,
        next_action: ArrayView2<T>,
        gamma: f64,
    ) -> Result<FbTargets<T>> {
        let next_in = hcat(&[batch.next_obs.view(), next_action, z])?;
        let fbar = [
            self.forward_target[0].predict(next_in.view())?,
            self.forward_target[1].predict(next_in.view())?,
        ];
        let bbar = self.backward_target.predict(batch.future_proj.view())?;
        let m1 = fbar[0].dot(&bbar.t());
        let m2 = fbar[1].dot(&bbar.t());
        let target_m = ndarray::Zip::from(&m1).and(&m2).map_collect(|&a, &b| a.min(b));

        let next_q1 = row_dot(&fbar[0], &z);
        let next_q2 = row_dot(&fbar[1], &z);
        let b_next = self.backward.predict(batch.next_proj.view())?;
        let implicit = implicit_reward(&b_next, &z)?;
        let g = T::of(gamma);
        let fz_target = ndarray::Zip::from(&implicit)
            .and(&next_q1)
            .and(&next_q2)
            .map_collect(|&r, &a, &b| r + g * a.min(b));
        let stop_b = self.backward.predict(batch.future_proj.view())?;
        Ok(FbTargets {
            target_m,
            fz_target,
            stop_b,
        })
    }

    /// Contrastive TD loss plus orthonormality and `Fz` regularizers, with
    /// gradients for both forward twins and the backward map.
    ///
    /// Main term, averaged over the twins and over all `(i, j)` pairs of the
    /// batch (every `s⁺_j` is independent of row `i`):
    /// `mean_ij (F_iᵀB⁺_j − γ T_ij)² − 2 mean_i F_iᵀ B(s′_i)`.
    pub fn fb_loss_with(
        &self,
        batch: &FbBatch<T>,
        z: ArrayView2<T>,
        targets: &FbTargets<T>,
        coefs: &FbCoefs,
    ) -> Result<(FbLossTerms, FbGrads<T>)> {
        let n = batch.len();
        let m = batch.future_proj.nrows();
        if z.nrows() != n || targets.target_m.dim() != (n, m) || targets.fz_target.len() != n {
            return Err(Error::Config("FB loss inputs have inconsistent row counts".into()));
        }
        let twins = 2.0;
        let gamma = T::of(coefs.gamma);
        let input = hcat(&[batch.obs.view(), batch.action.view(), z])?;
        let (bp, cache_p) = self.backward.forward(batch.future_proj.view())?;
        let (bn, cache_n) = self.backward.forward(batch.next_proj.view())?;

        let mut d_bp = Array2::<T>::zeros(bp.raw_dim());
        let mut d_bn = Array2::<T>::zeros(bn.raw_dim());
        let mut main = 0.0f64;
        let mut fz = 0.0f64;
        let mut forward_grads = Vec::with_capacity(2);

        let pair_scale = T::of(2.0 / (twins * (n * m) as f64));
        let pos_scale = T::of(-2.0 / (twins * n as f64));
        let fz_scale = T::of(coefs.fz * 2.0 / (twins * n as f64));
        for net in &self.forward {
            let (f, cache) = net.forward(input.view())?;
            let mut diff = f.dot(&bp.t());
            diff.scaled_add(-gamma, &targets.target_m);
            let sq: f64 = diff.iter().map(|v| v.as_f64().powi(2)).sum();
            let pos: f64 = row_dot(&f, &bn.view()).iter().map(|v| v.as_f64()).sum();
            main += (sq / (n * m) as f64 - 2.0 * pos / n as f64) / twins;

            let q = row_dot(&f, &z);
            let err = &q - &targets.fz_target;
            fz += err.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n as f64 / twins;

            let d_m = diff.mapv(|v| v * pair_scale);
            let mut d_f = d_m.dot(&bp);
            d_f.scaled_add(pos_scale, &bn);
            let e = err.mapv(|v| v * fz_scale).insert_axis(Axis(1));
            d_f += &(&z * &e);
            d_bp += &d_m.t().dot(&f);
            d_bn.scaled_add(pos_scale, &f);
            forward_grads.push(net.backward(&cache, d_f.view())?.0);
        }

        // orthonormality: off-diagonal Gram entries pulled to 0, diagonal
        // pushed up with one side of each B(s⁺_i)·B(s⁺_i) held constant
        let mut gram = bp.dot(&bp.t());
        let mut off = 0.0f64;
        for i in 0..m {
            gram[[i, i]] = T::zero();
        }
        if m > 1 {
            off = gram.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / (m * (m - 1)) as f64;
            let c = T::of(coefs.ortho * 4.0 / (m * (m - 1)) as f64);
            d_bp += &gram.dot(&bp).mapv(|v| v * c);
        }
        let diag: f64 = row_dot(&bp, &targets.stop_b.view())
            .iter()
            .map(|v| v.as_f64())
            .sum::<f64>()
            * -2.0
            / m as f64;
        d_bp.scaled_add(T::of(-2.0 * coefs.ortho / m as f64), &targets.stop_b);
        let ortho = off + diag;

        let terms = FbLossTerms {
            main,
            ortho,
            fz,
            total: main + coefs.ortho * ortho + coefs.fz * fz,
        };
        for (name, v) in [("fb_main", main), ("fb_ortho", ortho), ("fb_fz", fz)] {
            if !v.is_finite() {
                return Err(Error::numeric(name, format!("loss value {v}")));
            }
        }

        let (mut g_b, _) = self.backward.backward(&cache_p, d_bp.view())?;
        let (g_bn, _) = self.backward.backward(&cache_n, d_bn.view())?;
        g_b.add_assign(&g_bn);
        let mut it = forward_grads.into_iter();
        let grads = FbGrads {
            forward: [it.next().unwrap(), it.next().unwrap()],
            backward: g_b,
        };
        Ok((terms, grads))
    }

    pub fn fb_loss(
        &self,
        batch: &FbBatch<T>,
        z: ArrayView2<T>,
        next_action: ArrayView2<T>,
        coefs: &FbCoefs,
    ) -> Result<(FbLossTerms, FbGrads<T>)> {
        let targets = self.fb_targets(batch, z, next_action, coefs.gamma)?;
        self.fb_loss_with(batch, z, &targets, coefs)
    }

    /// `Σ_i min_k F_k(s_i, a_i, z_i)ᵀ z_i` and its gradient with respect to
    /// the actions, scaled by `scale`.
    fn q_action_grad(
        &self,
        obs: ArrayView2<T>,
        action: ArrayView2<T>,
        z: ArrayView2<T>,
        scale: T,
    ) -> Result<(Array1<T>, Array2<T>)> {
        let input = hcat(&[obs, action, z])?;
        let (f1, c1) = self.forward[0].forward(input.view())?;
        let (f2, c2) = self.forward[1].forward(input.view())?;
        let q1 = row_dot(&f1, &z);
        let q2 = row_dot(&f2, &z);
        let pick_first = ndarray::Zip::from(&q1).and(&q2).map_collect(|&a, &b| a <= b);
        let q = ndarray::Zip::from(&q1).and(&q2).map_collect(|&a, &b| a.min(b));
        let mut d_action = Array2::zeros(action.raw_dim());
        for (k, (net, cache)) in [(&self.forward[0], &c1), (&self.forward[1], &c2)]
            .into_iter()
            .enumerate()
        {
            let mut d_f = z.to_owned();
            for (i, mut row) in d_f.rows_mut().into_iter().enumerate() {
                let chosen = pick_first[i] == (k == 0);
                row.mapv_inplace(|v| if chosen { v * scale } else { T::zero() });
            }
            let (_, d_in) = net.backward(cache, d_f.view())?;
            d_action += &d_in.slice(s![.., OBS_DIM..OBS_DIM + ACTION_DIM]);
        }
        Ok((q, d_action))
    }

    /// `−mean[min_k F_k(s, π(s,z), z)ᵀ z + λ·Q_reg(s, π(s,z))]` with actor
    /// gradients. `reg = None` (or `λ = 0`) skips the critic path entirely.
    pub fn actor_loss(
        &self,
        obs: ArrayView2<T>,
        z: ArrayView2<T>,
        reg: Option<(&RegCritic<T>, f64)>,
    ) -> Result<(ActorLossParts, NetGrads<T>)> {
        let n = obs.nrows();
        let actor_in = hcat(&[obs, z])?;
        let (a, cache) = self.actor.forward(actor_in.view())?;
        let inv_n = T::of(-1.0 / n as f64);
        let (q_fb, mut d_a) = self.q_action_grad(obs, a.view(), z, inv_n)?;
        let q_fb_mean = q_fb.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let mut q_reg_mean = 0.0;
        let mut lambda = 0.0;
        if let Some((critic, l)) = reg {
            if l != 0.0 {
                lambda = l;
                let (q_reg, d_reg) = critic.value_action_grad(obs, a.view(), T::of(-l / n as f64))?;
                q_reg_mean = q_reg.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
                d_a += &d_reg;
            }
        }
        let total = -(q_fb_mean + lambda * q_reg_mean);
        if !total.is_finite() {
            return Err(Error::numeric("actor_loss", format!("loss value {total}")));
        }
        let (grads, _) = self.actor.backward(&cache, d_a.view())?;
        Ok((
            ActorLossParts {
                total,
                q_fb: q_fb_mean,
                q_reg: q_reg_mean,
            },
            grads,
        ))
    }

    /// `z_r ∝ mean_i B(φ_i)·r_i`, rescaled to norm `√d`.
    pub fn infer_task_embedding(&self, proj: ArrayView2<T>, rewards: &[T]) -> Result<LatentZ<T>> {
        let z = self.infer_task_embedding_raw(proj, rewards)?;
        let norm = z.dot(&z).sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::DegenerateTask);
        }
        let radius = T::of((self.z_dim as f64).sqrt());
        Ok(LatentZ {
            vector: z.mapv(|v| v * radius / norm),
            source: ZSource::Inferred,
        })
    }

    /// The unnormalized Monte Carlo estimate `mean_i B(φ_i)·r_i`.
    pub fn infer_task_embedding_raw(&self, proj: ArrayView2<T>, rewards: &[T]) -> Result<Array1<T>> {
        if proj.nrows() == 0 || proj.nrows() != rewards.len() {
            return Err(Error::Usage(format!(
                "task inference needs matching, nonempty samples ({} states, {} rewards)",
                proj.nrows(),
                rewards.len()
            )));
        }
        let b = self.backward.predict(proj)?;
        let r = Array1::from(rewards.to_vec());
        let mut z = b.t().dot(&r);
        z.mapv_inplace(|v| v / T::of(rewards.len() as f64));
        Ok(z)
    }

    pub fn is_finite(&self) -> bool {
        self.forward.iter().all(DenseNet::is_finite)
            && self.backward.is_finite()
            && self.actor.is_finite()
            && self.forward_target.iter().all(DenseNet::is_finite)
            && self.backward_target.is_finite()
            && self.actor_target.is_finite()
    }
}

/// `B_iᵀ Σ_B⁻¹ z_i` with `Σ_B = mean_i B_i B_iᵀ + 1e-5·I`, solved in 64-bit.
fn implicit_reward<T: Real>(b: &Array2<T>, z: &ArrayView2<T>) -> Result<Array1<T>> {
    let (n, d) = b.dim();
    let bm = DMatrix::from_fn(n, d, |i, j| b[[i, j]].as_f64());
    let mut cov = bm.transpose() * &bm / n as f64;
    for i in 0..d {
        cov[(i, i)] += 1e-5;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numeric("fb_fz", "backward covariance is not positive definite"))?;
    let zt = DMatrix::from_fn(d, n, |j, i| z[[i, j]].as_f64());
    let w = chol.solve(&zt);
    Ok(Array1::from_shape_fn(n, |i| {
        T::of((0..d).map(|j| bm[(i, j)] * w[(j, i)]).sum())
    }))
}

/// Standalone orthonormality regularizer on a batch of embeddings:
/// `mean_{i≠j} G_ij² − 2·mean_i G_ii` with `G = B Bᵀ`.
pub fn ortho_loss<T: Real>(b: ArrayView2<T>) -> f64 {
    let m = b.nrows();
    let g = b.dot(&b.t());
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..m {
        for j in 0..m {
            let v = g[[i, j]].as_f64();
            if i == j {
                diag += v;
            } else {
                off += v * v;
            }
        }
    }
    let off = if m > 1 { off / (m * (m - 1)) as f64 } else { 0.0 };
    off - 2.0 * diag / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_segments, Dense};
    use ndarray::array;

    fn arch(d: usize, h: usize) -> FbArch {
        FbArch {
            z_dim: d,
            hidden_forward: h,
            hidden_backward: h,
            hidden_actor: h,
        }
    }

    fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> FbBatch<f64> {
        let mut u = |r: usize, c: usize, lo: f64, hi: f64| {
            Array2::from_shape_simple_fn((r, c), || rng.random_range(lo..hi))
        };
        FbBatch {
            obs: u(n, OBS_DIM, -1.0, 1.0),
            action: u(n, ACTION_DIM, -1.0, 1.0),
            next_obs: u(n, OBS_DIM, -1.0, 1.0),
            next_proj: u(n, PROJ_DIM, -2.0, 2.0),
            future_proj: u(n, PROJ_DIM, -2.0, 2.0),
            reg_reward: Array1::from_shape_simple_fn(n, || -rng.random_range(0.0..0.4)),
            rows: (0..n).collect(),
            future_rows: (0..n).collect(),
        }
    }

    fn perturb_targets(model: &mut FbModel<f64>, rng: &mut ChaCha8Rng) {
        let mut jitter = |net: &mut DenseNet<f64>| {
            let p: Vec<f64> = net.flat_params().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            net.set_flat_params(&p).unwrap();
        };
        jitter(&mut model.forward_target[0]);
        jitter(&mut model.forward_target[1]);
        jitter(&mut model.backward_target);
        jitter(&mut model.actor_target);
    }

    fn single_layer(w: Array2<f64>) -> DenseNet<f64> {
        let b = Array1::zeros(w.ncols());
        DenseNet::from_layers(vec![Dense { weight: w, bias: b, activation: Activation::Linear }]).unwrap()
    }

    #[test]
    fn sphere_samples_have_radius_sqrt_d() {
        let z = sample_uniform_sphere(4, 100, 3).unwrap();
        assert!(z.iter().all(|l| (l.norm() - 2.0).abs() < 1e-6 && l.source == ZSource::Uniform));
        assert_eq!(sample_uniform_sphere(4, 5, 9).unwrap(), sample_uniform_sphere(4, 5, 9).unwrap());
        assert!(sample_uniform_sphere(1, 5, 9).is_err());
    }

    #[test]
    fn sphere_coordinates_are_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z: Array2<f64> = uniform_sphere_rows(8, 100_000, &mut rng);
        let mean = z.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean}");
    }

    #[test]
    fn q_value_takes_twin_minimum() {
        // F_k(s,a,z) = c_k·(z-part of the input); with z=(1,0): q = c_k
        let d = 2;
        let width = OBS_DIM + ACTION_DIM + d;
        let net = |c: f64| {
            let mut w = Array2::zeros((width, d));
            w[[OBS_DIM + ACTION_DIM, 0]] = c;
            single_layer(w)
        };
        let b = single_layer(Array2::zeros((PROJ_DIM, d)));
        let actor = DenseNet::zeros(&[OBS_DIM + d, ACTION_DIM], Activation::Relu, Activation::Tanh).unwrap();
        let model = FbModel::from_parts([net(2.0), net(3.0)], b.clone(), actor.clone()).unwrap();
        let obs = Array2::zeros((1, OBS_DIM));
        let act = Array2::zeros((1, ACTION_DIM));
        let z = array![[1.0, 0.0]];
        assert_eq!(model.q_value(obs.view(), act.view(), z.view()).unwrap()[0], 2.0);

        let tied = FbModel::from_parts([net(2.5), net(2.5)], b, actor).unwrap();
        let single = row_dot(
            &tied.forward[0].predict(hcat(&[obs.view(), act.view(), z.view()]).unwrap().view()).unwrap(),
            &z.view(),
        )[0];
        assert_eq!(tied.q_value(obs.view(), act.view(), z.view()).unwrap()[0], single);
    }

    #[test]
    fn zero_model_has_zero_q() {
        let d = 4;
        let f = DenseNet::zeros(&[OBS_DIM + ACTION_DIM + d, 8, d], Activation::Relu, Activation::Linear).unwrap();
        let b = DenseNet::zeros(&[PROJ_DIM, 8, d], Activation::Relu, Activation::Linear).unwrap();
        let a = DenseNet::zeros(&[OBS_DIM + d, 8, ACTION_DIM], Activation::Relu, Activation::Tanh).unwrap();
        let model = FbModel::from_parts([f.clone(), f], b, a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Array2<f64> = uniform_sphere_rows(d, 3, &mut rng);
        let q = model
            .q_value(Array2::ones((3, OBS_DIM)).view(), Array2::ones((3, ACTION_DIM)).view(), z.view())
            .unwrap();
        assert!(q.iter().all(|&v| v == 0.0));

        let batch = random_batch(3, &mut rng);
        let next_a = Array2::zeros((3, ACTION_DIM));
        let (terms, _) = model.fb_loss(&batch, z.view(), next_a.view(), &FbCoefs::default()).unwrap();
        assert_eq!((terms.main, terms.ortho, terms.fz), (0.0, 0.0, 0.0));
    }

    #[test]
    fn main_term_single_row_value() {
        // γ = 0, F·B(s⁺) = 0.5 and F·B(s′) = 0.5: 0.25 − 1.0
        let d = 2;
        let width = OBS_DIM + ACTION_DIM + d;
        // F outputs (0.5, 0) via bias; B outputs (1, 0) via bias
        let mut f = single_layer(Array2::zeros((width, d)));
        f.layers_mut()[0].bias = array![0.5, 0.0];
        let mut b = single_layer(Array2::zeros((PROJ_DIM, d)));
        b.layers_mut()[0].bias = array![1.0, 0.0];
        let actor = DenseNet::zeros(&[OBS_DIM + d, ACTION_DIM], Activation::Relu, Activation::Tanh).unwrap();
        let model = FbModel::from_parts([f.clone(), f], b, actor).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(1, &mut rng);
        let z = array![[1.0, 1.0]];
        let coefs = FbCoefs { gamma: 0.0, ..FbCoefs::default() };
        let (terms, _) = model.fb_loss(&batch, z.view(), Array2::zeros((1, 2)).view(), &coefs).unwrap();
        assert!((terms.main + 0.75).abs() < 1e-12, "{terms:?}");
    }

    #[test]
    fn ortho_loss_values() {
        assert_eq!(ortho_loss(array![[1.0, 0.0], [0.0, 1.0]].view()), -2.0);
        assert_eq!(ortho_loss(Array2::<f64>::zeros((3, 4)).view()), 0.0);
        assert_eq!(ortho_loss(array![[1.0, 0.0], [1.0, 0.0]].view()), -1.0);
    }

    #[test]
    fn fb_loss_ortho_term_matches_standalone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = FbModel::<f64>::new(&arch(4, 8), &mut rng).unwrap();
        let batch = random_batch(5, &mut rng);
        let z: Array2<f64> = uniform_sphere_rows(4, 5, &mut rng);
        let (terms, _) = model.fb_loss(&batch, z.view(), batch.action.view(), &FbCoefs::default()).unwrap();
        let b = model.backward.predict(batch.future_proj.view()).unwrap();
        assert!((terms.ortho - ortho_loss(b.view())).abs() < 1e-12);
        assert!((terms.total - (terms.main + 100.0 * terms.ortho + 0.1 * terms.fz)).abs() < 1e-9);
    }

    fn fb_flat(model: &FbModel<f64>) -> (Vec<f64>, Vec<(String, usize)>) {
        let mut p = Vec::new();
        let mut seg = Vec::new();
        for (name, net) in [("F1", &model.forward[0]), ("F2", &model.forward[1]), ("B", &model.backward)] {
            p.extend(net.flat_params());
            seg.push((name.to_string(), net.param_count()));
        }
        (p, seg)
    }

    fn fb_unflat(model: &mut FbModel<f64>, p: &[f64]) {
        let a = model.forward[0].param_count();
        let b = model.forward[1].param_count();
        model.forward[0].set_flat_params(&p[..a]).unwrap();
        model.forward[1].set_flat_params(&p[a..a + b]).unwrap();
        model.backward.set_flat_params(&p[a + b..]).unwrap();
    }

    #[test]
    fn fb_loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut model = FbModel::<f64>::new(&arch(4, 8), &mut rng).unwrap();
            perturb_targets(&mut model, &mut rng);
            let batch = random_batch(4, &mut rng);
            let z: Array2<f64> = uniform_sphere_rows(4, 4, &mut rng);
            let next_a = model.target_action(batch.next_obs.view(), z.view(), 0.2, 0.5, &mut rng).unwrap();
            let coefs = FbCoefs::default();
            let targets = model.fb_targets(&batch, z.view(), next_a.view(), coefs.gamma).unwrap();
            let (_, grads) = model.fb_loss_with(&batch, z.view(), &targets, &coefs).unwrap();
            let mut analytic = grads.forward[0].flat();
            analytic.extend(grads.forward[1].flat());
            analytic.extend(grads.backward.flat());
            let (params, seg) = fb_flat(&model);
            let loss = |p: &[f64]| {
                let mut m = model.clone();
                fb_unflat(&mut m, p);
                m.fb_loss_with(&batch, z.view(), &targets, &coefs).unwrap().0.total
            };
            let report = grad_check_segments(&loss, &params, &analytic, &seg, 1e-4);
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn targets_ignore_online_forward_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = FbModel::<f64>::new(&arch(4, 8), &mut rng).unwrap();
        let batch = random_batch(6, &mut rng);
        let z: Array2<f64> = uniform_sphere_rows(4, 6, &mut rng);
        let t0 = model.fb_targets(&batch, z.view(), batch.action.view(), 0.98).unwrap();
        let mut moved = model.clone();
        for f in &mut moved.forward {
            let p: Vec<f64> = f.flat_params().iter().map(|v| v * 1.5 + 0.1).collect();
            f.set_flat_params(&p).unwrap();
        }
        let t1 = moved.fb_targets(&batch, z.view(), batch.action.view(), 0.98).unwrap();
        assert_eq!(t0.target_m, t1.target_m);
        assert_eq!(t0.fz_target, t1.fz_target);
    }

    #[test]
    fn target_parameters_do_not_reach_online_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = FbModel::<f64>::new(&arch(4, 8), &mut rng).unwrap();
        let batch = random_batch(5, &mut rng);
        let z: Array2<f64> = uniform_sphere_rows(4, 5, &mut rng);
        let coefs = FbCoefs::default();
        let targets = model.fb_targets(&batch, z.view(), batch.action.view(), coefs.gamma).unwrap();
        let (_, g0) = model.fb_loss_with(&batch, z.view(), &targets, &coefs).unwrap();
        let mut moved = model.clone();
        perturb_targets(&mut moved, &mut rng);
        let (_, g1) = moved.fb_loss_with(&batch, z.view(), &targets, &coefs).unwrap();
        assert_eq!(g0.forward[0], g1.forward[0]);
        assert_eq!(g0.forward[1], g1.forward[1]);
        assert_eq!(g0.backward, g1.backward);
    }

    #[test]
    fn actor_loss_values() {
        // q_fb = 1.5 everywhere via bias; Q_reg = −0.1 via bias
        let d = 2;
        let width = OBS_DIM + ACTION_DIM + d;
        let mut f = single_layer(Array2::zeros((width, d)));
        f.layers_mut()[0].bias = array![1.5, 0.0];
        let b = single_layer(Array2::zeros((PROJ_DIM, d)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = DenseNet::new(&[OBS_DIM + d, 4, ACTION_DIM], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let model = FbModel::from_parts([f.clone(), f], b, actor).unwrap();
        let mut critic = RegCritic::<f64>::new(4, 2, &mut rng).unwrap();
        for q in critic.q.iter_mut().chain(critic.q_target.iter_mut()) {
            let last = q.layers().len() - 1;
            q.layers_mut()[last].weight.fill(0.0);
            q.layers_mut()[last].bias = array![-0.1];
        }
        let obs = Array2::from_shape_simple_fn((3, OBS_DIM), || rng.random_range(-1.0..1.0));
        let z = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let plain = model.actor_loss(obs.view(), z.view(), None).unwrap().0;
        assert!((plain.total + 1.5).abs() < 1e-12);
        let reg = model.actor_loss(obs.view(), z.view(), Some((&critic, 20.0))).unwrap().0;
        assert!((reg.total - 0.5).abs() < 1e-12, "{reg:?}");
    }

    #[test]
    fn zero_lambda_matches_plain_actor_gradients_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FbModel::<f32>::new(&arch(4, 16), &mut rng).unwrap();
        let critic = RegCritic::<f32>::new(16, 4, &mut rng).unwrap();
        let obs = Array2::from_shape_simple_fn((8, OBS_DIM), || rng.random_range(-1.0f32..1.0));
        let z: Array2<f32> = uniform_sphere_rows(4, 8, &mut rng);
        let (_, a) = model.actor_loss(obs.view(), z.view(), None).unwrap();
        let (_, b) = model.actor_loss(obs.view(), z.view(), Some((&critic, 0.0))).unwrap();
        let bits = |g: &NetGrads<f32>| g.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let model = FbModel::<f64>::new(&arch(4, 8), &mut rng).unwrap();
            let critic = RegCritic::<f64>::new(8, 4, &mut rng).unwrap();
            let obs = Array2::from_shape_simple_fn((4, OBS_DIM), || rng.random_range(-1.0..1.0));
            let z: Array2<f64> = uniform_sphere_rows(4, 4, &mut rng);
            for lambda in [0.0, 20.0] {
                let (_, g) = model.actor_loss(obs.view(), z.view(), Some((&critic, lambda))).unwrap();
                let loss = |p: &[f64]| {
                    let mut m = model.clone();
                    m.actor.set_flat_params(p).unwrap();
                    m.actor_loss(obs.view(), z.view(), Some((&critic, lambda))).unwrap().0.total
                };
                let report = crate::nn::grad_check(&loss, &model.actor.flat_params(), &g.flat(), 1e-4);
                assert!(report.pass, "seed {seed} λ {lambda}: {report:?}");
            }
        }
    }

    #[test]
    fn policy_action_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = FbModel::<f32>::new(&arch(4, 16), &mut rng).unwrap();
        let z = uniform_sphere_rows::<f32, _>(4, 1, &mut rng).row(0).to_owned();
        let obs = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5];
        let a = model.policy_action(&obs, &z, 0.0, &mut rng).unwrap();
        let b = model.policy_action(&obs, &z, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
        for _ in 0..1000 {
            let a = model.policy_action(&obs, &z, 3.0, &mut rng).unwrap();
            assert!(a.0.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn exploration_noise_mean_absolute_deviation() {
        // zero actor output: E|clip(ε)| for ε ~ N(0, 0.2²) is 0.2·√(2/π) ≈ 0.1596
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = FbModel::<f32>::new(&arch(4, 16), &mut rng).unwrap();
        let last = model.actor.layers().len() - 1;
        model.actor.layers_mut()[last].weight.fill(0.0);
        let z = uniform_sphere_rows::<f32, _>(4, 1, &mut rng).row(0).to_owned();
        let obs = [0.0; OBS_DIM];
        let n = 100_000;
        let mut dev = 0.0f64;
        for _ in 0..n {
            let a = model.policy_action(&obs, &z, 0.2, &mut rng).unwrap();
            dev += a.0[0].abs() as f64 / n as f64;
        }
        assert!((dev - 0.2 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.003, "{dev}");
    }

    #[test]
    fn task_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = FbModel::<f64>::new(&arch(4, 8), &mut rng).unwrap();
        let states = Array2::from_shape_simple_fn((10, PROJ_DIM), || rng.random_range(-2.0..2.0));
        let b = model.backward.predict(states.view()).unwrap();

        let one = states.slice(s![0..1, ..]);
        let raw = model.infer_task_embedding_raw(one, &[3.0]).unwrap();
        for j in 0..4 {
            assert!((raw[j] - 3.0 * b[[0, j]]).abs() < 1e-12);
        }

        let mut r = vec![0.0; 10];
        r[7] = 1.0;
        let raw = model.infer_task_embedding_raw(states.view(), &r).unwrap();
        for j in 0..4 {
            assert!((raw[j] - b[[7, j]] / 10.0).abs() < 1e-12);
        }

        let rewards: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let z1 = model.infer_task_embedding(states.view(), &rewards).unwrap();
        let tripled: Vec<f64> = rewards.iter().map(|v| v * 3.0).collect();
        let z3 = model.infer_task_embedding(states.view(), &tripled).unwrap();
        assert!((z1.norm() - 2.0).abs() < 1e-9);
        assert!(z1.vector.iter().zip(z3.vector.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(z1.source, ZSource::Inferred);

        assert!(matches!(
            model.infer_task_embedding(states.view(), &[0.0; 10]),
            Err(Error::DegenerateTask)
        ));
    }

    #[test]
    fn goal_embeddings_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = FbModel::<f32>::new(&arch(16, 16), &mut rng).unwrap();
        let g = Array2::from_shape_simple_fn((20, PROJ_DIM), || rng.random_range(-2.0f32..2.0));
        let z = model.goal_embeddings(g.view()).unwrap();
        for row in z.rows() {
            assert!((row.dot(&row).sqrt() - 4.0).abs() < 4e-6);
        }
    }
}
