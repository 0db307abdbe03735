//! RealNVP-style density model over projected behaviors.
//!
//! Each coupling layer leaves one parity class of coordinates unchanged and
//! applies `y = x·exp(tanh(s(c))) + t(c)` to the other, where `c` are the
//! unchanged coordinates. Parities alternate between layers; in two
//! dimensions this is the same as alternating a checkerboard or channel
//! mask. Inputs are whitened before the first layer, and the whitening
//! Jacobian is part of every reported log-determinant.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, DenseNet, NetGrads};
use crate::real::Real;

/// Per-dimension affine normalization `(x − mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitener<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> Whitener<T> {
    pub fn identity(dim: usize) -> Self {
        Whitener {
            mean: vec![T::zero(); dim],
            scale: vec![T::one(); dim],
        }
    }

    /// Sample mean and standard deviation, with scales floored at 1e-3.
    pub fn from_samples(x: ArrayView2<T>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = col.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
            mean.push(T::of(m));
            scale.push(T::of(var.sqrt().max(1e-3)));
        }
        Whitener { mean, scale }
    }

    fn log_det(&self) -> T {
        -self.scale.iter().map(|s| s.ln()).sum::<T>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    /// Coordinates passed through and fed to the subnet.
    pub cond: Vec<usize>,
    /// Coordinates transformed by the layer.
    pub trans: Vec<usize>,
    /// `cond → [raw scale, shift]`, both of width `trans.len()`.
    pub net: DenseNet<T>,
}

struct LayerCache<T> {
    input: Array2<T>,
    net: crate::nn::ForwardCache<T>,
    scale: Array2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        FlowFitConfig {
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    dim: usize,
    hidden: usize,
    pub layers: Vec<Coupling<T>>,
    pub whitener: Whitener<T>,
    pub fitted: bool,
}

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl<T: Real> FlowModel<T> {
    /// `n_layers` couplings with `hidden`-wide subnets. Subnet output layers
    /// start at zero, so the flow starts as the identity.
    pub fn new<R: Rng + ?Sized>(dim: usize, n_layers: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim < 2 || n_layers == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "flow needs dim ≥ 2 and at least one layer (dim {dim}, layers {n_layers}, hidden {hidden})"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (cond, trans): (Vec<usize>, Vec<usize>) = (0..dim).partition(|j| (j + l) % 2 == 0);
            let mut net = DenseNet::new(
                &[cond.len(), hidden, 2 * trans.len()],
                Activation::Relu,
                Activation::Linear,
                rng,
            )?;
            let last = net.layers().len() - 1;
            net.layers_mut()[last].weight.fill(T::zero());
            layers.push(Coupling { cond, trans, net });
        }
        Ok(FlowModel {
            dim,
            hidden,
            layers,
            whitener: Whitener::identity(dim),
            fitted: false,
        })
    }

    pub fn from_parts(dim: usize, hidden: usize, layers: Vec<Coupling<T>>, whitener: Whitener<T>, fitted: bool) -> Result<Self> {
        if whitener.mean.len() != dim || whitener.scale.len() != dim || whitener.scale.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::Config("whitener does not match flow dimension".into()));
        }
        for c in &layers {
            if c.cond.len() + c.trans.len() != dim
                || c.net.input_width() != c.cond.len()
                || c.net.output_width() != 2 * c.trans.len()
            {
                return Err(Error::Config("coupling layer does not match flow dimension".into()));
            }
        }
        Ok(FlowModel {
            dim,
            hidden,
            layers,
            whitener,
            fitted,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel {
            dim: self.dim,
            hidden: self.hidden,
            layers: self
                .layers
                .iter()
                .map(|c| Coupling {
                    cond: c.cond.clone(),
                    trans: c.trans.clone(),
                    net: c.net.cast(),
                })
                .collect(),
            whitener: Whitener {
                mean: self.whitener.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                scale: self.whitener.scale.iter().map(|v| U::of(v.as_f64())).collect(),
            },
            fitted: self.fitted,
        }
    }

    fn check_input(&self, x: &ArrayView2<T>, term: &str) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::Usage(format!("{term}: expected {} columns, got {}", self.dim, x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(term, "input is not finite"));
        }
        Ok(())
    }

    fn whiten(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = x.to_owned();
        for (j, mut col) in h.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.whitener.mean[j], self.whitener.scale[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        h
    }

    fn coupling_params(c: &Coupling<T>, h: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
        let out = c.net.predict(h.select(Axis(1), &c.cond).view())?;
        let k = c.trans.len();
        let scale = out.slice(ndarray::s![.., ..k]).mapv(|v| v.tanh());
        let shift = out.slice(ndarray::s![.., k..]).to_owned();
        Ok((scale, shift))
    }

    /// `u = T(x)` and `log|det ∂u/∂x|` per row.
    pub fn flow_forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check_input(&x, "flow_forward")?;
        let mut h = self.whiten(x);
        let mut logdet = Array1::from_elem(x.nrows(), self.whitener.log_det());
        for c in &self.layers {
            let (scale, shift) = Self::coupling_params(c, &h)?;
            for (k, &j) in c.trans.iter().enumerate() {
                let mut col = h.column_mut(j);
                col.zip_mut_with(&scale.column(k), |v, &s| *v = *v * s.exp());
                col += &shift.column(k);
                logdet += &scale.column(k);
            }
        }
        if h.iter().chain(logdet.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("flow_forward", "output is not finite"));
        }
        Ok((h, logdet))
    }

    /// `x = T⁻¹(u)` and `log|det ∂x/∂u|` per row.
    pub fn flow_inverse_with_logdet(&self, u: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check_input(&u, "flow_inverse")?;
        let mut h = u.to_owned();
        let mut logdet = Array1::from_elem(u.nrows(), -self.whitener.log_det());
        for c in self.layers.iter().rev() {
            let (scale, shift) = Self::coupling_params(c, &h)?;
            for (k, &j) in c.trans.iter().enumerate() {
                let mut col = h.column_mut(j);
                col -= &shift.column(k);
                col.zip_mut_with(&scale.column(k), |v, &s| *v = *v * (-s).exp());
                logdet -= &scale.column(k);
            }
        }
        for (j, mut col) in h.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.whitener.mean[j], self.whitener.scale[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        Ok((h, logdet))
    }

    pub fn flow_inverse(&self, u: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.flow_inverse_with_logdet(u)?.0)
    }

    /// `log N(T(x); 0, I) + log|det J(x)|`.
    pub fn log_density(&self, x: ArrayView2<T>) -> Result<Array1<T>> {
        let (u, logdet) = self.flow_forward(x)?;
        let c = T::of(self.dim as f64 * half_log_two_pi());
        let half = T::of(0.5);
        Ok(ndarray::Zip::from(u.rows())
            .and(&logdet)
            .map_collect(|row, &ld| -half * row.dot(&row) - c + ld))
    }

    /// Mean negative log-likelihood and gradients for every coupling subnet.
    pub fn nll_and_grads(&self, x: ArrayView2<T>) -> Result<(f64, Vec<NetGrads<T>>)> {
        self.check_input(&x, "flow_nll")?;
        let n = x.nrows();
        let mut h = self.whiten(x);
        let mut logdet = Array1::from_elem(n, self.whitener.log_det());
        let mut caches = Vec::with_capacity(self.layers.len());
        for c in &self.layers {
            let input = h.clone();
            let (out, cache) = c.net.forward(h.select(Axis(1), &c.cond).view())?;
            let k = c.trans.len();
            let scale = out.slice(ndarray::s![.., ..k]).mapv(|v| v.tanh());
            for (i, &j) in c.trans.iter().enumerate() {
                let mut col = h.column_mut(j);
                col.zip_mut_with(&scale.column(i), |v, &s| *v = *v * s.exp());
                col += &out.column(k + i);
                logdet += &scale.column(i);
            }
            caches.push(LayerCache {
                input,
                net: cache,
                scale,
            });
        }
        let c = self.dim as f64 * half_log_two_pi();
        let nll = h
            .rows()
            .into_iter()
            .zip(logdet.iter())
            .map(|(row, ld)| 0.5 * row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() + c - ld.as_f64())
            .sum::<f64>()
            / n as f64;
        if !nll.is_finite() {
            return Err(Error::numeric("flow_nll", format!("loss value {nll}")));
        }

        let inv_n = T::of(1.0 / n as f64);
        let mut d_h = h.mapv(|v| v * inv_n);
        let mut grads = vec![None; self.layers.len()];
        for (l, (c, cache)) in self.layers.iter().zip(caches.iter()).enumerate().rev() {
            let k = c.trans.len();
            let mut d_out = Array2::zeros((n, 2 * k));
            let mut d_input = d_h.clone();
            for (i, &j) in c.trans.iter().enumerate() {
                for r in 0..n {
                    let dy = d_h[[r, j]];
                    let e = cache.scale[[r, i]].exp();
                    let ds = dy * cache.input[[r, j]] * e - inv_n;
                    let th = cache.scale[[r, i]];
                    d_out[[r, i]] = ds * (T::one() - th * th);
                    d_out[[r, k + i]] = dy;
                    d_input[[r, j]] = dy * e;
                }
            }
            let (g, d_cond) = c.net.backward(&cache.net, d_out.view())?;
            for (i, &j) in c.cond.iter().enumerate() {
                let mut col = d_input.column_mut(j);
                col += &d_cond.column(i);
            }
            d_h = d_input;
            grads[l] = Some(g);
        }
        Ok((nll, grads.into_iter().map(|g| g.unwrap()).collect()))
    }

    /// Refits from scratch: new whitener from `samples`, reinitialized
    /// subnets, then minibatch Adam on the negative log-likelihood. Returns
    /// the mean loss of each epoch. On a non-finite loss or gradient the
    /// parameters from before the failing step are kept.
    pub fn fit(&mut self, samples: ArrayView2<T>, cfg: &FlowFitConfig, seed: u64) -> Result<Vec<f64>> {
        if samples.nrows() == 0 {
            return Err(Error::NotReady("flow fit needs at least one sample".into()));
        }
        self.check_input(&samples, "flow_nll")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = FlowModel::new(self.dim, self.layers.len(), self.hidden, &mut rng)?;
        self.layers = fresh.layers;
        self.whitener = Whitener::from_samples(samples);
        self.fitted = true;
        let mut adam: Vec<AdamState<T>> = self.layers.iter().map(|c| AdamState::for_net(&c.net)).collect();
        let lr = T::of(cfg.lr);
        let batch = cfg.batch_size.max(1);
        let mut order: Vec<usize> = (0..samples.nrows()).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0;
            for chunk in order.chunks(batch) {
                let x = samples.select(Axis(0), chunk);
                let (loss, grads) = self.nll_and_grads(x.view())?;
                let backup = self.layers.clone();
                let step = self
                    .layers
                    .iter_mut()
                    .zip(adam.iter_mut())
                    .zip(grads.iter())
                    .enumerate()
                    .try_for_each(|(l, ((c, a), g))| c.net.adam_step(a, g, lr, &format!("flow.coupling{l}")));
                if let Err(e) = step {
                    self.layers = backup;
                    return Err(e);
                }
                if !self.layers.iter().all(|c| c.net.is_finite()) {
                    self.layers = backup;
                    return Err(Error::numeric("flow_nll", "parameters became non-finite"));
                }
                total += loss * chunk.len() as f64;
                count += chunk.len();
            }
            trace.push(total / count as f64);
        }
        Ok(trace)
    }

    /// `(x, y, log_density)` over an `n × n` grid on `[lo, hi]²`.
    pub fn density_grid(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<(f64, f64, f64)>> {
        if self.dim != 2 || n < 2 {
            return Err(Error::Usage("density grid needs a 2-D flow and n ≥ 2".into()));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let pts = Array2::from_shape_fn((n * n, 2), |(r, c)| {
            let idx = if c == 0 { r / n } else { r % n };
            T::of(lo + idx as f64 * step)
        });
        let ld = self.log_density(pts.view())?;
        Ok((0..n * n)
            .map(|r| (pts[[r, 0]].as_f64(), pts[[r, 1]].as_f64(), ld[r].as_f64()))
            .collect())
    }
}
