//! Twin critic for the behavior-regularization reward.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::fb::hcat;
use crate::nn::{soft_update, Activation, DenseNet, NetGrads};
use crate::real::Real;
use crate::replay::FbBatch;

#[derive(Clone, Debug, PartialEq)]
pub struct RegCritic<T> {
    pub q: [DenseNet<T>; 2],
    pub q_target: [DenseNet<T>; 2],
}

impl<T: Real> RegCritic<T> {
    /// Twin `(s, a) → ℝ` networks with `hidden_layers` relu layers of
    /// width `hidden`.
    pub fn new<R: Rng + ?Sized>(hidden: usize, hidden_layers: usize, rng: &mut R) -> Result<Self> {
        let mut widths = vec![OBS_DIM + ACTION_DIM];
        widths.extend(std::iter::repeat_n(hidden, hidden_layers));
        widths.push(1);
        let q1 = DenseNet::new(&widths, Activation::Relu, Activation::Linear, rng)?;
        let q2 = DenseNet::new(&widths, Activation::Relu, Activation::Linear, rng)?;
        Ok(RegCritic {
            q_target: [q1.clone(), q2.clone()],
            q: [q1, q2],
        })
    }

    pub fn from_nets(q: [DenseNet<T>; 2]) -> Result<Self> {
        for net in &q {
            if net.input_width() != OBS_DIM + ACTION_DIM || net.output_width() != 1 {
                return Err(Error::Config("critic networks must map (s, a) to a scalar".into()));
            }
        }
        Ok(RegCritic { q_target: q.clone(), q })
    }

    pub fn cast<U: Real>(&self) -> RegCritic<U> {
        RegCritic {
            q: [self.q[0].cast(), self.q[1].cast()],
            q_target: [self.q_target[0].cast(), self.q_target[1].cast()],
        }
    }

    fn twin(nets: &[DenseNet<T>; 2], input: ArrayView2<T>) -> Result<Array1<T>> {
        let a = nets[0].predict(input)?;
        let b = nets[1].predict(input)?;
        Ok(ndarray::Zip::from(a.column(0)).and(b.column(0)).map_collect(|&x, &y| x.min(y)))
    }

    /// Twin-min regularizer value.
    pub fn q_reg(&self, obs: ArrayView2<T>, action: ArrayView2<T>) -> Result<Array1<T>> {
        Self::twin(&self.q, hcat(&[obs, action])?.view())
    }

    /// `r_reg + γ·min_k Q̄_k(s′, a′)`. Time-limit terminations bootstrap.
    pub fn td_target(&self, batch: &FbBatch<T>, next_action: ArrayView2<T>, gamma: f64) -> Result<Array1<T>> {
        let next = Self::twin(&self.q_target, hcat(&[batch.next_obs.view(), next_action])?.view())?;
        let g = T::of(gamma);
        Ok(&batch.reg_reward + &next.mapv(|v| v * g))
    }

    /// Mean over twins of the squared TD error against a fixed target.
    pub fn loss_with(
        &self,
        obs: ArrayView2<T>,
        action: ArrayView2<T>,
        target: &Array1<T>,
    ) -> Result<(f64, [NetGrads<T>; 2])> {
        let n = obs.nrows();
        let input = hcat(&[obs, action])?;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        let scale = T::of(2.0 / (2.0 * n as f64));
        for net in &self.q {
            let (out, cache) = net.forward(input.view())?;
            let err = &out.column(0) - target;
            loss += err.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n as f64 / 2.0;
            let d = err.mapv(|v| v * scale).insert_axis(ndarray::Axis(1));
            grads.push(net.backward(&cache, d.view())?.0);
        }
        if !loss.is_finite() {
            return Err(Error::numeric("regcritic_loss", format!("loss value {loss}")));
        }
        let mut it = grads.into_iter();
        Ok((loss, [it.next().unwrap(), it.next().unwrap()]))
    }

    pub fn loss(
        &self,
        batch: &FbBatch<T>,
        next_action: ArrayView2<T>,
        gamma: f64,
    ) -> Result<(f64, [NetGrads<T>; 2])> {
        let y = self.td_target(batch, next_action, gamma)?;
        self.loss_with(batch.obs.view(), batch.action.view(), &y)
    }

    /// Twin-min values and `∂/∂a Σ_i scale·min_k Q_k(s_i, a_i)`, routed to
    /// the smaller twin per row.
    pub(crate) fn value_action_grad(
        &self,
        obs: ArrayView2<T>,
        action: ArrayView2<T>,
        scale: T,
    ) -> Result<(Array1<T>, Array2<T>)> {
        let input = hcat(&[obs, action])?;
        let (a, ca) = self.q[0].forward(input.view())?;
        let (b, cb) = self.q[1].forward(input.view())?;
        let first = ndarray::Zip::from(a.column(0)).and(b.column(0)).map_collect(|&x, &y| x <= y);
        let values = ndarray::Zip::from(a.column(0)).and(b.column(0)).map_collect(|&x, &y| x.min(y));
        let mut d_action = Array2::zeros(action.raw_dim());
        for (k, (net, cache)) in [(&self.q[0], &ca), (&self.q[1], &cb)].into_iter().enumerate() {
            let d = Array2::from_shape_fn((obs.nrows(), 1), |(i, _)| {
                if first[i] == (k == 0) {
                    scale
                } else {
                    T::zero()
                }
            });
            let (_, d_in) = net.backward(cache, d.view())?;
            d_action += &d_in.slice(s![.., OBS_DIM..]);
        }
        Ok((values, d_action))
    }

    pub fn soft_update_targets(&mut self, tau: T) -> Result<()> {
        for k in 0..2 {
            soft_update(&mut self.q_target[k], &self.q[k], tau)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.q_target.iter()).all(DenseNet::is_finite)
    }
}
