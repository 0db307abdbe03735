//! Dense networks with analytically coded gradients.
//!
//! Batches are row-major: one sample per row. A layer computes
//! `y = act(x · W + b)` with `W` stored as `(in, out)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }

    fn apply<T: Real>(self, z: &mut Array2<T>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Tanh => z.mapv_inplace(|v| v.tanh()),
            Activation::Linear => {}
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation output. The relu subgradient at 0 is 0.
    fn backprop<T: Real>(self, out: &Array2<T>, grad: &mut Array2<T>) {
        match self {
            Activation::Relu => Zip::from(grad).and(out).for_each(|g, &y| {
                if y <= T::zero() {
                    *g = T::zero();
                }
            }),
            Activation::Tanh => {
                Zip::from(grad)
                    .and(out)
                    .for_each(|g, &y| *g *= T::one() - y * y)
            }
            Activation::Linear => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// Shape `(in, out)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn in_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.ncols()
    }
}

/// A feed-forward stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet<T> {
    layers: Vec<Dense<T>>,
}

/// Activations recorded by [`DenseNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    inputs: Vec<Array2<T>>,
    outputs: Vec<Array2<T>>,
}

/// Parameter gradients, laid out like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads<T> {
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

impl<T: Real> NetGrads<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

impl<T: Real> DenseNet<T> {
    /// Builds a network with the given layer widths. Weights are uniform in
    /// `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, hidden, output)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_width() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| T::of(rng.random_range(-bound..bound)));
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Dense {
                weight: Array2::zeros((widths[i], widths[i + 1])),
                bias: Array1::zeros(widths[i + 1]),
                activation: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Ok(DenseNet { layers })
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_width() {
                return Err(Error::Config(format!("layer {i}: bias width mismatch")));
            }
            if i > 0 && layers[i - 1].out_width() != l.in_width() {
                return Err(Error::Config(format!("layer {i}: widths do not chain")));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Config(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Config(format!(
                "input width {} does not match network input width {}",
                x.ncols(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            l.activation.apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            l.activation.apply(&mut z);
            inputs.push(h);
            h = z.clone();
            outputs.push(z);
        }
        Ok((h, ForwardCache { inputs, outputs }))
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: ArrayView2<T>,
    ) -> Result<(NetGrads<T>, Array2<T>)> {
        if cache.inputs.len() != self.layers.len() || cache.outputs.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward cache does not belong to this network".into(),
            ));
        }
        let last = &cache.outputs[self.layers.len() - 1];
        if last.dim() != grad_out.dim() {
            return Err(Error::Usage(format!(
                "output gradient shape {:?} does not match cached output {:?}",
                grad_out.dim(),
                last.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            if x.ncols() != l.in_width() {
                return Err(Error::Usage(
                    "forward cache does not belong to this network".into(),
                ));
            }
            l.activation.backprop(&cache.outputs[i], &mut g);
            let gw = x.t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            let gx = g.dot(&l.weight.t());
            grads.push((gw, gb));
            g = gx;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, g))
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[off];
                off += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DenseNet<U> {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|v| U::of(v.as_f64())),
                    bias: l.bias.mapv(|v| U::of(v.as_f64())),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// One Adam update from layer-shaped gradients. `name` identifies the
    /// network in error messages.
    pub fn adam_step(
        &mut self,
        adam: &mut AdamState<T>,
        grads: &NetGrads<T>,
        lr: T,
        name: &str,
    ) -> Result<()> {
        for (i, (gw, gb)) in grads.layers.iter().enumerate() {
            if !gw.iter().chain(gb.iter()).all(|v| v.is_finite()) {
                return Err(Error::numeric(
                    format!("{name}.layer{i}"),
                    "gradient is not finite",
                ));
            }
        }
        let mut params = self.flat_params();
        adam.step(&mut params, &grads.flat(), lr, name)?;
        self.set_flat_params(&params)
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    pub fn for_net(net: &DenseNet<T>) -> Self {
        Self::new(net.param_count())
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T, name: &str) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "{name}: optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(
                name.to_string(),
                format!("gradient entry {i} is not finite"),
            ));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = T::one() - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = T::one() - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `target ← τ·online + (1−τ)·target`, elementwise.
pub fn soft_update<T: Real>(target: &mut DenseNet<T>, online: &DenseNet<T>, tau: T) -> Result<()> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::Config(format!("soft update coefficient {tau} outside [0, 1]")));
    }
    if target.layers.len() != online.layers.len()
        || target
            .layers
            .iter()
            .zip(&online.layers)
            .any(|(a, b)| a.weight.dim() != b.weight.dim())
    {
        return Err(Error::Config("soft update between mismatched networks".into()));
    }
    let keep = T::one() - tau;
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weight)
            .and(&o.weight)
            .for_each(|a, &b| *a = tau * b + keep * *a);
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|a, &b| *a = tau * b + keep * *a);
    }
    Ok(())
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error within each named parameter segment.
    pub segments: Vec<(String, f64)>,
    pub max_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Central-difference gradient check in 64-bit.
///
/// The step for parameter `p` is `1e-5·max(1, |p|)`. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-3)`, which degrades to an absolute error for
/// near-zero gradients. Non-finite values count as failures.
pub fn grad_check(
    loss: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    tol: f64,
) -> GradReport {
    grad_check_segments(loss, params, analytic, &[("params".to_string(), params.len())], tol)
}

pub fn grad_check_segments(
    loss: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    segments: &[(String, usize)],
    tol: f64,
) -> GradReport {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut p = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let h = 1e-5 * params[i].abs().max(1.0);
        p[i] = params[i] + h;
        let up = loss(&p);
        p[i] = params[i] - h;
        let down = loss(&p);
        p[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = if numeric.is_finite() && a.is_finite() {
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3)
        } else {
            f64::INFINITY
        };
        errors.push(err);
    }
    let mut seg_out = Vec::with_capacity(segments.len());
    let mut off = 0;
    for (name, len) in segments {
        let end = (off + len).min(errors.len());
        let m = errors[off..end].iter().copied().fold(0.0, f64::max);
        seg_out.push((name.clone(), m));
        off = end;
    }
    let (worst_index, max_error) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 || e.is_nan() { (i, e) } else { acc });
    GradReport {
        segments: seg_out,
        max_error,
        worst_index,
        tol,
        pass: max_error < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Array2<f64>, b: Array1<f64>, act: Activation) -> DenseNet<f64> {
        DenseNet::from_layers(vec![Dense {
            weight: w,
            bias: b,
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn single_affine_layer() {
        let net = linear(array![[2.0]], array![1.0], Activation::Linear);
        let y = net.predict(array![[3.0]].view()).unwrap();
        assert_eq!(y, array![[7.0]]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let net = linear(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0], Activation::Relu);
        let y = net.predict(array![[-1.0, 2.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 2.0]]);
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let net = DenseNet::<f64>::zeros(&[3, 5, 2], Activation::Relu, Activation::Linear).unwrap();
        let y = net.predict(array![[1.0, -4.0, 9.0]].view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let net = DenseNet::<f64>::zeros(&[3, 2], Activation::Relu, Activation::Linear).unwrap();
        assert!(matches!(
            net.predict(array![[1.0, 2.0]].view()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn affine_gradient() {
        let net = linear(array![[1.0], [2.0]], array![0.5], Activation::Linear);
        let x = array![[3.0, -1.0]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let (g, gx) = net.backward(&cache, array![[2.0]].view()).unwrap();
        assert_eq!(g.layers[0].0, array![[6.0], [-2.0]]);
        assert_eq!(g.layers[0].1, array![2.0]);
        assert_eq!(gx, array![[2.0, 4.0]]);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_input() {
        let net = linear(array![[1.0]], array![0.0], Activation::Relu);
        let (_, cache) = net.forward(array![[-1.0]].view()).unwrap();
        let (_, gx) = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(gx, array![[0.0]]);
    }

    #[test]
    fn foreign_cache_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DenseNet::<f64>::new(&[2, 4, 1], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        let b = DenseNet::<f64>::new(&[2, 1], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        let (_, cache) = b.forward(array![[0.1, 0.2]].view()).unwrap();
        assert!(matches!(
            a.backward(&cache, array![[1.0]].view()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for act in [Activation::Relu, Activation::Tanh] {
            let net = DenseNet::<f64>::new(&[3, 6, 5, 2], act, Activation::Tanh, &mut rng).unwrap();
            let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
            let target = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
            let loss = |p: &[f64]| {
                let mut n = net.clone();
                n.set_flat_params(p).unwrap();
                let y = n.predict(x.view()).unwrap();
                (&y - &target).mapv(|v| v * v).sum() * 0.5
            };
            let (y, cache) = net.forward(x.view()).unwrap();
            let (g, _) = net.backward(&cache, (&y - &target).view()).unwrap();
            let report = grad_check(&loss, &net.flat_params(), &g.flat(), 1e-4);
            assert!(report.pass, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::<f64>::new(&[3, 8, 1], Activation::Tanh, Activation::Linear, &mut rng).unwrap();
        let x = array![[0.3, -0.2, 0.9]];
        let loss = |p: &[f64]| {
            let xi = Array2::from_shape_vec((1, 3), p.to_vec()).unwrap();
            net.predict(xi.view()).unwrap()[[0, 0]]
        };
        let (_, cache) = net.forward(x.view()).unwrap();
        let (_, gx) = net.backward(&cache, array![[1.0]].view()).unwrap();
        let report = grad_check(&loss, x.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-6);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut adam = AdamState::<f64>::new(1);
        let mut p = [0.0];
        adam.step(&mut p, &[0.5], 1e-3, "p").unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut adam = AdamState::<f32>::new(3);
        let mut p = [1.0, -2.0, 3.0];
        adam.step(&mut p, &[0.0; 3], 1e-3, "p").unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = AdamState::<f32>::new(2);
            let mut p = [0.1f32, 0.2];
            for i in 0..5 {
                adam.step(&mut p, &[0.3 * i as f32, -0.7], 1e-2, "p").unwrap();
            }
            (p, adam)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
        assert_eq!(sa, sb);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut adam = AdamState::<f32>::new(1);
        let mut p = [0.0f32];
        let err = adam.step(&mut p, &[f32::NAN], 1e-3, "critic").unwrap_err();
        assert!(err.to_string().contains("critic"));
    }

    #[test]
    fn soft_update_endpoints_and_blend() {
        let online = linear(array![[1.0]], array![1.0], Activation::Linear);
        let mut target = linear(array![[0.0]], array![0.0], Activation::Linear);
        soft_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target.flat_params(), vec![0.0, 0.0]);
        soft_update(&mut target, &online, 0.01).unwrap();
        assert!((target.flat_params()[0] - 0.01).abs() < 1e-15);
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
    }

    #[test]
    fn soft_update_rejects_mismatch() {
        let a = DenseNet::<f64>::zeros(&[1, 2], Activation::Relu, Activation::Linear).unwrap();
        let mut b = DenseNet::<f64>::zeros(&[2, 2], Activation::Relu, Activation::Linear).unwrap();
        assert!(matches!(soft_update(&mut b, &a, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let p = [0.3, -1.2, 2.5, 0.0, 7.0];
        let loss = |q: &[f64]| q.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let report = grad_check(&loss, &p, &p, 1e-8);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let p = [0.3, -1.2, 2.5];
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let loss = |q: &[f64]| q.iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!(!grad_check(&loss, &p, &doubled, 1e-4).pass);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn soft_update_composes(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
                let online = linear(array![[b]], array![b], Activation::Linear);
                let mut twice = linear(array![[a]], array![a], Activation::Linear);
                soft_update(&mut twice, &online, t1).unwrap();
                soft_update(&mut twice, &online, t2).unwrap();
                let mut once = linear(array![[a]], array![a], Activation::Linear);
                soft_update(&mut once, &online, 1.0 - (1.0 - t1) * (1.0 - t2)).unwrap();
                prop_assert!((twice.flat_params()[0] - once.flat_params()[0]).abs() < 1e-12);
            }

            #[test]
            fn forward_is_pure(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let net = DenseNet::<f32>::new(&[4, 16, 3], Activation::Relu, Activation::Linear, &mut rng).unwrap();
                let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0f32..1.0));
                let a = net.predict(x.view()).unwrap();
                let b = net.forward(x.view()).unwrap().0;
                prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }
}
