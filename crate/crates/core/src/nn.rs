//! Dense feed-forward networks with hand-derived reverse-mode gradients.
//!
//! Inputs are batched as rows of a matrix. Weights are stored `out x in`, so a
//! layer computes `act(X Wᵀ + b)`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"BVAE";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// post-activation output.
    fn backprop(self, grad: &mut Array2<f64>, output: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(output).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid => Zip::from(grad).and(output).for_each(|g, &a| *g *= a * (1.0 - a)),
            Activation::Identity => {}
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weights = Array2::from_shape_fn((output, input), |_| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
}

/// Activations recorded by a forward pass; `acts[0]` is the input and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace always holds the input")
    }
}

/// Per-layer parameter gradients (or any per-parameter accumulator).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// Flattened in the same order as [`Network::param`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|((w, b), l)| w.dim() == l.weights.dim() && b.len() == l.bias.len())
    }
}

impl Network {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    actual: l.bias.len(),
                });
            }
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(net)
    }

    /// Builds a network with layer widths `sizes` (input first) and
    /// Glorot-uniform initialization.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::InvalidParameter(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Dense::init(w[0], w[1], act, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weights.t());
        z += &layer.bias;
        layer.activation.apply(&mut z);
        z
    }

    /// Evaluates the network on a batch (one input per row).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut cur = Self::layer_forward(&self.layers[0], &x);
        for layer in &self.layers[1..] {
            cur = Self::layer_forward(layer, &cur.view());
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, &acts[acts.len() - 1].view());
            acts.push(next);
        }
        Ok(Trace { acts })
    }

    /// Reverse pass: gradients of `<output, upstream>` summed over the batch.
    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                actual: upstream.len(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&mut g, &trace.acts[i + 1]);
            let dw = g.t().dot(&trace.acts[i]);
            let db = g.sum_axis(Axis(0));
            g = g.dot(&layer.weights);
            grads.push((dw, db));
        }
        grads.reverse();
        let grads = Gradients { layers: grads };
        if !grads.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward pass"));
        }
        Ok((grads, g))
    }

    /// Single-input convenience over [`Network::forward_trace`] and
    /// [`Network::backward`]: returns the output, parameter gradients and
    /// input gradient of `<output, upstream>`.
    pub fn forward_backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Gradients, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|_| Error::DimensionMismatch {
            expected: self.input_dim(),
            actual: input.len(),
        })?;
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let trace = self.forward_trace(x)?;
        if trace.output().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("length checked");
        let (grads, dx) = self.backward(&trace, up)?;
        Ok((trace.output().row(0).to_vec(), grads, dx.row(0).to_vec()))
    }

    /// Smallest |pre-activation| over all relu units for the given input.
    pub fn relu_margin(&self, x: ArrayView2<f64>) -> Result<f64> {
        self.check_input(&x)?;
        let mut cur = x.to_owned();
        let mut margin = f64::INFINITY;
        for layer in &self.layers {
            let mut z = cur.dot(&layer.weights.t());
            z += &layer.bias;
            if layer.activation == Activation::Relu {
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            layer.activation.apply(&mut z);
            cur = z;
        }
        Ok(margin)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weights.len();
            if index < nw {
                return (li, Some((index / l.input_dim(), index % l.input_dim())), 0);
            }
            index -= nw;
            if index < l.bias.len() {
                return (li, None, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter addressing: per layer, weights row-major then biases.
    pub fn param(&self, index: usize) -> f64 {
        match self.locate(index) {
            (li, Some(rc), _) => self.layers[li].weights[rc],
            (li, None, b) => self.layers[li].bias[b],
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        match self.locate(index) {
            (li, Some(rc), _) => self.layers[li].weights[rc] = value,
            (li, None, b) => self.layers[li].bias[b] = value,
        }
    }

    /// Copy whose final layer keeps only the given output rows, in order.
    pub fn with_output_rows(&self, rows: &[usize]) -> Result<Network> {
        let mut layers = self.layers.clone();
        let last = layers.last_mut().expect("non-empty");
        if let Some(&bad) = rows.iter().find(|&&r| r >= last.output_dim()) {
            return Err(Error::InvalidParameter(format!(
                "output row {bad} out of range (dim {})",
                last.output_dim()
            )));
        }
        last.weights = last.weights.select(Axis(0), rows);
        last.bias = last.bias.select(Axis(0), rows);
        Ok(Network { layers })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.input_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.output_dim() as u32).to_le_bytes())?;
            w.write_all(&l.activation.code().to_le_bytes())?;
            for v in l.weights.iter().chain(l.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Network> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::format("weights", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::format("weights", format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        if count == 0 || count > 64 {
            return Err(Error::format("weights", format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let input = read_u32(r)? as usize;
            let output = read_u32(r)? as usize;
            let activation = Activation::from_code(read_u32(r)?)
                .ok_or_else(|| Error::format("weights", "unknown activation code"))?;
            if input == 0 || output == 0 || input.saturating_mul(output) > 1 << 28 {
                return Err(Error::format(
                    "weights",
                    format!("implausible layer shape {output}x{input}"),
                ));
            }
            let mut weights = Array2::zeros((output, input));
            for v in weights.iter_mut() {
                *v = read_f64(r)?;
            }
            let mut bias = Array1::zeros(output);
            for v in bias.iter_mut() {
                *v = read_f64(r)?;
            }
            layers.push(Dense {
                weights,
                bias,
                activation,
            });
        }
        Network::new(layers)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format("weights", format!("truncated: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one Adam update. Parameters are untouched if any gradient is non-finite.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !grads.matches(net) || !state.m.matches(net) || !state.v.matches(net) {
        return Err(Error::InvalidParameter(
            "gradient or moment shapes do not match network".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[li];
        let (mw, mb) = &mut state.m.layers[li];
        let (vw, vb) = &mut state.v.layers[li];
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        Zip::from(&mut layer.weights).and(mw).and(vw).and(gw).for_each(update);
        Zip::from(&mut layer.bias).and(mb).and(vb).and(gb).for_each(update);
    }
    Ok(())
}

/// Relative error used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares reverse-mode gradients of `loss(net(input))` against central
/// finite differences over every parameter; returns the maximum relative error.
///
/// `loss` maps the network output to `(value, d value / d output)`.
pub fn grad_check<L>(net: &Network, input: &[f64], loss: L) -> Result<f64>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let x = ArrayView2::from_shape((1, input.len()), input).map_err(|_| Error::DimensionMismatch {
        expected: net.input_dim(),
        actual: input.len(),
    })?;
    let out = net.forward(x)?;
    let (_, upstream) = loss(out.row(0).as_slice().expect("contiguous"));
    let (_, grads, _) = net.forward_backward(input, &upstream)?;
    let analytic = grads.flat();

    let mut probe = net.clone();
    let eval = |n: &Network| -> Result<f64> {
        let out = n.forward(x)?;
        Ok(loss(out.row(0).as_slice().expect("contiguous")).0)
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.param(i);
        probe.set_param(i, orig + GRAD_CHECK_STEP);
        let plus = eval(&probe)?;
        probe.set_param(i, orig - GRAD_CHECK_STEP);
        let minus = eval(&probe)?;
        probe.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn squared_error(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |out: &[f64]| {
            let diff: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
            (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
        }
    }

    #[test]
    fn identity_layer_passes_through() {
        let layer = Dense {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let net = Network::new(vec![layer]).unwrap();
        let (out, _, dx) = net.forward_backward(&[1.0, -2.0, 0.5], &[0.3, 0.2, -0.1]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 0.5]);
        assert_eq!(dx, vec![0.3, 0.2, -0.1]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let layer = Dense {
            weights: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: array![0.1, 0.2, 0.3],
            activation: Activation::Identity,
        };
        let net = Network::new(vec![layer]).unwrap();
        let x = [0.5, -1.5];
        let up = [1.0, -2.0, 0.25];
        let (out, grads, _) = net.forward_backward(&x, &up).unwrap();
        assert!((out[0] - (0.5 - 3.0 + 0.1)).abs() < 1e-15);
        let (dw, db) = &grads.layers[0];
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(dw[[r, c]], up[r] * x[c]);
            }
            assert_eq!(db[r], up[r]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::init(&[3, 2], &[Activation::Identity], &mut rng).unwrap();
        assert!(net.forward_backward(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(net.forward_backward(&[1.0, 2.0, 3.0], &[0.0]).is_err());
        let a = Dense::init(3, 4, Activation::Relu, &mut rng);
        let b = Dense::init(5, 2, Activation::Relu, &mut rng);
        assert!(Network::new(vec![a, b]).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::init(&[2, 2], &[Activation::Identity], &mut rng).unwrap();
        assert!(matches!(
            net.forward_backward(&[f64::NAN, 0.0], &[1.0, 1.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn forward_backward_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init(&[6, 5, 3], &[Activation::Relu, Activation::Sigmoid], &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let a = net.forward_backward(&x, &[1.0, 0.5, -0.5]).unwrap();
        let b = net.forward_backward(&x, &[1.0, 0.5, -0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 5 {
            let net = Network::init(
                &[5, 7, 6, 3],
                &[Activation::Relu, Activation::Sigmoid, Activation::Identity],
                &mut rng,
            )
            .unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let margin = net.relu_margin(ArrayView2::from_shape((1, 5), &x).unwrap()).unwrap();
            if margin < 1e-3 {
                continue;
            }
            let err = grad_check(&net, &x, squared_error(vec![0.3, -0.2, 0.7])).unwrap();
            assert!(err < 1e-4, "relative error {err}");
            checked += 1;
        }
    }

    #[test]
    fn linear_net_grad_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::init(&[4, 3], &[Activation::Identity], &mut rng).unwrap();
        let err = grad_check(&net, &[0.5, -0.25, 1.0, 2.0], squared_error(vec![1.0, 0.0, -1.0])).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn degenerate_zero_net_has_zero_error() {
        let layer = Dense {
            weights: Array2::zeros((2, 3)),
            bias: Array1::zeros(2),
            activation: Activation::Identity,
        };
        let net = Network::new(vec![layer]).unwrap();
        let err = grad_check(&net, &[0.0, 0.0, 0.0], squared_error(vec![0.0, 0.0])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::init(&[3, 2], &[Activation::Identity], &mut rng).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net);
        adam_step(&mut net, &Gradients::zeros_like(&before), &mut state, 0.1).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let layer = Dense {
            weights: array![[0.0]],
            bias: array![0.0],
            activation: Activation::Identity,
        };
        let mut net = Network::new(vec![layer]).unwrap();
        let mut state = AdamState::new(&net);
        let g = 0.37;
        let grads = Gradients {
            layers: vec![(array![[g]], array![0.0])],
        };
        let lr = 1e-3;
        adam_step(&mut net, &grads, &mut state, lr).unwrap();
        // t = 1: m̂ = g, v̂ = g², Δ = lr·g/(|g| + ε)
        let expected = -lr * g / (g.abs() + 1e-8);
        assert!((net.layers()[0].weights[[0, 0]] - expected).abs() < 1e-15);
        assert!((expected.abs() - lr).abs() < 1e-10);
    }

    #[test]
    fn adam_constant_gradient_descends_monotonically() {
        let layer = Dense {
            weights: array![[1.0]],
            bias: array![0.0],
            activation: Activation::Identity,
        };
        let mut net = Network::new(vec![layer]).unwrap();
        let mut state = AdamState::new(&net);
        let grads = Gradients {
            layers: vec![(array![[2.0]], array![-1.0])],
        };
        let mut w_prev = 1.0;
        let mut b_prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut net, &grads, &mut state, 0.01).unwrap();
            let w = net.layers()[0].weights[[0, 0]];
            let b = net.layers()[0].bias[0];
            assert!(w < w_prev && b > b_prev);
            w_prev = w;
            b_prev = b;
        }
    }

    #[test]
    fn adam_zero_lr_is_identity_and_rejects_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = Network::init(&[3, 4, 2], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].0.fill(0.5);
        adam_step(&mut net, &grads, &mut state, 0.0).unwrap();
        assert_eq!(net, before);
        grads.layers[1].1[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(net, before);
    }

    #[test]
    fn weight_file_roundtrip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(&[4, 3, 2], &[Activation::Relu, Activation::Sigmoid], &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BVAE");
        let back = Network::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Network::read_from(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(Network::read_from(&mut &truncated[..]).is_err());
    }

    #[test]
    fn output_row_pruning_matches_full_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::init(&[5, 6, 8], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let pruned = net.with_output_rows(&[6, 1, 3]).unwrap();
        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64 * 0.1 - 0.3);
        let full = net.forward(x.view()).unwrap();
        let part = pruned.forward(x.view()).unwrap();
        for r in 0..2 {
            assert_eq!(part[[r, 0]], full[[r, 6]]);
            assert_eq!(part[[r, 1]], full[[r, 1]]);
            assert_eq!(part[[r, 2]], full[[r, 3]]);
        }
    }
}
