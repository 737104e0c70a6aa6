//! Dense feed-forward networks with explicit forward traces and exact
//! reverse-mode gradients. Everything is f64 and row-major; a weight
//! matrix of a layer with `in_dim` inputs and `out_dim` outputs stores
//! `weight[o * in_dim + i]`.

pub mod adam;
pub mod checkpoint;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Silu => 1,
            Activation::Tanh => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Silu),
            2 => Ok(Activation::Tanh),
            3 => Ok(Activation::Identity),
            other => Err(Error::Contract(format!("unknown activation tag {other}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Residual layers compute `act(Wx + b) + x` and require `in_dim == out_dim`.
    pub residual: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl LayerSpec {
    pub fn plain(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            residual: false,
        }
    }

    pub fn residual(dim: usize, activation: Activation) -> Self {
        Self {
            in_dim: dim,
            out_dim: dim,
            activation,
            residual: true,
        }
    }
}

impl Layer {
    /// He-normal init for Relu/Silu, Xavier-uniform for Tanh/Identity;
    /// biases start at zero.
    fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::Contract("layer dimensions must be positive".into()));
        }
        if spec.residual && spec.in_dim != spec.out_dim {
            return Err(Error::Contract(format!(
                "residual layer requires in_dim == out_dim, got {}x{}",
                spec.in_dim, spec.out_dim
            )));
        }
        let n = spec.in_dim * spec.out_dim;
        let weight = match spec.activation {
            Activation::Relu | Activation::Silu => {
                let std = (2.0 / spec.in_dim as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Activation::Tanh | Activation::Identity => {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Ok(Self {
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            weight,
            bias: vec![0.0; spec.out_dim],
            activation: spec.activation,
            residual: spec.residual,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MlpNetwork {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations from one forward pass, kept so the
/// backward pass can run without recomputation.
#[derive(Debug)]
pub struct ForwardTrace {
    pub batch: usize,
    inputs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// Pre-activation values of one layer, batch-major. Gradient probes use
    /// these to stay clear of activation kinks.
    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.zs[layer]
    }
}

/// Gradient sums over the batch, mirroring the layer layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for x in &mut l.weight {
                *x *= factor;
            }
            for x in &mut l.bias {
                *x *= factor;
            }
        }
    }
}

impl MlpNetwork {
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        for w in specs.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Contract(format!(
                    "layer chain mismatch: {} outputs feed {} inputs",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        let layers = specs
            .iter()
            .map(|&s| Layer::init(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Standard MLP: hidden layers share one activation, output layer gets
    /// its own (usually Identity for logits/values).
    pub fn mlp<R: Rng>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            specs.push(LayerSpec::plain(prev, h, hidden_act));
            prev = h;
        }
        specs.push(LayerSpec::plain(prev, out_dim, out_act));
        Self::new(&specs, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Zeroes the final layer's weights and bias. With an Identity output
    /// activation the network then emits exactly 0.0 for every input.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Zeroes the first layer's weight columns for inputs in `cols`, making
    /// the forward pass exactly independent of those input slots until
    /// training writes gradients into them.
    pub fn zero_first_layer_columns(&mut self, cols: std::ops::Range<usize>) {
        let first = &mut self.layers[0];
        assert!(cols.end <= first.in_dim, "column range out of bounds");
        for o in 0..first.out_dim {
            for c in cols.clone() {
                first.weight[o * first.in_dim + c] = 0.0;
            }
        }
    }

    /// Forward pass over a batch laid out as `batch * in_dim` values.
    pub fn forward(&self, input: &[f64], batch: usize) -> Vec<f64> {
        self.forward_trace(input, batch).output
    }

    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        self.forward(input, 1)
    }

    pub fn forward_trace(&self, input: &[f64], batch: usize) -> ForwardTrace {
        assert_eq!(
            input.len(),
            batch * self.in_dim(),
            "input length must be batch * in_dim"
        );
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        for layer in &self.layers {
            let (w, h) = (layer.in_dim, layer.out_dim);
            let mut z = vec![0.0; batch * h];
            for b in 0..batch {
                let x = &current[b * w..(b + 1) * w];
                let zrow = &mut z[b * h..(b + 1) * h];
                for o in 0..h {
                    let wrow = &layer.weight[o * w..(o + 1) * w];
                    let mut acc = layer.bias[o];
                    for i in 0..w {
                        acc += wrow[i] * x[i];
                    }
                    zrow[o] = acc;
                }
            }
            let mut out = vec![0.0; batch * h];
            for (i, &zv) in z.iter().enumerate() {
                out[i] = layer.activation.apply(zv);
            }
            if layer.residual {
                for (o, x) in out.iter_mut().zip(current.iter()) {
                    *o += x;
                }
            }
            inputs.push(current);
            zs.push(z);
            current = out;
        }
        ForwardTrace {
            batch,
            inputs,
            zs,
            output: current,
        }
    }

    /// Reverse-mode pass. `output_grad` is dL/d(output) for the whole batch;
    /// returns gradient sums plus dL/d(input).
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64]) -> (Gradients, Vec<f64>) {
        assert_eq!(
            output_grad.len(),
            trace.batch * self.out_dim(),
            "output_grad length must be batch * out_dim"
        );
        let batch = trace.batch;
        let mut grads = Gradients::zeros_like(self);
        let mut dy = output_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (w, h) = (layer.in_dim, layer.out_dim);
            let x = &trace.inputs[l];
            let z = &trace.zs[l];
            let g = &mut grads.layers[l];
            let mut dx = vec![0.0; batch * w];
            for b in 0..batch {
                let dyrow = &dy[b * h..(b + 1) * h];
                let zrow = &z[b * h..(b + 1) * h];
                let xrow = &x[b * w..(b + 1) * w];
                let dxrow = &mut dx[b * w..(b + 1) * w];
                for o in 0..h {
                    let dz = dyrow[o] * layer.activation.derivative(zrow[o]);
                    if dz != 0.0 {
                        g.bias[o] += dz;
                        let wrow = &layer.weight[o * w..(o + 1) * w];
                        let gwrow = &mut g.weight[o * w..(o + 1) * w];
                        for i in 0..w {
                            gwrow[i] += dz * xrow[i];
                            dxrow[i] += dz * wrow[i];
                        }
                    }
                }
                if layer.residual {
                    for i in 0..w {
                        dxrow[i] += dyrow[i];
                    }
                }
            }
            dy = dx;
        }
        (grads, dy)
    }
}

/// Numerically stable softmax; subtracts the max before exponentiating.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let lse = m + sum.ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Cross-entropy against a class index. Returns the loss and dL/d(logits),
/// which is `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target class out of range");
    let logp = log_softmax(logits);
    let loss = -logp[target];
    let mut grad: Vec<f64> = logp.iter().map(|&lp| lp.exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Sinusoidal position embedding of a diffusion step index. Even slots get
/// sines, odd slots cosines, with geometrically spaced frequencies.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        let angle = step as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn finite_diff_check(net: &mut MlpNetwork, input: &[f64], batch: usize) -> f64 {
        // Loss = 0.5 * sum(output^2); dL/dy = y.
        let trace = net.forward_trace(input, batch);
        let out_grad: Vec<f64> = trace.output.clone();
        let (grads, input_grad) = net.backward(&trace, &out_grad);
        let loss_of = |net: &MlpNetwork, input: &[f64]| -> f64 {
            net.forward(input, batch).iter().map(|y| 0.5 * y * y).sum()
        };
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs());
            // Both gradients negligible: the difference is probe noise,
            // not a backward-pass defect.
            if denom < 1e-6 {
                return;
            }
            worst = worst.max((analytic - numeric).abs() / denom);
        };
        for l in 0..net.layers.len() {
            for k in 0..net.layers[l].weight.len() {
                let orig = net.layers[l].weight[k];
                net.layers[l].weight[k] = orig + h;
                let plus = loss_of(net, input);
                net.layers[l].weight[k] = orig - h;
                let minus = loss_of(net, input);
                net.layers[l].weight[k] = orig;
                check(grads.layers[l].weight[k], plus, minus);
            }
            for k in 0..net.layers[l].bias.len() {
                let orig = net.layers[l].bias[k];
                net.layers[l].bias[k] = orig + h;
                let plus = loss_of(net, input);
                net.layers[l].bias[k] = orig - h;
                let minus = loss_of(net, input);
                net.layers[l].bias[k] = orig;
                check(grads.layers[l].bias[k], plus, minus);
            }
        }
        let mut input_v = input.to_vec();
        for k in 0..input_v.len() {
            let orig = input_v[k];
            input_v[k] = orig + h;
            let plus = loss_of(net, &input_v);
            input_v[k] = orig - h;
            let minus = loss_of(net, &input_v);
            input_v[k] = orig;
            check(input_grad[k], plus, minus);
        }
        worst
    }

    /// True when no Relu pre-activation sits close enough to its kink for a
    /// finite-difference probe to step across it.
    fn relu_kink_safe(net: &MlpNetwork, input: &[f64], batch: usize) -> bool {
        let trace = net.forward_trace(input, batch);
        net.layers.iter().enumerate().all(|(l, layer)| {
            layer.activation != Activation::Relu
                || trace.zs[l].iter().all(|z| z.abs() > 1e-3)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(7, "nn-test");
        for case in 0..12 {
            let act = match case % 4 {
                0 => Activation::Relu,
                1 => Activation::Silu,
                2 => Activation::Tanh,
                _ => Activation::Identity,
            };
            let specs = [
                LayerSpec::plain(3, 5, act),
                LayerSpec::residual(5, Activation::Silu),
                LayerSpec::plain(5, 2, Activation::Identity),
            ];
            let batch = 1 + case % 3;
            let (mut net, input) = loop {
                let net = MlpNetwork::new(&specs, &mut rng).unwrap();
                let input: Vec<f64> =
                    (0..batch * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if relu_kink_safe(&net, &input, batch) {
                    break (net, input);
                }
            };
            let worst = finite_diff_check(&mut net, &input, batch);
            assert!(worst < 1e-4, "case {case}: worst rel err {worst}");
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut rng = stream_rng(9, "zero-grad");
        let net = MlpNetwork::mlp(3, &[6], 2, Activation::Tanh, Activation::Identity, &mut rng)
            .unwrap();
        let x = [0.2, -0.4, 0.9];
        let trace = net.forward_trace(&x, 1);
        let (grads, input_grad) = net.backward(&trace, &[0.0, 0.0]);
        for l in &grads.layers {
            assert!(l.weight.iter().all(|&g| g == 0.0));
            assert!(l.bias.iter().all(|&g| g == 0.0));
        }
        assert!(input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_linear_gradient_is_the_input() {
        // y = w*x with loss L = y: dL/dw = x = 3.
        let mut net = MlpNetwork::new(
            &[LayerSpec::plain(1, 1, Activation::Identity)],
            &mut stream_rng(10, "linear"),
        )
        .unwrap();
        net.layers[0].bias[0] = 0.0;
        let trace = net.forward_trace(&[3.0], 1);
        let (grads, _) = net.backward(&trace, &[1.0]);
        assert_eq!(grads.layers[0].weight[0], 3.0);
        assert_eq!(grads.layers[0].bias[0], 1.0);
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        // 2-2-1 net, tanh then identity, fixed weights.
        let mut net = MlpNetwork::new(
            &[
                LayerSpec::plain(2, 2, Activation::Tanh),
                LayerSpec::plain(2, 1, Activation::Identity),
            ],
            &mut stream_rng(0, "hand"),
        )
        .unwrap();
        net.layers[0].weight = vec![0.5, -0.25, 0.1, 0.3];
        net.layers[0].bias = vec![0.05, -0.1];
        net.layers[1].weight = vec![1.5, -2.0];
        net.layers[1].bias = vec![0.2];
        let x = [0.4, -0.8];
        let h0 = (0.5 * 0.4 + (-0.25) * (-0.8) + 0.05f64).tanh();
        let h1 = (0.1 * 0.4 + 0.3 * (-0.8) - 0.1f64).tanh();
        let expected = 1.5 * h0 - 2.0 * h1 + 0.2;
        let out = net.forward_one(&x);
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = stream_rng(11, "pure");
        let net = MlpNetwork::mlp(4, &[8], 3, Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = net.forward(&x, 2);
        let b = net.forward(&x, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn residual_identity_passthrough() {
        // Zero weights in a residual layer leave the input unchanged when
        // the activation maps 0 to 0.
        let mut net = MlpNetwork::new(
            &[LayerSpec::residual(3, Activation::Tanh)],
            &mut stream_rng(1, "res"),
        )
        .unwrap();
        net.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        let x = [0.3, -0.7, 1.1];
        assert_eq!(net.forward_one(&x), x.to_vec());
    }

    #[test]
    fn zeroed_last_layer_outputs_zero() {
        let mut rng = stream_rng(3, "zero");
        let mut net =
            MlpNetwork::mlp(5, &[16], 4, Activation::Silu, Activation::Identity, &mut rng)
                .unwrap();
        net.zero_last_layer();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert_eq!(net.forward_one(&x), vec![0.0; 4]);
    }

    #[test]
    fn zeroed_columns_ignore_inputs() {
        let mut rng = stream_rng(4, "cols");
        let mut net =
            MlpNetwork::mlp(6, &[12], 2, Activation::Silu, Activation::Identity, &mut rng)
                .unwrap();
        net.zero_first_layer_columns(4..6);
        let mut a = vec![0.1, -0.2, 0.3, 0.4, 0.0, 0.0];
        let out_a = net.forward_one(&a);
        a[4] = 5.0;
        a[5] = -3.0;
        let out_b = net.forward_one(&a);
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn softmax_basics() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
        // Large logits stay finite.
        let q = softmax(&[1000.0, 1001.0]);
        assert!(q.iter().all(|v| v.is_finite()));
        // Shift invariance up to rounding of the shifted inputs.
        let a = softmax(&[0.3, -1.2, 2.5]);
        let b = softmax(&[0.3 + 10.0, -1.2 + 10.0, 2.5 + 10.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.2, -0.5, 1.3, 0.0];
        let (loss, grad) = softmax_cross_entropy(&logits, 2);
        let p = softmax(&logits);
        assert!((loss + p[2].ln()).abs() < 1e-12);
        for (i, g) in grad.iter().enumerate() {
            let expect = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-12);
        }
        let s: f64 = grad.iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal_embedding(7, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(sinusoidal_embedding(3, 16), sinusoidal_embedding(4, 16));
        // Step 0 embeds as alternating sin(0)=0, cos(0)=1.
        let z = sinusoidal_embedding(0, 8);
        for i in 0..4 {
            assert_eq!(z[2 * i], 0.0);
            assert_eq!(z[2 * i + 1], 1.0);
        }
    }
}
