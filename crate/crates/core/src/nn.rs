//! Fully-connected networks with exact reverse-mode gradients.
//!
//! Everything is `f64`. Layer weights are stored row-major with shape
//! `(out_dim, in_dim)`; batched activations are row-major `(batch, width)`.
//! The batched paths go through `matrixmultiply::dgemm`, the single-sample
//! [`Mlp::forward`] / [`Mlp::backward`] are thin wrappers with `batch = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Element-wise (or, for `ScaledSoftmax`, vector-wise) layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
    Identity,
    /// `scale * softmax(z)`: nonnegative outputs summing to `scale`.
    ScaledSoftmax { scale: f64 },
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        match self {
            Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Softplus => z.iter_mut().for_each(|v| *v = softplus(*v)),
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
            Activation::ScaledSoftmax { scale } => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let k = scale / sum;
                z.iter_mut().for_each(|v| *v *= k);
            }
        }
    }

    /// Maps the cotangent w.r.t. the activation output `y` onto the
    /// pre-activation, in place. Only `y` is needed for every supported kind.
    fn pullback(self, y: &[f64], dy: &mut [f64]) {
        match self {
            Activation::Tanh => {
                for (d, &a) in dy.iter_mut().zip(y) {
                    *d *= 1.0 - a * a;
                }
            }
            Activation::Softplus => {
                // sigmoid(z) = 1 - exp(-softplus(z))
                for (d, &a) in dy.iter_mut().zip(y) {
                    *d *= -(-a).exp_m1();
                }
            }
            Activation::Relu => {
                for (d, &a) in dy.iter_mut().zip(y) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Identity => {}
            Activation::ScaledSoftmax { scale } => {
                let inner: f64 = dy.iter().zip(y).map(|(d, a)| d * a).sum::<f64>() / scale;
                for (d, &a) in dy.iter_mut().zip(y) {
                    *d = a * (*d - inner);
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::ScaledSoftmax { .. } => "scaled_softmax",
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse-time decay `base / (1 + decay_rate * t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_rate: f64,
}

impl LrSchedule {
    pub fn inverse_time(base: f64, decay_rate: f64) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) || !(decay_rate >= 0.0 && decay_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate schedule needs base > 0 and decay_rate >= 0, got {base}, {decay_rate}"
            )));
        }
        Ok(Self { base, decay_rate })
    }

    pub fn rate(&self, t: u64) -> f64 {
        self.base / (1.0 + self.decay_rate * t as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Parameter gradients, shaped like the network they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn scale(&mut self, k: f64) {
        self.iter_mut().for_each(|g| *g *= k);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flat_map(|v| v.iter())
            .map(|g| g.abs())
            .sum()
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
    }
}

/// Post-activation values of every layer for one batch, kept for backprop.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    batch: usize,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs, row-major `(batch, out_dim)`.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, hidden, output)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must have at least two positive entries, got {widths:?}"
            )));
        }
        if matches!(hidden, Activation::ScaledSoftmax { .. }) {
            return Err(Error::InvalidArgument(
                "scaled softmax is only supported on the output layer".into(),
            ));
        }
        if let Activation::ScaledSoftmax { scale } = output {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "softmax scale must be positive, got {scale}"
                )));
            }
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            hidden,
            output,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters flattened layer by layer (weights, then biases).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    fn param_slot(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                return l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.param_slot(index) = value;
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_batch(input, 1)?;
        Ok(trace.output().to_vec())
    }

    /// Evaluates `batch` inputs stored row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<BatchTrace> {
        check_dim("forward input", batch * self.input_dim(), inputs.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().unwrap();
            let mut z = vec![0.0; batch * layer.out_dim];
            for row in z.chunks_exact_mut(layer.out_dim) {
                row.copy_from_slice(&layer.biases);
            }
            // Z (batch x out) += A (batch x in) * W^T (in x out)
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    layer.in_dim,
                    layer.out_dim,
                    1.0,
                    prev.as_ptr(),
                    layer.in_dim as isize,
                    1,
                    layer.weights.as_ptr(),
                    1,
                    layer.in_dim as isize,
                    1.0,
                    z.as_mut_ptr(),
                    layer.out_dim as isize,
                    1,
                );
            }
            let act = self.activation_of(li);
            for row in z.chunks_exact_mut(layer.out_dim) {
                act.apply(row);
            }
            activations.push(z);
        }
        Ok(BatchTrace { batch, activations })
    }

    /// Gradient of `cotangent · forward(input)` w.r.t. every parameter.
    pub fn backward(&self, input: &[f64], cotangent: &[f64]) -> Result<Gradients> {
        let trace = self.forward_batch(input, 1)?;
        let mut grads = Gradients::zeros_like(self);
        self.backward_batch(&trace, cotangent, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `sum_n cotangent[n] · output[n]` gradients into `grads`.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        cotangents: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let batch = trace.batch;
        check_dim("output cotangent", batch * self.output_dim(), cotangents.len())?;
        check_dim("gradient layers", self.layers.len(), grads.weights.len())?;
        let mut delta = cotangents.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let out = &trace.activations[li + 1];
            let input = &trace.activations[li];
            let act = self.activation_of(li);
            for (d, y) in delta
                .chunks_exact_mut(layer.out_dim)
                .zip(out.chunks_exact(layer.out_dim))
            {
                act.pullback(y, d);
            }
            let gw = &mut grads.weights[li];
            let gb = &mut grads.biases[li];
            check_dim("weight gradient", layer.weights.len(), gw.len())?;
            // dW (out x in) += dZ^T (out x batch) * A (batch x in)
            unsafe {
                matrixmultiply::dgemm(
                    layer.out_dim,
                    batch,
                    layer.in_dim,
                    1.0,
                    delta.as_ptr(),
                    1,
                    layer.out_dim as isize,
                    input.as_ptr(),
                    layer.in_dim as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    layer.in_dim as isize,
                    1,
                );
            }
            for row in delta.chunks_exact(layer.out_dim) {
                gb.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
            if li > 0 {
                // dA (batch x in) = dZ (batch x out) * W (out x in)
                let mut prev = vec![0.0; batch * layer.in_dim];
                unsafe {
                    matrixmultiply::dgemm(
                        batch,
                        layer.out_dim,
                        layer.in_dim,
                        1.0,
                        delta.as_ptr(),
                        layer.out_dim as isize,
                        1,
                        layer.weights.as_ptr(),
                        layer.in_dim as isize,
                        1,
                        0.0,
                        prev.as_mut_ptr(),
                        layer.in_dim as isize,
                        1,
                    );
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// `ω ← ω ∓ φ(t)·grad`, minus for descent and plus for ascent.
    pub fn sgd_step(
        &mut self,
        grads: &Gradients,
        schedule: &LrSchedule,
        t: u64,
        direction: Direction,
    ) -> Result<()> {
        self.apply_step(grads, schedule.rate(t), direction)
    }

    pub fn apply_step(&mut self, grads: &Gradients, lr: f64, direction: Direction) -> Result<()> {
        check_dim("gradient layers", self.layers.len(), grads.weights.len())?;
        let sign = match direction {
            Direction::Descent => -lr,
            Direction::Ascent => lr,
        };
        for (li, layer) in self.layers.iter_mut().enumerate() {
            check_dim("weight gradient", layer.weights.len(), grads.weights[li].len())?;
            check_dim("bias gradient", layer.biases.len(), grads.biases[li].len())?;
            layer
                .weights
                .iter_mut()
                .zip(&grads.weights[li])
                .for_each(|(w, g)| *w += sign * g);
            layer
                .biases
                .iter_mut()
                .zip(&grads.biases[li])
                .for_each(|(b, g)| *b += sign * g);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            layer_widths: self.widths.clone(),
            activations: (0..self.layers.len()).map(|l| self.activation_of(l)).collect(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.chunks(l.in_dim).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &NetworkCheckpoint) -> Result<Self> {
        let n_layers = ckpt.layer_widths.len().saturating_sub(1);
        check_dim("checkpoint activations", n_layers, ckpt.activations.len())?;
        check_dim("checkpoint weights", n_layers, ckpt.weights.len())?;
        check_dim("checkpoint biases", n_layers, ckpt.biases.len())?;
        let hidden = if n_layers > 1 {
            let h = ckpt.activations[0];
            if ckpt.activations[..n_layers - 1].iter().any(|&a| a != h) {
                return Err(Error::InvalidArgument(
                    "checkpoint hidden layers must share one activation".into(),
                ));
            }
            h
        } else {
            Activation::Tanh
        };
        let output = ckpt.activations[n_layers - 1];
        let mut net = Self::zeros(&ckpt.layer_widths, hidden, output)?;
        for (li, layer) in net.layers.iter_mut().enumerate() {
            check_dim("checkpoint weight rows", layer.out_dim, ckpt.weights[li].len())?;
            for (o, row) in ckpt.weights[li].iter().enumerate() {
                check_dim("checkpoint weight row", layer.in_dim, row.len())?;
                layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim].copy_from_slice(row);
            }
            check_dim("checkpoint bias", layer.out_dim, ckpt.biases[li].len())?;
            layer.biases.copy_from_slice(&ckpt.biases[li]);
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(json)?)
    }
}

/// On-disk network format: flat JSON with row-major nested weight arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    /// `weights[l][o][i]`, shape `(width[l+1], width[l])`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_net_identity_output_is_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert_eq!(net.forward(&[0.3, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_net_scaled_softmax_is_uniform() {
        let p_max = 19.95;
        let net = Mlp::zeros(
            &[4, 4, 4, 4],
            Activation::Tanh,
            Activation::ScaledSoftmax { scale: p_max },
        )
        .unwrap();
        let y = net.forward(&[1.0, 0.2, 3.0, 0.5]).unwrap();
        for v in y {
            assert!((v - p_max / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_one_two_one_net() {
        // h = tanh(W1 x + b1), y = w2 . h + b2
        let mut net = Mlp::zeros(&[1, 2, 1], Activation::Tanh, Activation::Identity).unwrap();
        net.layers[0].weights = vec![0.5, -1.5];
        net.layers[0].biases = vec![0.1, 0.2];
        net.layers[1].weights = vec![2.0, 0.75];
        net.layers[1].biases = vec![-0.3];
        for &x in &[-1.0_f64, 0.0, 2.0] {
            let expect = 2.0 * (0.5 * x + 0.1).tanh() + 0.75 * (-1.5 * x + 0.2).tanh() - 0.3;
            let y = net.forward(&[x]).unwrap()[0];
            assert!((y - expect).abs() < 1e-15, "x={x}: {y} vs {expect}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_rejects_wrong_cotangent_length() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 8, 3], Activation::Tanh, Activation::Softplus, &mut rng).unwrap();
        let g = net.backward(&[0.4, -0.1], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.l1_norm(), 0.0);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = [0.5, -1.25, 2.0];
        let c = [1.5, -0.5];
        let g = net.backward(&x, &c).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g.weights[0][o * 3 + i], c[o] * x[i]);
            }
            assert_eq!(g.biases[0][o], c[o]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for output in [
            Activation::Identity,
            Activation::Softplus,
            Activation::ScaledSoftmax { scale: 3.0 },
        ] {
            let net = Mlp::new(&[3, 8, 8, 4], Activation::Tanh, output, &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = net.backward(&x, &c).unwrap().to_flat();
            let f = |n: &Mlp| -> f64 {
                n.forward(&x).unwrap().iter().zip(&c).map(|(y, c)| y * c).sum()
            };
            for _ in 0..20 {
                let p = rng.gen_range(0..net.num_params());
                let h = 1e-5;
                let mut plus = net.clone();
                plus.set_param(p, net.param(p) + h);
                let mut minus = net.clone();
                minus.set_param(p, net.param(p) - h);
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!(
                    rel_err(g[p], fd) <= 1e-5 || (g[p] - fd).abs() < 1e-10,
                    "{output:?} param {p}: {} vs {fd}",
                    g[p]
                );
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_single_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[2, 6, 2], Activation::Tanh, Activation::Softplus, &mut rng).unwrap();
        let xs = [0.1, 0.2, -0.5, 0.9, 1.5, -1.0];
        let cs = [1.0, -1.0, 0.5, 0.25, -2.0, 0.0];
        let trace = net.forward_batch(&xs, 3).unwrap();
        let mut batch = Gradients::zeros_like(&net);
        net.backward_batch(&trace, &cs, &mut batch).unwrap();
        let mut sum = Gradients::zeros_like(&net);
        for n in 0..3 {
            sum.add_assign(&net.backward(&xs[2 * n..2 * n + 2], &cs[2 * n..2 * n + 2]).unwrap());
        }
        for (a, b) in batch.to_flat().iter().zip(sum.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh, Activation::Identity).unwrap();
        net.layers[0].weights[0] = 1.0;
        let mut g = Gradients::zeros_like(&net);
        g.weights[0][0] = 2.0;
        let sched = LrSchedule::inverse_time(0.5, 1e-4).unwrap();
        let mut down = net.clone();
        down.sgd_step(&g, &sched, 0, Direction::Descent).unwrap();
        assert_eq!(down.layers[0].weights[0], 0.0);
        let mut up = net.clone();
        up.sgd_step(&g, &sched, 0, Direction::Ascent).unwrap();
        assert_eq!(up.layers[0].weights[0], 2.0);

        let zero = Gradients::zeros_like(&net);
        let mut same = net.clone();
        same.sgd_step(&zero, &sched, 7, Direction::Descent).unwrap();
        assert_eq!(same, net);
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::inverse_time(1.0, 0.1).unwrap();
        assert!((s.rate(10) - 0.5).abs() < 1e-15);
        let s = LrSchedule::inverse_time(0.5, 1e-4).unwrap();
        assert_eq!(s.rate(0), 0.5);
        assert!((s.rate(10_000) - 0.25).abs() < 1e-15);
        assert!(LrSchedule::inverse_time(0.0, 1.0).is_err());
        assert!(LrSchedule::inverse_time(1.0, -1.0).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(
            &[3, 3, 3, 3],
            Activation::Tanh,
            Activation::ScaledSoftmax { scale: 2.5 },
            &mut rng,
        )
        .unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn checkpoint_shape_errors_are_reported() {
        let net = Mlp::zeros(&[2, 3, 1], Activation::Tanh, Activation::Softplus).unwrap();
        let mut ckpt = net.to_checkpoint();
        ckpt.weights[0][1].push(0.0);
        assert!(Mlp::from_checkpoint(&ckpt).is_err());
    }
}
