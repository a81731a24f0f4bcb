use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer, weights stored row-major as `[outputs, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
            grad_weights: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/sqrt(inputs)`, zero bias.
    pub fn fan_in(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs, activation);
        let scale = 1.0 / (inputs as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.uniform_range(-scale, scale);
        }
        layer
    }

    fn affine(&self, x: &Tensor) -> Tensor {
        let rows = x.rows();
        let mut out = vec![0.0; rows * self.outputs];
        for (b, xr) in x.iter_rows().enumerate() {
            let orow = &mut out[b * self.outputs..(b + 1) * self.outputs];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                *slot = self.bias[o] + wrow.iter().zip(xr).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        Tensor::matrix(rows, self.outputs, out).expect("affine output shape")
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
}

/// Feed-forward network: rectifier on hidden layers, identity on the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    cache: Option<ForwardCache>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

fn activation_for(i: usize, n: usize) -> Activation {
    if i + 1 == n {
        Activation::Identity
    } else {
        Activation::Relu
    }
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        ensure!(
            sizes.len() >= 2,
            Config,
            "an MLP needs at least input and output sizes"
        );
        ensure!(
            sizes.iter().all(|&s| s > 0),
            Config,
            "layer sizes must be positive: {:?}",
            sizes
        );
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::fan_in(w[0], w[1], activation_for(i, n), rng))
            .collect();
        Ok(Self {
            layers,
            cache: None,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        ensure!(
            sizes.len() >= 2,
            Config,
            "an MLP needs at least input and output sizes"
        );
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::zeros(w[0], w[1], activation_for(i, n)))
            .collect();
        Ok(Self {
            layers,
            cache: None,
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        ensure!(
            !layers.is_empty(),
            Config,
            "an MLP needs at least one layer"
        );
        for pair in layers.windows(2) {
            ensure!(
                pair[0].outputs == pair[1].inputs,
                Dimension,
                "layer widths {} -> {} do not chain",
                pair[0].outputs,
                pair[1].inputs
            );
        }
        for l in &layers {
            ensure!(
                l.weights.len() == l.inputs * l.outputs && l.bias.len() == l.outputs,
                Dimension,
                "layer {}x{} has malformed parameter buffers",
                l.inputs,
                l.outputs
            );
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        ensure!(
            batch.shape().len() == 2 && batch.cols() == self.input_size(),
            Dimension,
            "batch shape {:?} does not match input width {}",
            batch.shape(),
            self.input_size()
        );
        Ok(())
    }

    /// Forward pass that keeps the activations needed by [`Mlp::backward`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let z = layer.affine(&x);
            let mut a = z.clone();
            a.data_mut()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        self.cache = Some(ForwardCache {
            inputs,
            pre_activations: pre,
        });
        Ok(x)
    }

    /// Forward pass without caching; usable through a shared reference.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.affine(&x);
            x.data_mut()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
        }
        Ok(x)
    }

    /// Back-propagates `upstream = dL/d(output)` through the cached forward
    /// pass. Parameter gradients are overwritten; the gradient with respect to
    /// the batch input is returned.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let rows = cache.inputs[0].rows();
        ensure!(
            upstream.rows() == rows && upstream.cols() == self.output_size(),
            Dimension,
            "upstream gradient {:?} does not match output [{}, {}]",
            upstream.shape(),
            rows,
            self.output_size()
        );
        let mut grad = upstream.clone();
        for (li, layer) in self.layers.iter_mut().enumerate().rev() {
            let input = &cache.inputs[li];
            let pre = &cache.pre_activations[li];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            for (g, z) in grad.data_mut().iter_mut().zip(pre.data()) {
                *g *= layer.activation.derivative(*z);
            }
            layer.grad_weights.iter_mut().for_each(|v| *v = 0.0);
            layer.grad_bias.iter_mut().for_each(|v| *v = 0.0);
            let mut next = vec![0.0; rows * n_in];
            for b in 0..rows {
                let delta = grad.row(b);
                let xr = input.row(b);
                let nrow = &mut next[b * n_in..(b + 1) * n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    layer.grad_bias[o] += d;
                    let gw = &mut layer.grad_weights[o * n_in..(o + 1) * n_in];
                    let w = &layer.weights[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        gw[i] += d * xr[i];
                        nrow[i] += d * w[i];
                    }
                }
            }
            grad = Tensor::matrix(rows, n_in, next)?;
            let _ = n_out;
        }
        Ok(grad)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.grad_weights.iter_mut().for_each(|v| *v = 0.0);
            l.grad_bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Gradients in the same layout as [`Mlp::params`].
    pub fn grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.grad_weights);
            out.extend_from_slice(&l.grad_bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.num_params(),
            Dimension,
            "expected {} parameters, got {}",
            self.num_params(),
            flat.len()
        );
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        self.cache = None;
        Ok(())
    }

    /// `params -= scale * direction`.
    pub fn apply_update(&mut self, direction: &[f64], scale: f64) -> Result<()> {
        ensure!(
            direction.len() == self.num_params(),
            Dimension,
            "update has {} entries for {} parameters",
            direction.len(),
            self.num_params()
        );
        let mut off = 0;
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *p -= scale * direction[off];
                off += 1;
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Copy of this network with one extra output unit appended to the last
    /// layer; existing parameters are preserved.
    pub fn with_extra_output(&self, rng: &mut Rng) -> Mlp {
        let mut layers = self.layers.clone();
        let last = layers.last_mut().expect("non-empty");
        let fresh = Dense::fan_in(last.inputs, 1, last.activation, rng);
        last.weights.extend_from_slice(&fresh.weights);
        last.bias.push(0.0);
        last.outputs += 1;
        last.grad_weights = vec![0.0; last.weights.len()];
        last.grad_bias = vec![0.0; last.outputs];
        Mlp {
            layers,
            cache: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::loss::cross_entropy;

    fn input(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::matrix(rows, cols, rng.normal_vec(rows * cols)).unwrap()
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mut m = Mlp::zeros(&[3, 2]).unwrap();
        let mut layers = m.layers.clone();
        layers[0].bias = vec![0.5, -1.5];
        m = Mlp::from_layers(layers).unwrap();
        let out = m.predict(&input(4, 3, &mut Rng::new(0))).unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut l = Dense::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        let m = Mlp::from_layers(vec![l]).unwrap();
        let x = input(5, 3, &mut Rng::new(1));
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn golden_forward_2_16_3() {
        let mut rng = Rng::new(2024);
        let m = Mlp::new(&[2, 16, 3], &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.25]]).unwrap();
        let out = m.predict(&x).unwrap();
        let golden = GOLDEN_2_16_3;
        for (a, b) in out.data().iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", out.data(), golden);
        }
    }

    // Frozen after the finite-difference check passed; guards init and forward order.
    const GOLDEN_2_16_3: [f64; 3] = [
        -0.27222589258362573,
        -0.3015306315804914,
        0.46033658043793113,
    ];

    #[test]
    fn sum_loss_linear_weight_grad() {
        let mut rng = Rng::new(5);
        let mut m = Mlp::new(&[4, 2], &mut rng).unwrap();
        let x = input(6, 4, &mut rng);
        let out = m.forward(&x).unwrap();
        let ones = Tensor::matrix(out.rows(), out.cols(), vec![1.0; out.len()]).unwrap();
        m.backward(&ones).unwrap();
        let l = &m.layers()[0];
        for o in 0..2 {
            for i in 0..4 {
                let expected: f64 = x.iter_rows().map(|r| r[i]).sum();
                assert!((l.grad_weights[o * 4 + i] - expected).abs() < 1e-12);
            }
            assert!((l.grad_bias[o] - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(6);
        let mut m = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        let x = input(4, 3, &mut rng);
        m.forward(&x).unwrap();
        m.backward(&Tensor::zeros(&[4, 2])).unwrap();
        assert!(m.grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = Mlp::new(&[3, 2], &mut Rng::new(0)).unwrap();
        assert!(matches!(
            m.backward(&Tensor::zeros(&[1, 2])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut m = Mlp::new(&[3, 2], &mut Rng::new(0)).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[2, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn finite_difference_gradient() {
        let mut rng = Rng::new(99);
        for trial in 0..5 {
            let sizes = [3, 7 + trial, 5, 4];
            let mut m = Mlp::new(&sizes, &mut rng).unwrap();
            let x = input(5, 3, &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
            let logits = m.forward(&x).unwrap();
            let lg = cross_entropy(&logits, &labels).unwrap();
            m.backward(&lg.grad).unwrap();
            let analytic = m.grads();
            let base = m.params();
            let h = 1e-5;
            for k in 0..base.len() {
                let mut p = base.clone();
                p[k] += h;
                m.set_params(&p).unwrap();
                let up = cross_entropy(&m.predict(&x).unwrap(), &labels)
                    .unwrap()
                    .loss;
                p[k] -= 2.0 * h;
                m.set_params(&p).unwrap();
                let down = cross_entropy(&m.predict(&x).unwrap(), &labels)
                    .unwrap()
                    .loss;
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[k] - numeric).abs() / denom <= 1e-4,
                    "param {k}: {} vs {}",
                    analytic[k],
                    numeric
                );
            }
            m.set_params(&base).unwrap();
        }
    }

    #[test]
    fn extra_output_keeps_known_logits() {
        let mut rng = Rng::new(3);
        let m = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        let wide = m.with_extra_output(&mut rng);
        let x = input(3, 4, &mut rng);
        let a = m.predict(&x).unwrap();
        let b = wide.predict(&x).unwrap();
        assert_eq!(b.cols(), 4);
        for r in 0..3 {
            assert_eq!(&b.row(r)[..3], a.row(r));
        }
    }
}
