//! The embedding function as a small fully-connected network with
//! hand-written reverse-mode gradients, plus its optimizer and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamWConfig, LrSchedule, OptimizerState};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::types::Embedding;

/// Guard added to norms before dividing.
pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Affine map followed by an activation. Weights are row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        out_dim: usize,
        in_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::Param("layer dimensions must be positive".into()));
        }
        if weights.len() != out_dim * in_dim {
            return Err(Error::dim(out_dim * in_dim, weights.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dim(out_dim, bias.len()));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Numeric("layer parameters".into()));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Uniform init in `±1/√in_dim` for weights and biases.
    pub fn random<R: Rng>(out_dim: usize, in_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            out_dim,
            in_dim,
            weights,
            bias,
            activation,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `W·x + b`, without the activation.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Layer>,
    normalize: bool,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[i]` is the input to layer `i`; the last entry is the network
    /// output before optional normalization.
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Embedding,
}

impl ForwardTrace {
    pub fn output(&self) -> &Embedding {
        &self.output
    }

    pub fn into_output(self) -> Embedding {
        self.output
    }

    /// Input to layer `i` (index 0 is the feature vector).
    pub fn layer_input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: vec![0.0; model.input_dim()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        self.input.iter_mut().zip(&other.input).for_each(|(x, y)| *x += y);
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= c);
        }
        self.input.iter_mut().for_each(|x| *x *= c);
    }

    /// Parameter gradients in the same order as [`EmbeddingModel::params_mut`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

impl EmbeddingModel {
    pub fn new(layers: Vec<Layer>, normalize: bool) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::Param("model needs at least one layer".into()))?;
        if last.activation != Activation::None {
            return Err(Error::Param("final layer must have no activation".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dim(pair[0].out_dim, pair[1].in_dim));
            }
        }
        Ok(Self { layers, normalize })
    }

    /// Seeded MLP `input → hidden… (relu) → output`.
    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::Param("layer widths must be positive".into()));
        }
        let mut rng = rng_from(seed, &[0x696e_6974]);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &w in hidden {
            layers.push(Layer::random(w, prev, Activation::Relu, &mut rng));
            prev = w;
        }
        layers.push(Layer::random(output_dim, prev, Activation::None, &mut rng));
        Self::new(layers, false)
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Weight and bias buffers, layer by layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&inputs[i]);
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} output")));
            }
            let a = match layer.activation {
                Activation::None => z.clone(),
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
            };
            pre_activations.push(z);
            inputs.push(a);
        }
        let raw = inputs.last().unwrap();
        let out = if self.normalize {
            let n = norm(raw) + NORM_EPS;
            raw.iter().map(|v| v / n).collect()
        } else {
            raw.clone()
        };
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            output: Embedding::new(out)?,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.forward(x).map(ForwardTrace::into_output)
    }

    /// Reverse-mode gradients of a scalar whose gradient w.r.t. the output is
    /// `upstream`. The relu subgradient at zero is zero.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<Gradients> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dim(self.output_dim(), upstream.len()));
        }
        if trace.pre_activations.len() != self.layers.len() {
            return Err(Error::dim(self.layers.len(), trace.pre_activations.len()));
        }
        let mut grad = if self.normalize {
            let r = norm(trace.inputs.last().unwrap());
            let n = r + NORM_EPS;
            let y = &trace.output[..];
            let dot: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
            let radial = dot / r.max(f64::MIN_POSITIVE);
            upstream
                .iter()
                .zip(y)
                .map(|(g, yi)| g / n - yi * radial)
                .collect()
        } else {
            upstream.to_vec()
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (g, &z) in grad.iter_mut().zip(&trace.pre_activations[i]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &trace.inputs[i];
            let mut gw = vec![0.0; layer.weights.len()];
            let mut gin = vec![0.0; layer.in_dim];
            for (o, &g) in grad.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let grow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for k in 0..layer.in_dim {
                    grow[k] = g * input[k];
                    gin[k] += g * row[k];
                }
            }
            layers.push(LayerGrad {
                weights: gw,
                bias: grad,
            });
            grad = gin;
        }
        layers.reverse();
        Ok(Gradients {
            layers,
            input: grad,
        })
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let layer = Layer::new(3, 3, w, vec![0.0; 3], Activation::None).unwrap();
        let m = EmbeddingModel::new(vec![layer], false).unwrap();
        let x = [0.5, -2.0, 7.25];
        assert_eq!(&*m.embed(&x).unwrap(), &x);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let b = vec![1.5, -0.25];
        let layer = Layer::new(2, 4, vec![0.0; 8], b.clone(), Activation::None).unwrap();
        let m = EmbeddingModel::new(vec![layer], false).unwrap();
        assert_eq!(&*m.embed(&[1.0, 2.0, 3.0, 4.0]).unwrap(), b.as_slice());
    }

    #[test]
    fn forward_matches_naive_loops() {
        let m = EmbeddingModel::init(6, &[5], 3, 99).unwrap();
        let mut rng = rng_from(1, &[]);
        let x = random_vec(&mut rng, 6);
        // straight-line oracle
        let l0 = &m.layers()[0];
        let mut h = [0.0; 5];
        for o in 0..5 {
            let mut acc = l0.bias()[o];
            for i in 0..6 {
                acc += l0.weights()[o * 6 + i] * x[i];
            }
            h[o] = if acc > 0.0 { acc } else { 0.0 };
        }
        let l1 = &m.layers()[1];
        let mut y = [0.0; 3];
        for o in 0..3 {
            let mut acc = l1.bias()[o];
            for i in 0..5 {
                acc += l1.weights()[o * 5 + i] * h[i];
            }
            y[o] = acc;
        }
        let got = m.embed(&x).unwrap();
        for (g, e) in got.iter().zip(&y) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1e-300));
        }
    }

    #[test]
    fn forward_rejects_bad_dim() {
        let m = EmbeddingModel::init(4, &[3], 2, 0).unwrap();
        assert!(matches!(m.embed(&[1.0; 5]), Err(Error::Dim { expected: 4, got: 5 })));
        let t = m.forward(&[1.0; 4]).unwrap();
        assert!(matches!(m.backward(&t, &[1.0; 3]), Err(Error::Dim { .. })));
    }

    #[test]
    fn forward_reports_overflow() {
        let layer = Layer::new(1, 1, vec![1e300], vec![0.0], Activation::None).unwrap();
        let m = EmbeddingModel::new(vec![layer], false).unwrap();
        assert!(matches!(m.embed(&[1e300]), Err(Error::Numeric(_))));
    }

    #[test]
    fn model_validation() {
        let relu_last = Layer::new(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Relu).unwrap();
        assert!(EmbeddingModel::new(vec![relu_last], false).is_err());
        let a = Layer::new(3, 2, vec![0.0; 6], vec![0.0; 3], Activation::Relu).unwrap();
        let b = Layer::new(2, 4, vec![0.0; 8], vec![0.0; 2], Activation::None).unwrap();
        assert!(matches!(EmbeddingModel::new(vec![a, b], false), Err(Error::Dim { .. })));
        assert!(Layer::new(2, 2, vec![f64::NAN; 4], vec![0.0; 2], Activation::None).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let m = EmbeddingModel::init(5, &[4, 4], 3, 7).unwrap();
        let t = m.forward(&[0.3, -0.2, 0.9, 0.1, -0.7]).unwrap();
        let g = m.backward(&t, &[0.0; 3]).unwrap();
        assert_eq!(g, Gradients::zeros_like(&m));
    }

    #[test]
    fn linear_layer_weight_grad_is_outer_product() {
        let mut rng = rng_from(5, &[]);
        let layer = Layer::random(3, 4, Activation::None, &mut rng);
        let m = EmbeddingModel::new(vec![layer], false).unwrap();
        let x = random_vec(&mut rng, 4);
        let g = random_vec(&mut rng, 3);
        let grads = m.backward(&m.forward(&x).unwrap(), &g).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                assert_eq!(grads.layers[0].weights[o * 4 + i], g[o] * x[i]);
            }
        }
        assert_eq!(grads.layers[0].bias, g);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // pre-activation exactly zero at the hidden unit
        let l0 = Layer::new(1, 1, vec![1.0], vec![0.0], Activation::Relu).unwrap();
        let l1 = Layer::new(1, 1, vec![2.0], vec![0.0], Activation::None).unwrap();
        let m = EmbeddingModel::new(vec![l0, l1], false).unwrap();
        let g = m.backward(&m.forward(&[0.0]).unwrap(), &[1.0]).unwrap();
        assert_eq!(g.input, vec![0.0]);
        assert_eq!(g.layers[0].bias, vec![0.0]);
    }

    fn fd_check(m: &mut EmbeddingModel, seed: u64) {
        let mut rng = rng_from(seed, &[]);
        let x = random_vec(&mut rng, m.input_dim());
        let head = random_vec(&mut rng, m.output_dim());
        let loss = |m: &EmbeddingModel, x: &[f64]| -> f64 {
            let e = m.embed(x).unwrap();
            e.iter().zip(&head).map(|(a, b)| a * b).sum::<f64>() + 0.5 * e.iter().map(|a| a * a).sum::<f64>()
        };
        let e = m.embed(&x).unwrap();
        let up: Vec<f64> = e.iter().zip(&head).map(|(a, b)| a + b).collect();
        let grads = m.backward(&m.forward(&x).unwrap(), &up).unwrap();
        let analytic: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-5;
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            for j in 0..analytic[t].len() {
                let orig = m.params_mut()[t][j];
                m.params_mut()[t][j] = orig + h;
                let lp = loss(m, &x);
                m.params_mut()[t][j] = orig - h;
                let lm = loss(m, &x);
                m.params_mut()[t][j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[t][j];
                if a.abs() < 1e-8 && fd.abs() < 1e-8 {
                    assert!((a - fd).abs() <= 1e-7);
                } else {
                    assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()), "tensor {t} idx {j}: {a} vs {fd}");
                }
            }
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (loss(m, &xp) - loss(m, &xm)) / (2.0 * h);
            let a = grads.input[j];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut m = EmbeddingModel::init(7, &[6, 5], 4, seed).unwrap();
            fd_check(&mut m, seed + 100);
        }
    }

    #[test]
    fn backward_through_normalization() {
        for seed in 0..3 {
            let mut m = EmbeddingModel::init(5, &[6], 4, seed).unwrap().with_normalize(true);
            let e = m.embed(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
            assert!((norm(&e) - 1.0).abs() < 1e-9);
            fd_check(&mut m, seed + 7);
        }
    }
}
