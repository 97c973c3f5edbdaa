//! Small dense networks with hand-written backward passes.
//!
//! Everything here is batch-size one: the agent trains online from the most
//! recent transition, so the forward pass caches per-layer activations for a
//! single input vector and the backward pass accumulates into a gradient
//! container with the same shape as the parameters.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

/// Backward pass of softmax: maps dL/dw to dL/dlogits.
pub fn softmax_backward(weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(grad_weights).map(|(w, g)| w * g).sum();
    weights
        .iter()
        .zip(grad_weights)
        .map(|(w, g)| w * (g - dot))
        .collect()
}

/// Affine layer `y = W x + b`, with `W` stored as (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut y = self.weight.dot(&x);
        y += &self.bias;
        y
    }
}

/// Multilayer perceptron with tanh hidden units and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations recorded by [`Mlp::forward_cached`].
///
/// `inputs[l]` is the input seen by layer `l`; for `l > 0` it is the tanh
/// output of the previous layer, which is all the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub inputs: Vec<Array1<f64>>,
    pub output: Array1<f64>,
}

impl Mlp {
    /// `sizes` lists every width from input to output, e.g. `[19, 64, 19]`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize]) -> Self {
        assert!(
            sizes.len() >= 2,
            "an MLP needs at least an input and output width"
        );
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut a = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            a.mapv_inplace(f64::tanh);
            a = layer.forward(a.view());
        }
        debug_assert_eq!(a.len(), self.layers[last].fan_out());
        a
    }

    pub fn forward_cached(&self, x: ArrayView1<f64>) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let mut a = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            a.mapv_inplace(f64::tanh);
            let next = layer.forward(a.view());
            inputs.push(a);
            a = next;
        }
        MlpCache { inputs, output: a }
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dinput.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: ArrayView1<f64>,
        grads: &mut Mlp,
    ) -> Array1<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let gl = &mut grads.layers[l];
            Zip::from(gl.weight.rows_mut())
                .and(&g)
                .for_each(|mut row, &gi| {
                    if gi != 0.0 {
                        row.scaled_add(gi, input);
                    }
                });
            gl.bias += &g;
            let mut g_in = self.layers[l].weight.t().dot(&g);
            if l > 0 {
                Zip::from(&mut g_in)
                    .and(input)
                    .for_each(|gi, &a| *gi *= 1.0 - a * a);
            }
            g = g_in;
        }
        g
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Adam over a flat list of parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, scale: f64) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.learning_rate / bc1;
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len());
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] / bc2).sqrt() + self.eps);
            }
            offset += p.len();
        }
        debug_assert_eq!(offset, self.m.len());
    }
}
