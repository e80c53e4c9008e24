//! Minimal dense feed-forward networks with hand-derived reverse-mode
//! gradients. These are the augmentation networks NN(P, C, E_drug) inside
//! the hybrid models; hidden layers use one of four activations, the
//! output layer is linear with a single unit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// Gaussian exp(-x^2).
    Rbf,
    Linear,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Rbf => (-x * x).exp(),
            Activation::Linear => x,
        }
    }

    /// Derivative at pre-activation `x` with post-activation value `y`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Rbf => -2.0 * x * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input through output, e.g. [3, 5, 1].
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// L2 penalty strength on weights (biases excluded).
    pub l2: f64,
}

impl MlpSpec {
    pub fn new(hidden: &[usize], activation: Activation, l2: f64) -> Self {
        let mut layer_sizes = vec![3];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);
        Self { layer_sizes, activation, l2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 || self.layer_sizes.len() > 5 {
            return Err(Error::Invalid("hidden layer count must be in [1, 3]".into()));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::Invalid("output size must be 1".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Invalid("l2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Weights of one dense layer, row-major (n_out x n_in) plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    weights: Vec<f64>,
    biases: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub spec: MlpSpec,
    layers: Vec<Layer>,
}

impl MlpNet {
    /// Zero-initialized network (forward pass is identically 0 for a
    /// linear final layer).
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
                n_in: w[0],
                n_out: w[1],
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Glorot-uniform weights, zero biases, reproducible per seed.
    pub fn glorot(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Flat view in layer order: weights row-major, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn from_flat(spec: MlpSpec, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        net.set_flat(flat)?;
        Ok(net)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Invalid(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// L2 penalty `l2 * sum w^2`, biases excluded.
    pub fn l2_penalty(&self) -> f64 {
        self.spec.l2 * self.weight_sq_sum()
    }

    pub fn weight_sq_sum(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| w * w)
            .sum()
    }

    /// Gradient of the L2 penalty in flat layout (2 * l2 * w on weights,
    /// 0 on biases), added into `grad`.
    pub fn add_l2_gradient(&self, grad: &mut [f64]) {
        let mut offset = 0;
        for layer in &self.layers {
            for (g, w) in grad[offset..].iter_mut().zip(&layer.weights) {
                *g += 2.0 * self.spec.l2 * w;
            }
            offset += layer.weights.len() + layer.biases.len();
        }
    }

    pub fn forward(&self, input: &[f64; 3]) -> f64 {
        self.forward_cached(input).0
    }

    /// Forward pass keeping pre- and post-activations for the backward
    /// pass. cache[l] = (pre-activations, activations) of layer l's output.
    pub fn forward_cached(&self, input: &[f64; 3]) -> (f64, MlpCache) {
        let mut act: Vec<f64> = input.to_vec();
        let mut cache = MlpCache { layers: Vec::with_capacity(self.layers.len()) };
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li == n_layers - 1;
            let mut pre = layer.biases.clone();
            for o in 0..layer.n_out {
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                pre[o] += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
            }
            let post: Vec<f64> = if last {
                pre.clone()
            } else {
                pre.iter().map(|&x| self.spec.activation.apply(x)).collect()
            };
            cache.layers.push((act.clone(), pre));
            act = post;
        }
        (act[0], cache)
    }

    /// Reverse-mode gradient of `output * upstream`: returns the parameter
    /// gradient in flat layout and the gradient w.r.t. the 3 inputs.
    pub fn gradient(&self, input: &[f64; 3], upstream: f64) -> (Vec<f64>, [f64; 3]) {
        let (_, cache) = self.forward_cached(input);
        self.gradient_from_cache(&cache, upstream)
    }

    pub fn gradient_from_cache(&self, cache: &MlpCache, upstream: f64) -> (Vec<f64>, [f64; 3]) {
        let n_layers = self.layers.len();
        let mut param_grad = vec![0.0; self.param_count()];
        // delta = dL/d(pre-activation) of current layer
        let mut delta = vec![upstream]; // output layer is linear, width 1

        // flat offsets per layer
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.weights.len() + layer.biases.len();
        }

        let mut input_grad = [0.0; 3];
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let (ref layer_in, _) = cache.layers[li];
            let base = offsets[li];
            for o in 0..layer.n_out {
                let d = delta[o];
                for i in 0..layer.n_in {
                    param_grad[base + o * layer.n_in + i] = d * layer_in[i];
                }
                param_grad[base + layer.weights.len() + o] = d;
            }
            // propagate to layer input
            let mut prev = vec![0.0; layer.n_in];
            for o in 0..layer.n_out {
                let d = delta[o];
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if li == 0 {
                input_grad.copy_from_slice(&prev);
            } else {
                // chain through the previous layer's activation
                let prev_layer_pre = &cache.layers[li].0; // activations feeding this layer
                let raw_pre = &cache.layers[li - 1].1;
                delta = prev
                    .iter()
                    .zip(raw_pre.iter().zip(prev_layer_pre))
                    .map(|(g, (&x, &y))| g * self.spec.activation.derivative(x, y))
                    .collect();
            }
        }
        (param_grad, input_grad)
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Per layer: (input activations, pre-activations).
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const ACTIVATIONS: [Activation; 4] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Rbf,
        Activation::Linear,
    ];

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpNet::zeros(MlpSpec::new(&[5], Activation::Linear, 0.0)).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 7.0]), 0.0);
    }

    #[test]
    fn hand_evaluated_single_hidden_node() {
        // 1 hidden node, linear activation, all weights 1, biases 0
        let spec = MlpSpec::new(&[1], Activation::Linear, 0.0);
        let mut net = MlpNet::zeros(spec).unwrap();
        let flat = vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0]; // w1(3), b1(1), w2(1), b2(1)
        net.set_flat(&flat).unwrap();
        assert_eq!(net.forward(&[1.0, 1.0, 1.0]), 3.0);
    }

    #[test]
    fn tanh_saturation_bounds_output() {
        let net = MlpNet::glorot(MlpSpec::new(&[10], Activation::Tanh, 0.0), 7).unwrap();
        let out = net.forward(&[1e6, -1e6, 1e6]);
        // bounded by |w_out|_1 + |b_out|
        let flat = net.to_flat();
        let w_out_l1: f64 = flat[40..50].iter().map(|w| w.abs()).sum();
        assert!(out.abs() <= w_out_l1 + 1e-12);
    }

    #[test]
    fn flat_roundtrip_and_param_count() {
        for hidden in [&[5][..], &[10, 10][..], &[3, 5, 3][..]] {
            let spec = MlpSpec::new(hidden, Activation::Tanh, 0.1);
            let net = MlpNet::glorot(spec.clone(), 3).unwrap();
            let flat = net.to_flat();
            assert_eq!(flat.len(), spec.param_count());
            let back = MlpNet::from_flat(spec, &flat).unwrap();
            assert_eq!(net, back);
        }
    }

    #[test]
    fn glorot_seeded_and_bounded() {
        let spec = MlpSpec::new(&[20], Activation::Sigmoid, 0.0);
        let a = MlpNet::glorot(spec.clone(), 11).unwrap();
        let b = MlpNet::glorot(spec.clone(), 11).unwrap();
        let c = MlpNet::glorot(spec.clone(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound1 = (6.0 / 23.0f64).sqrt();
        let bound2 = (6.0 / 21.0f64).sqrt();
        let flat = a.to_flat();
        for &w in &flat[..60] {
            assert!(w.abs() <= bound1);
        }
        for &w in &flat[80..100] {
            assert!(w.abs() <= bound2);
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = MlpNet::glorot(MlpSpec::new(&[5], Activation::Tanh, 0.0), 1).unwrap();
        let (pg, ig) = net.gradient(&[0.3, -0.2, 1.0], 0.0);
        assert!(pg.iter().all(|&g| g == 0.0));
        assert!(ig.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_net_gradient_matches_closed_form() {
        // single linear layer pair acts like linear regression on the input
        let spec = MlpSpec::new(&[1], Activation::Linear, 0.0);
        let mut net = MlpNet::zeros(spec).unwrap();
        net.set_flat(&[0.5, -1.0, 2.0, 0.1, 3.0, 0.2]).unwrap();
        let x = [1.5, 0.5, -2.0];
        let (pg, ig) = net.gradient(&x, 1.0);
        // output = 3*(0.5 x0 - x1 + 2 x2 + 0.1) + 0.2
        // d/dw1_i = 3 * x_i; d/db1 = 3; d/dw2 = hidden; d/db2 = 1
        let hidden = 0.5 * x[0] - x[1] + 2.0 * x[2] + 0.1;
        let expect = vec![3.0 * x[0], 3.0 * x[1], 3.0 * x[2], 3.0, hidden, 1.0];
        for (a, b) in pg.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (g, w) in ig.iter().zip([0.5, -1.0, 2.0]) {
            assert!((g - 3.0 * w).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_all_activations() {
        let mut failures = 0;
        for act in ACTIVATIONS {
            for seed in 0..50u64 {
                let hidden: &[usize] = match seed % 3 {
                    0 => &[5],
                    1 => &[3, 3],
                    _ => &[10],
                };
                let spec = MlpSpec::new(hidden, act, 0.0);
                let net = MlpNet::glorot(spec.clone(), seed).unwrap();
                let input = [
                    0.9 + 0.01 * seed as f64,
                    1.0 - 0.005 * seed as f64,
                    if seed % 2 == 0 { 1.0 } else { 0.0 },
                ];
                let (pg, ig) = net.gradient(&input, 1.0);
                let flat = net.to_flat();
                let eps = 1e-6;
                for i in (0..flat.len()).step_by(3) {
                    let mut hi = flat.clone();
                    hi[i] += eps;
                    let mut lo = flat.clone();
                    lo[i] -= eps;
                    let fhi = MlpNet::from_flat(spec.clone(), &hi).unwrap().forward(&input);
                    let flo = MlpNet::from_flat(spec.clone(), &lo).unwrap().forward(&input);
                    let fd = (fhi - flo) / (2.0 * eps);
                    let denom = fd.abs().max(1e-3);
                    if (pg[i] - fd).abs() / denom > 1e-5 {
                        failures += 1;
                    }
                }
                for k in 0..3 {
                    let mut hi = input;
                    hi[k] += eps;
                    let mut lo = input;
                    lo[k] -= eps;
                    let fd = (net.forward(&hi) - net.forward(&lo)) / (2.0 * eps);
                    let denom = fd.abs().max(1e-3);
                    assert!(
                        (ig[k] - fd).abs() / denom < 1e-5,
                        "{act:?} seed {seed} input grad {k}"
                    );
                }
            }
        }
        assert_eq!(failures, 0);
    }

    #[test]
    fn l2_penalty_and_gradient() {
        let spec = MlpSpec::new(&[5], Activation::Tanh, 2.5);
        let net = MlpNet::glorot(spec, 3).unwrap();
        assert!((net.l2_penalty() - 2.5 * net.weight_sq_sum()).abs() < 1e-12);
        let mut grad = vec![0.0; net.param_count()];
        net.add_l2_gradient(&mut grad);
        let flat = net.to_flat();
        // weights: 2*l2*w; biases untouched
        for i in 0..15 {
            assert!((grad[i] - 5.0 * flat[i]).abs() < 1e-12);
        }
        for i in 15..20 {
            assert_eq!(grad[i], 0.0);
        }
    }
}
