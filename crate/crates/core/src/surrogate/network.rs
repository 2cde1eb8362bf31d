//! Fully connected feedforward networks: affine layers with a component-wise
//! activation on every hidden layer and a purely affine output layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    /// `[N_in, N_1, …, N_out]`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl NetworkArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self { layer_sizes, activation };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Parameter("a network needs at least one hidden layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Parameter("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    /// Number of affine layers `L`.
    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub architecture: NetworkArchitecture,
    pub layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn zeros(architecture: &NetworkArchitecture) -> Self {
        let layers = architecture
            .layer_sizes
            .windows(2)
            .map(|w| Layer { n_in: w[0], n_out: w[1], weights: vec![0.0; w[0] * w[1]], bias: vec![0.0; w[1]] })
            .collect();
        Self { architecture: architecture.clone(), layers }
    }

    /// Weights drawn from `N(0, 2 / fan_in)`, zero biases.
    pub fn kaiming<R: Rng>(architecture: &NetworkArchitecture, rng: &mut R) -> Self {
        let mut net = Self::zeros(architecture);
        for layer in &mut net.layers {
            let normal = Normal::new(0.0, (2.0 / layer.n_in as f64).sqrt()).expect("positive std");
            for w in &mut layer.weights {
                *w = normal.sample(rng);
            }
        }
        net
    }

    /// Checks that every layer matches the architecture.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.layers.len() != self.architecture.n_layers() {
            return Err(Error::Shape("layer count differs from architecture".into()));
        }
        for (i, (layer, w)) in self.layers.iter().zip(self.architecture.layer_sizes.windows(2)).enumerate() {
            if layer.n_in != w[0] || layer.n_out != w[1] || layer.weights.len() != w[0] * w[1] || layer.bias.len() != w[1] {
                return Err(Error::Shape(format!("layer {} does not match architecture {:?}", i + 1, w)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.architecture.n_inputs() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.architecture.n_inputs(),
                x.len()
            )));
        }
        let act = self.architecture.activation;
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &layer.weights[r * layer.n_in..(r + 1) * layer.n_in];
                *zr += row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Parameters flattened layer by layer: weights (row-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.architecture.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(architecture: &NetworkArchitecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != architecture.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters given, architecture has {}",
                flat.len(),
                architecture.n_params()
            )));
        }
        let mut net = Self::zeros(architecture);
        let mut pos = 0;
        for l in &mut net.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(net)
    }
}

/// One (input, target) pair, both in the scaled space the network sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Loss and gradient evaluator over a flat parameter vector, with reusable
/// work buffers. The loss is the sum over samples of squared ℓ₂ errors.
pub(crate) struct Backprop<'a> {
    arch: &'a NetworkArchitecture,
    /// Post-activation values per layer, `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    offsets: Vec<usize>,
}

impl<'a> Backprop<'a> {
    pub(crate) fn new(arch: &'a NetworkArchitecture) -> Self {
        let sizes = &arch.layer_sizes;
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut pos = 0;
        for w in sizes.windows(2) {
            offsets.push(pos);
            pos += w[0] * w[1] + w[1];
        }
        Self {
            arch,
            acts: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            pre: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            deltas: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            offsets,
        }
    }

    fn forward_into(&mut self, params: &[f64], x: &[f64]) {
        let sizes = &self.arch.layer_sizes;
        let act = self.arch.activation;
        let n_layers = sizes.len() - 1;
        self.acts[0].copy_from_slice(x);
        for i in 1..=n_layers {
            let (n_in, n_out) = (sizes[i - 1], sizes[i]);
            let off = self.offsets[i - 1];
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (prev, rest) = self.acts.split_at_mut(i);
            let input = &prev[i - 1];
            let out = &mut rest[0];
            let pre = &mut self.pre[i];
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                let mut z = b[r];
                for (wv, iv) in row.iter().zip(input.iter()) {
                    z += wv * iv;
                }
                pre[r] = z;
                out[r] = if i < n_layers { act.apply(z) } else { z };
            }
        }
    }

    /// Sum of squared errors; no gradient.
    pub(crate) fn loss(&mut self, params: &[f64], samples: &[Sample]) -> f64 {
        let last = self.arch.layer_sizes.len() - 1;
        let mut total = 0.0;
        for s in samples {
            self.forward_into(params, &s.input);
            total += self.acts[last].iter().zip(&s.target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        }
        total
    }

    /// Sum of squared errors; `grad` is overwritten with its gradient.
    pub(crate) fn loss_and_gradient(&mut self, params: &[f64], samples: &[Sample], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let sizes = self.arch.layer_sizes.clone();
        let act = self.arch.activation;
        let n_layers = sizes.len() - 1;
        let mut total = 0.0;
        for s in samples {
            self.forward_into(params, &s.input);
            {
                let out = &self.acts[n_layers];
                let delta = &mut self.deltas[n_layers];
                for ((d, p), t) in delta.iter_mut().zip(out).zip(&s.target) {
                    let e = p - t;
                    total += e * e;
                    *d = 2.0 * e;
                }
            }
            for i in (1..=n_layers).rev() {
                let (n_in, n_out) = (sizes[i - 1], sizes[i]);
                let off = self.offsets[i - 1];
                {
                    let delta = &self.deltas[i];
                    let input = &self.acts[i - 1];
                    let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                    for r in 0..n_out {
                        let d = delta[r];
                        if d == 0.0 {
                            continue;
                        }
                        gb[r] += d;
                        for (g, iv) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(input.iter()) {
                            *g += d * iv;
                        }
                    }
                }
                if i > 1 {
                    let w = &params[off..off + n_in * n_out];
                    let (lower, upper) = self.deltas.split_at_mut(i);
                    let delta = &upper[0];
                    let prev = &mut lower[i - 1];
                    prev.iter_mut().for_each(|v| *v = 0.0);
                    for r in 0..n_out {
                        let d = delta[r];
                        if d == 0.0 {
                            continue;
                        }
                        for (pv, wv) in prev.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                            *pv += wv * d;
                        }
                    }
                    let z = &self.pre[i - 1];
                    let a = &self.acts[i - 1];
                    for c in 0..n_in {
                        prev[c] *= act.derivative(z[c], a[c]);
                    }
                }
            }
        }
        total
    }
}

fn check_samples(weights: &NetworkWeights, samples: &[Sample]) -> Result<()> {
    weights.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("loss of an empty sample set is undefined".into()));
    }
    let (ni, no) = (weights.architecture.n_inputs(), weights.architecture.n_outputs());
    if samples.iter().any(|s| s.input.len() != ni || s.target.len() != no) {
        return Err(Error::Shape(format!("samples must have {ni} inputs and {no} targets")));
    }
    Ok(())
}

/// `Σ ‖Φ_W(x) − y‖²` over the samples.
pub fn mse_loss(weights: &NetworkWeights, samples: &[Sample]) -> Result<f64> {
    check_samples(weights, samples)?;
    let params = weights.to_flat();
    Ok(Backprop::new(&weights.architecture).loss(&params, samples))
}

/// Exact gradient of [`mse_loss`] with respect to every weight and bias,
/// structured like the network.
pub fn loss_gradient(weights: &NetworkWeights, samples: &[Sample]) -> Result<NetworkWeights> {
    check_samples(weights, samples)?;
    let params = weights.to_flat();
    let mut grad = vec![0.0; params.len()];
    Backprop::new(&weights.architecture).loss_and_gradient(&params, samples, &mut grad);
    NetworkWeights::from_flat(&weights.architecture, &grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn arch(sizes: &[usize], act: Activation) -> NetworkArchitecture {
        NetworkArchitecture::new(sizes.to_vec(), act).unwrap()
    }

    #[test]
    fn architecture_needs_hidden_layer() {
        assert!(NetworkArchitecture::new(vec![3, 1], Activation::Tanh).is_err());
        assert_eq!(arch(&[2, 3, 1], Activation::Tanh).n_params(), 2 * 3 + 3 + 3 + 1);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = NetworkWeights::zeros(&arch(&[3, 4, 2], Activation::Tanh));
        assert_eq!(net.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layers_with_tanh_at_origin() {
        let a = arch(&[2, 2, 2], Activation::Tanh);
        let mut net = NetworkWeights::zeros(&a);
        net.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        net.layers[1].weights = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn one_two_one_network_by_hand() {
        let a = arch(&[1, 2, 1], Activation::Tanh);
        let mut net = NetworkWeights::zeros(&a);
        net.layers[0].weights = vec![0.7, -1.3];
        net.layers[0].bias = vec![0.1, 0.4];
        net.layers[1].weights = vec![2.0, 0.5];
        net.layers[1].bias = vec![-0.3];
        for x in [-1.0, 0.25, 2.0] {
            let expected = 2.0 * (0.7 * x + 0.1_f64).tanh() + 0.5 * (-1.3 * x + 0.4_f64).tanh() - 0.3;
            let got = net.forward(&[x]).unwrap()[0];
            assert!((got - expected).abs() < 1e-14, "x = {x}");
        }
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn relu_last_layer_stays_affine() {
        let a = arch(&[1, 1, 1], Activation::Relu);
        let mut net = NetworkWeights::zeros(&a);
        net.layers[0].weights = vec![1.0];
        net.layers[1].bias = vec![-5.0];
        net.layers[1].weights = vec![1.0];
        assert_eq!(net.forward(&[2.0]).unwrap(), vec![-3.0]);
        assert_eq!(net.forward(&[-2.0]).unwrap(), vec![-5.0]);
    }

    #[test]
    fn loss_examples() {
        let a = arch(&[1, 1, 1], Activation::Tanh);
        let mut net = NetworkWeights::zeros(&a);
        net.layers[1].bias = vec![0.5];
        let one = [Sample { input: vec![0.3], target: vec![0.3] }];
        assert!((mse_loss(&net, &one).unwrap() - 0.04).abs() < 1e-15);
        assert!(mse_loss(&net, &[]).is_err());

        // Two pairs, forward value 0.5 + 2 tanh(x).
        net.layers[0].weights = vec![1.0];
        net.layers[1].weights = vec![2.0];
        let two = [Sample { input: vec![0.0], target: vec![1.0] }, Sample { input: vec![1.0], target: vec![2.0] }];
        let p1 = 0.5;
        let p2 = 0.5 + 2.0 * 1.0_f64.tanh();
        let expected = (p1 - 1.0_f64).powi(2) + (p2 - 2.0_f64).powi(2);
        assert!((mse_loss(&net, &two).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn interpolating_network_has_zero_loss_and_gradient() {
        let a = arch(&[2, 3, 1], Activation::Tanh);
        let mut rng = rng_from(3, &[]);
        let net = NetworkWeights::kaiming(&a, &mut rng);
        let samples: Vec<Sample> = (0..4)
            .map(|_| {
                let x = vec![rng.random::<f64>(), rng.random::<f64>()];
                let y = net.forward(&x).unwrap();
                Sample { input: x, target: y }
            })
            .collect();
        assert_eq!(mse_loss(&net, &samples).unwrap(), 0.0);
        assert!(loss_gradient(&net, &samples).unwrap().to_flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn output_bias_gradient_is_twice_residual_sum() {
        let a = arch(&[2, 4, 2], Activation::Tanh);
        let mut rng = rng_from(9, &[]);
        let net = NetworkWeights::kaiming(&a, &mut rng);
        let samples: Vec<Sample> = (0..5)
            .map(|_| Sample {
                input: vec![rng.random(), rng.random()],
                target: vec![rng.random(), rng.random()],
            })
            .collect();
        let g = loss_gradient(&net, &samples).unwrap();
        for o in 0..2 {
            let expected: f64 = samples.iter().map(|s| 2.0 * (net.forward(&s.input).unwrap()[o] - s.target[o])).sum();
            assert!((g.layers[1].bias[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let a = arch(&[3, 5, 4, 2], Activation::Relu);
        let net = NetworkWeights::kaiming(&a, &mut rng_from(1, &[]));
        let back = NetworkWeights::from_flat(&a, &net.to_flat()).unwrap();
        assert_eq!(back, net);
        assert!(NetworkWeights::from_flat(&a, &[0.0; 3]).is_err());
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        let a = arch(&[200, 300, 1], Activation::Tanh);
        let net = NetworkWeights::kaiming(&a, &mut rng_from(5, &[]));
        let w = &net.layers[0].weights;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 200.0).abs() < 0.05 * 2.0 / 200.0, "{var}");
        assert!(net.layers[0].bias.iter().all(|b| *b == 0.0));
    }
}
