//! A small dense network with hand-written backpropagation.
//!
//! The network is a chain of affine layers, each followed by an elementwise
//! nonlinearity. Parameters live in one flat [`ParamVector`]; the
//! [`Architecture`] owns the mapping from layer index to the weight and bias
//! offsets inside it. Weights are stored row-major as `out x in`, followed by
//! the `out` biases of the same layer.
//!
//! All arithmetic is `f64`. Forward and backward passes are pure functions of
//! `(params, input)`, so identical inputs give bit-identical outputs.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointSidecar};
pub use gradcheck::{fd_check, fd_check_output, FD_EPSILON};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApproxError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("forward trace was produced by different or since-modified parameters")]
    StaleTrace,
    #[error("non-finite gradient entry at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation and the activation. The relu
    /// subgradient at exactly zero is taken to be 0.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh => 1.0 - post * post,
            Nonlinearity::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub nonlinearity: Nonlinearity,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, nonlinearity: Nonlinearity) -> Self {
        Self {
            input_width,
            output_width,
            nonlinearity,
        }
    }

    fn param_count(&self) -> usize {
        self.input_width * self.output_width + self.output_width
    }
}

/// Identity of a parameter buffer plus a mutation counter. A trace records
/// the stamp it was computed under so `backward` can reject stale traces.
#[derive(Debug)]
struct Stamp {
    id: u64,
    version: u64,
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

impl Stamp {
    fn fresh() -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl Default for Stamp {
    fn default() -> Self {
        Self::fresh()
    }
}

/// Flat parameter storage. Equality and serialization look only at values.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    #[serde(skip)]
    stamp: Stamp,
}

impl Clone for ParamVector {
    fn clone(&self) -> Self {
        Self::from_vec(self.values.clone())
    }
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            values,
            stamp: Stamp::fresh(),
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access. Any trace taken before this call becomes stale.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.stamp.version += 1;
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    fn key(&self) -> (u64, u64) {
        (self.stamp.id, self.stamp.version)
    }
}

/// Per-layer pre-activations and activations for one input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stamp: (u64, u64),
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn activation(&self, layer: usize) -> &[f64] {
        &self.post[layer]
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().expect("architecture has at least one layer")
    }

    /// Activation of the second-to-last layer, or the input for a single
    /// layer network.
    pub fn penultimate(&self) -> &[f64] {
        match self.post.len() {
            0 | 1 => &self.input,
            n => &self.post[n - 2],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.post.len()
    }
}

/// Gradient of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// A validated chain of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct Architecture {
    layers: Vec<LayerSpec>,
}

impl TryFrom<Vec<LayerSpec>> for Architecture {
    type Error = ApproxError;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self, Self::Error> {
        Self::new(layers)
    }
}

impl From<Architecture> for Vec<LayerSpec> {
    fn from(arch: Architecture) -> Self {
        arch.layers
    }
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, ApproxError> {
        if layers.is_empty() {
            return Err(ApproxError::Architecture("no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_width == 0 || layer.output_width == 0 {
                return Err(ApproxError::Architecture(format!(
                    "layer {i} has a zero width"
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width != pair[1].input_width {
                return Err(ApproxError::Architecture(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].output_width,
                    i + 1,
                    pair[1].input_width
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fully connected network: `input -> hidden... -> output`.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        hidden_nonlinearity: Nonlinearity,
        output: usize,
        output_nonlinearity: Nonlinearity,
    ) -> Result<Self, ApproxError> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec::new(width, h, hidden_nonlinearity));
            width = h;
        }
        layers.push(LayerSpec::new(width, output, output_nonlinearity));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// `(weights_offset, bias_offset)` of a layer inside the flat vector.
    pub fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let start: usize = self.layers[..layer].iter().map(LayerSpec::param_count).sum();
        let spec = &self.layers[layer];
        (start, start + spec.input_width * spec.output_width)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            let bound = 1.0 / (layer.input_width as f64).sqrt();
            for _ in 0..layer.param_count() {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector::from_vec(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<(), ApproxError> {
        if params.len() != self.param_count() {
            return Err(ApproxError::Dimension {
                context: "parameter vector",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        params: &ParamVector,
        input: &[f64],
    ) -> Result<(Vec<f64>, ForwardTrace), ApproxError> {
        self.check_params(params)?;
        if input.len() != self.input_width() {
            return Err(ApproxError::Dimension {
                context: "network input",
                expected: self.input_width(),
                actual: input.len(),
            });
        }
        let p = params.as_slice();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let x: &[f64] = post.last().map(Vec::as_slice).unwrap_or(input);
            let (n_in, n_out) = (layer.input_width, layer.output_width);
            let weights = &p[offset..offset + n_in * n_out];
            let biases = &p[offset + n_in * n_out..offset + layer.param_count()];
            let z: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
                .collect();
            let a: Vec<f64> = z.iter().map(|&v| layer.nonlinearity.apply(v)).collect();
            pre.push(z);
            post.push(a);
            offset += layer.param_count();
        }
        let output = post.last().cloned().unwrap_or_default();
        Ok((
            output,
            ForwardTrace {
                stamp: params.key(),
                input: input.to_vec(),
                pre,
                post,
            },
        ))
    }

    /// Gradient of a scalar loss given `d loss / d output`.
    pub fn backward(
        &self,
        params: &ParamVector,
        trace: &ForwardTrace,
        output_gradient: &[f64],
    ) -> Result<Gradient, ApproxError> {
        let mut grad = vec![0.0; self.param_count()];
        let input = self.backward_into(params, trace, output_gradient, &[], &mut grad)?;
        Ok(Gradient {
            params: grad,
            input,
        })
    }

    /// Accumulating backward pass.
    ///
    /// `activation_gradients` injects extra `d loss / d activation` terms at
    /// hidden layers (by layer index), which is how losses on an embedding
    /// layer reach the parameters. Parameter gradients are added into
    /// `accumulator`; the input gradient is returned.
    pub fn backward_into(
        &self,
        params: &ParamVector,
        trace: &ForwardTrace,
        output_gradient: &[f64],
        activation_gradients: &[(usize, &[f64])],
        accumulator: &mut [f64],
    ) -> Result<Vec<f64>, ApproxError> {
        self.check_params(params)?;
        if trace.stamp != params.key() || trace.post.len() != self.layers.len() {
            return Err(ApproxError::StaleTrace);
        }
        if output_gradient.len() != self.output_width() {
            return Err(ApproxError::Dimension {
                context: "output gradient",
                expected: self.output_width(),
                actual: output_gradient.len(),
            });
        }
        if accumulator.len() != self.param_count() {
            return Err(ApproxError::Dimension {
                context: "gradient accumulator",
                expected: self.param_count(),
                actual: accumulator.len(),
            });
        }
        for &(layer, g) in activation_gradients {
            let width = self
                .layers
                .get(layer)
                .ok_or_else(|| ApproxError::Architecture(format!("no layer {layer}")))?
                .output_width;
            if g.len() != width {
                return Err(ApproxError::Dimension {
                    context: "activation gradient",
                    expected: width,
                    actual: g.len(),
                });
            }
        }

        let p = params.as_slice();
        let mut upstream = output_gradient.to_vec();
        for l in (0..self.layers.len()).rev() {
            for &(layer, g) in activation_gradients {
                if layer == l {
                    upstream.iter_mut().zip(g).for_each(|(u, gi)| *u += gi);
                }
            }
            let layer = &self.layers[l];
            let n_in = layer.input_width;
            let (w_off, b_off) = self.layer_offsets(l);
            let x: &[f64] = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&trace.pre[l])
                .zip(&trace.post[l])
                .map(|((u, &z), &a)| u * layer.nonlinearity.derivative(z, a))
                .collect();
            let mut downstream = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = w_off + o * n_in;
                let acc_row = &mut accumulator[row..row + n_in];
                acc_row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                accumulator[b_off + o] += d;
                downstream
                    .iter_mut()
                    .zip(&p[row..row + n_in])
                    .for_each(|(g, w)| *g += w * d);
            }
            upstream = downstream;
        }
        Ok(upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent evaluation: explicit triple loop over the layer list.
    fn naive_forward(arch: &Architecture, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut offset = 0;
        for layer in arch.layers() {
            let mut y = vec![0.0; layer.output_width];
            for o in 0..layer.output_width {
                let mut s = 0.0;
                for i in 0..layer.input_width {
                    s += params[offset + o * layer.input_width + i] * x[i];
                }
                s += params[offset + layer.input_width * layer.output_width + o];
                y[o] = match layer.nonlinearity {
                    Nonlinearity::Identity => s,
                    Nonlinearity::Tanh => s.tanh(),
                    Nonlinearity::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                };
            }
            offset += layer.input_width * layer.output_width + layer.output_width;
            x = y;
        }
        x
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let arch = Architecture::new(vec![LayerSpec::new(2, 2, Nonlinearity::Identity)]).unwrap();
        let params = ParamVector::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (out, trace) = arch.forward(&params, &[0.3, -0.2]).unwrap();
        assert_eq!(out, vec![0.3, -0.2]);
        assert_eq!(trace.output(), &[0.3, -0.2]);
    }

    #[test]
    fn zero_params_tanh_output_is_zero() {
        let arch =
            Architecture::mlp(3, &[5], Nonlinearity::Tanh, 2, Nonlinearity::Tanh).unwrap();
        let params = ParamVector::zeros(arch.param_count());
        let (out, _) = arch.forward(&params, &[1.5, -7.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for nl in [Nonlinearity::Tanh, Nonlinearity::Relu, Nonlinearity::Identity] {
            let arch = Architecture::mlp(4, &[7], nl, 3, Nonlinearity::Identity).unwrap();
            let params = arch.init_params(&mut rng);
            let input: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (out, _) = arch.forward(&params, &input).unwrap();
            let expected = naive_forward(&arch, params.as_slice(), &input);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn width_mismatch_is_reported() {
        let arch = Architecture::mlp(3, &[4], Nonlinearity::Tanh, 1, Nonlinearity::Identity)
            .unwrap();
        let params = ParamVector::zeros(arch.param_count());
        let err = arch.forward(&params, &[1.0, 2.0]).unwrap_err();
        assert_eq!(
            err,
            ApproxError::Dimension {
                context: "network input",
                expected: 3,
                actual: 2
            }
        );
    }

    #[test]
    fn layers_must_chain() {
        let err = Architecture::new(vec![
            LayerSpec::new(2, 3, Nonlinearity::Tanh),
            LayerSpec::new(4, 1, Nonlinearity::Identity),
        ])
        .unwrap_err();
        assert!(matches!(err, ApproxError::Architecture(_)));
        assert!(Architecture::new(vec![LayerSpec::new(0, 1, Nonlinearity::Tanh)]).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Architecture::mlp(3, &[6, 6], Nonlinearity::Tanh, 2, Nonlinearity::Tanh)
            .unwrap();
        let params = arch.init_params(&mut rng);
        let (_, trace) = arch.forward(&params, &[0.1, 0.2, 0.3]).unwrap();
        let grad = arch.backward(&params, &trace, &[0.0, 0.0]).unwrap();
        assert!(grad.params.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_net_gradient_is_the_input() {
        let arch = Architecture::new(vec![LayerSpec::new(3, 1, Nonlinearity::Identity)]).unwrap();
        let params = ParamVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
        let input = [0.7, -0.3, 1.9];
        let (_, trace) = arch.forward(&params, &input).unwrap();
        let grad = arch.backward(&params, &trace, &[1.0]).unwrap();
        assert_eq!(&grad.params[..3], &input);
        assert_eq!(grad.params[3], 1.0);
        assert_eq!(grad.input, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = Architecture::mlp(2, &[3], Nonlinearity::Tanh, 1, Nonlinearity::Identity)
            .unwrap();
        let mut params = arch.init_params(&mut rng);
        let (_, trace) = arch.forward(&params, &[0.1, 0.2]).unwrap();
        params.as_mut_slice()[0] += 1.0;
        assert_eq!(
            arch.backward(&params, &trace, &[1.0]).unwrap_err(),
            ApproxError::StaleTrace
        );
        let other = arch.init_params(&mut rng);
        assert_eq!(
            arch.backward(&other, &trace, &[1.0]).unwrap_err(),
            ApproxError::StaleTrace
        );
    }

    #[test]
    fn penultimate_is_second_to_last_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = Architecture::mlp(2, &[4, 5], Nonlinearity::Tanh, 1, Nonlinearity::Tanh)
            .unwrap();
        let params = arch.init_params(&mut rng);
        let (_, trace) = arch.forward(&params, &[0.3, 0.9]).unwrap();
        assert_eq!(trace.penultimate().len(), 5);
        assert_eq!(trace.penultimate(), trace.activation(1));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let arch = Architecture::mlp(6, &[64, 64], Nonlinearity::Tanh, 1, Nonlinearity::Tanh)
            .unwrap();
        let params = arch.init_params(&mut rng);
        let input = [0.1, 0.5, 0.0, 1.0, 0.0, 0.0];
        let (a, ta) = arch.forward(&params, &input).unwrap();
        let (b, tb) = arch.forward(&params, &input).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        let ga = arch.backward(&params, &ta, &[0.7]).unwrap();
        let gb = arch.backward(&params, &tb, &[0.7]).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture::mlp(16, &[4], Nonlinearity::Tanh, 1, Nonlinearity::Tanh)
            .unwrap();
        let params = arch.init_params(&mut rng);
        let (_, b0) = arch.layer_offsets(0);
        assert!(params.as_slice()[..b0 + 4].iter().all(|v| v.abs() <= 0.25));
        assert!(params.as_slice()[b0 + 4..].iter().all(|v| v.abs() <= 0.5));
    }
}
