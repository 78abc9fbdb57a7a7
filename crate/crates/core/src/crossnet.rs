//! Material → cross-section network: a small rectifier MLP with a logistic
//! output, evaluated and differentiated by hand in double precision.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Material;

pub const HIDDEN_DIM: usize = 128;

/// Upper end of the logistic output. `1 − 2⁻⁵³` is the largest double below one.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Logistic function, stable for large `|x|` and kept strictly inside `(0, 1)`.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v)),
        );
    }
}

#[derive(Clone, Debug)]
pub struct CrossSectionNetwork {
    layers: Vec<DenseLayer>,
    stamp: u64,
}

impl PartialEq for CrossSectionNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.inputs == b.inputs
                    && a.outputs == b.outputs
                    && a.weights == b.weights
                    && a.biases == b.biases
            })
    }
}

/// Activations recorded by [`CrossSectionNetwork::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    input: Vec<f64>,
    /// Pre-activation of every layer, the last one being the logit.
    pre: Vec<Vec<f64>>,
    /// Rectified output of every hidden layer.
    hidden: Vec<Vec<f64>>,
    sigma: f64,
}

impl ForwardCache {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

/// Gradients shaped like the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrad {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkGrad {
    pub fn zeros_like(net: &CrossSectionNetwork) -> Self {
        NetworkGrad {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetworkGrad) {
        let pairs = self
            .weights
            .iter_mut()
            .zip(&other.weights)
            .chain(self.biases.iter_mut().zip(&other.biases));
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Flattened in the same order as [`CrossSectionNetwork::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

impl CrossSectionNetwork {
    /// Default architecture `[input_dim, 128, 128, 1]`.
    pub fn init(seed: u64, input_dim: usize) -> Result<Self> {
        Self::with_layer_sizes(seed, &[input_dim, HIDDEN_DIM, HIDDEN_DIM, 1])
    }

    /// Weights uniform in `±√(1/fan_in)`, biases zero.
    pub fn with_layer_sizes(seed: u64, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(Error::invalid(format!(
                "layer sizes {sizes:?} must be positive and end in a single output"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let mut layer = DenseLayer::zeros(w[0], w[1]);
                let bound = (1.0 / w[0] as f64).sqrt();
                layer
                    .weights
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Ok(CrossSectionNetwork {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Rebuilds a network from explicit parameters, checking that shapes chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0
                || l.weights.len() != l.inputs * l.outputs
                || l.biases.len() != l.outputs
            {
                return Err(Error::invalid(format!(
                    "layer {i} has inconsistent parameter shapes"
                )));
            }
        }
        if layers.windows(2).any(|w| w[0].outputs != w[1].inputs) {
            return Err(Error::invalid("layer dimensions do not chain"));
        }
        if layers.last().unwrap().outputs != 1 {
            return Err(Error::invalid("network must produce a single output"));
        }
        Ok(CrossSectionNetwork {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Per layer: weights then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} network parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = tail;
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn forward(&self, input: &[f64]) -> Result<(f64, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &hidden[i - 1] };
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(x, &mut z);
            if i < last {
                hidden.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let sigma = sigmoid(pre[last][0]);
        Ok((
            sigma,
            ForwardCache {
                stamp: self.stamp,
                input: input.to_vec(),
                pre,
                hidden,
                sigma,
            },
        ))
    }

    pub fn evaluate(&self, input: &[f64]) -> Result<f64> {
        self.forward(input).map(|(s, _)| s)
    }

    pub fn cross_section(&self, material: &Material) -> Result<f64> {
        self.evaluate(&material.features())
    }

    /// Reverse pass: accumulates `dsigma · ∂σ/∂θ` into `grad` and returns `dsigma · ∂σ/∂m`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        dsigma: f64,
        grad: &mut NetworkGrad,
    ) -> Result<Vec<f64>> {
        if cache.stamp != self.stamp || cache.pre.len() != self.layers.len() {
            return Err(Error::InvalidState(
                "forward cache does not belong to this network state".into(),
            ));
        }
        if grad.weights.len() != self.layers.len() {
            return Err(Error::invalid(
                "gradient buffer does not match network shape",
            ));
        }
        let s = cache.sigma;
        let mut delta = vec![dsigma * s * (1.0 - s)];
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = if i == 0 {
                &cache.input
            } else {
                &cache.hidden[i - 1]
            };
            let gw = &mut grad.weights[i];
            let gb = &mut grad.biases[i];
            for (o, d) in delta.iter().enumerate() {
                gb[o] += d;
                if *d != 0.0 {
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
                }
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    back.iter_mut().zip(row).for_each(|(b, w)| *b += d * w);
                }
            }
            if i > 0 {
                // rectifier derivative, taken as zero at the kink
                for (b, z) in back.iter_mut().zip(&cache.pre[i - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
        Ok(delta)
    }

    pub fn backward(&self, cache: &ForwardCache, dsigma: f64) -> Result<(Vec<f64>, NetworkGrad)> {
        let mut grad = NetworkGrad::zeros_like(self);
        let dm = self.backward_into(cache, dsigma, &mut grad)?;
        Ok((dm, grad))
    }
}
