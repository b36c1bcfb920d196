use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NetworkSpec, NnError};
use crate::rng::RngState;

/// Weights and biases of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Trainable parameters of a network, one entry per parameterized layer.
///
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .param_layers()
            .map(|(_, l)| {
                let shape = l.weight_shape().unwrap();
                let n = shape.iter().product();
                LayerParams { shape, weights: vec![0.0; n], biases: vec![0.0; l.bias_len().unwrap()] }
            })
            .collect();
        Self { layers }
    }

    pub fn total_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Equality on the raw bit patterns (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.shape == b.shape && bits(&a.weights) == bits(&b.weights) && bits(&a.biases) == bits(&b.biases)
            })
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<(), NnError> {
        let expected: Vec<_> = spec.param_layers().map(|(_, l)| (l.weight_shape().unwrap(), l.bias_len().unwrap())).collect();
        if expected.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "spec has {} parameterized layers, parameters have {}",
                expected.len(),
                self.layers.len()
            )));
        }
        for (i, ((shape, nb), l)) in expected.iter().zip(&self.layers).enumerate() {
            let n: usize = shape.iter().product();
            if &l.shape != shape || l.weights.len() != n || l.biases.len() != *nb {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter layer {i}: expected weights {shape:?} + {nb} biases, got {:?} ({} values) + {} biases",
                    l.shape,
                    l.weights.len(),
                    l.biases.len()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform bound `sqrt(6 / ((1 + a^2) * fan_in))` with `a = sqrt(5)`, i.e. `1/sqrt(fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    let a2 = 5.0;
    (6.0 / ((1.0 + a2) * fan_in as f64)).sqrt()
}

/// Kaiming-uniform initialization with negative slope `sqrt(5)` for weights and
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for biases. Draws weights then biases,
/// layer by layer, in flat order.
pub fn init_kaiming_uniform(spec: &NetworkSpec, rng: &mut RngState) -> Result<Parameters, NnError> {
    let mut params = Parameters::zeros(spec);
    for ((i, layer), p) in spec.param_layers().zip(params.layers.iter_mut()) {
        let fan_in = layer.fan_in().unwrap();
        if fan_in == 0 {
            return Err(NnError::InvalidSpec(format!("layer {i} has zero fan_in")));
        }
        let wb = kaiming_bound(fan_in);
        for w in p.weights.iter_mut() {
            *w = rng.random_range(-wb..=wb);
        }
        let bb = 1.0 / (fan_in as f64).sqrt();
        for b in p.biases.iter_mut() {
            *b = rng.random_range(-bb..=bb);
        }
    }
    Ok(params)
}

/// Gaussian random network: weights `N(0, sigma_w^2 / fan_in)`, biases `N(0, sigma_b^2)`.
///
/// Used for expressivity probes of untrained networks, where the weight scale
/// controls whether trajectories grow or shrink with depth.
pub fn init_gaussian(spec: &NetworkSpec, sigma_w: f64, sigma_b: f64, rng: &mut RngState) -> Parameters {
    let mut params = Parameters::zeros(spec);
    for ((_, layer), p) in spec.param_layers().zip(params.layers.iter_mut()) {
        let std = sigma_w / (layer.fan_in().unwrap() as f64).sqrt();
        for w in p.weights.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = std * z;
        }
        for b in p.biases.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *b = sigma_b * z;
        }
    }
    params
}
