//! Bottleneck adapter layers: `h + U·relu(D·norm(h) + b_D) + b_U`, inserted
//! after every encoder and decoder layer and trained with the base frozen.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub bottleneck_dim: usize,
    pub insertion_points: Vec<String>,
    pub init_seed: u64,
}

impl AdapterSpec {
    /// Adapters after every layer the model exposes.
    pub fn for_model(model: &dyn Backend, bottleneck_dim: usize, init_seed: u64) -> Self {
        AdapterSpec {
            bottleneck_dim,
            insertion_points: model.layer_ids(),
            init_seed,
        }
    }

    /// Default bottleneck width for a hidden size `d`.
    pub fn default_bottleneck(d: usize) -> usize {
        (d / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dim < 1 {
            return Err(Error::InvalidArgument("bottleneck_dim must be >= 1".into()));
        }
        if self.insertion_points.is_empty() {
            return Err(Error::InvalidArgument(
                "adapter spec has no insertion points".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters per adapter at hidden size `d` and bottleneck `b`: both
/// projections with biases plus the input layer-norm scale and shift.
pub fn parameters_per_adapter(d: usize, b: usize) -> usize {
    d * b + b + b * d + d + 2 * d
}

/// Total parameters added by `spec` on a model with hidden size `d`.
pub fn adapter_parameter_budget(spec: &AdapterSpec, d: usize) -> Result<usize> {
    spec.validate()?;
    Ok(spec.insertion_points.len() * parameters_per_adapter(d, spec.bottleneck_dim))
}

/// Registers one adapter per insertion point as `adapter/<point>` groups.
pub fn insert_adapters(
    mut model: Box<dyn Backend>,
    spec: &AdapterSpec,
) -> Result<Box<dyn Backend>> {
    spec.validate()?;
    model.insert_adapters(spec)?;
    Ok(model)
}

/// Input normalization of an adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum InputNorm {
    Identity,
    LayerNorm {
        scale: Vec<f64>,
        shift: Vec<f64>,
        eps: f64,
    },
}

impl InputNorm {
    fn apply(&self, h: &[f64]) -> Vec<f64> {
        match self {
            InputNorm::Identity => h.to_vec(),
            InputNorm::LayerNorm { scale, shift, eps } => {
                let n = h.len() as f64;
                let mean = h.iter().sum::<f64>() / n;
                let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                h.iter()
                    .zip(scale.iter().zip(shift))
                    .map(|(x, (g, b))| (x - mean) * inv * g + b)
                    .collect()
            }
        }
    }
}

/// A single adapter in plain f64 arithmetic; the neural backend uses the
/// same map on tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// `b × d`
    pub down: Vec<Vec<f64>>,
    pub down_bias: Vec<f64>,
    /// `d × b`
    pub up: Vec<Vec<f64>>,
    pub up_bias: Vec<f64>,
    pub norm: InputNorm,
}

impl AdapterLayer {
    /// Zero up-projection; the layer starts as the identity map.
    pub fn zero_init(d: usize, b: usize, down: Vec<Vec<f64>>) -> Self {
        AdapterLayer {
            down,
            down_bias: vec![0.0; b],
            up: vec![vec![0.0; b]; d],
            up_bias: vec![0.0; d],
            norm: InputNorm::LayerNorm {
                scale: vec![1.0; d],
                shift: vec![0.0; d],
                eps: 1e-5,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.up.len()
    }
}

pub fn apply_adapter(layer: &AdapterLayer, h: &[f64]) -> Result<Vec<f64>> {
    let d = layer.dim();
    if h.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: h.len(),
        });
    }
    let x = layer.norm.apply(h);
    let hidden: Vec<f64> = layer
        .down
        .iter()
        .zip(&layer.down_bias)
        .map(|(row, bias)| (row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + bias).max(0.0))
        .collect();
    Ok(h.iter()
        .zip(layer.up.iter().zip(&layer.up_bias))
        .map(|(hv, (row, bias))| {
            hv + row.iter().zip(&hidden).map(|(w, z)| w * z).sum::<f64>() + bias
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_layer() -> AdapterLayer {
        AdapterLayer {
            down: vec![vec![1.0, 1.0]],
            down_bias: vec![0.0],
            up: vec![vec![1.0], vec![1.0]],
            up_bias: vec![0.0, 0.0],
            norm: InputNorm::Identity,
        }
    }

    #[test]
    fn negative_pre_activation_is_cut() {
        let out = apply_adapter(&hand_layer(), &[1.0, -3.0]).unwrap();
        assert_eq!(out, vec![1.0, -3.0]);
    }

    #[test]
    fn positive_pre_activation_passes() {
        let out = apply_adapter(&hand_layer(), &[2.0, 1.0]).unwrap();
        assert_eq!(out, vec![5.0, 4.0]);
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let layer = AdapterLayer::zero_init(3, 2, vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]]);
        let h = [0.25, -4.0, 9.5];
        assert_eq!(apply_adapter(&layer, &h).unwrap(), h.to_vec());
    }

    #[test]
    fn dimension_mismatch_errors() {
        assert!(matches!(
            apply_adapter(&hand_layer(), &[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn budget_is_linear_in_points() {
        let mut spec = AdapterSpec {
            bottleneck_dim: 2,
            insertion_points: vec!["a".into()],
            init_seed: 0,
        };
        let one = adapter_parameter_budget(&spec, 8).unwrap();
        assert_eq!(one, 58);
        spec.insertion_points = (0..4).map(|i| i.to_string()).collect();
        assert_eq!(adapter_parameter_budget(&spec, 8).unwrap(), 4 * one);
    }

    #[test]
    fn zero_bottleneck_rejected() {
        let spec = AdapterSpec {
            bottleneck_dim: 0,
            insertion_points: vec!["a".into()],
            init_seed: 0,
        };
        assert!(adapter_parameter_budget(&spec, 8).is_err());
    }
}
