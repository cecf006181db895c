use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LqfError, Result};

/// Slope used when a configuration does not state one.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// One stage of a feedforward network.
///
/// Pooling layers read their input as a row-major `positions × channels`
/// feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
        bias: bool,
    },
    Activation {
        leaky_slope: f64,
    },
    /// Normalization with stored statistics. With `affine` set, a per-feature
    /// scale and shift are trainable parameters.
    FrozenNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        affine: bool,
    },
    /// Square root of the feature covariance, flattened row-major to `channels²`.
    BilinearPool {
        channels: usize,
    },
    MeanPool {
        channels: usize,
    },
}

impl Layer {
    pub fn dense(input: usize, output: usize) -> Self {
        Layer::Dense {
            input,
            output,
            bias: true,
        }
    }

    pub fn leaky(slope: f64) -> Self {
        Layer::Activation { leaky_slope: slope }
    }

    fn is_pool(&self) -> bool {
        matches!(self, Layer::BilinearPool { .. } | Layer::MeanPool { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, output_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim,
            output_dim,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense/Leaky-ReLU stack: `input → hidden[0] → … → output`.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, slope: f64) -> Result<Self> {
        let mut layers = Vec::new();
        let mut current = input_dim;
        for &width in hidden {
            layers.push(Layer::dense(current, width));
            layers.push(Layer::leaky(slope));
            current = width;
        }
        layers.push(Layer::dense(current, output_dim));
        Self::new(input_dim, output_dim, layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(LqfError::contract("input_dim and output_dim must be positive"));
        }
        let mut current = self.input_dim;
        let mut pool_at = None;
        for (id, layer) in self.layers.iter().enumerate() {
            current = match layer {
                Layer::Dense { input, output, .. } => {
                    if *input != current {
                        return Err(LqfError::contract(format!(
                            "layer {id}: dense input {input} does not match incoming dimension {current}"
                        )));
                    }
                    if *output == 0 {
                        return Err(LqfError::contract(format!("layer {id}: dense output must be positive")));
                    }
                    *output
                }
                Layer::Activation { leaky_slope } => {
                    if !(*leaky_slope > 0.0 && *leaky_slope < 1.0) {
                        return Err(LqfError::contract(format!(
                            "layer {id}: leaky slope {leaky_slope} outside (0, 1)"
                        )));
                    }
                    current
                }
                Layer::FrozenNorm { mean, var, .. } => {
                    if mean.len() != current || var.len() != current {
                        return Err(LqfError::contract(format!(
                            "layer {id}: norm statistics must have length {current}"
                        )));
                    }
                    if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
                        return Err(LqfError::contract(format!(
                            "layer {id}: norm variances must be positive and finite"
                        )));
                    }
                    current
                }
                Layer::BilinearPool { channels } | Layer::MeanPool { channels } => {
                    if pool_at.is_some() {
                        return Err(LqfError::contract("at most one pooling head is allowed"));
                    }
                    pool_at = Some(id);
                    if *channels == 0 || !current.is_multiple_of(*channels) {
                        return Err(LqfError::contract(format!(
                            "layer {id}: incoming dimension {current} is not a multiple of {channels} channels"
                        )));
                    }
                    let positions = current / channels;
                    match layer {
                        Layer::BilinearPool { .. } => {
                            if positions < 2 {
                                return Err(LqfError::contract(format!(
                                    "layer {id}: bilinear pooling needs at least 2 positions"
                                )));
                            }
                            channels * channels
                        }
                        _ => *channels,
                    }
                }
            };
        }
        if let Some(pool) = pool_at {
            let dense_after = self.layers[pool + 1..]
                .iter()
                .any(|l| matches!(l, Layer::Dense { .. }));
            if !dense_after || self.layers[pool + 1..].iter().any(Layer::is_pool) {
                return Err(LqfError::contract("pooling head must precede the final dense layer"));
            }
        }
        if current != self.output_dim {
            return Err(LqfError::contract(format!(
                "network produces {current} outputs, declared output_dim is {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Index of the last dense layer (the classifier head), if any.
    pub fn head_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
    }

    /// Same body with a different number of outputs on the head.
    pub fn with_output_dim(&self, output_dim: usize) -> Result<Self> {
        let head = self
            .head_layer()
            .ok_or_else(|| LqfError::contract("network has no dense head"))?;
        let mut layers = self.layers.clone();
        if let Layer::Dense { output, .. } = &mut layers[head] {
            *output = output_dim;
        }
        NetworkSpec::new(self.input_dim, output_dim, layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            serde_json::from_str(text).map_err(|e| LqfError::Format(format!("network spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
