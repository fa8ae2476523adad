//! Attribute-specific parallel adapters.
//!
//! One adapter per (attribute, layer, site), where a site is the attention or
//! feed-forward sublayer of one block. Each adapter is a bottleneck:
//! `activation(x @ w_down) @ w_up`, with bottleneck width `dim / r`. The
//! attention sites use a reduction factor four times the feed-forward one.
//! Up-projections start at zero so an untrained bank is invisible: the fused
//! model reproduces the base model bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{self, ParamTensor, Tape, TensorId};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("reduction factor {r} does not divide model width {d}")]
    ReductionMismatch { r: usize, d: usize },
    #[error("adapter bank needs at least one attribute")]
    NoAttributes,
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

/// Insertion site within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    Mha,
    Ffn,
}

impl Site {
    pub const BOTH: [Site; 2] = [Site::Mha, Site::Ffn];

    pub fn index(self) -> usize {
        match self {
            Site::Mha => 0,
            Site::Ffn => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Site::Mha => "mha",
            Site::Ffn => "ffn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

/// One bottleneck adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<S> {
    pub w_down: ParamTensor<S>,
    pub w_up: ParamTensor<S>,
    pub activation: Activation,
}

/// Tape handles for one staged adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterHandles {
    pub w_down: TensorId,
    pub w_up: TensorId,
    pub activation: Activation,
}

/// `activation(x @ w_down) @ w_up`; additive at the call site, never a
/// replacement for the sublayer output.
pub fn adapter_forward<S: Scalar>(
    tape: &mut Tape<S>,
    handles: AdapterHandles,
    x: TensorId,
) -> tensor::Result<TensorId> {
    let down = tape.matmul(x, handles.w_down)?;
    let hidden = match handles.activation {
        Activation::Relu => tape.relu(down)?,
        Activation::Tanh => tape.tanh(down)?,
    };
    tape.matmul(hidden, handles.w_up)
}

/// All adapters for an attribute set: exactly `|A| * L * 2` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank<S> {
    pub attributes: Vec<String>,
    pub n_layers: usize,
    pub dim: usize,
    pub r_ffn: usize,
    pub r_mha: usize,
    adapters: Vec<AdapterParams<S>>,
}

impl<S: Scalar> AdapterBank<S> {
    /// Build a zero-up-projection bank. `r_mha` is fixed at `4 * r_ffn`; both
    /// factors must divide the model width exactly (no silent rounding, which
    /// would break the 4x relation).
    pub fn new(
        attributes: Vec<String>,
        cfg: &ModelConfig,
        r_ffn: usize,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        if attributes.is_empty() {
            return Err(AdapterError::NoAttributes);
        }
        let d = cfg.dim;
        let r_mha = 4 * r_ffn;
        for r in [r_ffn, r_mha] {
            if r == 0 || d % r != 0 {
                return Err(AdapterError::ReductionMismatch { r, d });
            }
        }
        let mut rng = Rng::derive(seed, &[0xADA9]);
        let mut adapters = Vec::with_capacity(attributes.len() * cfg.n_layers * 2);
        for _attr in 0..attributes.len() {
            for _layer in 0..cfg.n_layers {
                for site in Site::BOTH {
                    let r = match site {
                        Site::Mha => r_mha,
                        Site::Ffn => r_ffn,
                    };
                    let d_b = d / r;
                    adapters.push(AdapterParams {
                        w_down: ParamTensor::randn(&mut rng, vec![d, d_b], 0.02),
                        w_up: ParamTensor::zeros(vec![d_b, d]),
                        activation: Activation::Relu,
                    });
                }
            }
        }
        Ok(AdapterBank {
            attributes,
            n_layers: cfg.n_layers,
            dim: d,
            r_ffn,
            r_mha,
            adapters,
        })
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    fn slot(&self, attr: usize, layer: usize, site: Site) -> usize {
        (attr * self.n_layers + layer) * 2 + site.index()
    }

    pub fn get(&self, attr: usize, layer: usize, site: Site) -> &AdapterParams<S> {
        &self.adapters[self.slot(attr, layer, site)]
    }

    pub fn get_mut(&mut self, attr: usize, layer: usize, site: Site) -> &mut AdapterParams<S> {
        let i = self.slot(attr, layer, site);
        &mut self.adapters[i]
    }

    /// Checkpoint keys: `adapter/{attribute}/{layer}/{site}/{w_down|w_up}`.
    pub fn named_params(&self) -> Vec<(String, &ParamTensor<S>)> {
        let mut out = Vec::with_capacity(self.adapters.len() * 2);
        for (k, name) in self.attributes.iter().enumerate() {
            for l in 0..self.n_layers {
                for site in Site::BOTH {
                    let a = self.get(k, l, site);
                    let prefix = format!("adapter/{name}/{l}/{}", site.tag());
                    out.push((format!("{prefix}/w_down"), &a.w_down));
                    out.push((format!("{prefix}/w_up"), &a.w_up));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.w_down, &mut a.w_up])
            .collect()
    }

    pub fn allocated_param_count(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.w_down.numel() + a.w_up.numel())
            .sum()
    }

    pub fn checksum(&self) -> u64 {
        tensor::params_checksum(self.named_params().into_iter().map(|(_, p)| p))
    }

    /// Stage every adapter. `handles[attr][layer][site]`, plus the flat id
    /// list aligned with [`Self::named_params`].
    #[allow(clippy::type_complexity)]
    pub fn stage(
        &self,
        tape: &mut Tape<S>,
        trainable: bool,
    ) -> tensor::Result<(Vec<Vec<[AdapterHandles; 2]>>, Vec<TensorId>)> {
        let mut flat = Vec::with_capacity(self.adapters.len() * 2);
        let mut handles = Vec::with_capacity(self.n_attrs());
        for k in 0..self.n_attrs() {
            let mut layers = Vec::with_capacity(self.n_layers);
            for l in 0..self.n_layers {
                let mut site_pair = [AdapterHandles {
                    w_down: TensorId(0),
                    w_up: TensorId(0),
                    activation: Activation::Relu,
                }; 2];
                for site in Site::BOTH {
                    let a = self.get(k, l, site);
                    let h = AdapterHandles {
                        w_down: a.w_down.stage(tape, trainable)?,
                        w_up: a.w_up.stage(tape, trainable)?,
                        activation: a.activation,
                    };
                    flat.extend([h.w_down, h.w_up]);
                    site_pair[site.index()] = h;
                }
                layers.push(site_pair);
            }
            handles.push(layers);
        }
        Ok((handles, flat))
    }
}

/// Closed-form extra-parameter count for a bank plus its fusion gates:
/// `|A| * L * (2*d*(d/r_mha) + 2*d*(d/r_ffn)) + 2L` gate temperatures.
/// An empty attribute set allocates nothing at all.
pub fn count_extra_params<S: Scalar>(bank: &AdapterBank<S>, cfg: &ModelConfig) -> usize {
    if bank.attributes.is_empty() {
        return 0;
    }
    let d = cfg.dim;
    let per_pair = 2 * d * (d / bank.r_mha) + 2 * d * (d / bank.r_ffn);
    bank.n_attrs() * cfg.n_layers * per_pair + 2 * cfg.n_layers
}
