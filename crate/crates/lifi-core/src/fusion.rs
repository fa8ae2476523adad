//! Adapter fusion: softmax-weighted combination of attribute adapters.
//!
//! At every insertion site the attribute adapters are mixed with weights
//! `w_k = exp(c_k / T) / sum_i exp(c_i / T)` where `c` is the control code
//! and `T` a learnable per-site temperature. T is parameterized as `exp(tau)`
//! so it stays positive without clamping; every `tau` starts at 0 (T = 1).

use thiserror::Error;

use crate::adapters::{adapter_forward, AdapterBank, AdapterHandles, Site};
use crate::scalar::Scalar;
use crate::tensor::{self, params_checksum, stable_softmax, ParamTensor, Tape, TensorId};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("control code has a non-finite entry")]
    NonFiniteCode,
    #[error("control code length {got} does not match attribute count {expected}")]
    CodeLength { got: usize, expected: usize },
    #[error("control strength must be positive, got {0}")]
    NonPositiveStrength(f64),
    #[error("target attribute {target} out of range for {n_attrs} attributes")]
    TargetOutOfRange { target: usize, n_attrs: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

/// A continuous control code: one strength logit per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCode(Vec<f64>);

impl ControlCode {
    pub fn new(values: Vec<f64>) -> Result<Self, FusionError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFiniteCode);
        }
        Ok(ControlCode(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Test-time code: strength `alpha` at the target attribute, zero elsewhere.
pub fn make_test_code(target: usize, alpha: f64, n_attrs: usize) -> Result<ControlCode, FusionError> {
    if target >= n_attrs {
        return Err(FusionError::TargetOutOfRange { target, n_attrs });
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(FusionError::NonPositiveStrength(alpha));
    }
    let mut values = vec![0.0; n_attrs];
    values[target] = alpha;
    Ok(ControlCode(values))
}

/// Pure fusion weights: `softmax(c / T)`. The reference route; training uses
/// the tape route in [`site_weights`].
pub fn fusion_weights(code: &[f64], temperature: f64) -> Result<Vec<f64>, FusionError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(FusionError::NonPositiveTemperature(temperature));
    }
    if code.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFiniteCode);
    }
    let scaled: Vec<f64> = code.iter().map(|c| c / temperature).collect();
    Ok(stable_softmax(&scaled))
}

/// Learnable per-site temperatures, stored as unconstrained `tau` with
/// `T = exp(tau)`. Exactly `2 * n_layers` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGate<S> {
    pub n_layers: usize,
    taus: Vec<ParamTensor<S>>,
}

impl<S: Scalar> FusionGate<S> {
    /// All temperatures start at 1 (tau = 0): a neutral softmax.
    pub fn new(n_layers: usize) -> Self {
        FusionGate {
            n_layers,
            taus: (0..2 * n_layers).map(|_| ParamTensor::zeros(vec![1])).collect(),
        }
    }

    fn slot(&self, layer: usize, site: Site) -> usize {
        layer * 2 + site.index()
    }

    pub fn tau(&self, layer: usize, site: Site) -> f64 {
        self.taus[self.slot(layer, site)].data[0].to_f64()
    }

    pub fn temperature(&self, layer: usize, site: Site) -> f64 {
        self.tau(layer, site).exp()
    }

    pub fn tau_param(&self, layer: usize, site: Site) -> &ParamTensor<S> {
        &self.taus[self.slot(layer, site)]
    }

    /// Checkpoint keys: `fusion/{layer}/{site}/tau`.
    pub fn named_params(&self) -> Vec<(String, &ParamTensor<S>)> {
        let mut out = Vec::with_capacity(self.taus.len());
        for l in 0..self.n_layers {
            for site in Site::BOTH {
                out.push((
                    format!("fusion/{l}/{}/tau", site.tag()),
                    &self.taus[self.slot(l, site)],
                ));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        self.taus.iter_mut().collect()
    }

    pub fn allocated_param_count(&self) -> usize {
        self.taus.iter().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.taus.iter())
    }
}

/// Differentiable fusion weights on the tape: `softmax(c * exp(-tau))`.
pub fn site_weights<S: Scalar>(
    tape: &mut Tape<S>,
    code: TensorId,
    tau: TensorId,
) -> tensor::Result<TensorId> {
    let neg_tau = tape.neg(tau)?;
    let inv_t = tape.exp(neg_tau)?;
    let scaled = tape.mul_scalar(code, inv_t)?;
    tape.softmax(scaled, 0)
}

struct SiteContext {
    tau: TensorId,
    adapters: Vec<AdapterHandles>,
}

/// Everything a fused forward pass needs: the staged code, and per site the
/// staged tau plus one adapter per attribute.
pub struct FusedContext {
    code: TensorId,
    n_layers: usize,
    sites: Vec<SiteContext>,
}

/// Flat handle lists for the trainable pieces, aligned with the owners'
/// `named_params` order.
pub struct StagedFusion {
    pub context: FusedContext,
    pub bank_flat: Vec<TensorId>,
    pub gate_flat: Vec<TensorId>,
}

/// Stage bank + gates + code onto a tape. The code is always a constant
/// input: gradients flow to adapters and temperatures only.
pub fn stage_fused<S: Scalar>(
    tape: &mut Tape<S>,
    bank: &AdapterBank<S>,
    gates: &FusionGate<S>,
    code: &ControlCode,
    trainable: bool,
) -> Result<StagedFusion, FusionError> {
    if code.len() != bank.n_attrs() {
        return Err(FusionError::CodeLength {
            got: code.len(),
            expected: bank.n_attrs(),
        });
    }
    if code.values().iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFiniteCode);
    }
    let code_data: Vec<S> = code.values().iter().map(|&v| S::from_f64(v)).collect();
    let code_id = tape.constant(code_data, vec![bank.n_attrs()])?;

    let (bank_handles, bank_flat) = bank.stage(tape, trainable)?;
    let mut gate_flat = Vec::with_capacity(2 * gates.n_layers);
    let mut sites = Vec::with_capacity(2 * gates.n_layers);
    for l in 0..gates.n_layers {
        for site in Site::BOTH {
            let tau = gates.tau_param(l, site).stage(tape, trainable)?;
            gate_flat.push(tau);
            sites.push(SiteContext {
                tau,
                adapters: (0..bank.n_attrs())
                    .map(|k| bank_handles[k][l][site.index()])
                    .collect(),
            });
        }
    }
    Ok(StagedFusion {
        context: FusedContext {
            code: code_id,
            n_layers: gates.n_layers,
            sites,
        },
        bank_flat,
        gate_flat,
    })
}

impl FusedContext {
    /// `sum_k w_k * adapter_k(x)` for one insertion site. The caller adds the
    /// result to the sublayer output. Weights are recomputed from this site's
    /// temperature, once per forward pass.
    pub fn site_output<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        layer: usize,
        site: Site,
        x: TensorId,
    ) -> tensor::Result<TensorId> {
        let ctx = &self.sites[layer * 2 + site.index()];
        let weights = site_weights(tape, self.code, ctx.tau)?;
        let outputs: Vec<TensorId> = ctx
            .adapters
            .iter()
            .map(|&h| adapter_forward(tape, h, x))
            .collect::<tensor::Result<_>>()?;
        tape.weighted_sum(&outputs, weights)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
}
