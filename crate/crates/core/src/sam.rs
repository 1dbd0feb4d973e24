//! Sharpness-aware gradients.
//!
//! The ascent step `ε* = ρ·g/‖g‖₂` is taken over the flattened concatenation
//! of every weight and bias of a modality model, and the returned gradient is
//! the plain gradient evaluated at `θ + ε*` on the same minibatch.

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::nn::{self, Batch, GradientSet, ModalityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    /// Radius of the ℓ2 ball.
    pub rho: f64,
    /// Below this gradient norm the perturbation is zero.
    pub zero_grad_threshold: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            rho: 0.05,
            zero_grad_threshold: 1e-12,
        }
    }
}

impl SamConfig {
    pub fn with_rho(rho: f64) -> Self {
        SamConfig {
            rho,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(MieError::validation(format!(
                "sam.rho must be a finite non-negative number, got {}",
                self.rho
            )));
        }
        if !(self.zero_grad_threshold >= 0.0) {
            return Err(MieError::validation("sam.zero_grad_threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Scale factor `ρ/‖g‖` or zero in the degenerate case.
fn ascent_scale(norm: f64, config: &SamConfig) -> Result<f64> {
    config.validate()?;
    if !norm.is_finite() {
        return Err(MieError::numeric("gradient norm is not finite"));
    }
    if norm < config.zero_grad_threshold {
        Ok(0.0)
    } else {
        Ok(config.rho / norm)
    }
}

/// Worst-case first-order perturbation `ε* = ρ·g/‖g‖₂`.
pub fn perturbation(grad: &GradientSet, config: &SamConfig) -> Result<GradientSet> {
    let s = ascent_scale(grad.norm(), config)?;
    let mut eps = grad.clone();
    eps.scale(s);
    Ok(eps)
}

/// [`perturbation`] on a flat parameter vector.
pub fn perturbation_flat(grad: &[f64], config: &SamConfig) -> Result<Vec<f64>> {
    let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = ascent_scale(norm, config)?;
    Ok(grad.iter().map(|g| g * s).collect())
}

/// Two-pass SAM gradient for a modality model.
///
/// `g1 = ∇L(θ)`, `ε* = perturbation(g1)`, returns `∇L(θ + ε*)` on the same
/// batch. The model itself is never written to.
pub fn sam_gradient(model: &ModalityModel, batch: &Batch, config: &SamConfig) -> Result<GradientSet> {
    sam_loss_and_gradient(model, batch, config).map(|(_, g)| g)
}

/// Like [`sam_gradient`] but also returns the unperturbed loss `L(θ)`.
pub fn sam_loss_and_gradient(
    model: &ModalityModel,
    batch: &Batch,
    config: &SamConfig,
) -> Result<(f64, GradientSet)> {
    config.validate()?;
    let (loss, g1) = nn::loss_and_gradient(model, batch)?;
    if !loss.is_finite() || !g1.is_finite() {
        return Err(MieError::numeric(format!(
            "non-finite loss or gradient at θ (first SAM pass, loss {loss})"
        )));
    }
    if config.rho == 0.0 {
        return Ok((loss, g1));
    }
    let eps = perturbation(&g1, config)?;
    let mut perturbed = model.clone();
    perturbed.add_scaled(&eps, 1.0)?;
    let (loss2, g2) = nn::loss_and_gradient(&perturbed, batch)?;
    if !loss2.is_finite() || !g2.is_finite() {
        return Err(MieError::numeric(format!(
            "non-finite loss or gradient at θ+ε* (second SAM pass, loss {loss2})"
        )));
    }
    Ok((loss, g2))
}

/// The same two-pass procedure for an arbitrary differentiable objective
/// over a flat parameter vector.
pub fn sam_gradient_flat<F>(theta: &[f64], config: &SamConfig, mut grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let g1 = grad(theta);
    let eps = perturbation_flat(&g1, config)?;
    let shifted: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + e).collect();
    Ok(grad(&shifted))
}
