//! Per-layer spectral-norm caps enforced by projecting weights after each step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::power_iteration;
use crate::nn::{Linear, Model};

/// Relative change at which certificate-time power iteration stops early.
const CERT_POWER_TOL: f64 = 1e-9;

/// Re-estimate/rescale rounds before giving up on meeting a cap.
const MAX_PROJECTION_ROUNDS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    Projection,
    Off,
}

/// Whether a level `β` caps `σ_max` itself or `σ_max²`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    #[default]
    Sigma,
    SigmaSquared,
}

impl Semantics {
    /// Largest admissible `σ_max` for level `beta`.
    pub fn threshold(self, beta: f64) -> f64 {
        match self {
            Semantics::Sigma => beta,
            Semantics::SigmaSquared => beta.sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Semantics::Sigma => "sigma",
            Semantics::SigmaSquared => "sigma_squared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerConfig {
    pub mode: ProjectionMode,
    pub semantics: Semantics,
    /// One level per dense/conv layer, depth-first.
    pub per_layer_beta: Vec<f64>,
    pub train_power_iters: usize,
    pub cert_power_iters: usize,
    /// Caps hold within a factor `1 + tol`.
    pub tol: f64,
    /// Same level for every layer; overrides `per_layer_beta`.
    pub uniform_beta: Option<f64>,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            mode: ProjectionMode::Projection,
            semantics: Semantics::Sigma,
            per_layer_beta: Vec::new(),
            train_power_iters: 1,
            cert_power_iters: 100,
            tol: 1e-3,
            uniform_beta: None,
        }
    }
}

impl RegularizerConfig {
    pub fn off() -> Self {
        Self {
            mode: ProjectionMode::Off,
            ..Self::default()
        }
    }

    pub fn per_layer(betas: Vec<f64>) -> Self {
        Self {
            per_layer_beta: betas,
            ..Self::default()
        }
    }

    pub fn uniform(beta: f64) -> Self {
        Self {
            uniform_beta: Some(beta),
            ..Self::default()
        }
    }

    /// Levels for a model with `layers` dense/conv layers.
    pub fn betas(&self, layers: usize) -> Result<Vec<f64>> {
        let betas = match self.uniform_beta {
            Some(b) => vec![b; layers],
            None => {
                if self.per_layer_beta.len() != layers {
                    return Err(Error::Config(format!(
                        "{} regularization levels for {layers} parameterized layers",
                        self.per_layer_beta.len()
                    )));
                }
                self.per_layer_beta.clone()
            }
        };
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && b.is_finite()))
        {
            return Err(Error::Config(format!(
                "regularization level {b} for layer {} is not positive",
                i + 1
            )));
        }
        Ok(betas)
    }

    fn validate(&self) -> Result<()> {
        if self.train_power_iters == 0 || self.cert_power_iters == 0 {
            return Err(Error::Config(
                "power iteration counts must be positive".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Per-layer outcome of a constraint pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSigma {
    /// Estimate before any rescaling.
    pub sigma: f64,
    /// Estimate after rescaling (equal to `sigma` when untouched).
    pub sigma_after: f64,
    pub threshold: f64,
    /// Product of all factors applied to the weights.
    pub scale: f64,
}

/// Estimates `σ_max` of the layer's linear map, warm-starting from and
/// updating its stored power-iteration vectors.
pub fn estimate_layer_sigma<R: Rng + ?Sized>(
    layer: &mut Linear,
    iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<f64> {
    layer.weight().check_finite()?;
    let op = layer.operator();
    let (sigma, state) = power_iteration(op.as_ref(), iters, tol, layer.power.take(), rng)?;
    layer.power = Some(state);
    Ok(sigma)
}

/// Rescales the weights so `sigma` sits at the threshold for `beta`.
/// Returns the factor applied; `1.0` (weights untouched) when within it.
pub fn project_layer(layer: &mut Linear, beta: f64, sigma: f64, semantics: Semantics) -> f64 {
    let t = semantics.threshold(beta);
    if sigma > t {
        let f = t / sigma;
        layer.scale_weights(f);
        f
    } else {
        1.0
    }
}

fn enforce<R: Rng + ?Sized>(
    layer: &mut Linear,
    threshold: f64,
    cfg: &RegularizerConfig,
    rng: &mut R,
) -> Result<LayerSigma> {
    let sigma = estimate_layer_sigma(layer, cfg.cert_power_iters, CERT_POWER_TOL, rng)?;
    let mut out = LayerSigma {
        sigma,
        sigma_after: sigma,
        threshold,
        scale: 1.0,
    };
    let mut current = sigma;
    // A lower estimate under-corrects; keep refining until the estimate
    // itself respects the cap.
    for _ in 0..MAX_PROJECTION_ROUNDS {
        if current <= threshold {
            return Ok(out);
        }
        let f = project_layer(layer, threshold, current, Semantics::Sigma);
        out.scale *= f;
        current = estimate_layer_sigma(layer, cfg.cert_power_iters, CERT_POWER_TOL, rng)?;
        out.sigma_after = current;
        if current <= threshold * (1.0 + cfg.tol) * (1.0 - f32::EPSILON as f64) {
            return Ok(out);
        }
    }
    Err(Error::numeric(format!(
        "could not bring σ_max = {current} under {threshold} after {MAX_PROJECTION_ROUNDS} rounds"
    )))
}

/// Brings every dense/conv layer under its cap, using a full
/// `cert_power_iters` estimate. Afterwards each layer's re-estimated
/// `σ_max` is at most `threshold · (1 + tol)`.
pub fn apply_constraints<R: Rng + ?Sized>(
    model: &mut Model,
    cfg: &RegularizerConfig,
    rng: &mut R,
) -> Result<Vec<LayerSigma>> {
    cfg.validate()?;
    let n = model.linears().len();
    if cfg.mode == ProjectionMode::Off {
        return measure_sigmas(model, cfg.cert_power_iters, rng).map(|s| {
            s.into_iter()
                .map(|sigma| LayerSigma {
                    sigma,
                    sigma_after: sigma,
                    threshold: f64::INFINITY,
                    scale: 1.0,
                })
                .collect()
        });
    }
    let betas = cfg.betas(n)?;
    model
        .linears_mut()
        .into_iter()
        .zip(betas)
        .map(|(layer, beta)| enforce(layer, cfg.semantics.threshold(beta), cfg, rng))
        .collect()
}

/// Cheap per-step variant: `train_power_iters` warm iterations per layer
/// and a single rescale from that estimate.
pub fn apply_constraints_step<R: Rng + ?Sized>(
    model: &mut Model,
    cfg: &RegularizerConfig,
    rng: &mut R,
) -> Result<()> {
    if cfg.mode == ProjectionMode::Off {
        return Ok(());
    }
    cfg.validate()?;
    let betas = cfg.betas(model.linears().len())?;
    for (layer, beta) in model.linears_mut().into_iter().zip(betas) {
        // Tolerance is irrelevant at one iteration; keep the loop from
        // stopping early when more are configured.
        let sigma = estimate_layer_sigma(layer, cfg.train_power_iters, CERT_POWER_TOL, rng)?;
        project_layer(layer, beta, sigma, cfg.semantics);
    }
    Ok(())
}

/// `σ_max` estimates of every dense/conv layer, warm-started.
pub fn measure_sigmas<R: Rng + ?Sized>(
    model: &mut Model,
    iters: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    model
        .linears_mut()
        .into_iter()
        .map(|l| estimate_layer_sigma(l, iters, CERT_POWER_TOL, rng))
        .collect()
}
