//! Maps detector scores to rotational salience weights.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RcuError, Result};
use crate::matrix::Matrix;
use crate::toymodel::{log_softmax_rows, AdapterStack, ToyAttentionModel};

/// Middle branch `M(gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Mapping {
    /// `offset + (log10(gamma) + shift) / divisor`.
    LogDomain { offset: f64, shift: f64, divisor: f64 },
    /// `offset + ((gamma - start) / span) * height`.
    Affine { offset: f64, start: f64, span: f64, height: f64 },
}

impl Mapping {
    pub fn eval(&self, gamma: f64) -> f64 {
        match *self {
            Mapping::LogDomain { offset, shift, divisor } => offset + (gamma.log10() + shift) / divisor,
            Mapping::Affine { offset, start, span, height } => offset + ((gamma - start) / span) * height,
        }
    }
}

/// `beta = 0` for `gamma <= g1`, `M(gamma)` for `g1 < gamma <= g2`, the plateau above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensatorConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta_plateau: f64,
    pub mapping: Mapping,
}

pub const QA_PRESET: &str = "qa-preset";
pub const GEN_PRESET: &str = "gen-preset";

impl CompensatorConfig {
    pub fn qa_preset() -> Self {
        CompensatorConfig {
            gamma1: 1e-80,
            gamma2: 0.1,
            beta_plateau: 0.45,
            mapping: Mapping::LogDomain { offset: 0.35, shift: 80.0, divisor: 790.0 },
        }
    }

    /// `gamma2 = 1` leaves the plateau branch empty, so `M` covers `(0.2, 1]`
    /// and tops out at 0.6.
    pub fn gen_preset() -> Self {
        CompensatorConfig {
            gamma1: 0.2,
            gamma2: 1.0,
            beta_plateau: 0.45,
            mapping: Mapping::Affine { offset: 0.35, start: 0.2, span: 0.8, height: 0.25 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RcuError::Config(format!("compensator: {m}")));
        if !(self.gamma1 >= 0.0 && self.gamma1 < self.gamma2 && self.gamma2 <= 1.0) {
            return bad(format!("need 0 <= gamma1 < gamma2 <= 1, got {} and {}", self.gamma1, self.gamma2));
        }
        if !(self.beta_plateau >= 0.0 && self.beta_plateau.is_finite()) {
            return bad(format!("beta_plateau {} must be finite and nonnegative", self.beta_plateau));
        }
        match self.mapping {
            Mapping::LogDomain { divisor, .. } if !(divisor > 0.0) => return bad("log-domain divisor must be positive".into()),
            Mapping::LogDomain { .. } if self.gamma1 == 0.0 => return bad("log-domain mapping needs gamma1 > 0".into()),
            Mapping::Affine { span, height, .. } if !(span > 0.0 && height >= 0.0) => {
                return bad("affine span must be positive and height nonnegative".into())
            }
            _ => {}
        }
        let lo = self.mapping.eval(self.gamma1);
        let hi = self.mapping.eval(self.gamma2);
        if !(lo >= 0.0 && hi.is_finite()) {
            return bad(format!("mapping leaves [0, inf) on the active range ({lo}, {hi})"));
        }
        // Only binding when the plateau branch is reachable.
        if self.gamma2 < 1.0 && hi > self.beta_plateau + 1e-12 {
            return bad(format!("M(gamma2) = {hi} exceeds the plateau {}", self.beta_plateau));
        }
        Ok(())
    }

    /// Largest weight the schedule can produce.
    pub fn max_beta(&self) -> f64 {
        self.beta_plateau.max(self.mapping.eval(self.gamma2))
    }
}

impl FromStr for CompensatorConfig {
    type Err = RcuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            QA_PRESET => Ok(Self::qa_preset()),
            GEN_PRESET => Ok(Self::gen_preset()),
            other => Err(RcuError::Config(format!("unknown compensator preset {other:?}"))),
        }
    }
}

/// Salience weight for a score in `[0, 1]`.
pub fn salience_weight(gamma: f64, cfg: &CompensatorConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RcuError::domain("salience_weight", format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(if gamma <= cfg.gamma1 {
        0.0
    } else if gamma <= cfg.gamma2 {
        cfg.mapping.eval(gamma)
    } else {
        cfg.beta_plateau
    })
}

/// As [`salience_weight`] after clamping into `[0, 1]`; NaN is still rejected.
pub fn salience_weight_clamped(gamma: f64, cfg: &CompensatorConfig) -> Result<f64> {
    if gamma.is_nan() {
        return Err(RcuError::domain("salience_weight", "gamma is NaN"));
    }
    salience_weight(gamma.clamp(0.0, 1.0), cfg)
}

/// Class log-probabilities (1 x C) for one input, with request `t`'s composite
/// scaled by the weight its score `gammas[t]` maps to.
pub fn apply(
    model: &ToyAttentionModel,
    stack: &AdapterStack,
    gammas: &[f64],
    cfg: &CompensatorConfig,
    tokens: &[usize],
) -> Result<Matrix> {
    let betas = gammas.iter().map(|&g| salience_weight_clamped(g, cfg)).collect::<Result<Vec<_>>>()?;
    let ws = stack.effective_weights(model, &betas)?;
    Ok(log_softmax_rows(&model.logits(&ws, tokens)?))
}
