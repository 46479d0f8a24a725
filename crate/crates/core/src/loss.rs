//! Per-block losses `rho(s)` on the squared residual norm and the corrector
//! that folds them into plain least-squares residuals and Jacobians.
//!
//! For a scalar residual `r` with Jacobian row `j` and `s = r^2`, the corrector
//! returns `r~ = scale_r * r` and `j~ = scale_j * j` such that
//! `r~ * j~ = rho'(s) * r * j`, i.e. `2 * r~ * j~` is the exact gradient of
//! `rho(r^2)`. When `rho'' <= 0` (the FoE log loss everywhere) both scales are
//! `sqrt(rho')`. Otherwise the curvature-corrected branch from Triggs et al.
//! is used:
//!
//! ```text
//! a       = 1 - sqrt(1 + 2 s rho'' / rho')
//! scale_r = sqrt(rho') / (1 - a)
//! scale_j = sqrt(rho') * (1 - a)
//! ```

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss argument must be a non-negative squared norm, got {0}")]
    NegativeArgument(f64),
    #[error("log loss weight must be positive and finite, got {0}")]
    InvalidAlpha(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `rho(s) = s`.
    Identity,
    /// `rho(s) = alpha * ln(1 + s / 2)`.
    FoeLog,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDescriptor {
    kind: LossKind,
    alpha: f64,
}

impl LossDescriptor {
    pub const IDENTITY: LossDescriptor = LossDescriptor {
        kind: LossKind::Identity,
        alpha: 1.0,
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn foe_log(alpha: f64) -> Result<Self, LossError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LossError::InvalidAlpha(alpha));
        }
        Ok(Self {
            kind: LossKind::FoeLog,
            alpha,
        })
    }

    /// Skips validation; callers hold an alpha already checked by `FoeModel`.
    pub(crate) fn foe_log_unchecked(alpha: f64) -> Self {
        Self {
            kind: LossKind::FoeLog,
            alpha,
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// A loss on the squared residual norm with its first two derivatives.
pub trait RobustLoss {
    /// Returns `[rho(s), rho'(s), rho''(s)]` for `s >= 0`.
    fn evaluate(&self, s: f64) -> [f64; 3];
}

impl RobustLoss for LossDescriptor {
    fn evaluate(&self, s: f64) -> [f64; 3] {
        match self.kind {
            LossKind::Identity => [s, 1.0, 0.0],
            LossKind::FoeLog => {
                let d = 2.0 + s;
                [
                    self.alpha * (0.5 * s).ln_1p(),
                    self.alpha / d,
                    -self.alpha / (d * d),
                ]
            }
        }
    }
}

fn check_arg(s: f64) -> Result<(), LossError> {
    if s >= 0.0 {
        Ok(())
    } else {
        Err(LossError::NegativeArgument(s))
    }
}

pub fn rho(desc: &LossDescriptor, s: f64) -> Result<f64, LossError> {
    check_arg(s)?;
    Ok(desc.evaluate(s)[0])
}

/// `(rho'(s), rho''(s))`.
pub fn rho_derivatives(desc: &LossDescriptor, s: f64) -> Result<(f64, f64), LossError> {
    check_arg(s)?;
    let [_, d1, d2] = desc.evaluate(s);
    Ok((d1, d2))
}

/// Scale factors for one scalar residual block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedBlock {
    /// Corrected residual `r~`.
    pub residual: f64,
    /// Factor applied to the raw Jacobian row.
    pub jacobian_scale: f64,
}

/// Corrects a scalar residual for an arbitrary loss.
pub fn correct_with<L: RobustLoss + ?Sized>(loss: &L, residual: f64) -> CorrectedBlock {
    let s = residual * residual;
    let [_, rho1, rho2] = loss.evaluate(s);
    let sqrt_rho1 = rho1.sqrt();
    if s == 0.0 || rho2 <= 0.0 {
        return CorrectedBlock {
            residual: sqrt_rho1 * residual,
            jacobian_scale: sqrt_rho1,
        };
    }
    let a = 1.0 - (1.0 + 2.0 * s * rho2 / rho1).sqrt();
    CorrectedBlock {
        residual: sqrt_rho1 / (1.0 - a) * residual,
        jacobian_scale: sqrt_rho1 * (1.0 - a),
    }
}

/// Corrects a scalar residual under `desc`. Identity blocks pass through.
pub fn correct(desc: &LossDescriptor, residual: f64) -> CorrectedBlock {
    match desc.kind {
        LossKind::Identity => CorrectedBlock {
            residual,
            jacobian_scale: 1.0,
        },
        LossKind::FoeLog => {
            let s = residual * residual;
            let d = 2.0 + s;
            // The log loss is concave for every s >= 0, so only the first-order branch applies.
            debug_assert!(s.is_infinite() || -desc.alpha / (d * d) < 0.0);
            let sqrt_rho1 = (desc.alpha / d).sqrt();
            CorrectedBlock {
                residual: sqrt_rho1 * residual,
                jacobian_scale: sqrt_rho1,
            }
        }
    }
}
