//! Entrywise activations with slopes confined to `[min_slope, 1]`.
//!
//! Every variant fixes the origin (`φ(0) = 0`), is nondecreasing, and is
//! 1-Lipschitz. The guaranteed lower bound on the slope — the `β` that the
//! closed-form theory consumes — is exposed by [`Activation::min_slope`].
//! At kinks the derivative is taken from the right, so `deriv(0) = 1` for
//! ReLU and LeakyReLU.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scalar activation applied entrywise by the state recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// Identity map; slope exactly 1 everywhere.
    Linear,
    /// `max(0, x)`; the slope bound degenerates to 0.
    Relu,
    /// `max(beta·x, x)` with `beta` in `[0, 1]`.
    LeakyRelu { beta: f64 },
    /// Convex blend `(1 − beta)·base(x) + beta·x` with `beta` in `(0, 1]`.
    Blended { base: Box<Activation>, beta: f64 },
}

impl Activation {
    /// LeakyReLU with validated slope `beta ∈ [0, 1]`. `beta = 0` gives ReLU
    /// behaviour (admissible here, rejected by the theory calculators);
    /// `beta = 1` is the identity.
    pub fn leaky_relu(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!(
                "leaky_relu slope must lie in [0, 1], got {beta}"
            )));
        }
        Ok(Activation::LeakyRelu { beta })
    }

    /// Blend `base` towards the identity: `x ↦ (1 − beta)·base(x) + beta·x`.
    ///
    /// Requires `beta ∈ (0, 1]`. The base must itself fix the origin and have
    /// slopes in `[0, 1]`; every variant of this enum does, so the resulting
    /// blend is guaranteed `beta`-increasing.
    pub fn blend(base: Activation, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "blend weight must lie in (0, 1], got {beta}"
            )));
        }
        Ok(Activation::Blended {
            base: Box::new(base),
            beta,
        })
    }

    /// Apply the activation at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { beta } => (beta * x).max(x),
            Activation::Blended { base, beta } => (1.0 - beta) * base.eval(x) + beta * x,
        }
    }

    /// Pointwise derivative, taken from the right at kinks.
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { beta } => {
                if x >= 0.0 {
                    1.0
                } else {
                    *beta
                }
            }
            Activation::Blended { base, beta } => (1.0 - beta) * base.deriv(x) + beta,
        }
    }

    /// Guaranteed lower bound β on the slope; the upper bound is always 1.
    pub fn min_slope(&self) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => 0.0,
            Activation::LeakyRelu { beta } => *beta,
            Activation::Blended { base, beta } => (1.0 - beta) * base.min_slope() + beta,
        }
    }

    /// Whether `φ(−x) = −φ(x)` holds identically.
    pub fn is_odd(&self) -> bool {
        match self {
            Activation::Linear => true,
            Activation::Relu => false,
            // LeakyReLU is odd exactly when it degenerates to the identity.
            Activation::LeakyRelu { beta } => *beta == 1.0,
            Activation::Blended { base, beta } => *beta == 1.0 || base.is_odd(),
        }
    }

    /// Re-checks the slope invariants; useful after deserializing untrusted
    /// descriptors, which bypass the validating constructors.
    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::Linear | Activation::Relu => Ok(()),
            Activation::LeakyRelu { beta } => {
                if (0.0..=1.0).contains(beta) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "leaky_relu slope must lie in [0, 1], got {beta}"
                    )))
                }
            }
            Activation::Blended { base, beta } => {
                if !(*beta > 0.0 && *beta <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "blend weight must lie in (0, 1], got {beta}"
                    )));
                }
                base.validate()
            }
        }
    }

    /// Filename-safe label, e.g. `leaky_relu_0.25`.
    pub fn label(&self) -> String {
        match self {
            Activation::Linear => "linear".to_string(),
            Activation::Relu => "relu".to_string(),
            Activation::LeakyRelu { beta } => format!("leaky_relu_{beta}"),
            Activation::Blended { base, beta } => format!("blended_{}_{beta}", base.label()),
        }
    }
}
