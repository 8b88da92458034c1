//! Floating-point format constants and storage emulation.
//!
//! The error bounds in [`crate::analysis`] depend on two properties of the
//! target format: the maximum truncation error `eps_max` and the exponent
//! magnitude `lambda` past which `exp(-lambda)` underflows to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionProfile {
    pub bits: u32,
    pub eps_max: f64,
    pub lambda: f64,
}

pub const HALF: PrecisionProfile = PrecisionProfile {
    bits: 16,
    eps_max: 9.765625e-4, // 2^-10
    lambda: 16.6355,
};

pub const SINGLE: PrecisionProfile = PrecisionProfile {
    bits: 32,
    eps_max: 1.1920928955078125e-7, // 2^-23
    lambda: 103.2789,
};

pub const DOUBLE: PrecisionProfile = PrecisionProfile {
    bits: 64,
    eps_max: 2.220446049250313e-16, // 2^-52
    lambda: 744.4401,
};

pub const ALL_PROFILES: [PrecisionProfile; 3] = [HALF, SINGLE, DOUBLE];

pub fn profile_for(bits: u32) -> Result<PrecisionProfile> {
    match bits {
        16 => Ok(HALF),
        32 => Ok(SINGLE),
        64 => Ok(DOUBLE),
        other => Err(Error::UnsupportedPrecision(other)),
    }
}

/// Rounds `x` to the nearest value representable in the profile's format
/// (ties to even, subnormals kept, anything below half the smallest
/// subnormal flushes to zero). NaN stays NaN.
pub fn round_to_precision(x: f64, profile: &PrecisionProfile) -> f64 {
    profile.round(x)
}

impl PrecisionProfile {
    #[inline]
    pub fn round(&self, x: f64) -> f64 {
        match self.bits {
            16 => half::f16::from_f64(x).to_f64(),
            32 => x as f32 as f64,
            _ => x,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.bits {
            16 => "fp16",
            32 => "fp32",
            _ => "fp64",
        }
    }
}

impl Default for PrecisionProfile {
    fn default() -> Self {
        SINGLE
    }
}
