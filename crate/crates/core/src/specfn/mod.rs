//! Scalar special functions.

mod chi2;
mod gamma;
mod qmc;
mod upsilon;

pub use chi2::{marcum_q, noncentral_chi2_cdf};
pub use gamma::{digamma, gamma_inv_cdf, gamma_survival, ln_gamma, reg_lower_gamma};
pub use qmc::QmcPoints;
pub use upsilon::{upsilon_qmc, upsilon_series};

pub(crate) use gamma::{digamma_raw, gamma_unit_density, reg_gamma_pq, reg_lower_gamma_dshape, trigamma_raw};
pub(crate) use upsilon::UpsilonKernel;

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::domain("normal_cdf", format!("z must be finite, got {z}")));
    }
    Ok(phi(z))
}

/// Unchecked standard normal CDF, Φ(z) = erfc(−z/√2)/2.
#[inline]
pub(crate) fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail 1 − Φ(z) without cancellation.
#[inline]
pub(crate) fn phi_upper(z: f64) -> f64 {
    0.5 * libm::erfc(z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub(crate) fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}
