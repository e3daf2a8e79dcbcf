//! Probability that an instance falls inside a locality whose center is
//! Gaussian and whose radius is Gamma distributed.
//!
//! For radius β ~ Γ(k, τ) and center c ~ N(c₀, ε² I), the quantity is
//! E_β[F(β²/ε²; d, ‖c₀ − x‖²/ε²)] with F the noncentral χ² CDF.

use super::chi2::{ncx2_with_densities, Ncx2, Ncx2Grid, PoissonWindow};
use super::gamma::{gamma_unit_density, inv_reg_lower_gamma, reg_lower_gamma_dshape};
use super::qmc::QmcPoints;
use crate::error::{Error, Result};

fn check_inputs(func: &'static str, d: u32, dist: f64, eps: f64, k: f64, tau: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::domain(func, "dimension must be at least 1"));
    }
    if !(dist >= 0.0) || !dist.is_finite() {
        return Err(Error::domain(func, format!("distance must be finite and nonnegative, got {dist}")));
    }
    for (name, v) in [("eps", eps), ("k", k), ("tau", tau)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::domain(func, format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Fixed-abscissa estimate of the locality-membership probability.
pub fn upsilon_qmc(d: u32, dist: f64, eps: f64, k: f64, tau: f64, qmc: &QmcPoints) -> Result<f64> {
    check_inputs("upsilon_qmc", d, dist, eps, k, tau)?;
    let kernel = UpsilonKernel::new(d as f64, k, tau, eps, qmc, false)?;
    Ok(kernel.value(dist * dist))
}

/// Value and partial derivatives of the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct UpsilonGrad {
    pub value: f64,
    pub d_k: f64,
    pub d_tau: f64,
    pub d_eps: f64,
    /// Derivative with respect to the squared center distance.
    pub d_dist2: f64,
}

/// Per-locality precomputation: the radius draws at the fixed abscissae.
#[derive(Debug, Clone)]
pub(crate) struct UpsilonKernel {
    tau: f64,
    eps: f64,
    /// β_j²/ε² for each abscissa.
    scaled_sq: Vec<f64>,
    d: f64,
    /// Tabulated evaluator, built only for gradient use where the same
    /// abscissae are evaluated at many distances.
    grid: Option<Ncx2Grid>,
    /// ∂(β_j²/ε²)/∂k, present when gradients were requested.
    scaled_sq_dk: Vec<f64>,
}

impl UpsilonKernel {
    pub(crate) fn new(d: f64, k: f64, tau: f64, eps: f64, qmc: &QmcPoints, with_grad: bool) -> Result<Self> {
        let n = qmc.count();
        let mut scaled_sq = Vec::with_capacity(n);
        let mut scaled_sq_dk = Vec::with_capacity(if with_grad { n } else { 0 });
        let inv_eps2 = 1.0 / (eps * eps);
        for &u in qmc.values() {
            let z = inv_reg_lower_gamma(k, u).map_err(|e| match e {
                Error::Numerical { detail, .. } => Error::numerical(
                    "upsilon_qmc",
                    format!("radius quantile failed at u={u} (k={k}, tau={tau}): {detail}"),
                ),
                other => other,
            })?;
            let beta = z / tau;
            scaled_sq.push(beta * beta * inv_eps2);
            if with_grad {
                // Implicit differentiation of P(k, z) = u in the shape.
                let pdf = gamma_unit_density(k, z);
                let dz_dk = if pdf > 0.0 && pdf.is_finite() { -reg_lower_gamma_dshape(k, z) / pdf } else { 0.0 };
                scaled_sq_dk.push(2.0 * beta * (dz_dk / tau) * inv_eps2);
            }
        }
        let grid = with_grad.then(|| Ncx2Grid::new(&scaled_sq, d));
        Ok(Self { tau, eps, scaled_sq, d, grid, scaled_sq_dk })
    }

    /// Noncentral χ² CDF and densities at every abscissa.
    fn each(&self, nc: f64) -> impl Iterator<Item = Ncx2> + '_ {
        let mut w = PoissonWindow::default();
        if self.grid.is_some() {
            w.fill(nc);
        }
        self.scaled_sq.iter().enumerate().map(move |(i, &x)| match &self.grid {
            Some(g) => g.eval(i, nc, &w),
            None => ncx2_with_densities(x, self.d, nc),
        })
    }

    pub(crate) fn value(&self, dist2: f64) -> f64 {
        let nc = dist2 / (self.eps * self.eps);
        let sum: f64 = self.each(nc).map(|r| r.cdf).sum();
        sum / self.scaled_sq.len() as f64
    }

    pub(crate) fn grad(&self, dist2: f64) -> UpsilonGrad {
        debug_assert_eq!(self.scaled_sq.len(), self.scaled_sq_dk.len());
        let inv_eps2 = 1.0 / (self.eps * self.eps);
        let nc = dist2 * inv_eps2;
        let (mut value, mut d_k, mut d_tau, mut d_eps, mut d_nc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&x, &dx_dk), r) in self.scaled_sq.iter().zip(&self.scaled_sq_dk).zip(self.each(nc)) {
            value += r.cdf;
            d_k += r.density * dx_dk;
            d_tau -= r.density * 2.0 * x;
            d_eps += -2.0 * x * r.density + 2.0 * nc * r.density_plus2;
            d_nc -= r.density_plus2;
        }
        let inv_n = 1.0 / self.scaled_sq.len() as f64;
        UpsilonGrad {
            value: value * inv_n,
            d_k: d_k * inv_n,
            d_tau: d_tau * inv_n / self.tau,
            d_eps: d_eps * inv_n / self.eps,
            d_dist2: d_nc * inv_n * inv_eps2,
        }
    }
}

const SERIES_MAX_CHAIN: usize = 4_000_000;

/// Double-series evaluation through parabolic-cylinder integrals.
///
/// Υ = (τε)^k/Γ(k) Σ_s Pois(s; δ²/2ε²) Σ_j I(d+k+2s+2j, τε) / (2^p Γ(p+1)),
/// p = d/2 + s + j, where I(ν, z) = ∫₀^∞ t^{ν−1} e^{−zt−t²/2} dt
/// = Γ(ν) e^{z²/4} D_{−ν}(z). I at the base order comes from its power
/// series in z; higher orders follow from ratios obtained by backward
/// recurrence, which is stable because I is the minimal solution of
/// I(ν+1) = (ν−1) I(ν−1) − z I(ν).
///
/// Intended as a reference for small dimensions; large τε causes
/// cancellation in the base power series, reported as a numerical error.
pub fn upsilon_series(d: u32, dist: f64, eps: f64, k: f64, tau: f64, tol: f64) -> Result<f64> {
    check_inputs("upsilon_series", d, dist, eps, k, tau)?;
    if !(tol > 0.0) {
        return Err(Error::domain("upsilon_series", format!("tol must be positive, got {tol}")));
    }
    let df = d as f64;
    let z = tau * eps;
    let lam = dist * dist / (2.0 * eps * eps);
    let nu_base = df + k;
    let log_tol = -tol.ln();

    // Rough index budgets: the inner terms behave like p^{(d+k)/2}·exp(−z√(2p))
    // and the Poisson weights beyond λ + 12√λ are negligible.
    let growth = 0.5 * (df + k) + 1.0;
    let mut inner_len: f64 = 64.0;
    while z * (2.0 * inner_len).sqrt() - growth * inner_len.ln() < log_tol + 12.0 && inner_len < SERIES_MAX_CHAIN as f64
    {
        inner_len *= 1.25;
    }
    let inner_len = inner_len.ceil() + 64.0;
    let outer_len = if lam == 0.0 { 1.0 } else { (lam + 12.0 * lam.sqrt() + 40.0).ceil() };
    let chain_len = 2.0 * (inner_len + outer_len) + 4.0;
    if !(chain_len < SERIES_MAX_CHAIN as f64) {
        return Err(Error::numerical(
            "upsilon_series",
            format!("series too long for tau*eps={z}, noncentrality {lam}"),
        ));
    }
    let ln_i = ln_cylinder_chain(nu_base, z, chain_len as usize)?;

    let ln_pref = k * z.ln() - libm::lgamma(k);
    let ln2 = std::f64::consts::LN_2;
    let mut total = 0.0;
    let mut s = 0usize;
    loop {
        let sf = s as f64;
        let ln_w = if lam == 0.0 { 0.0 } else { sf * lam.ln() - lam - libm::lgamma(sf + 1.0) };
        let mut inner = 0.0;
        let mut prev = f64::NAN;
        let mut j = 0usize;
        loop {
            let idx = 2 * (s + j);
            if idx >= ln_i.len() {
                return Err(Error::numerical(
                    "upsilon_series",
                    format!("inner series did not converge (s={s}, j={j})"),
                ));
            }
            let p = 0.5 * df + sf + j as f64;
            let term = (ln_pref + ln_i[idx] - p * ln2 - libm::lgamma(p + 1.0)).exp();
            inner += term;
            if j > 0 && term < prev {
                let q = term / prev;
                if term == 0.0 || 2.0 * term * q / (1.0 - q) < tol * 1e-2 {
                    break;
                }
            }
            prev = term;
            j += 1;
        }
        total += ln_w.exp() * inner;
        if lam == 0.0 {
            break;
        }
        s += 1;
        let sf = s as f64;
        let r = lam / (sf + 1.0);
        let ln_next = sf * lam.ln() - lam - libm::lgamma(sf + 1.0);
        if r < 1.0 && ln_next.exp() / (1.0 - r) < tol * 1e-2 {
            break;
        }
        if 2 * s >= ln_i.len() {
            return Err(Error::numerical("upsilon_series", "outer series did not converge"));
        }
    }
    Ok(total)
}

/// ln I(ν₀ + m, z) for m = 0..len.
fn ln_cylinder_chain(nu0: f64, z: f64, len: usize) -> Result<Vec<f64>> {
    let base = ln_cylinder_power_series(nu0, z)?;
    let top = nu0 + len as f64;
    // Errors in the ratio contract by about (1 − z/√ν) per step, so start far
    // enough above the top that Σ z/√ν ≥ 40.
    let start = nu0 + ((top.sqrt() + 20.0 / z).powi(2) - nu0).ceil() + 100.0;
    if !(start < SERIES_MAX_CHAIN as f64) {
        return Err(Error::numerical("upsilon_series", format!("recurrence start too far for z={z}")));
    }
    // r(ν) = I(ν+1)/I(ν) ≈ √ν − z/2 for large ν; r(ν−1) = (ν−1)/(r(ν) + z).
    let mut r = start.sqrt() - 0.5 * z;
    let mut nu = start;
    let mut ratios = vec![0.0; len];
    while nu > nu0 + 1.0 - 1e-9 {
        r = (nu - 1.0) / (r + z);
        nu -= 1.0;
        let m = (nu - nu0).round();
        if m >= 0.0 && (m as usize) < len {
            ratios[m as usize] = r;
        }
    }
    let mut out = Vec::with_capacity(len);
    let mut acc = base;
    for ratio in ratios {
        out.push(acc);
        acc += ratio.ln();
    }
    Ok(out)
}

/// ln I(ν, z) from Σ_n (−z)^n/n! · 2^{(ν+n)/2−1} Γ((ν+n)/2).
fn ln_cylinder_power_series(nu: f64, z: f64) -> Result<f64> {
    let ln2 = std::f64::consts::LN_2;
    let lnz = z.ln();
    let mut sum = 0.0;
    let mut largest: f64 = 0.0;
    let mut n = 0usize;
    loop {
        let nf = n as f64;
        let half = 0.5 * (nu + nf);
        let ln_mag = nf * lnz - libm::lgamma(nf + 1.0) + (half - 1.0) * ln2 + libm::lgamma(half);
        let mag = ln_mag.exp();
        let term = if n.is_multiple_of(2) { mag } else { -mag };
        sum += term;
        largest = largest.max(mag);
        if n > 2 && mag < 1e-18 * sum.abs() {
            break;
        }
        n += 1;
        if n > 100_000 {
            return Err(Error::numerical("upsilon_series", "power series did not converge"));
        }
    }
    if !(sum > 0.0) || largest / sum > 1e6 {
        return Err(Error::numerical("upsilon_series", format!("cancellation in base series for order {nu}, z={z}")));
    }
    Ok(sum.ln())
}
