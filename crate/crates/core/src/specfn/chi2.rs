//! Noncentral chi-squared distribution and the generalized Marcum Q-function.
//!
//! Both are Poisson mixtures of regularized incomplete gammas. The CDF
//! sweeps outward from the Poisson mode; the Marcum function evaluates its
//! defining double series literally so that the two can check each other.

use super::gamma::{gamma_increment, reg_gamma_pq};
use crate::error::{Error, Result};

const TAIL_TOL: f64 = 1e-15;
const MAX_TERMS: usize = 10_000_000;

/// CDF together with the two densities needed for its derivatives.
///
/// `density` is the noncentral χ²_d density at `x` (the derivative of the
/// CDF in `x`); `density_plus2` is the χ²_{d+2} density, and the CDF's
/// derivative in the noncentrality is `-density_plus2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Ncx2 {
    pub cdf: f64,
    pub density: f64,
    pub density_plus2: f64,
}

/// Noncentral χ² CDF with `d` degrees of freedom and noncentrality `nc`.
pub fn noncentral_chi2_cdf(x: f64, d: u32, nc: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::domain("noncentral_chi2_cdf", "degrees of freedom must be at least 1"));
    }
    if !(x >= 0.0) || x.is_nan() {
        return Err(Error::domain("noncentral_chi2_cdf", format!("x must be nonnegative, got {x}")));
    }
    if !(nc >= 0.0) || !nc.is_finite() {
        return Err(Error::domain(
            "noncentral_chi2_cdf",
            format!("noncentrality must be finite and nonnegative, got {nc}"),
        ));
    }
    Ok(ncx2_with_densities(x, d as f64, nc).cdf)
}

/// Central χ²_ν density at 0.
fn central_density_at_zero(nu: f64) -> f64 {
    if nu < 2.0 {
        f64::INFINITY
    } else if nu == 2.0 {
        0.5
    } else {
        0.0
    }
}

pub(crate) fn ncx2_with_densities(x: f64, d: f64, nc: f64) -> Ncx2 {
    let lam = 0.5 * nc;
    if x <= 0.0 {
        return Ncx2 { cdf: 0.0, density: (-lam).exp() * central_density_at_zero(d), density_plus2: 0.0 };
    }
    if x.is_infinite() {
        return Ncx2 { cdf: 1.0, density: 0.0, density_plus2: 0.0 };
    }
    let xh = 0.5 * x;
    let half_d = 0.5 * d;
    let j0 = lam.floor();
    let a0 = half_d + j0;
    let w0 = gamma_increment(j0, lam);
    let p0 = reg_gamma_pq(a0, xh).0;
    let t0 = gamma_increment(a0, xh);
    let t0m1 = t0 * a0 / xh;

    let mut cdf = w0 * p0;
    let mut dens = w0 * t0m1;
    let mut dens2 = w0 * t0;

    // Upward from the mode. State at index j: weight w, P_a, T_{a-1}, T_a.
    {
        let (mut j, mut w, mut p, mut t) = (j0, w0, p0, t0);
        let mut a = a0;
        for _ in 0..MAX_TERMS {
            let w_next = w * lam / (j + 1.0);
            let p_next = (p - t).max(0.0);
            let tm1_next = t;
            let t_next = t * xh / (a + 1.0);
            j += 1.0;
            a += 1.0;
            w = w_next;
            p = p_next;
            t = t_next;
            cdf += w * p;
            dens += w * tm1_next;
            dens2 += w * t;
            // Remaining terms: weights decay at least geometrically with ratio
            // lam/(j+1); P_a is nonincreasing in a, and T_a ≤ 1 for a ≥ 0,
            // decreasing once a > x/2.
            let r = lam / (j + 1.0);
            if r < 1.0 {
                let t_bound = if a > xh { tm1_next } else { 1.0 };
                let bound = w * r / (1.0 - r) * p.max(t_bound);
                if bound < TAIL_TOL || w == 0.0 {
                    break;
                }
            }
        }
    }

    // Downward from the mode.
    {
        let (mut j, mut w, mut p, mut tm1) = (j0, w0, p0, t0m1);
        let mut a = a0;
        while j >= 1.0 {
            let w_prev = w * j / lam;
            let p_prev = (p + tm1).min(1.0);
            let t_prev = tm1;
            let tm1_prev = tm1 * (a - 1.0) / xh;
            j -= 1.0;
            a -= 1.0;
            w = w_prev;
            p = p_prev;
            tm1 = tm1_prev;
            cdf += w * p;
            dens += w * tm1;
            dens2 += w * t_prev;
            if j >= 1.0 {
                let r = j / lam;
                if r < 1.0 && w * r / (1.0 - r) * tm1.max(1.0) < TAIL_TOL {
                    break;
                }
            }
        }
    }

    Ncx2 { cdf: cdf.clamp(0.0, 1.0), density: 0.5 * dens, density_plus2: 0.5 * dens2 }
}

/// Truncation for the windowed sums below: each discarded tail is below this.
const WINDOW_TOL: f64 = 1e-17;
/// Longer windows fall back to the general routine.
const MAX_WINDOW: usize = 1 << 14;

/// Indices `[lo, hi)` outside of which the unimodal sequence
/// s_j = c·z^{j+a}/Γ(j+a+1) sums to less than `WINDOW_TOL` on each side, with
/// the values inside. `peak` is s at index `mode`. `None` when the window
/// would exceed `MAX_WINDOW`.
fn poisson_like_window(z: f64, a: f64, mode: usize, peak: f64) -> Option<(usize, Vec<f64>)> {
    if 20.0 * z.sqrt() > MAX_WINDOW as f64 {
        return None;
    }
    let mut below = Vec::new();
    let mut v = peak;
    let mut j = mode;
    while j > 0 {
        // s_{j-1} = s_j·(j+a)/z
        let r = (j as f64 + a) / z;
        if r < 1.0 && v * r / (1.0 - r) < WINDOW_TOL {
            break;
        }
        v *= r;
        j -= 1;
        below.push(v);
        if below.len() > MAX_WINDOW {
            return None;
        }
    }
    let lo = j;
    below.reverse();
    below.push(peak);
    let mut v = peak;
    let mut j = mode;
    loop {
        let r = z / (j as f64 + a + 1.0);
        if r < 1.0 && v * r / (1.0 - r) < WINDOW_TOL {
            break;
        }
        v *= r;
        j += 1;
        below.push(v);
        if below.len() > MAX_WINDOW {
            return None;
        }
    }
    Some((lo, below))
}

/// Poisson(nc/2) weights over the window where they matter, with running sums.
#[derive(Debug, Clone, Default)]
pub(crate) struct PoissonWindow {
    lo: usize,
    w: Vec<f64>,
    /// `cum[k]` is the sum of the first `k` weights.
    cum: Vec<f64>,
}

impl PoissonWindow {
    /// Empty when the weights are too spread out, which sends every
    /// evaluation to the general routine.
    pub(crate) fn fill(&mut self, nc: f64) {
        let lam = 0.5 * nc;
        let (lo, w) = if lam == 0.0 {
            (0, vec![1.0])
        } else {
            let mode = lam.floor();
            poisson_like_window(lam, 0.0, mode as usize, gamma_increment(mode, lam)).unwrap_or_default()
        };
        self.lo = lo;
        self.cum.clear();
        self.cum.push(0.0);
        let mut acc = 0.0;
        for &x in &w {
            acc += x;
            self.cum.push(acc);
        }
        self.w = w;
    }

    fn hi(&self) -> usize {
        self.lo + self.w.len()
    }

    /// Sum of the weights with index in `[a, b)`.
    fn mass(&self, a: usize, b: usize) -> f64 {
        let a = a.clamp(self.lo, self.hi());
        let b = b.clamp(a, self.hi());
        self.cum[b - self.lo] - self.cum[a - self.lo]
    }
}

/// Per-abscissa tables of P(d/2 + j, x/2), T_{d/2 + j − 1} and T_{d/2 + j}
/// over the window of j where the gamma increments T are not negligible.
#[derive(Debug, Clone)]
struct AbscissaWindow {
    lo: usize,
    /// P at indices below `lo`.
    p_below: f64,
    p: Vec<f64>,
    tm1: Vec<f64>,
    t: Vec<f64>,
}

/// Noncentral χ² CDFs at a fixed set of abscissae for many noncentralities.
///
/// The CDF is Σ_j w_j P(d/2 + j, x/2) with Poisson weights w_j. Since
/// P(a, z) = Σ_{l≥0} T_{a+l}(z) with T_a(z) = z^a e^{−z}/Γ(a+1), P is a tail
/// sum of a unimodal sequence: constant below its window, zero above it.
/// Each evaluation is therefore a dot product over the overlap of the weight
/// window and the abscissa's window.
#[derive(Debug, Clone)]
pub(crate) struct Ncx2Grid {
    d: f64,
    xs: Vec<f64>,
    windows: Vec<Option<AbscissaWindow>>,
}

impl Ncx2Grid {
    pub(crate) fn new(xs: &[f64], d: f64) -> Self {
        let half_d = 0.5 * d;
        let windows = xs
            .iter()
            .map(|&x| {
                if !(x > 0.0) || !x.is_finite() {
                    return None;
                }
                let xh = 0.5 * x;
                let mode = (xh - half_d).max(0.0).floor();
                let (lo, t) = poisson_like_window(xh, half_d, mode as usize, gamma_increment(half_d + mode, xh))?;
                let mut p = vec![0.0; t.len()];
                let mut acc = 0.0;
                for k in (0..t.len()).rev() {
                    acc += t[k];
                    p[k] = acc.min(1.0);
                }
                let a_lo = half_d + lo as f64;
                let mut tm1 = Vec::with_capacity(t.len());
                tm1.push(t[0] * a_lo / xh);
                tm1.extend_from_slice(&t[..t.len() - 1]);
                Some(AbscissaWindow { lo, p_below: p[0], p, tm1, t })
            })
            .collect();
        Self { d, xs: xs.to_vec(), windows }
    }

    /// Evaluates abscissa `i` at noncentrality `nc`, whose weights are in `w`.
    pub(crate) fn eval(&self, i: usize, nc: f64, w: &PoissonWindow) -> Ncx2 {
        let win = match &self.windows[i] {
            Some(win) if !w.w.is_empty() => win,
            _ => return ncx2_with_densities(self.xs[i], self.d, nc),
        };
        let mut cdf = win.p_below * w.mass(0, win.lo);
        let a = win.lo.max(w.lo);
        let b = (win.lo + win.t.len()).min(w.hi());
        let (mut dens, mut dens2) = (0.0, 0.0);
        if a < b {
            let ww = &w.w[a - w.lo..b - w.lo];
            let r = a - win.lo..b - win.lo;
            let dot = |v: &[f64]| -> f64 { v[r.clone()].iter().zip(ww).map(|(x, y)| x * y).sum() };
            cdf += dot(&win.p);
            dens = dot(&win.tm1);
            dens2 = dot(&win.t);
        }
        Ncx2 { cdf: cdf.clamp(0.0, 1.0), density: 0.5 * dens, density_plus2: 0.5 * dens2 }
    }
}

/// Generalized Marcum Q-function Q_M(a, b).
///
/// Evaluated from the double series
/// 1 − Q_M(a, b) = e^{−a²/2} Σ_s (a²/2)^s / s! · Σ_j (b²/2)^{M+s+j} e^{−b²/2} / Γ(M+s+j+1).
pub fn marcum_q(m: f64, a: f64, b: f64) -> Result<f64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::domain("marcum_q", format!("order must be positive, got {m}")));
    }
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::domain("marcum_q", format!("a must be finite and nonnegative, got {a}")));
    }
    if !(b >= 0.0) || b.is_nan() {
        return Err(Error::domain("marcum_q", format!("b must be nonnegative, got {b}")));
    }
    if b == 0.0 {
        return Ok(1.0);
    }
    if b.is_infinite() {
        return Ok(0.0);
    }
    let lam = 0.5 * a * a;
    let xh = 0.5 * b * b;
    let mut weight = (-lam).exp();
    let mut outer = 0.0;
    let mut s = 0.0_f64;
    let mut terms = 0usize;
    loop {
        let order = m + s;
        let mut term = gamma_increment(order, xh);
        let mut inner = term;
        let mut jj = 0.0;
        loop {
            let ratio = xh / (order + jj + 1.0);
            term *= ratio;
            inner += term;
            jj += 1.0;
            terms += 1;
            if ratio < 1.0 && term * ratio / (1.0 - ratio) < 1e-17 {
                break;
            }
            if term == 0.0 && ratio < 1.0 {
                break;
            }
            if terms > MAX_TERMS {
                return Err(Error::numerical(
                    "marcum_q",
                    format!("inner series did not converge for M={m}, a={a}, b={b}"),
                ));
            }
        }
        outer += weight * inner;
        let r = lam / (s + 1.0);
        weight *= r;
        s += 1.0;
        let r_next = lam / (s + 1.0);
        if weight == 0.0 || (r_next < 1.0 && weight / (1.0 - r_next) < TAIL_TOL) {
            break;
        }
        if terms > MAX_TERMS {
            return Err(Error::numerical("marcum_q", format!("outer series did not converge for M={m}, a={a}, b={b}")));
        }
    }
    Ok((1.0 - outer).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Central χ² CDF for even dof: 1 − e^{−x/2} Σ_{i<d/2} (x/2)^i / i!.
    fn central_even(x: f64, d: u32) -> f64 {
        let h = x / 2.0;
        let mut term = 1.0;
        let mut sum = 0.0;
        for i in 0..d / 2 {
            if i > 0 {
                term *= h / i as f64;
            }
            sum += term;
        }
        1.0 - (-h).exp() * sum
    }

    #[test]
    fn zero_noncentrality_is_central() {
        for d in [2, 4, 6] {
            for &x in &[0.1, 1.0, 4.0, 17.0] {
                let got = noncentral_chi2_cdf(x, d, 0.0).unwrap();
                assert!((got - central_even(x, d)).abs() < 1e-12);
            }
        }
        // d = 1: P(χ²_1 ≤ x) = erf(√(x/2)).
        for &x in &[0.01, 0.5, 3.0] {
            let got = noncentral_chi2_cdf(x, 1, 0.0).unwrap();
            assert!((got - libm::erf((x / 2.0f64).sqrt())).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_at_origin_and_domain_errors() {
        assert_eq!(noncentral_chi2_cdf(0.0, 3, 2.0).unwrap(), 0.0);
        assert!(noncentral_chi2_cdf(-1.0, 3, 2.0).is_err());
        assert!(noncentral_chi2_cdf(1.0, 0, 2.0).is_err());
        assert!(noncentral_chi2_cdf(1.0, 2, -2.0).is_err());
    }

    #[test]
    fn monte_carlo_oracle_d2_nc1() {
        // ||N(μ, I_2)||² with ||μ||² = 1, 10^6 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
        let n = 1_000_000;
        let mut hits = 0u64;
        for _ in 0..n {
            let a: f64 = rng.sample::<f64, _>(StandardNormal) + 1.0;
            let b: f64 = rng.sample(StandardNormal);
            if a * a + b * b <= 4.0 {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let got = noncentral_chi2_cdf(4.0, 2, 1.0).unwrap();
        assert!((got - p).abs() <= 3.0 * se, "got {got}, mc {p} ± {se}");
    }

    #[test]
    fn densities_match_finite_differences() {
        for &(x, d, nc) in &[(0.7, 1.0, 0.3), (4.0, 2.0, 1.0), (9.0, 3.0, 12.0), (60.0, 5.0, 50.0), (2.0, 6.0, 0.0)] {
            let r = ncx2_with_densities(x, d, nc);
            let h = 1e-5;
            let dx = (ncx2_with_densities(x + h, d, nc).cdf - ncx2_with_densities(x - h, d, nc).cdf) / (2.0 * h);
            assert!((dx - r.density).abs() < 1e-7, "dx {dx} vs {}", r.density);
            if nc > 0.0 {
                let dn = (ncx2_with_densities(x, d, nc + h).cdf - ncx2_with_densities(x, d, nc - h).cdf) / (2.0 * h);
                assert!((dn + r.density_plus2).abs() < 1e-7);
            }
            // F_d − F_{d+2} = 2 f_{d+2}.
            let up = ncx2_with_densities(x, d + 2.0, nc).cdf;
            assert!((r.cdf - up - 2.0 * r.density_plus2).abs() < 1e-12);
        }
    }

    #[test]
    fn large_noncentrality_is_stable() {
        let nc = 4000.0;
        let mid = noncentral_chi2_cdf(nc + 2.0, 2, nc).unwrap();
        assert!(mid > 0.4 && mid < 0.6);
        assert!(noncentral_chi2_cdf(nc * 0.5, 2, nc).unwrap() < 1e-12);
        assert!(noncentral_chi2_cdf(nc * 2.0, 2, nc).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn windowed_grid_matches_general_routine() {
        for &d in &[1.0, 2.0, 3.0, 5.0] {
            for &x in &[1e-6, 0.05, 0.8, 3.0, 11.0, 45.0, 250.0, 1300.0, 4e9] {
                let grid = Ncx2Grid::new(&[x], d);
                let mut w = PoissonWindow::default();
                for &nc in &[0.0, 1e-4, 0.3, 2.0, 9.5, 40.0, 150.0, 399.0, 500.0, 3000.0, 20_000.0, 4.1e9] {
                    w.fill(nc);
                    let got = grid.eval(0, nc, &w);
                    let want = ncx2_with_densities(x, d, nc);
                    assert!((got.cdf - want.cdf).abs() < 1e-13, "cdf d={d} x={x} nc={nc}");
                    for (g, w) in [(got.density, want.density), (got.density_plus2, want.density_plus2)] {
                        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "density d={d} x={x} nc={nc}: {g} vs {w}");
                    }
                }
            }
        }
    }

    #[test]
    fn marcum_special_values() {
        for &m in &[0.5, 1.0, 2.5] {
            for &a in &[0.0, 1.0, 3.0] {
                assert_eq!(marcum_q(m, a, 0.0).unwrap(), 1.0);
            }
        }
        for &b in &[0.1, 1.0, 2.0, 4.0] {
            let got = marcum_q(1.0, 0.0, b).unwrap();
            assert!((got - (-b * b / 2.0f64).exp()).abs() < 1e-14);
        }
        assert!(marcum_q(0.0, 1.0, 1.0).is_err());
        assert!(marcum_q(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn marcum_matches_noncentral_chi2() {
        let q = marcum_q(1.0, 1.0, 1.0).unwrap();
        let f = noncentral_chi2_cdf(1.0, 2, 1.0).unwrap();
        assert!((q - (1.0 - f)).abs() < 1e-8);
    }
}
