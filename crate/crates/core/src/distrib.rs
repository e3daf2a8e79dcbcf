//! Posterior parameter containers and closed-form KL divergences against
//! the fixed priors (standard Gaussians everywhere, Gamma on radii).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lossmodel::MetricKind;
use crate::specfn::digamma_raw;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::Classification => "clf",
            TaskKind::Regression => "reg",
        }
    }
}

/// Posterior over one locality's predictor, radius and (optionally) center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityPosterior {
    pub weights: Vec<f64>,
    pub bias_mean: f64,
    pub bias_std: f64,
    pub shape: f64,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_std: Option<f64>,
}

impl LocalityPosterior {
    /// Posterior mean radius k/τ.
    pub fn mean_radius(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Posterior over the predictor used outside every locality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPosterior {
    pub weights: Vec<f64>,
    pub bias_mean: f64,
    pub bias_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub localities: Vec<LocalityPosterior>,
    pub external: ExternalPosterior,
    pub task: TaskKind,
    pub centers_known: bool,
    #[serde(default)]
    pub fixed_centers: Vec<Vec<f64>>,
    #[serde(default)]
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { gamma_shape: 2.0, gamma_rate: 0.1 }
    }
}

impl PriorSpec {
    pub fn new(gamma_shape: f64, gamma_rate: f64) -> Result<Self> {
        let p = Self { gamma_shape, gamma_rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_shape > 0.0 && self.gamma_rate > 0.0)
            || !self.gamma_shape.is_finite()
            || !self.gamma_rate.is_finite()
        {
            return Err(Error::Contract(format!(
                "prior Gamma parameters must be positive, got ({}, {})",
                self.gamma_shape, self.gamma_rate
            )));
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("{name} must be positive and finite, got {v}")))
    }
}

fn finite_all(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{name} contains non-finite entries")))
    }
}

impl MixtureParams {
    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.external.weights.len()
    }

    pub fn n_localities(&self) -> usize {
        self.localities.len()
    }

    /// Center of locality `i`: the fixed center, or the posterior mean.
    pub fn center(&self, i: usize) -> &[f64] {
        if self.centers_known {
            &self.fixed_centers[i]
        } else {
            self.localities[i].center_mean.as_deref().expect("validated unknown-centers params carry center means")
        }
    }

    /// Checks every structural and positivity invariant.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let regression = self.task == TaskKind::Regression;
        finite_all("external weights", &self.external.weights)?;
        if !self.external.bias_mean.is_finite() {
            return Err(Error::Contract("external bias mean must be finite".into()));
        }
        positive("external bias std", self.external.bias_std)?;
        match (regression, self.external.weight_std) {
            (true, Some(r)) => positive("external weight std", r)?,
            (true, None) => return Err(Error::Contract("regression requires an external weight std".into())),
            (false, Some(_)) => return Err(Error::Contract("classification carries no weight std".into())),
            (false, None) => {}
        }
        if self.centers_known {
            if self.fixed_centers.len() != self.localities.len() {
                return Err(Error::Contract(format!(
                    "{} fixed centers for {} localities",
                    self.fixed_centers.len(),
                    self.localities.len()
                )));
            }
            for (i, c) in self.fixed_centers.iter().enumerate() {
                if c.len() != d {
                    return Err(Error::Contract(format!("fixed center {i} has dimension {} != {d}", c.len())));
                }
                finite_all("fixed center", c)?;
            }
        } else {
            if !self.fixed_centers.is_empty() {
                return Err(Error::Contract("fixed centers given in unknown-centers mode".into()));
            }
            self.metric.require_euclidean()?;
        }
        for (i, loc) in self.localities.iter().enumerate() {
            if loc.weights.len() != d {
                return Err(Error::Contract(format!(
                    "locality {i} weights have dimension {} != {d}",
                    loc.weights.len()
                )));
            }
            finite_all("locality weights", &loc.weights)?;
            if !loc.bias_mean.is_finite() {
                return Err(Error::Contract(format!("locality {i} bias mean must be finite")));
            }
            positive("bias std", loc.bias_std)?;
            positive("shape", loc.shape)?;
            positive("rate", loc.rate)?;
            match (regression, loc.weight_std) {
                (true, Some(r)) => positive("weight std", r)?,
                (true, None) => return Err(Error::Contract(format!("locality {i} needs a weight std in regression"))),
                (false, Some(_)) => {
                    return Err(Error::Contract(format!("locality {i} carries a weight std in classification")))
                }
                (false, None) => {}
            }
            match (self.centers_known, &loc.center_mean, loc.center_std) {
                (true, None, None) => {}
                (false, Some(c), Some(eps)) => {
                    if c.len() != d {
                        return Err(Error::Contract(format!("locality {i} center has dimension {} != {d}", c.len())));
                    }
                    finite_all("center mean", c)?;
                    positive("center std", eps)?;
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "locality {i}: center fields must be present exactly in unknown-centers mode"
                    )))
                }
            }
        }
        Ok(())
    }

    /// The parameter point equal to the prior (KL = 0) for a given shape.
    pub fn at_prior(
        d: usize,
        task: TaskKind,
        fixed_centers: Option<Vec<Vec<f64>>>,
        n: usize,
        prior: &PriorSpec,
    ) -> Self {
        let regression = task == TaskKind::Regression;
        let centers_known = fixed_centers.is_some();
        let localities = (0..n)
            .map(|_| LocalityPosterior {
                weights: vec![0.0; d],
                bias_mean: 0.0,
                bias_std: 1.0,
                shape: prior.gamma_shape,
                rate: prior.gamma_rate,
                center_mean: (!centers_known).then(|| vec![0.0; d]),
                center_std: (!centers_known).then_some(1.0),
                weight_std: regression.then_some(1.0),
            })
            .collect();
        Self {
            localities,
            external: ExternalPosterior {
                weights: vec![0.0; d],
                bias_mean: 0.0,
                bias_std: 1.0,
                weight_std: regression.then_some(1.0),
            },
            task,
            centers_known,
            fixed_centers: fixed_centers.unwrap_or_default(),
            metric: MetricKind::Euclidean,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            params: &'a MixtureParams,
        }
        Ok(serde_json::to_string_pretty(&Doc { schema_version: SCHEMA_VERSION, params: self })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            schema_version: u32,
            params: MixtureParams,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        doc.params.validate()?;
        Ok(doc.params)
    }
}

/// KL(N(mean1, std1² I) ‖ N(mean2, std2² I)).
pub fn kl_gaussian_iso(mean1: &[f64], std1: f64, mean2: &[f64], std2: f64) -> Result<f64> {
    if mean1.len() != mean2.len() {
        return Err(Error::Contract(format!("Gaussian KL dimension mismatch: {} vs {}", mean1.len(), mean2.len())));
    }
    positive("std1", std1)?;
    positive("std2", std2)?;
    Ok(kl_gauss_raw(mean1, std1, mean2, std2))
}

fn kl_gauss_raw(mean1: &[f64], std1: f64, mean2: &[f64], std2: f64) -> f64 {
    let d = mean1.len() as f64;
    let ratio = (std1 / std2).powi(2);
    let sq: f64 = mean1.iter().zip(mean2).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * (-d * ratio.ln() - d + d * ratio + sq / (std2 * std2))
}

/// KL(Γ(k1, τ1) ‖ Γ(k2, τ2)) in the shape–rate parameterization.
pub fn kl_gamma(k1: f64, tau1: f64, k2: f64, tau2: f64) -> Result<f64> {
    for (name, v) in [("k1", k1), ("tau1", tau1), ("k2", k2), ("tau2", tau2)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::domain("kl_gamma", format!("{name} must be positive, got {v}")));
        }
    }
    Ok(kl_gamma_raw(k1, tau1, k2, tau2))
}

pub(crate) fn kl_gamma_raw(k1: f64, tau1: f64, k2: f64, tau2: f64) -> f64 {
    (k1 - k2) * digamma_raw(k1) - libm::lgamma(k1)
        + libm::lgamma(k2)
        + k2 * (tau1 / tau2).ln()
        + k1 * (tau2 - tau1) / tau1
}

/// Sum of the factorized KL terms for the variant implied by `params`.
///
/// Assumes `params` satisfies [`MixtureParams::validate`].
pub fn kl_total(params: &MixtureParams, prior: &PriorSpec) -> f64 {
    let d = params.dim();
    let zeros = vec![0.0; d];
    let mut total = external_kl(&params.external, &zeros);
    for loc in &params.localities {
        total += locality_kl(loc, &zeros, prior);
    }
    total
}

fn external_kl(ext: &ExternalPosterior, zeros: &[f64]) -> f64 {
    kl_gauss_raw(&ext.weights, ext.weight_std.unwrap_or(1.0), zeros, 1.0)
        + kl_gauss_raw(&[ext.bias_mean], ext.bias_std, &[0.0], 1.0)
}

fn locality_kl(loc: &LocalityPosterior, zeros: &[f64], prior: &PriorSpec) -> f64 {
    let mut kl = kl_gauss_raw(&loc.weights, loc.weight_std.unwrap_or(1.0), zeros, 1.0)
        + kl_gauss_raw(&[loc.bias_mean], loc.bias_std, &[0.0], 1.0)
        + kl_gamma_raw(loc.shape, loc.rate, prior.gamma_shape, prior.gamma_rate);
    if let (Some(c), Some(eps)) = (&loc.center_mean, loc.center_std) {
        kl += kl_gauss_raw(c, eps, zeros, 1.0);
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    fn ln_gamma_pdf(k: f64, tau: f64, x: f64) -> f64 {
        k * tau.ln() + (k - 1.0) * x.ln() - tau * x - libm::lgamma(k)
    }

    #[test]
    fn gaussian_kl_reference_values() {
        let w = [0.3, -1.2];
        assert_eq!(kl_gaussian_iso(&w, 0.7, &w, 0.7).unwrap(), 0.0);
        let got = kl_gaussian_iso(&w, 1.0, &[0.0, 0.0], 1.0).unwrap();
        assert!((got - (0.09 + 1.44) / 2.0).abs() < 1e-15);
        let got = kl_gaussian_iso(&[0.0; 3], 0.5, &[0.0; 3], 1.0).unwrap();
        assert!((got - 3.0 * (4f64.ln() + 0.25 - 1.0) / 2.0).abs() < 1e-10);
        assert!((got - 0.954_442).abs() < 1e-6);
        assert!(kl_gaussian_iso(&[0.0; 2], 1.0, &[0.0; 3], 1.0).is_err());
    }

    #[test]
    fn gamma_kl_reference_values() {
        assert!(kl_gamma(3.0, 0.4, 3.0, 0.4).unwrap().abs() < 1e-15);
        let got = kl_gamma(2.0, 0.2, 2.0, 0.1).unwrap();
        assert!((got - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-10);
        for &(k1, t1, k2, t2) in &[(2.0, 0.2, 2.0, 0.1), (3.0, 1.0, 2.0, 0.1)] {
            let f = |x: f64| {
                if x == 0.0 {
                    return 0.0;
                }
                let lq = ln_gamma_pdf(k1, t1, x);
                lq.exp() * (lq - ln_gamma_pdf(k2, t2, x))
            };
            let hi = (k1 + 60.0 * k1.sqrt()) / t1;
            let quad = simpson(f, 0.0, hi, 400_000);
            assert!((kl_gamma(k1, t1, k2, t2).unwrap() - quad).abs() < 1e-8, "{k1} {t1}");
        }
        assert!(kl_gamma(0.0, 1.0, 1.0, 1.0).is_err());
    }

    fn clf_example() -> MixtureParams {
        let mut p =
            MixtureParams::at_prior(2, TaskKind::Classification, Some(vec![vec![0.0, 0.0]]), 1, &PriorSpec::default());
        p.localities[0].weights = vec![1.0, 0.0];
        p.localities[0].bias_mean = 0.5;
        p
    }

    #[test]
    fn total_kl_reference_values() {
        let prior = PriorSpec::default();
        for task in [TaskKind::Classification, TaskKind::Regression] {
            for centers in [Some(vec![vec![1.0, 2.0]; 3]), None] {
                let p = MixtureParams::at_prior(2, task, centers, 3, &prior);
                p.validate().unwrap();
                assert_eq!(kl_total(&p, &prior), 0.0);
            }
        }
        let p = clf_example();
        p.validate().unwrap();
        assert!((kl_total(&p, &prior) - 0.625).abs() < 1e-12);
    }

    #[test]
    fn unknown_minus_known_is_center_term() {
        let prior = PriorSpec::default();
        let mut known = MixtureParams::at_prior(3, TaskKind::Regression, Some(vec![vec![0.0; 3]; 2]), 2, &prior);
        let mut unknown = MixtureParams::at_prior(3, TaskKind::Regression, None, 2, &prior);
        let centers = [[0.5, -1.0, 2.0], [0.0, 0.3, 0.1]];
        let eps = [0.4, 1.7];
        let mut expected = 0.0;
        for i in 0..2 {
            for p in [&mut known, &mut unknown] {
                p.localities[i].weights = vec![0.1 * i as f64, 1.0, -0.5];
                p.localities[i].shape = 3.0 + i as f64;
                p.localities[i].rate = 0.7;
                p.localities[i].weight_std = Some(0.8);
            }
            unknown.localities[i].center_mean = Some(centers[i].to_vec());
            unknown.localities[i].center_std = Some(eps[i]);
            let sq: f64 = centers[i].iter().map(|c| c * c).sum();
            expected += -3.0 * eps[i].ln() + 3.0 * (eps[i] * eps[i] - 1.0) / 2.0 + sq / 2.0;
        }
        let diff = kl_total(&unknown, &prior) - kl_total(&known, &prior);
        assert!((diff - expected).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_malformed_params() {
        let prior = PriorSpec::default();
        let mut p = clf_example();
        p.localities[0].weight_std = Some(1.0);
        assert!(p.validate().is_err());
        let mut p = clf_example();
        p.localities[0].rate = 0.0;
        assert!(p.validate().is_err());
        let mut p = MixtureParams::at_prior(2, TaskKind::Regression, None, 1, &prior);
        p.localities[0].center_std = None;
        assert!(p.validate().is_err());
        let mut p = clf_example();
        p.fixed_centers.clear();
        assert!(p.validate().is_err());
        assert!(PriorSpec::new(0.0, 1.0).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut p = MixtureParams::at_prior(2, TaskKind::Regression, None, 2, &PriorSpec::default());
        p.localities[0].weights = vec![0.1 + 0.2, std::f64::consts::PI / 3.0];
        p.localities[1].shape = 1.0 / 3.0;
        p.external.bias_mean = -1e-300;
        let text = p.to_json().unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        let back = MixtureParams::from_json(&text).unwrap();
        assert_eq!(back, p);
        for (a, b) in back.localities[0].weights.iter().zip(&p.localities[0].weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(MixtureParams::from_json(&bumped).is_err());
    }

    fn arb_params() -> impl Strategy<Value = MixtureParams> {
        (
            1usize..4,
            0usize..3,
            any::<bool>(),
            any::<bool>(),
            proptest::collection::vec(-3.0f64..3.0, 40),
            proptest::collection::vec(0.05f64..4.0, 40),
        )
            .prop_map(|(d, n, regression, known, reals, pos)| {
                let task = if regression { TaskKind::Regression } else { TaskKind::Classification };
                let centers = known.then(|| vec![vec![0.0; d]; n]);
                let mut p = MixtureParams::at_prior(d, task, centers, n, &PriorSpec::default());
                let mut ri = reals.into_iter();
                let mut pi = pos.into_iter();
                for loc in &mut p.localities {
                    loc.weights.iter_mut().for_each(|w| *w = ri.next().unwrap());
                    loc.bias_mean = ri.next().unwrap();
                    loc.bias_std = pi.next().unwrap();
                    loc.shape = pi.next().unwrap() * 3.0;
                    loc.rate = pi.next().unwrap() * 0.2;
                    if let Some(c) = &mut loc.center_mean {
                        c.iter_mut().for_each(|v| *v = ri.next().unwrap());
                        loc.center_std = Some(pi.next().unwrap());
                    }
                    if regression {
                        loc.weight_std = Some(pi.next().unwrap());
                    }
                }
                p.external.weights.iter_mut().for_each(|w| *w = ri.next().unwrap());
                p.external.bias_mean = ri.next().unwrap();
                p.external.bias_std = pi.next().unwrap();
                if regression {
                    p.external.weight_std = Some(pi.next().unwrap());
                }
                p
            })
    }

    proptest! {
        #[test]
        fn kl_total_is_nonnegative_and_decomposes(p in arb_params()) {
            p.validate().unwrap();
            let prior = PriorSpec::default();
            let total = kl_total(&p, &prior);
            prop_assert!(total >= 0.0);
            let d = p.dim();
            let zeros = vec![0.0; d];
            let mut parts = kl_gaussian_iso(&p.external.weights, p.external.weight_std.unwrap_or(1.0), &zeros, 1.0).unwrap()
                + kl_gaussian_iso(&[p.external.bias_mean], p.external.bias_std, &[0.0], 1.0).unwrap();
            for loc in &p.localities {
                parts += kl_gaussian_iso(&loc.weights, loc.weight_std.unwrap_or(1.0), &zeros, 1.0).unwrap();
                parts += kl_gaussian_iso(&[loc.bias_mean], loc.bias_std, &[0.0], 1.0).unwrap();
                parts += kl_gamma(loc.shape, loc.rate, 2.0, 0.1).unwrap();
                if let (Some(c), Some(e)) = (&loc.center_mean, loc.center_std) {
                    parts += kl_gaussian_iso(c, e, &zeros, 1.0).unwrap();
                }
            }
            prop_assert!((total - parts).abs() <= 1e-10 * (1.0 + total.abs()));
        }

        #[test]
        fn gamma_kl_nonnegative(k1 in 0.05f64..50.0, t1 in 0.01f64..20.0, k2 in 0.05f64..50.0, t2 in 0.01f64..20.0) {
            prop_assert!(kl_gamma(k1, t1, k2, t2).unwrap() >= -1e-12);
        }
    }
}
