//! Vicinity functions, closed-form posterior losses and empirical risk.
//!
//! Every loss has the shape Σ_i p_i·A_i + Π_i(1 − p_i)·A_ext, where p_i is
//! the probability that the instance lies in locality i and A is the
//! expected loss of a Gaussian linear predictor.

use serde::{Deserialize, Serialize};

use crate::distrib::{MixtureParams, TaskKind};
use crate::error::{Error, Result};
use crate::specfn::{phi_upper, reg_gamma_pq, QmcPoints, UpsilonKernel};

/// One labeled instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Example {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[default]
    Euclidean,
    Manhattan,
}

impl MetricKind {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            MetricKind::Euclidean => sq_dist(a, b).sqrt(),
            MetricKind::Manhattan => a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum(),
        }
    }

    /// Unknown centers are integrated against a Gaussian, which yields the
    /// noncentral χ² form only for Euclidean balls.
    pub fn require_euclidean(self) -> Result<()> {
        match self {
            MetricKind::Euclidean => Ok(()),
            other => Err(Error::Contract(format!(
                "the {other:?} metric cannot be used with unknown centers: the closed form for a \
                 Gaussian-distributed center is valid only for the Euclidean metric"
            ))),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(MetricKind::Euclidean),
            "manhattan" | "l1" => Ok(MetricKind::Manhattan),
            other => Err(Error::Input(format!("unknown metric '{other}' (expected euclidean or manhattan)"))),
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Hard vicinity: true iff d(c, x) ≤ β.
pub fn vicinity(c: &[f64], x: &[f64], beta: f64, metric: MetricKind) -> Result<bool> {
    if c.len() != x.len() {
        return Err(Error::Contract(format!("vicinity dimension mismatch: {} vs {}", c.len(), x.len())));
    }
    Ok(metric.distance(c, x) <= beta)
}

/// Pairwise summation in index order; the tree shape depends only on the
/// length, so results do not depend on scheduling.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Expected loss of a Gaussian linear predictor with mean (w, μ), bias
/// spread σ and weight spread ρ (1 in classification).
pub(crate) fn predictor_loss(
    task: TaskKind,
    w: &[f64],
    mu: f64,
    sigma: f64,
    rho: f64,
    x: &[f64],
    xsq: f64,
    y: f64,
) -> f64 {
    let out = dot(w, x) + mu;
    match task {
        TaskKind::Classification => phi_upper(y * out / (sigma * sigma + xsq).sqrt()),
        TaskKind::Regression => {
            let r = out - y;
            xsq * rho * rho + sigma * sigma + r * r
        }
    }
}

/// Σ p_i A_i + Π(1 − p_i) A_ext.
pub(crate) fn combine(p: &[f64], a: &[f64], a_ext: f64) -> f64 {
    let mut total = 0.0;
    let mut outside = 1.0;
    for (pi, ai) in p.iter().zip(a) {
        total += pi * ai;
        outside *= 1.0 - pi;
    }
    total + outside * a_ext
}

/// Membership-probability source for each locality.
pub(crate) enum Membership {
    Known,
    Unknown(Vec<UpsilonKernel>),
}

impl Membership {
    pub(crate) fn prepare(params: &MixtureParams, qmc: Option<&QmcPoints>, with_grad: bool) -> Result<Self> {
        if params.centers_known {
            return Ok(Membership::Known);
        }
        let qmc = qmc.ok_or_else(|| Error::Contract("unknown centers require QMC points".into()))?;
        let d = params.dim() as f64;
        let kernels = params
            .localities
            .iter()
            .map(|loc| UpsilonKernel::new(d, loc.shape, loc.rate, loc.center_std.expect("validated"), qmc, with_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Membership::Unknown(kernels))
    }

    pub(crate) fn probability(&self, params: &MixtureParams, i: usize, x: &[f64]) -> f64 {
        match self {
            Membership::Known => {
                let loc = &params.localities[i];
                let t = params.metric.distance(&params.fixed_centers[i], x);
                reg_gamma_pq(loc.shape, loc.rate * t).1
            }
            Membership::Unknown(kernels) => {
                let c0 = params.localities[i].center_mean.as_deref().expect("validated");
                kernels[i].value(sq_dist(c0, x))
            }
        }
    }
}

fn q_loss_with(params: &MixtureParams, ex: &Example, membership: &Membership) -> f64 {
    let xsq = dot(&ex.x, &ex.x);
    let n = params.n_localities();
    let mut p = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for (i, loc) in params.localities.iter().enumerate() {
        p.push(membership.probability(params, i, &ex.x));
        a.push(predictor_loss(
            params.task,
            &loc.weights,
            loc.bias_mean,
            loc.bias_std,
            loc.weight_std.unwrap_or(1.0),
            &ex.x,
            xsq,
            ex.y,
        ));
    }
    let e = &params.external;
    let a_ext =
        predictor_loss(params.task, &e.weights, e.bias_mean, e.bias_std, e.weight_std.unwrap_or(1.0), &ex.x, xsq, ex.y);
    combine(&p, &a, a_ext)
}

fn check_variant(params: &MixtureParams, ex: &Example, task: TaskKind, known: bool) -> Result<()> {
    if params.task != task {
        return Err(Error::Contract(format!("loss for {task:?} called with {:?} parameters", params.task)));
    }
    if params.centers_known != known {
        return Err(Error::Contract(format!(
            "loss for {} centers called with {} parameters",
            if known { "known" } else { "unknown" },
            if params.centers_known { "known-center" } else { "unknown-center" }
        )));
    }
    check_example(params, ex)
}

fn check_example(params: &MixtureParams, ex: &Example) -> Result<()> {
    if ex.x.len() != params.dim() {
        return Err(Error::Contract(format!(
            "example has dimension {} but the model has {}",
            ex.x.len(),
            params.dim()
        )));
    }
    if params.task == TaskKind::Classification && ex.y != 1.0 && ex.y != -1.0 {
        return Err(Error::Contract(format!("classification label must be ±1, got {}", ex.y)));
    }
    Ok(())
}

/// Posterior loss for classification with known centers.
pub fn q_loss_clf_known(params: &MixtureParams, ex: &Example) -> Result<f64> {
    check_variant(params, ex, TaskKind::Classification, true)?;
    Ok(q_loss_with(params, ex, &Membership::Known))
}

/// Posterior loss for regression with known centers.
pub fn q_loss_reg_known(params: &MixtureParams, ex: &Example) -> Result<f64> {
    check_variant(params, ex, TaskKind::Regression, true)?;
    Ok(q_loss_with(params, ex, &Membership::Known))
}

/// Posterior loss for classification with Gaussian-distributed centers.
pub fn q_loss_clf_unknown(params: &MixtureParams, ex: &Example, qmc: &QmcPoints) -> Result<f64> {
    check_variant(params, ex, TaskKind::Classification, false)?;
    Ok(q_loss_with(params, ex, &Membership::prepare(params, Some(qmc), false)?))
}

/// Posterior loss for regression with Gaussian-distributed centers.
pub fn q_loss_reg_unknown(params: &MixtureParams, ex: &Example, qmc: &QmcPoints) -> Result<f64> {
    check_variant(params, ex, TaskKind::Regression, false)?;
    Ok(q_loss_with(params, ex, &Membership::prepare(params, Some(qmc), false)?))
}

/// Posterior loss for whichever variant `params` describes.
pub fn q_loss(params: &MixtureParams, ex: &Example, qmc: &QmcPoints) -> Result<f64> {
    check_example(params, ex)?;
    Ok(q_loss_with(params, ex, &Membership::prepare(params, Some(qmc), false)?))
}

/// Mean posterior loss over `data`.
pub fn empirical_risk(params: &MixtureParams, data: &[Example], qmc: &QmcPoints) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("empirical risk of an empty sample".into()));
    }
    params.validate()?;
    for ex in data {
        check_example(params, ex)?;
    }
    let membership = Membership::prepare(params, Some(qmc), false)?;
    let losses: Vec<f64> = data.iter().map(|ex| q_loss_with(params, ex, &membership)).collect();
    Ok(pairwise_sum(&losses) / data.len() as f64)
}
