//! Training objective L_S(Q) + KL(Q‖P)/λ over a flat, unconstrained
//! parameter vector, with its gradient.
//!
//! Positive parameters (σ, ρ, ε, k, τ) are stored as logarithms. Locality
//! slices come first, in locality order, followed by the external slice:
//!
//! locality: `[w (d), μ, ln σ, ln k, ln τ, c₀ (d)?, ln ε?, ln ρ?]`
//! external: `[w (d), μ, ln σ, ln ρ?]`
//!
//! where `c₀, ln ε` appear only with unknown centers and `ln ρ` only in
//! regression.

use serde::{Deserialize, Serialize};

use crate::distrib::{kl_total, ExternalPosterior, LocalityPosterior, MixtureParams, PriorSpec, TaskKind};
use crate::error::{Error, Result};
use crate::lossmodel::{dot, pairwise_sum, Example, Membership, MetricKind};
use crate::specfn::{
    gamma_unit_density, normal_pdf, phi_upper, reg_gamma_pq, reg_lower_gamma_dshape, trigamma_raw, QmcPoints,
};

/// Shape of the parameter vector and the non-trainable context needed to
/// rebuild [`MixtureParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dim: usize,
    pub n: usize,
    pub task: TaskKind,
    pub centers_known: bool,
    pub fixed_centers: Vec<Vec<f64>>,
    pub metric: MetricKind,
}

impl Layout {
    pub fn new(
        dim: usize,
        n: usize,
        task: TaskKind,
        fixed_centers: Option<Vec<Vec<f64>>>,
        metric: MetricKind,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("input dimension must be positive".into()));
        }
        let centers_known = fixed_centers.is_some();
        let fixed_centers = fixed_centers.unwrap_or_default();
        if centers_known {
            if fixed_centers.len() != n {
                return Err(Error::Contract(format!("{} centers supplied for n = {n}", fixed_centers.len())));
            }
            if let Some(c) = fixed_centers.iter().find(|c| c.len() != dim) {
                return Err(Error::Contract(format!("center of dimension {} for inputs of dimension {dim}", c.len())));
            }
        } else {
            metric.require_euclidean()?;
        }
        Ok(Self { dim, n, task, centers_known, fixed_centers, metric })
    }

    pub fn of(params: &MixtureParams) -> Self {
        Self {
            dim: params.dim(),
            n: params.n_localities(),
            task: params.task,
            centers_known: params.centers_known,
            fixed_centers: params.fixed_centers.clone(),
            metric: params.metric,
        }
    }

    fn regression(&self) -> bool {
        self.task == TaskKind::Regression
    }

    pub fn locality_stride(&self) -> usize {
        self.dim + 4 + if self.centers_known { 0 } else { self.dim + 1 } + usize::from(self.regression())
    }

    pub fn locality_offset(&self, i: usize) -> usize {
        i * self.locality_stride()
    }

    pub fn external_offset(&self) -> usize {
        self.n * self.locality_stride()
    }

    pub fn len(&self) -> usize {
        self.external_offset() + self.dim + 2 + usize::from(self.regression())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offsets of the named fields within a locality slice.
    pub(crate) fn loc_fields(&self) -> LocFields {
        let d = self.dim;
        let (center, log_eps, next) =
            if self.centers_known { (None, None, d + 4) } else { (Some(d + 4), Some(2 * d + 4), 2 * d + 5) };
        LocFields {
            bias: d,
            log_sigma: d + 1,
            log_k: d + 2,
            log_tau: d + 3,
            center,
            log_eps,
            log_rho: self.regression().then_some(next),
        }
    }

    /// Human-readable name of coordinate `idx`.
    pub fn coordinate_name(&self, idx: usize) -> String {
        let d = self.dim;
        if idx >= self.external_offset() {
            let j = idx - self.external_offset();
            return match j {
                j if j < d => format!("external weight[{j}]"),
                j if j == d => "external bias mean".into(),
                j if j == d + 1 => "external ln bias std".into(),
                _ => "external ln weight std".into(),
            };
        }
        let i = idx / self.locality_stride();
        let j = idx % self.locality_stride();
        let f = self.loc_fields();
        let field = if j < d {
            format!("weight[{j}]")
        } else if j == f.bias {
            "bias mean".into()
        } else if j == f.log_sigma {
            "ln bias std".into()
        } else if j == f.log_k {
            "ln shape".into()
        } else if j == f.log_tau {
            "ln rate".into()
        } else if f.center.is_some_and(|c| j >= c && j < c + d) {
            format!("center[{}]", j - f.center.unwrap())
        } else if Some(j) == f.log_eps {
            "ln center std".into()
        } else {
            "ln weight std".into()
        };
        format!("locality {i} {field}")
    }

    /// Whether the gradient of coordinate `idx` involves no internal finite
    /// difference (everything except the Gamma shapes).
    pub fn is_analytic_coordinate(&self, idx: usize) -> bool {
        idx >= self.external_offset() || idx % self.locality_stride() != self.loc_fields().log_k
    }

    /// Chain rule ∂/∂ln v = v·∂/∂v on the positive coordinates.
    pub(crate) fn to_log_space(&self, params: &MixtureParams, grad: &mut [f64]) {
        let f = self.loc_fields();
        for (i, loc) in params.localities.iter().enumerate() {
            let s = &mut grad[self.locality_offset(i)..self.locality_offset(i) + self.locality_stride()];
            s[f.log_sigma] *= loc.bias_std;
            s[f.log_k] *= loc.shape;
            s[f.log_tau] *= loc.rate;
            if let Some(e) = f.log_eps {
                s[e] *= loc.center_std.expect("validated");
            }
            if let Some(r) = f.log_rho {
                s[r] *= loc.weight_std.expect("validated");
            }
        }
        let o = self.external_offset() + self.dim;
        grad[o + 1] *= params.external.bias_std;
        if let Some(rho) = params.external.weight_std {
            grad[o + 2] *= rho;
        }
    }

    pub fn pack(&self, params: &MixtureParams) -> Result<FreeVector> {
        params.validate()?;
        if Layout::of(params) != *self {
            return Err(Error::Contract("parameters do not match the layout".into()));
        }
        let f = self.loc_fields();
        let mut v = vec![0.0; self.len()];
        for (i, loc) in params.localities.iter().enumerate() {
            let s = &mut v[self.locality_offset(i)..self.locality_offset(i) + self.locality_stride()];
            s[..self.dim].copy_from_slice(&loc.weights);
            s[f.bias] = loc.bias_mean;
            s[f.log_sigma] = loc.bias_std.ln();
            s[f.log_k] = loc.shape.ln();
            s[f.log_tau] = loc.rate.ln();
            if let (Some(c), Some(e)) = (f.center, f.log_eps) {
                s[c..c + self.dim].copy_from_slice(loc.center_mean.as_deref().expect("validated"));
                s[e] = loc.center_std.expect("validated").ln();
            }
            if let Some(r) = f.log_rho {
                s[r] = loc.weight_std.expect("validated").ln();
            }
        }
        let o = self.external_offset();
        let e = &params.external;
        v[o..o + self.dim].copy_from_slice(&e.weights);
        v[o + self.dim] = e.bias_mean;
        v[o + self.dim + 1] = e.bias_std.ln();
        if self.regression() {
            v[o + self.dim + 2] = e.weight_std.expect("validated").ln();
        }
        Ok(FreeVector { values: v, layout: self.clone() })
    }

    pub fn unpack(&self, v: &[f64]) -> Result<MixtureParams> {
        if v.len() != self.len() {
            return Err(Error::Contract(format!("vector of length {} for layout of length {}", v.len(), self.len())));
        }
        let f = self.loc_fields();
        let d = self.dim;
        let localities = (0..self.n)
            .map(|i| {
                let s = &v[self.locality_offset(i)..self.locality_offset(i) + self.locality_stride()];
                LocalityPosterior {
                    weights: s[..d].to_vec(),
                    bias_mean: s[f.bias],
                    bias_std: s[f.log_sigma].exp(),
                    shape: s[f.log_k].exp(),
                    rate: s[f.log_tau].exp(),
                    center_mean: f.center.map(|c| s[c..c + d].to_vec()),
                    center_std: f.log_eps.map(|e| s[e].exp()),
                    weight_std: f.log_rho.map(|r| s[r].exp()),
                }
            })
            .collect();
        let o = self.external_offset();
        let external = ExternalPosterior {
            weights: v[o..o + d].to_vec(),
            bias_mean: v[o + d],
            bias_std: v[o + d + 1].exp(),
            weight_std: self.regression().then(|| v[o + d + 2].exp()),
        };
        let params = MixtureParams {
            localities,
            external,
            task: self.task,
            centers_known: self.centers_known,
            fixed_centers: self.fixed_centers.clone(),
            metric: self.metric,
        };
        if let Err(e) = params.validate() {
            return Err(self.diagnose(v).unwrap_or(e));
        }
        Ok(params)
    }

    /// Names the first coordinate that is non-finite or whose exponential
    /// leaves the positive finite range.
    fn diagnose(&self, v: &[f64]) -> Option<Error> {
        let f = self.loc_fields();
        for (idx, &x) in v.iter().enumerate() {
            let is_log = if idx >= self.external_offset() {
                idx - self.external_offset() > self.dim
            } else {
                let j = idx % self.locality_stride();
                j == f.log_sigma || j == f.log_k || j == f.log_tau || Some(j) == f.log_eps || Some(j) == f.log_rho
            };
            let bad = !x.is_finite() || (is_log && !(x.exp() > 0.0 && x.exp().is_finite()));
            if bad {
                return Some(Error::numerical(
                    "objective",
                    format!("parameter '{}' has unusable value {x}", self.coordinate_name(idx)),
                ));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LocFields {
    pub bias: usize,
    pub log_sigma: usize,
    pub log_k: usize,
    pub log_tau: usize,
    pub center: Option<usize>,
    pub log_eps: Option<usize>,
    pub log_rho: Option<usize>,
}

/// Unconstrained parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl FreeVector {
    pub fn from_params(params: &MixtureParams) -> Result<Self> {
        Layout::of(params).pack(params)
    }

    pub fn unpack(&self) -> Result<MixtureParams> {
        self.layout.unpack(&self.values)
    }
}

/// Objective evaluator with per-dataset caches.
pub struct Objective<'a> {
    layout: Layout,
    data: &'a [Example],
    xsq: Vec<f64>,
    /// Distances to the fixed centers, example-major.
    known_dist: Vec<f64>,
    lambda: f64,
    prior: PriorSpec,
    qmc: &'a QmcPoints,
}

/// Value of the objective split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub risk: f64,
    pub kl: f64,
    pub value: f64,
}

struct PredictorGrad {
    loss: f64,
    /// ∂loss/∂(⟨w,x⟩ + μ).
    d_out: f64,
    d_sigma: f64,
    d_rho: f64,
}

fn predictor_grad(
    task: TaskKind,
    w: &[f64],
    mu: f64,
    sigma: f64,
    rho: f64,
    x: &[f64],
    xsq: f64,
    y: f64,
) -> PredictorGrad {
    let out = dot(w, x) + mu;
    match task {
        TaskKind::Classification => {
            let var = sigma * sigma + xsq;
            let scale = var.sqrt();
            let s = y * out / scale;
            let d_s = -normal_pdf(s);
            PredictorGrad { loss: phi_upper(s), d_out: d_s * y / scale, d_sigma: -d_s * s * sigma / var, d_rho: 0.0 }
        }
        TaskKind::Regression => {
            let r = out - y;
            PredictorGrad {
                loss: xsq * rho * rho + sigma * sigma + r * r,
                d_out: 2.0 * r,
                d_sigma: 2.0 * sigma,
                d_rho: 2.0 * rho * xsq,
            }
        }
    }
}

impl<'a> Objective<'a> {
    pub fn new(
        layout: &Layout,
        data: &'a [Example],
        lambda: f64,
        prior: &PriorSpec,
        qmc: &'a QmcPoints,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Contract(format!("lambda must be positive, got {lambda}")));
        }
        if data.is_empty() {
            return Err(Error::Contract("objective over an empty sample".into()));
        }
        prior.validate()?;
        for ex in data {
            if ex.x.len() != layout.dim {
                return Err(Error::Contract(format!(
                    "example of dimension {} for layout dimension {}",
                    ex.x.len(),
                    layout.dim
                )));
            }
            if layout.task == TaskKind::Classification && ex.y != 1.0 && ex.y != -1.0 {
                return Err(Error::Contract(format!("classification label must be ±1, got {}", ex.y)));
            }
        }
        let xsq = data.iter().map(|e| dot(&e.x, &e.x)).collect();
        let mut known_dist = Vec::new();
        if layout.centers_known {
            known_dist.reserve(data.len() * layout.n);
            for ex in data {
                for c in &layout.fixed_centers {
                    known_dist.push(layout.metric.distance(c, &ex.x));
                }
            }
        }
        Ok(Self { layout: layout.clone(), data, xsq, known_dist, lambda, prior: *prior, qmc })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn wrap_numerical(&self, v: &[f64], what: &str) -> Error {
        self.layout
            .diagnose(v)
            .unwrap_or_else(|| Error::numerical("objective", format!("non-finite {what} at a finite parameter point")))
    }

    pub fn parts(&self, v: &[f64]) -> Result<ObjectiveParts> {
        let params = self.layout.unpack(v)?;
        let membership = Membership::prepare(&params, Some(self.qmc), false)?;
        let n = self.layout.n;
        let mut losses = Vec::with_capacity(self.data.len());
        let mut p = vec![0.0; n];
        let mut a = vec![0.0; n];
        for (m, ex) in self.data.iter().enumerate() {
            let xsq = self.xsq[m];
            for (i, loc) in params.localities.iter().enumerate() {
                p[i] = match &membership {
                    Membership::Known => reg_gamma_pq(loc.shape, loc.rate * self.known_dist[m * n + i]).1,
                    Membership::Unknown(_) => membership.probability(&params, i, &ex.x),
                };
                a[i] = crate::lossmodel::predictor_loss(
                    params.task,
                    &loc.weights,
                    loc.bias_mean,
                    loc.bias_std,
                    loc.weight_std.unwrap_or(1.0),
                    &ex.x,
                    xsq,
                    ex.y,
                );
            }
            let e = &params.external;
            let a_ext = crate::lossmodel::predictor_loss(
                params.task,
                &e.weights,
                e.bias_mean,
                e.bias_std,
                e.weight_std.unwrap_or(1.0),
                &ex.x,
                xsq,
                ex.y,
            );
            losses.push(crate::lossmodel::combine(&p, &a, a_ext));
        }
        let risk = pairwise_sum(&losses) / self.data.len() as f64;
        let kl = kl_total(&params, &self.prior);
        let value = risk + kl / self.lambda;
        if !value.is_finite() {
            return Err(self.wrap_numerical(v, "objective"));
        }
        Ok(ObjectiveParts { risk, kl, value })
    }

    pub fn value(&self, v: &[f64]) -> Result<f64> {
        Ok(self.parts(v)?.value)
    }

    /// Objective value and its gradient with respect to `v`.
    pub fn value_and_gradient(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        let params = self.layout.unpack(v)?;
        let (value, mut grad) = self.value_and_natural_gradient(v, &params)?;
        self.layout.to_log_space(&params, &mut grad);
        Ok((value, grad))
    }

    /// Like [`Self::value_and_gradient`], but positive parameters are
    /// differentiated on their natural scale (σ rather than ln σ).
    pub(crate) fn value_and_natural_gradient(&self, v: &[f64], params: &MixtureParams) -> Result<(f64, Vec<f64>)> {
        let layout = &self.layout;
        let membership = Membership::prepare(params, Some(self.qmc), true)?;
        let n = layout.n;
        let d = layout.dim;
        let f = layout.loc_fields();
        let stride = layout.locality_stride();
        let ext_o = layout.external_offset();
        let inv_m = 1.0 / self.data.len() as f64;
        let mut grad = vec![0.0; layout.len()];
        let mut losses = Vec::with_capacity(self.data.len());

        let mut p = vec![0.0; n];
        let mut preds: Vec<PredictorGrad> = Vec::with_capacity(n);
        // ∂p_i/∂(k, τ) for known centers, or the full Υ gradient.
        let mut dp_k = vec![0.0; n];
        let mut dp_tau = vec![0.0; n];
        let mut dp_eps = vec![0.0; n];
        let mut dp_dist2 = vec![0.0; n];
        let mut prefix = vec![1.0; n + 1];
        let mut suffix = vec![1.0; n + 1];

        for (m, ex) in self.data.iter().enumerate() {
            let xsq = self.xsq[m];
            preds.clear();
            for (i, loc) in params.localities.iter().enumerate() {
                match &membership {
                    Membership::Known => {
                        let t = self.known_dist[m * n + i];
                        let z = loc.rate * t;
                        p[i] = reg_gamma_pq(loc.shape, z).1;
                        dp_k[i] = -reg_lower_gamma_dshape(loc.shape, z);
                        dp_tau[i] = if t > 0.0 { -t * gamma_unit_density(loc.shape, z) } else { 0.0 };
                    }
                    Membership::Unknown(kernels) => {
                        let c0 = loc.center_mean.as_deref().expect("validated");
                        let g = kernels[i].grad(crate::lossmodel::sq_dist(c0, &ex.x));
                        p[i] = g.value;
                        dp_k[i] = g.d_k;
                        dp_tau[i] = g.d_tau;
                        dp_eps[i] = g.d_eps;
                        dp_dist2[i] = g.d_dist2;
                    }
                }
                preds.push(predictor_grad(
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
            let pe = predictor_grad(
                params.task,
                &e.weights,
                e.bias_mean,
                e.bias_std,
                e.weight_std.unwrap_or(1.0),
                &ex.x,
                xsq,
                ex.y,
            );

            for i in 0..n {
                prefix[i + 1] = prefix[i] * (1.0 - p[i]);
            }
            for i in (0..n).rev() {
                suffix[i] = suffix[i + 1] * (1.0 - p[i]);
            }
            let outside = prefix[n];
            let mut loss = outside * pe.loss;
            for i in 0..n {
                loss += p[i] * preds[i].loss;
            }
            losses.push(loss);

            for (i, loc) in params.localities.iter().enumerate() {
                let s = &mut grad[i * stride..(i + 1) * stride];
                let pr = &preds[i];
                let wt = p[i] * inv_m;
                for (g, xv) in s[..d].iter_mut().zip(&ex.x) {
                    *g += wt * pr.d_out * xv;
                }
                s[f.bias] += wt * pr.d_out;
                s[f.log_sigma] += wt * pr.d_sigma;
                if let Some(r) = f.log_rho {
                    s[r] += wt * pr.d_rho;
                }
                let d_p = (pr.loss - pe.loss * prefix[i] * suffix[i + 1]) * inv_m;
                s[f.log_k] += d_p * dp_k[i];
                s[f.log_tau] += d_p * dp_tau[i];
                if let (Some(c), Some(le)) = (f.center, f.log_eps) {
                    let c0 = loc.center_mean.as_deref().expect("validated");
                    for (k, (cv, xv)) in c0.iter().zip(&ex.x).enumerate() {
                        s[c + k] += d_p * dp_dist2[i] * 2.0 * (cv - xv);
                    }
                    s[le] += d_p * dp_eps[i];
                }
            }
            let wt = outside * inv_m;
            let s = &mut grad[ext_o..];
            for (g, xv) in s[..d].iter_mut().zip(&ex.x) {
                *g += wt * pe.d_out * xv;
            }
            s[d] += wt * pe.d_out;
            s[d + 1] += wt * pe.d_sigma;
            if layout.regression() {
                s[d + 2] += wt * pe.d_rho;
            }
        }

        let inv_lambda = 1.0 / self.lambda;
        self.add_kl_gradient(params, inv_lambda, &mut grad);
        let risk = pairwise_sum(&losses) * inv_m;
        let value = risk + kl_total(params, &self.prior) * inv_lambda;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(self.wrap_numerical(v, "objective or gradient"));
        }
        Ok((value, grad))
    }

    /// Adds `scale · ∂KL/∂θ` on the natural scale.
    fn add_kl_gradient(&self, params: &MixtureParams, scale: f64, grad: &mut [f64]) {
        let layout = &self.layout;
        let d = layout.dim;
        let df = d as f64;
        let f = layout.loc_fields();
        let (k0, t0) = (self.prior.gamma_shape, self.prior.gamma_rate);
        for (i, loc) in params.localities.iter().enumerate() {
            let s = &mut grad[layout.locality_offset(i)..layout.locality_offset(i) + layout.locality_stride()];
            let rho = loc.weight_std.unwrap_or(1.0);
            for (g, w) in s[..d].iter_mut().zip(&loc.weights) {
                *g += scale * w;
            }
            s[f.bias] += scale * loc.bias_mean;
            s[f.log_sigma] += scale * (loc.bias_std - 1.0 / loc.bias_std);
            let (k, tau) = (loc.shape, loc.rate);
            let dk = (k - k0) * trigamma_raw(k) + t0 / tau - 1.0;
            let dtau = k0 / tau - k * t0 / (tau * tau);
            s[f.log_k] += scale * dk;
            s[f.log_tau] += scale * dtau;
            if let (Some(c), Some(le)) = (f.center, f.log_eps) {
                let c0 = loc.center_mean.as_deref().expect("validated");
                for (g, cv) in s[c..c + d].iter_mut().zip(c0) {
                    *g += scale * cv;
                }
                let eps = loc.center_std.expect("validated");
                s[le] += scale * df * (eps - 1.0 / eps);
            }
            if let Some(r) = f.log_rho {
                s[r] += scale * df * (rho - 1.0 / rho);
            }
        }
        let e = &params.external;
        let o = layout.external_offset();
        for (g, w) in grad[o..o + d].iter_mut().zip(&e.weights) {
            *g += scale * w;
        }
        grad[o + d] += scale * e.bias_mean;
        grad[o + d + 1] += scale * (e.bias_std - 1.0 / e.bias_std);
        if let Some(rho) = e.weight_std {
            grad[o + d + 2] += scale * df * (rho - 1.0 / rho);
        }
    }
}

/// L_S(Q) + KL(Q‖P)/λ at `v`.
pub fn objective_value(
    v: &FreeVector,
    data: &[Example],
    lambda: f64,
    prior: &PriorSpec,
    qmc: &QmcPoints,
) -> Result<f64> {
    Objective::new(&v.layout, data, lambda, prior, qmc)?.value(&v.values)
}

/// Gradient of [`objective_value`] with respect to `v.values`.
pub fn objective_gradient(
    v: &FreeVector,
    data: &[Example],
    lambda: f64,
    prior: &PriorSpec,
    qmc: &QmcPoints,
) -> Result<Vec<f64>> {
    Ok(Objective::new(&v.layout, data, lambda, prior, qmc)?.value_and_gradient(&v.values)?.1)
}
