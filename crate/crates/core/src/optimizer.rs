//! NAdam and the single-restart training loop.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distrib::{MixtureParams, PriorSpec};
use crate::error::{Error, Result};
use crate::lossmodel::Example;
use crate::objective::{FreeVector, Layout, Objective};
use crate::specfn::QmcPoints;

/// Gradients are rescaled to this ∞-norm before each step.
pub const GRAD_CLIP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
    pub max_steps: usize,
    pub plateau_patience: usize,
    pub plateau_tol: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
            max_steps: 2000,
            plateau_patience: 200,
            plateau_tol: 1e-6,
        }
    }
}

impl NadamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon_hat > 0.0
            && self.max_steps > 0
            && self.plateau_patience > 0
            && self.plateau_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct NadamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl NadamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim] }
    }
}

/// One NAdam update at 1-based `step`; returns the parameter delta.
pub fn nadam_step(state: &mut NadamState, grad: &[f64], step: usize, cfg: &NadamConfig) -> Result<Vec<f64>> {
    if state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::Contract(format!(
            "state of dimension {} for gradient of dimension {}",
            state.m.len(),
            grad.len()
        )));
    }
    if step == 0 {
        return Err(Error::Contract("step index is 1-based".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical("nadam_step", format!("gradient coordinate {i} is {}", grad[i])));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let t = step as i32;
    let c1_next = 1.0 - b1.powi(t + 1);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut delta = Vec::with_capacity(grad.len());
    for ((m, v), &g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = b1 * *m / c1_next + (1.0 - b1) * g / c1;
        let v_hat = *v / c2;
        delta.push(-cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon_hat));
    }
    Ok(delta)
}

/// Outcome of [`minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub steps_taken: usize,
    /// True when the plateau rule stopped the run.
    pub converged: bool,
    /// Best-so-far objective every `TRACE_EVERY` steps, then at the end.
    pub trace: Vec<f64>,
    pub failure: Option<String>,
}

const TRACE_EVERY: usize = 50;

fn clip(grad: &mut [f64]) {
    let norm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    if norm > GRAD_CLIP {
        let s = GRAD_CLIP / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// NAdam with clipping, plateau stopping and best-iterate tracking on an
/// arbitrary differentiable function.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &NadamConfig) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut x = x0;
    let mut state = NadamState::new(x.len());
    let (mut value, mut grad) = f(&x)?;
    if !value.is_finite() {
        return Err(Error::numerical("minimize", "objective at the initial point is not finite"));
    }
    let mut best = (value, x.clone());
    let mut last_improvement = 0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut failure = None;
    let mut steps = 0;
    while steps < cfg.max_steps {
        clip(&mut grad);
        let delta = match nadam_step(&mut state, &grad, steps + 1, cfg) {
            Ok(d) => d,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        x.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
        steps += 1;
        match f(&x) {
            Ok((fv, g)) if fv.is_finite() => {
                value = fv;
                grad = g;
            }
            Ok(_) => {
                failure = Some(format!("non-finite objective at step {steps}"));
                break;
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
        if value < best.0 - cfg.plateau_tol {
            last_improvement = steps;
        }
        if value < best.0 {
            best = (value, x.clone());
        }
        if steps % TRACE_EVERY == 0 {
            trace.push(best.0);
        }
        if steps - last_improvement >= cfg.plateau_patience {
            converged = true;
            break;
        }
    }
    trace.push(best.0);
    Ok(MinimizeResult {
        x: best.1,
        value: best.0,
        steps_taken: steps,
        converged: converged && failure.is_none(),
        trace,
        failure,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartResult {
    pub params: MixtureParams,
    pub objective: f64,
    pub steps_taken: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    pub failure: Option<String>,
}

/// Runs NAdam on the training objective from `init`, returning the best
/// iterate seen.
pub fn run_restart(
    init: &FreeVector,
    data: &[Example],
    lambda: f64,
    prior: &PriorSpec,
    qmc: &QmcPoints,
    cfg: &NadamConfig,
) -> Result<RestartResult> {
    let objective = Objective::new(&init.layout, data, lambda, prior, qmc)?;
    let r = minimize(|v| objective.value_and_gradient(v), init.values.clone(), cfg)?;
    Ok(RestartResult {
        params: init.layout.unpack(&r.x)?,
        objective: r.value,
        steps_taken: r.steps_taken,
        converged: r.converged,
        trace: r.trace,
        failure: r.failure,
    })
}

/// Independent random stream for one (λ, restart) cell.
pub fn restart_rng(master_seed: u64, lambda_index: usize, restart_index: usize) -> ChaCha20Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(((lambda_index as u64) << 32) | restart_index as u64);
    rng
}

/// Random starting point. Centers, when trainable, start at a randomly
/// chosen element of `data` plus N(0, 0.1²) noise.
pub fn init_restart<R: Rng>(layout: &Layout, data: &[Example], rng: &mut R) -> Result<FreeVector> {
    if !layout.centers_known && layout.n > 0 && data.is_empty() {
        return Err(Error::Contract("center initialization needs training data".into()));
    }
    let coef = Normal::new(0.0, 0.5).expect("valid");
    let jitter = Normal::new(0.0, 0.2).expect("valid");
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let f = layout.loc_fields();
    let d = layout.dim;
    let mut v = vec![0.0; layout.len()];
    for i in 0..layout.n {
        let o = layout.locality_offset(i);
        let s = &mut v[o..o + layout.locality_stride()];
        for w in &mut s[..d] {
            *w = coef.sample(rng);
        }
        s[f.bias] = coef.sample(rng);
        s[f.log_sigma] = 0.0;
        s[f.log_k] = 2f64.ln() + jitter.sample(rng);
        s[f.log_tau] = 0.1f64.ln() + jitter.sample(rng);
        if let (Some(c), Some(e)) = (f.center, f.log_eps) {
            let anchor = &data[rng.random_range(0..data.len())].x;
            for (slot, a) in s[c..c + d].iter_mut().zip(anchor) {
                *slot = a + noise.sample(rng);
            }
            s[e] = 0.0;
        }
        if let Some(r) = f.log_rho {
            s[r] = 0.0;
        }
    }
    let o = layout.external_offset();
    for w in &mut v[o..o + d] {
        *w = coef.sample(rng);
    }
    v[o + d] = coef.sample(rng);
    Ok(FreeVector { values: v, layout: layout.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distrib::TaskKind;
    use crate::lossmodel::MetricKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bowl(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * x.iter().map(|a| a * a).sum::<f64>(), x.to_vec()))
    }

    #[test]
    fn zero_gradient_gives_zero_delta() {
        let mut s = NadamState::new(3);
        let d = nadam_step(&mut s, &[0.0; 3], 1, &NadamConfig::default()).unwrap();
        assert_eq!(d, vec![0.0; 3]);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let cfg = NadamConfig::default();
        let mut s = NadamState::new(2);
        let mut d = vec![];
        for t in 1..=5000 {
            d = nadam_step(&mut s, &[3.0, -0.2], t, &cfg).unwrap();
        }
        assert!((d[0] + cfg.learning_rate).abs() < 1e-6, "{d:?}");
        assert!((d[1] - cfg.learning_rate).abs() < 1e-6, "{d:?}");
        // First step by hand: m̂ = g(β₁(1−β₁)/(1−β₁²) + 1), v̂ = g².
        let mut s = NadamState::new(1);
        let d1 = nadam_step(&mut s, &[3.0], 1, &cfg).unwrap();
        let expected = -cfg.learning_rate * (0.09 / 0.19 + 1.0) * 3.0 / (3.0 + 1e-8);
        assert!((d1[0] - expected).abs() < 1e-15, "{} vs {expected}", d1[0]);
    }

    #[test]
    fn step_rejects_bad_input() {
        let cfg = NadamConfig::default();
        let mut s = NadamState::new(2);
        assert!(matches!(nadam_step(&mut s, &[f64::NAN, 0.0], 1, &cfg), Err(Error::Numerical { .. })));
        assert!(nadam_step(&mut s, &[0.0], 1, &cfg).is_err());
        assert!(nadam_step(&mut s, &[0.0, 0.0], 0, &cfg).is_err());
    }

    #[test]
    fn quadratic_bowl_from_five_five() {
        let cfg = NadamConfig::default();
        let mut x = vec![5.0, 5.0];
        let mut s = NadamState::new(2);
        let mut values = vec![];
        let mut hit = None;
        for t in 1..=cfg.max_steps {
            let (f, g) = bowl(&x).unwrap();
            values.push(f);
            let d = nadam_step(&mut s, &g, t, &cfg).unwrap();
            x.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            if hit.is_none() && x.iter().map(|a| a * a).sum::<f64>().sqrt() < 1e-3 {
                hit = Some(t);
            }
        }
        assert!(hit.is_some(), "final x {x:?}");
        let first_increase = values.windows(2).position(|w| w[1] > w[0]);
        // Monotone descent from step 10 until the iterate enters the 1e-3 ball.
        if let Some(i) = first_increase {
            assert!(i >= hit.unwrap() || values[i] < 5e-7, "increase at step {} (value {})", i + 1, values[i]);
        }
    }

    #[test]
    fn ten_dimensional_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10;
        let b: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        // A = BBᵀ/n + 0.1 I.
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>() / n as f64;
            }
            a[i * n + i] += 0.1;
        }
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
            Ok((0.5 * x.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>(), ax))
        };
        let x0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let f0 = f(&x0).unwrap().0;
        let cfg = NadamConfig { plateau_tol: 0.0, plateau_patience: usize::MAX, ..NadamConfig::default() };
        let r = minimize(f, x0, &cfg).unwrap();
        assert!(r.value < 1e-4 * f0, "{} vs {f0}", r.value);
    }

    #[test]
    fn stationary_start_plateaus() {
        let cfg = NadamConfig::default();
        let r = minimize(bowl, vec![0.0, 0.0], &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.steps_taken, cfg.plateau_patience);
        assert_eq!(r.x, vec![0.0, 0.0]);
    }

    #[test]
    fn best_iterate_is_returned_and_trace_nonincreasing() {
        let cfg = NadamConfig { learning_rate: 0.5, ..NadamConfig::default() };
        let r = minimize(bowl, vec![1.0, -2.0], &cfg).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.value, bowl(&r.x).unwrap().0);
    }

    #[test]
    fn failure_keeps_best_finite_iterate() {
        let mut calls = 0;
        let f = |x: &[f64]| {
            calls += 1;
            if calls > 5 {
                Err(Error::numerical("toy", "boom"))
            } else {
                bowl(x)
            }
        };
        let r = minimize(f, vec![1.0], &NadamConfig::default()).unwrap();
        assert!(!r.converged);
        assert!(r.failure.unwrap().contains("boom"));
        assert!(r.value < 0.5);
    }

    fn blobs() -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 0.2).unwrap();
        (0..60)
            .map(|i| {
                let (cx, y) = if i % 2 == 0 { (-0.4, 1.0) } else { (0.4, -1.0) };
                Example::new(vec![cx + n.sample(&mut rng), n.sample(&mut rng)], y)
            })
            .collect()
    }

    #[test]
    fn toy_classification_restart_improves() {
        let data = blobs();
        let layout =
            Layout::new(2, 1, TaskKind::Classification, Some(vec![vec![0.0, 0.0]]), MetricKind::Euclidean).unwrap();
        let prior = PriorSpec::default();
        let qmc = QmcPoints::centered(60).unwrap();
        let init = init_restart(&layout, &data, &mut restart_rng(1, 0, 0)).unwrap();
        let lambda = 2.0 * data.len() as f64;
        let f0 = Objective::new(&layout, &data, lambda, &prior, &qmc).unwrap().value(&init.values).unwrap();
        let cfg = NadamConfig { max_steps: 300, ..NadamConfig::default() };
        let r = run_restart(&init, &data, lambda, &prior, &qmc, &cfg).unwrap();
        assert!(r.objective <= f0);
        assert!(r.objective < 0.9 * f0, "{} vs {f0}", r.objective);
        // Bit-exact repeat.
        let again = run_restart(&init, &data, lambda, &prior, &qmc, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn kl_dominated_restart_returns_to_prior() {
        let data = blobs();
        let layout = Layout::new(2, 1, TaskKind::Classification, None, MetricKind::Euclidean).unwrap();
        let prior = PriorSpec::default();
        let qmc = QmcPoints::centered(60).unwrap();
        let init = init_restart(&layout, &data, &mut restart_rng(5, 1, 2)).unwrap();
        let r = run_restart(&init, &data, 1e-4, &prior, &qmc, &NadamConfig::default()).unwrap();
        let w = &r.params.localities[0].weights;
        assert!(w.iter().map(|a| a * a).sum::<f64>().sqrt() < 0.05, "{w:?}");
        assert!(r.params.external.weights.iter().map(|a| a * a).sum::<f64>().sqrt() < 0.05);
    }

    #[test]
    fn init_is_deterministic_and_positive() {
        let data = blobs();
        for known in [true, false] {
            let centers = known.then(|| vec![vec![0.0, 0.0]; 3]);
            let layout = Layout::new(2, 3, TaskKind::Regression, centers, MetricKind::Euclidean).unwrap();
            let a = init_restart(&layout, &data, &mut restart_rng(9, 3, 4)).unwrap();
            let b = init_restart(&layout, &data, &mut restart_rng(9, 3, 4)).unwrap();
            let c = init_restart(&layout, &data, &mut restart_rng(9, 3, 5)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            let p = a.unpack().unwrap();
            for loc in &p.localities {
                assert!(loc.shape > 0.0 && loc.rate > 0.0);
                assert_eq!(loc.bias_std, 1.0);
                assert_eq!(loc.weight_std, Some(1.0));
            }
        }
    }

    #[test]
    fn centers_start_near_a_training_point() {
        // With N(0, 0.1²) noise in 2-D, P(offset > 0.5) = exp(−12.5) ≈ 3.7e-6.
        let data = blobs();
        let layout = Layout::new(2, 5, TaskKind::Classification, None, MetricKind::Euclidean).unwrap();
        let mut far = 0;
        let mut total = 0;
        for r in 0..200 {
            let p = init_restart(&layout, &data, &mut restart_rng(17, 0, r)).unwrap().unpack().unwrap();
            for loc in &p.localities {
                let c = loc.center_mean.as_ref().unwrap();
                let nearest =
                    data.iter().map(|e| crate::lossmodel::sq_dist(c, &e.x).sqrt()).fold(f64::INFINITY, f64::min);
                total += 1;
                if nearest > 0.5 {
                    far += 1;
                }
                assert_eq!(loc.center_std, Some(1.0));
            }
        }
        assert!(far as f64 <= 0.001 * total as f64, "{far} of {total}");
    }
}
