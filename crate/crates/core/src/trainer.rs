//! The training protocol: split, preprocess, sweep the λ′ grid with
//! random restarts, select on validation, report the bound.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Pipeline, PreprocessOptions, RawDataset};
use crate::distrib::{kl_total, MixtureParams, PriorSpec, TaskKind, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::lossmodel::{empirical_risk, Example, MetricKind};
use crate::objective::Layout;
use crate::optimizer::{init_restart, restart_rng, run_restart, NadamConfig, RestartResult};
use crate::predictor::{accuracy, r2_score, DeterministicModel, OverlapRule};
use crate::specfn::QmcPoints;

/// Stream id reserved for the data split, away from (λ, restart) streams.
const SPLIT_STREAM: u64 = u64::MAX;

pub fn default_lambda_primes() -> Vec<f64> {
    (0..17).map(|i| 1.0 + 0.25 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n: usize,
    pub task: TaskKind,
    pub centers_known: bool,
    /// Known centers in raw input coordinates; mapped through the fitted
    /// pipeline before training.
    pub fixed_centers: Option<Vec<Vec<f64>>>,
    pub lambda_primes: Vec<f64>,
    /// `None` means 10·n, at least 10.
    pub restarts_per_lambda: Option<usize>,
    pub split_ratios: (f64, f64, f64),
    pub master_seed: u64,
    pub qmc_count: usize,
    pub nadam: NadamConfig,
    pub prior: PriorSpec,
    pub metric: MetricKind,
    pub overlap_rule: OverlapRule,
    pub preprocess: PreprocessOptions,
    pub sub_gaussian_sigma: Option<f64>,
    pub delta: Option<f64>,
}

impl TrainConfig {
    pub fn new(task: TaskKind, n: usize, fixed_centers: Option<Vec<Vec<f64>>>) -> Self {
        Self {
            n,
            task,
            centers_known: fixed_centers.is_some(),
            fixed_centers,
            lambda_primes: default_lambda_primes(),
            restarts_per_lambda: None,
            split_ratios: (0.70, 0.15, 0.15),
            master_seed: 0,
            qmc_count: 60,
            nadam: NadamConfig::default(),
            prior: PriorSpec::default(),
            metric: MetricKind::Euclidean,
            overlap_rule: OverlapRule::default(),
            preprocess: PreprocessOptions::default(),
            sub_gaussian_sigma: None,
            delta: None,
        }
    }

    pub fn restarts(&self) -> usize {
        self.restarts_per_lambda.unwrap_or((10 * self.n).max(10))
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_ratios;
        if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 || a <= 0.0 {
            return Err(Error::Contract(format!(
                "split ratios {:?} must be nonnegative, sum to 1, with a positive train share",
                self.split_ratios
            )));
        }
        if self.lambda_primes.is_empty() || self.lambda_primes.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Contract(format!("lambda primes must be positive, got {:?}", self.lambda_primes)));
        }
        if self.restarts() == 0 {
            return Err(Error::Contract("at least one restart per lambda is required".into()));
        }
        if self.qmc_count == 0 {
            return Err(Error::Contract("qmc_count must be positive".into()));
        }
        match (&self.fixed_centers, self.centers_known) {
            (Some(c), true) if c.len() != self.n => {
                return Err(Error::Contract(format!("{} known centers supplied for n = {}", c.len(), self.n)));
            }
            (None, true) => return Err(Error::Contract("known-centers mode needs the centers".into())),
            (Some(_), false) => return Err(Error::Contract("centers supplied in unknown-centers mode".into())),
            _ => {}
        }
        if !self.centers_known {
            self.metric.require_euclidean()?;
        }
        if self.sub_gaussian_sigma.is_some() != self.delta.is_some() {
            return Err(Error::Contract("the full bound needs both sigma and delta".into()));
        }
        self.prior.validate()?;
        self.nadam.validate()
    }
}

/// Index partition of the source rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..m` cut into floor-sized valid/test parts, with
/// every remainder going to train.
pub fn split_indices(m: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    if m < 10 {
        return Err(Error::Contract(format!("splitting needs at least 10 examples, got {m}")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_valid = (m as f64 * ratios.1).floor() as usize;
    let n_test = (m as f64 * ratios.2).floor() as usize;
    let n_train = m - n_valid - n_test;
    Ok(SplitIndices {
        train: idx[..n_train].to_vec(),
        valid: idx[n_train..n_train + n_valid].to_vec(),
        test: idx[n_train + n_valid..].to_vec(),
    })
}

/// Splits a preprocessed dataset by position.
pub fn split(data: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let s = split_indices(data.len(), ratios, seed)?;
    let ids = |rows: &[usize]| rows.iter().map(|&i| data.row_ids[i]).collect::<Vec<_>>();
    Ok((data.subset(&ids(&s.train)), data.subset(&ids(&s.valid)), data.subset(&ids(&s.test))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub empirical_risk: f64,
    pub kl: f64,
    pub lambda: f64,
    pub core: f64,
    pub full_bound: Option<f64>,
    pub sub_gaussian_sigma: Option<f64>,
    pub delta: Option<f64>,
    pub m: usize,
}

/// Core bound L_S(Q) + KL/λ and, given σ and δ, the full bound
/// core + ln(2/δ)/λ + λσ²/(2m).
pub fn bound_report(
    params: &MixtureParams,
    train: &[Example],
    lambda: f64,
    prior: &PriorSpec,
    qmc: &QmcPoints,
    sigma: Option<f64>,
    delta: Option<f64>,
) -> Result<BoundReport> {
    if !(lambda > 0.0) {
        return Err(Error::Contract(format!("lambda must be positive, got {lambda}")));
    }
    if sigma.is_some() && delta.is_none() {
        return Err(Error::Contract("sigma given without delta".into()));
    }
    if let Some(s) = sigma {
        if !(s > 0.0) {
            return Err(Error::Contract(format!("sigma must be positive, got {s}")));
        }
    }
    if let Some(d) = delta {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::Contract(format!("delta must lie in (0, 1), got {d}")));
        }
    }
    let risk = empirical_risk(params, train, qmc)?;
    let kl = kl_total(params, prior);
    let core = risk + kl / lambda;
    let m = train.len();
    let full_bound = match (sigma, delta) {
        (Some(s), Some(d)) => Some(core + (2.0 / d).ln() / lambda + lambda * s * s / (2.0 * m as f64)),
        _ => None,
    };
    Ok(BoundReport { empirical_risk: risk, kl, lambda, core, full_bound, sub_gaussian_sigma: sigma, delta, m })
}

/// Per-λ′ outcome of the grid sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda_prime: f64,
    pub lambda: f64,
    pub restarts: usize,
    pub failed_restarts: usize,
    /// Objective of the best restart; `None` when every restart failed.
    pub best_objective: Option<f64>,
    pub best_restart: Option<usize>,
    pub validation_metric: Option<f64>,
    pub core: Option<f64>,
    pub empirical_risk: Option<f64>,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub lambda_index: usize,
    pub restart_index: usize,
    pub restarts_executed: usize,
    pub split_sizes: (usize, usize, usize),
    pub package_version: String,
}

/// Trained model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub schema_version: u32,
    pub posterior: MixtureParams,
    pub deterministic: DeterministicModel,
    pub bound: BoundReport,
    pub chosen_lambda_prime: f64,
    pub validation_metric: f64,
    pub lambda_summaries: Vec<LambdaSummary>,
    pub config: TrainConfig,
    pub pipeline: Pipeline,
    pub provenance: Provenance,
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            other => return Err(Error::Input(format!("unsupported model schema version {other:?}"))),
        }
        let model: FittedModel = serde_json::from_value(value)?;
        model.posterior.validate()?;
        Ok(model)
    }

    pub fn task(&self) -> TaskKind {
        self.posterior.task
    }

    /// Accuracy (classification) or R² (regression) with the stored rule.
    pub fn score(&self, data: &[Example]) -> Result<f64> {
        validation_score(&self.deterministic, data, self.config.overlap_rule)
    }
}

fn validation_score(model: &DeterministicModel, data: &[Example], rule: OverlapRule) -> Result<f64> {
    match model.task {
        TaskKind::Classification => accuracy(model, data, rule),
        TaskKind::Regression => r2_score(model, data, rule),
    }
}

/// Everything produced by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FittedModel,
    pub split: SplitIndices,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Every restart, indexed `[λ index][restart index]`.
    pub restarts: Vec<Vec<std::result::Result<RestartResult, String>>>,
}

fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    q(0.75) - q(0.25)
}

/// Runs the protocol on `raw` with a worker pool of `jobs` threads
/// (0 = rayon default). Results do not depend on `jobs`.
pub fn train(raw: &RawDataset, cfg: &TrainConfig, jobs: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if raw.task != cfg.task {
        return Err(Error::Contract(format!("data task {:?} does not match configured task {:?}", raw.task, cfg.task)));
    }
    let split = split_indices(raw.n_rows(), cfg.split_ratios, cfg.master_seed)?;
    let pipeline = Pipeline::fit(raw, &split.train, &cfg.preprocess)?;
    let all = pipeline.apply(raw, true)?;
    let (train_ds, valid_ds, test_ds) = (all.subset(&split.train), all.subset(&split.valid), all.subset(&split.test));
    if train_ds.is_empty() || valid_ds.is_empty() {
        return Err(Error::Input("train or validation partition is empty after preprocessing".into()));
    }
    let train_ex = train_ds.examples();
    let valid_ex = valid_ds.examples();
    let centers = match &cfg.fixed_centers {
        Some(c) => Some(c.iter().map(|p| pipeline.transform_point(p)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let layout = Layout::new(all.dim(), cfg.n, cfg.task, centers, cfg.metric)?;
    let qmc = QmcPoints::centered(cfg.qmc_count)?;
    let m_train = train_ex.len();
    let ambiguity_tol = match cfg.task {
        TaskKind::Regression => 0.1 * iqr(&train_ds.labels),
        TaskKind::Classification => 0.0,
    };

    let restarts = cfg.restarts();
    let cells: Vec<(usize, usize)> =
        (0..cfg.lambda_primes.len()).flat_map(|l| (0..restarts).map(move |r| (l, r))).collect();
    let run_cell = |&(l, r): &(usize, usize)| -> std::result::Result<RestartResult, String> {
        let lambda = cfg.lambda_primes[l] * m_train as f64;
        let mut rng = restart_rng(cfg.master_seed, l, r);
        let init = init_restart(&layout, &train_ex, &mut rng).map_err(|e| e.to_string())?;
        let res = run_restart(&init, &train_ex, lambda, &cfg.prior, &qmc, &cfg.nadam).map_err(|e| e.to_string())?;
        if let Some(f) = &res.failure {
            log::debug!("restart ({l}, {r}) stopped early: {f}");
        }
        Ok(res)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Training(format!("cannot start worker pool: {e}")))?;
    let flat: Vec<_> = pool.install(|| cells.par_iter().map(run_cell).collect());
    let mut grid: Vec<Vec<_>> = Vec::with_capacity(cfg.lambda_primes.len());
    let mut it = flat.into_iter();
    for _ in 0..cfg.lambda_primes.len() {
        grid.push(it.by_ref().take(restarts).collect());
    }

    let mut summaries = Vec::new();
    // (validation metric, core, λ index, restart index, params, bound)
    let mut best: Option<(f64, f64, usize, usize, MixtureParams, BoundReport)> = None;
    for (l, row) in grid.iter().enumerate() {
        let lambda_prime = cfg.lambda_primes[l];
        let lambda = lambda_prime * m_train as f64;
        let failed = row.iter().filter(|r| r.is_err()).count();
        let winner = row.iter().enumerate().filter_map(|(i, r)| r.as_ref().ok().map(|r| (i, r))).fold(
            None::<(usize, &RestartResult)>,
            |acc, (i, r)| match acc {
                Some((_, b)) if b.objective <= r.objective => acc,
                _ => Some((i, r)),
            },
        );
        let mut summary = LambdaSummary {
            lambda_prime,
            lambda,
            restarts,
            failed_restarts: failed,
            best_objective: None,
            best_restart: None,
            validation_metric: None,
            core: None,
            empirical_risk: None,
            kl: None,
        };
        let Some((ri, res)) = winner else {
            log::warn!("every restart failed at lambda' = {lambda_prime}; skipping it");
            summaries.push(summary);
            continue;
        };
        debug_assert!(row.iter().flatten().all(|r| res.objective <= r.objective));
        let det = DeterministicModel::from_params(&res.params, ambiguity_tol);
        let metric = validation_score(&det, &valid_ex, cfg.overlap_rule)?;
        let bound = bound_report(&res.params, &train_ex, lambda, &cfg.prior, &qmc, cfg.sub_gaussian_sigma, cfg.delta)?;
        summary.best_objective = Some(res.objective);
        summary.best_restart = Some(ri);
        summary.validation_metric = Some(metric);
        summary.core = Some(bound.core);
        summary.empirical_risk = Some(bound.empirical_risk);
        summary.kl = Some(bound.kl);
        summaries.push(summary);
        let better = match &best {
            None => true,
            Some((bm, bc, bl, ..)) => {
                metric > *bm
                    || (metric == *bm
                        && (bound.core < *bc || (bound.core == *bc && lambda_prime < cfg.lambda_primes[*bl])))
            }
        };
        if better {
            best = Some((metric, bound.core, l, ri, res.params.clone(), bound));
        }
    }
    let Some((metric, _, l, ri, params, bound)) = best else {
        return Err(Error::Training("every restart failed for every lambda".into()));
    };
    let model = FittedModel {
        schema_version: SCHEMA_VERSION,
        deterministic: DeterministicModel::from_params(&params, ambiguity_tol),
        posterior: params,
        bound,
        chosen_lambda_prime: cfg.lambda_primes[l],
        validation_metric: metric,
        lambda_summaries: summaries,
        config: cfg.clone(),
        pipeline,
        provenance: Provenance {
            master_seed: cfg.master_seed,
            lambda_index: l,
            restart_index: ri,
            restarts_executed: cells.len(),
            split_sizes: (train_ds.len(), valid_ds.len(), test_ds.len()),
            package_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    };
    Ok(TrainOutcome { model, split, train: train_ds, valid: valid_ds, test: test_ds, restarts: grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, Scenario, SyntheticSpec};

    #[test]
    fn split_sizes() {
        let s = split_indices(100, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (70, 15, 15));
        let s = split_indices(101, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (71, 15, 15));
        assert_eq!(split_indices(101, (0.7, 0.15, 0.15), 1).unwrap(), s);
        assert_ne!(split_indices(101, (0.7, 0.15, 0.15), 2).unwrap(), s);
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(split_indices(9, (0.7, 0.15, 0.15), 1).is_err());
    }

    #[test]
    fn split_of_dataset() {
        let (raw, _) = generate(&SyntheticSpec { size: 40, ..SyntheticSpec::new(Scenario::ClfCase1, 3) }).unwrap();
        let ds = crate::dataio::preprocess(&raw, &(0..40).collect::<Vec<_>>(), &PreprocessOptions::default()).unwrap();
        let (a, b, c) = split(&ds, (0.7, 0.15, 0.15), 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (28, 6, 6));
    }

    #[test]
    fn restart_count_defaults() {
        let cfg = TrainConfig::new(TaskKind::Classification, 2, Some(vec![vec![0.0, 0.0]; 2]));
        assert_eq!(cfg.restarts() * cfg.lambda_primes.len(), 340);
        assert_eq!(TrainConfig::new(TaskKind::Classification, 0, Some(vec![])).restarts(), 10);
        assert_eq!(default_lambda_primes().last(), Some(&5.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(TaskKind::Classification, 2, None);
        cfg.metric = MetricKind::Manhattan;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("valid only for the Euclidean metric"), "{e}");
        let mut cfg = TrainConfig::new(TaskKind::Classification, 2, Some(vec![vec![0.0, 0.0]]));
        assert!(cfg.validate().is_err());
        cfg.fixed_centers = Some(vec![vec![0.0, 0.0]; 2]);
        cfg.validate().unwrap();
        cfg.split_ratios = (0.5, 0.3, 0.3);
        assert!(cfg.validate().is_err());
        cfg.split_ratios = (0.7, 0.15, 0.15);
        cfg.sub_gaussian_sigma = Some(1.0);
        assert!(cfg.validate().is_err());
    }

    fn small(task: TaskKind) -> (RawDataset, TrainConfig) {
        let scenario = if task == TaskKind::Classification { Scenario::ClfCase1 } else { Scenario::RegCase1 };
        let (raw, truth) = generate(&SyntheticSpec { size: 300, ..SyntheticSpec::new(scenario, 11) }).unwrap();
        let mut cfg = TrainConfig::new(task, truth.centers.len(), Some(truth.centers.clone()));
        cfg.lambda_primes = vec![1.0, 3.0];
        cfg.restarts_per_lambda = Some(2);
        cfg.nadam.max_steps = 150;
        cfg.master_seed = 4;
        (raw, cfg)
    }

    #[test]
    fn small_protocol_runs_and_is_consistent() {
        for task in [TaskKind::Classification, TaskKind::Regression] {
            let (raw, cfg) = small(task);
            let out = train(&raw, &cfg, 1).unwrap();
            let m = &out.model;
            assert_eq!(m.provenance.restarts_executed, 4);
            assert_eq!(m.lambda_summaries.len(), 2);
            for (row, s) in out.restarts.iter().zip(&m.lambda_summaries) {
                let best = s.best_objective.unwrap();
                assert!(row.iter().flatten().all(|r| best <= r.objective));
            }
            let b = &m.bound;
            assert!((b.core - b.empirical_risk - b.kl / b.lambda).abs() <= 1e-12);
            assert_eq!(b.lambda, m.chosen_lambda_prime * out.train.len() as f64);
            for (l, d) in m.posterior.localities.iter().zip(&m.deterministic.localities) {
                assert_eq!(d.radius, l.shape / l.rate);
                assert!(d.radius > 0.0);
                assert_eq!(d.weights, l.weights);
            }
            let json = m.to_json().unwrap();
            assert_eq!(&FittedModel::from_json(&json).unwrap(), m);
            // Selection rule: no other λ has a strictly better validation metric.
            let v = m.validation_metric;
            assert!(m.lambda_summaries.iter().all(|s| s.validation_metric.unwrap() <= v));
        }
    }

    #[test]
    fn results_do_not_depend_on_job_count() {
        let (raw, cfg) = small(TaskKind::Classification);
        let a = train(&raw, &cfg, 1).unwrap().model.to_json().unwrap();
        let b = train(&raw, &cfg, 3).unwrap().model.to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_restart_kl_dominated_is_the_winner() {
        let (raw, mut cfg) = small(TaskKind::Classification);
        cfg.lambda_primes = vec![1e-6];
        cfg.restarts_per_lambda = Some(1);
        let out = train(&raw, &cfg, 1).unwrap();
        let only = out.restarts[0][0].as_ref().unwrap();
        assert_eq!(out.model.posterior, only.params);
        assert_eq!((out.model.provenance.lambda_index, out.model.provenance.restart_index), (0, 0));
    }

    #[test]
    fn bound_report_fields() {
        let (raw, cfg) = small(TaskKind::Regression);
        let all: Vec<usize> = (0..raw.n_rows()).collect();
        let ds = crate::dataio::preprocess(&raw, &all, &cfg.preprocess).unwrap();
        let ex = ds.examples();
        let prior = PriorSpec::default();
        let qmc = QmcPoints::centered(60).unwrap();
        let p = MixtureParams::at_prior(1, TaskKind::Regression, Some(vec![vec![0.0]]), 1, &prior);
        let r = bound_report(&p, &ex, 50.0, &prior, &qmc, None, None).unwrap();
        assert_eq!(r.kl, 0.0);
        assert_eq!(r.core, r.empirical_risk);
        assert!(r.full_bound.is_none());
        let f = bound_report(&p, &ex, 50.0, &prior, &qmc, Some(2.0), Some(0.05)).unwrap();
        let expected = r.core + (2.0f64 / 0.05).ln() / 50.0 + 50.0 * 4.0 / (2.0 * ex.len() as f64);
        assert!((f.full_bound.unwrap() - expected).abs() <= 1e-12);
        assert!(bound_report(&p, &ex, 50.0, &prior, &qmc, Some(2.0), None).is_err());
    }
}
