//! Deterministic (posterior-mean) prediction with overlap handling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distrib::{MixtureParams, TaskKind};
use crate::error::{Error, Result};
use crate::lossmodel::{dot, Example, MetricKind};

/// How an instance covered by several disagreeing localities is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapRule {
    /// Use the member with the smallest distance / radius.
    #[default]
    NearestNormalized,
    /// Use the external model when members disagree.
    ExternalFallback,
    /// Flag disagreeing overlaps as abstentions; they are left out of metrics.
    Abstain,
}

impl OverlapRule {
    pub fn name(self) -> &'static str {
        match self {
            OverlapRule::NearestNormalized => "nearest-normalized",
            OverlapRule::ExternalFallback => "external-fallback",
            OverlapRule::Abstain => "abstain",
        }
    }
}

impl fmt::Display for OverlapRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OverlapRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [OverlapRule::NearestNormalized, OverlapRule::ExternalFallback, OverlapRule::Abstain]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown overlap rule '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicLocality {
    pub center: Vec<f64>,
    /// Mean radius k/τ.
    pub radius: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mean-only predictor extracted from a posterior. Holds no spreads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicModel {
    pub task: TaskKind,
    pub metric: MetricKind,
    pub localities: Vec<DeterministicLocality>,
    pub external_weights: Vec<f64>,
    pub external_bias: f64,
    /// Regression outputs farther apart than this count as disagreement.
    pub ambiguity_tol: f64,
}

impl DeterministicModel {
    pub fn from_params(params: &MixtureParams, ambiguity_tol: f64) -> Self {
        Self {
            task: params.task,
            metric: params.metric,
            localities: params
                .localities
                .iter()
                .enumerate()
                .map(|(i, l)| DeterministicLocality {
                    center: params.center(i).to_vec(),
                    radius: l.mean_radius(),
                    weights: l.weights.clone(),
                    bias: l.bias_mean,
                })
                .collect(),
            external_weights: params.external.weights.clone(),
            external_bias: params.external.bias_mean,
            ambiguity_tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.external_weights.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub member_localities: Vec<usize>,
    /// Raw outputs of the members, aligned with `member_localities`.
    pub per_locality_outputs: Vec<f64>,
    pub external_output: f64,
    /// Class sign or regression value.
    pub resolved: f64,
    pub ambiguous: bool,
    pub abstained: bool,
}

/// sign with sign(0) = +1.
pub fn class_sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn predict(model: &DeterministicModel, x: &[f64], rule: OverlapRule) -> Result<Prediction> {
    if x.len() != model.dim() {
        return Err(Error::Contract(format!(
            "instance of dimension {} for a model of dimension {}",
            x.len(),
            model.dim()
        )));
    }
    let mut members = Vec::new();
    let mut outputs = Vec::new();
    let mut nearest: Option<(usize, f64)> = None;
    for (i, l) in model.localities.iter().enumerate() {
        let dist = model.metric.distance(&l.center, x);
        if dist <= l.radius {
            let out = dot(&l.weights, x) + l.bias;
            members.push(i);
            outputs.push(out);
            let normalized = dist / l.radius;
            if nearest.is_none_or(|(_, best)| normalized < best) {
                nearest = Some((members.len() - 1, normalized));
            }
        }
    }
    let external = dot(&model.external_weights, x) + model.external_bias;
    let ambiguous = members.len() >= 2
        && match model.task {
            TaskKind::Classification => {
                let first = class_sign(outputs[0]);
                outputs.iter().any(|o| class_sign(*o) != first)
            }
            TaskKind::Regression => {
                let (lo, hi) =
                    outputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &o| (a.min(o), b.max(o)));
                hi - lo > model.ambiguity_tol
            }
        };
    let raw = match nearest {
        None => external,
        Some(_) if ambiguous && rule == OverlapRule::ExternalFallback => external,
        Some((slot, _)) => outputs[slot],
    };
    let resolved = match model.task {
        TaskKind::Classification => class_sign(raw),
        TaskKind::Regression => raw,
    };
    Ok(Prediction {
        member_localities: members,
        per_locality_outputs: outputs,
        external_output: external,
        resolved,
        ambiguous,
        abstained: ambiguous && rule == OverlapRule::Abstain,
    })
}

fn scored<'a>(model: &DeterministicModel, data: &'a [Example], rule: OverlapRule) -> Result<Vec<(f64, &'a Example)>> {
    let mut out = Vec::with_capacity(data.len());
    for ex in data {
        let p = predict(model, &ex.x, rule)?;
        if !p.abstained {
            out.push((p.resolved, ex));
        }
    }
    if out.is_empty() {
        return Err(Error::Contract("no scored examples (empty data or all abstained)".into()));
    }
    Ok(out)
}

/// Fraction of correctly signed predictions.
pub fn accuracy(model: &DeterministicModel, data: &[Example], rule: OverlapRule) -> Result<f64> {
    if model.task != TaskKind::Classification {
        return Err(Error::Contract("accuracy needs a classification model".into()));
    }
    let s = scored(model, data, rule)?;
    let correct = s.iter().filter(|(p, ex)| *p == ex.y).count();
    Ok(correct as f64 / s.len() as f64)
}

/// 1 − SSE/SST about the evaluation-set label mean.
pub fn r2_score(model: &DeterministicModel, data: &[Example], rule: OverlapRule) -> Result<f64> {
    if model.task != TaskKind::Regression {
        return Err(Error::Contract("R² needs a regression model".into()));
    }
    let s = scored(model, data, rule)?;
    let pred: Vec<f64> = s.iter().map(|(p, _)| *p).collect();
    let y: Vec<f64> = s.iter().map(|(_, e)| e.y).collect();
    r2_of(&pred, &y)
}

pub fn r2_of(pred: &[f64], y: &[f64]) -> Result<f64> {
    if y.len() < 2 || pred.len() != y.len() {
        return Err(Error::Contract("R² needs at least two paired values".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if sst == 0.0 {
        return Err(Error::Contract("R² is undefined for constant labels".into()));
    }
    let sse: f64 = pred.iter().zip(y).map(|(p, v)| (p - v) * (p - v)).sum();
    Ok(1.0 - sse / sst)
}
