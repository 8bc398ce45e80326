//! From per-step feature samples to the final behaviour characterisation:
//! aggregation, population standardisation, mutual-information weighting and
//! behaviour distance.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formalism::{schema_hash, StateLayout};

pub const DEFAULT_DELTA: f64 = 0.25;
pub const DURATION_NAME: &str = "simulation length";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdbcError {
    #[error("no feature samples to aggregate")]
    EmptySamples,
    #[error("feature schema mismatch: expected {expected:#x}, got {got:#x}")]
    SchemaMismatch { expected: u64, got: u64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("steps elapsed {steps} outside [1, {max_steps}]")]
    InvalidSteps { steps: usize, max_steps: usize },
    #[error("mutual information needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("empty population")]
    EmptyPopulation,
}

fn check_len(expected: usize, got: usize) -> Result<(), SdbcError> {
    if expected != got {
        return Err(SdbcError::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Feature values extracted from one task-state snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSnapshot {
    pub values: Vec<f64>,
    pub schema_id: u64,
}

/// Names of the `2F + 1` characterisation components for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterisationSchema {
    feature_names: Vec<String>,
    names: Vec<String>,
    feature_schema_id: u64,
}

impl CharacterisationSchema {
    pub fn new(feature_names: Vec<String>) -> Self {
        let feature_schema_id = schema_hash(feature_names.iter().map(String::as_str));
        let mut names: Vec<String> = feature_names.iter().map(|n| format!("{n} (M)")).collect();
        names.extend(feature_names.iter().map(|n| format!("{n} (F)")));
        names.push(DURATION_NAME.to_string());
        Self {
            feature_names,
            names,
            feature_schema_id,
        }
    }

    pub fn from_layout(layout: &StateLayout) -> Self {
        Self::new(layout.feature_names())
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Component names: means, then finals, then duration.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn feature_schema_id(&self) -> u64 {
        self.feature_schema_id
    }
}

/// Aggregated characterisation `[mean(f_1..F), final(f_1..F), duration]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCharacterisation {
    pub values: Vec<f64>,
    pub schema: Arc<CharacterisationSchema>,
}

impl RawCharacterisation {
    pub fn new(values: Vec<f64>, schema: Arc<CharacterisationSchema>) -> Result<Self, SdbcError> {
        check_len(schema.len(), values.len())?;
        Ok(Self { values, schema })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl AsRef<[f64]> for RawCharacterisation {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub fn aggregate(
    schema: &Arc<CharacterisationSchema>,
    samples: &[FeatureSnapshot],
    steps_elapsed: usize,
    max_steps: usize,
) -> Result<RawCharacterisation, SdbcError> {
    let mut acc = FeatureAccumulator::new(schema.clone());
    for s in samples {
        acc.push(s)?;
    }
    acc.finish(steps_elapsed, max_steps)
}

/// Streaming form of [`aggregate`]: keeps a running sum and the last sample.
#[derive(Debug, Clone)]
pub struct FeatureAccumulator {
    schema: Arc<CharacterisationSchema>,
    sum: Vec<f64>,
    last: Vec<f64>,
    count: usize,
}

impl FeatureAccumulator {
    pub fn new(schema: Arc<CharacterisationSchema>) -> Self {
        let f = schema.feature_count();
        Self {
            schema,
            sum: vec![0.0; f],
            last: vec![0.0; f],
            count: 0,
        }
    }

    pub fn push(&mut self, sample: &FeatureSnapshot) -> Result<(), SdbcError> {
        if sample.schema_id != self.schema.feature_schema_id() {
            return Err(SdbcError::SchemaMismatch {
                expected: self.schema.feature_schema_id(),
                got: sample.schema_id,
            });
        }
        check_len(self.sum.len(), sample.values.len())?;
        self.push_values(&sample.values);
        Ok(())
    }

    /// Adds one sample already known to follow this schema.
    pub fn push_values(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.sum.len());
        for (s, v) in self.sum.iter_mut().zip(values) {
            *s += v;
        }
        self.last.copy_from_slice(values);
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(
        &self,
        steps_elapsed: usize,
        max_steps: usize,
    ) -> Result<RawCharacterisation, SdbcError> {
        if self.count == 0 {
            return Err(SdbcError::EmptySamples);
        }
        if steps_elapsed == 0 || steps_elapsed > max_steps {
            return Err(SdbcError::InvalidSteps {
                steps: steps_elapsed,
                max_steps,
            });
        }
        let n = self.count as f64;
        let mut values = Vec::with_capacity(self.schema.len());
        values.extend(self.sum.iter().map(|s| s / n));
        values.extend_from_slice(&self.last);
        values.push(steps_elapsed as f64 / max_steps as f64);
        Ok(RawCharacterisation {
            values,
            schema: self.schema.clone(),
        })
    }
}

/// Element-wise mean characterisation and mean fitness over trials.
pub fn aggregate_trials(
    per_trial: &[RawCharacterisation],
    per_trial_fitness: &[f64],
) -> Result<(RawCharacterisation, f64), SdbcError> {
    let first = per_trial.first().ok_or(SdbcError::EmptySamples)?;
    check_len(per_trial.len(), per_trial_fitness.len())?;
    let n = per_trial.len() as f64;
    let mut values = vec![0.0; first.len()];
    for trial in per_trial {
        if trial.schema != first.schema {
            return Err(SdbcError::SchemaMismatch {
                expected: first.schema.feature_schema_id(),
                got: trial.schema.feature_schema_id(),
            });
        }
        for (acc, v) in values.iter_mut().zip(&trial.values) {
            *acc += v / n;
        }
    }
    let fitness = per_trial_fitness.iter().map(|f| f / n).sum();
    Ok((
        RawCharacterisation {
            values,
            schema: first.schema.clone(),
        },
        fitness,
    ))
}

/// Per-component mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardisationCoefficients {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StandardisationCoefficients {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

pub fn compute_standardisation<V: AsRef<[f64]>>(
    population: &[V],
) -> Result<StandardisationCoefficients, SdbcError> {
    let first = population
        .first()
        .ok_or(SdbcError::EmptyPopulation)?
        .as_ref();
    let dim = first.len();
    let n = population.len() as f64;
    let mut mu = vec![0.0; dim];
    for b in population {
        let b = b.as_ref();
        check_len(dim, b.len())?;
        for (m, v) in mu.iter_mut().zip(b) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for b in population {
        for ((s, v), m) in var.iter_mut().zip(b.as_ref()).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    let sigma = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(StandardisationCoefficients { mu, sigma })
}

/// `(b_k - μ_k) / σ_k`, or 0 for components with `σ_k = 0`.
pub fn apply_standardisation(
    b: &[f64],
    c: &StandardisationCoefficients,
) -> Result<Vec<f64>, SdbcError> {
    check_len(c.len(), b.len())?;
    Ok(b.iter()
        .zip(c.mu.iter().zip(&c.sigma))
        .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
        .collect())
}

/// Number of histogram bins per variable for the MI estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MiBins {
    /// `clamp(ceil(sqrt(n)), 4, 16)`
    #[default]
    Auto,
    Fixed(usize),
}

impl MiBins {
    pub fn count(self, n: usize) -> usize {
        match self {
            MiBins::Auto => ((n as f64).sqrt().ceil() as usize).clamp(4, 16),
            MiBins::Fixed(b) => b.max(1),
        }
    }
}

/// Equal-frequency bin index of every value. Tied values share the bin of the
/// lowest rank among them.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut run_start = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && values[i].total_cmp(&values[order[rank - 1]]).is_ne() {
            run_start = rank;
        }
        out[i] = (run_start * bins / n).min(bins - 1);
    }
    out
}

fn entropy_bits(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

pub fn estimate_mutual_information(feature: &[f64], fitness: &[f64]) -> Result<f64, SdbcError> {
    estimate_mutual_information_with(feature, fitness, MiBins::Auto)
}

/// Plug-in histogram MI estimate in bits over equal-frequency bins.
pub fn estimate_mutual_information_with(
    feature: &[f64],
    fitness: &[f64],
    bins: MiBins,
) -> Result<f64, SdbcError> {
    check_len(feature.len(), fitness.len())?;
    let n = feature.len();
    if n < 2 {
        return Err(SdbcError::TooFewSamples(n));
    }
    let b = bins.count(n);
    let bx = quantile_bins(feature, b);
    let by = quantile_bins(fitness, b);
    let mut cx = vec![0usize; b];
    let mut cy = vec![0usize; b];
    let mut cxy = vec![0usize; b * b];
    for (&i, &j) in bx.iter().zip(&by) {
        cx[i] += 1;
        cy[j] += 1;
        cxy[i * b + j] += 1;
    }
    let nf = n as f64;
    let joint = joint_entropy_bits(&cxy, b, nf);
    let mi = entropy_bits(&cx, nf) + entropy_bits(&cy, nf) - joint;
    Ok(mi.max(0.0))
}

/// Joint entropy summed in an order that does not depend on which variable
/// indexes rows, so the estimate is symmetric in its arguments.
fn joint_entropy_bits(cxy: &[usize], b: usize, n: f64) -> f64 {
    let mut cells: Vec<usize> = Vec::with_capacity(b * b);
    cells.extend(cxy.iter().copied().filter(|&c| c > 0));
    cells.sort_unstable();
    entropy_bits(&cells, n)
}

/// Per-component weights `δ + I(F; k)` and the MI estimates behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub weights: Vec<f64>,
    pub mi: Vec<f64>,
    pub delta: f64,
}

impl FeatureWeights {
    /// Weights of 1 everywhere, used when weighting is disabled.
    pub fn uniform(len: usize) -> Self {
        Self {
            weights: vec![1.0; len],
            mi: vec![0.0; len],
            delta: 1.0,
        }
    }

    pub fn from_mi(mi: Vec<f64>, delta: f64) -> Self {
        let weights = mi.iter().map(|m| delta + m.max(0.0)).collect();
        Self { weights, mi, delta }
    }
}

pub fn compute_weights<V: AsRef<[f64]>>(
    population: &[V],
    fitnesses: &[f64],
    delta: f64,
    bins: MiBins,
) -> Result<FeatureWeights, SdbcError> {
    let dim = population
        .first()
        .ok_or(SdbcError::EmptyPopulation)?
        .as_ref()
        .len();
    check_len(population.len(), fitnesses.len())?;
    let mut column = vec![0.0; population.len()];
    let mut mi = Vec::with_capacity(dim);
    for k in 0..dim {
        for (slot, b) in column.iter_mut().zip(population) {
            let b = b.as_ref();
            check_len(dim, b.len())?;
            *slot = b[k];
        }
        mi.push(if population.len() < 2 {
            0.0
        } else {
            estimate_mutual_information_with(&column, fitnesses, bins)?
        });
    }
    Ok(FeatureWeights::from_mi(mi, delta))
}

pub fn apply_weights(b: &[f64], w: &FeatureWeights) -> Result<Vec<f64>, SdbcError> {
    check_len(w.weights.len(), b.len())?;
    Ok(b.iter().zip(&w.weights).map(|(v, w)| v * w).collect())
}

/// Euclidean distance between two transformed characterisations.
pub fn behaviour_distance(a: &[f64], b: &[f64]) -> Result<f64, SdbcError> {
    check_len(a.len(), b.len())?;
    Ok(squared_distance(a, b).sqrt())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
