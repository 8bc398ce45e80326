//! Generational GA over directly encoded network weights, with optional
//! novelty search on either task-specific or systematically derived
//! characterisations.

pub mod controller;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::novelty::{
    rank_by_fitness, rank_population, score_population, update_archive, NoveltyArchive,
    NoveltyError, ScoredIndividual, DEFAULT_ARCHIVE_RATE, DEFAULT_K,
};
use crate::sdbc::{
    aggregate_trials, apply_standardisation, apply_weights, compute_standardisation,
    compute_weights, FeatureWeights, MiBins, RawCharacterisation, SdbcError,
    StandardisationCoefficients, DEFAULT_DELTA,
};
use crate::tasks::{Task, TaskError, TASK_SPECIFIC_LEN};
use controller::{build_controller, ControllerError, ControllerSpec, Genome};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("trial {trial} (seed {seed}) failed: {source}")]
    Trial {
        trial: usize,
        seed: u64,
        #[source]
        source: TaskError,
    },
    #[error("no trials requested")]
    NoTrials,
    #[error("genomes differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid GA parameter `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Sdbc(#[from] SdbcError),
    #[error(transparent)]
    Novelty(#[from] NoveltyError),
}

fn invalid(field: &str, reason: &str) -> EvolutionError {
    EvolutionError::InvalidParams {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

/// Search method: pure fitness, or fitness plus novelty over one of three
/// behaviour characterisations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fit")]
    Fit,
    #[serde(rename = "ns-ts")]
    NsTs,
    #[serde(rename = "ns-sd")]
    NsSd,
    #[serde(rename = "ns-sd+")]
    NsSdPlus,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fit, Method::NsTs, Method::NsSd, Method::NsSdPlus];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fit => "fit",
            Method::NsTs => "ns-ts",
            Method::NsSd => "ns-sd",
            Method::NsSdPlus => "ns-sd+",
        }
    }

    pub fn uses_novelty(self) -> bool {
        self != Method::Fit
    }

    pub fn uses_sdbc(self) -> bool {
        matches!(self, Method::NsSd | Method::NsSdPlus)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown method `{s}` (expected one of fit, ns-ts, ns-sd, ns-sd+)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub trials: usize,
    pub hidden: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub gene_mutation_rate: f64,
    pub mutation_sigma: f64,
    pub elites: usize,
    /// Genes are kept within `[-weight_limit, weight_limit]`.
    pub weight_limit: f64,
    /// Initial genes are uniform in `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 100,
            generations: 250,
            trials: 10,
            hidden: 8,
            tournament: 2,
            crossover_rate: 0.5,
            gene_mutation_rate: 0.05,
            mutation_sigma: 0.5,
            elites: 2,
            weight_limit: 10.0,
            init_range: 1.0,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.population < 2 {
            return Err(invalid("ga.population", "must be at least 2"));
        }
        if self.generations == 0 {
            return Err(invalid("ga.generations", "must be at least 1"));
        }
        if self.trials == 0 {
            return Err(invalid("ga.trials", "must be at least 1"));
        }
        if self.tournament == 0 {
            return Err(invalid("ga.tournament", "must be at least 1"));
        }
        if self.elites > self.population {
            return Err(invalid("ga.elites", "cannot exceed the population size"));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(invalid("ga.crossover_rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gene_mutation_rate) {
            return Err(invalid("ga.gene_mutation_rate", "must lie in [0, 1]"));
        }
        if !(self.mutation_sigma > 0.0) {
            return Err(invalid("ga.mutation_sigma", "must be positive"));
        }
        if !(self.weight_limit > 0.0) {
            return Err(invalid("ga.weight_limit", "must be positive"));
        }
        if !(self.init_range >= 0.0 && self.init_range <= self.weight_limit) {
            return Err(invalid("ga.init_range", "must lie in [0, weight_limit]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoveltyParams {
    pub k: usize,
    pub archive_rate: f64,
}

impl Default for NoveltyParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            archive_rate: DEFAULT_ARCHIVE_RATE,
        }
    }
}

impl NoveltyParams {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.k == 0 {
            return Err(invalid("novelty.k", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.archive_rate) {
            return Err(invalid("novelty.archive_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdbcParams {
    pub delta: f64,
    pub mi_bins: MiBins,
    /// Weights are re-estimated every this many generations.
    pub weight_update_period: usize,
}

impl Default for SdbcParams {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            mi_bins: MiBins::Auto,
            weight_update_period: 1,
        }
    }
}

impl SdbcParams {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if !(self.delta >= 0.0) {
            return Err(invalid("sdbc.delta", "must be non-negative"));
        }
        if self.weight_update_period == 0 {
            return Err(invalid("sdbc.weight_update_period", "must be at least 1"));
        }
        if let MiBins::Fixed(b) = self.mi_bins {
            if b < 2 {
                return Err(invalid("sdbc.mi_bins", "needs at least 2 bins"));
            }
        }
        Ok(())
    }
}

/// Random streams kept apart by the seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Trial = 1,
    Init = 2,
    Breed = 3,
    Archive = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_133b_11eb);
    z ^ (z >> 31)
}

/// Counter-based seed for one `(stream, generation, individual, trial)` slot.
pub fn derive_seed(
    master: u64,
    stream: Stream,
    generation: u64,
    individual: u64,
    trial: u64,
) -> u64 {
    [stream as u64, generation, individual, trial]
        .into_iter()
        .fold(splitmix(master), |acc, part| splitmix(acc ^ splitmix(part)))
}

pub fn rng_for(
    master: u64,
    stream: Stream,
    generation: u64,
    individual: u64,
    trial: u64,
) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, generation, individual, trial))
}

/// Gaussian perturbation of each gene with probability `p_gene`, clamped to `±limit`.
pub fn mutate<R: Rng + ?Sized>(
    g: &Genome,
    rng: &mut R,
    p_gene: f64,
    sigma: f64,
    limit: f64,
) -> Genome {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    Genome(
        g.0.iter()
            .map(|&w| {
                if p_gene > 0.0 && rng.gen::<f64>() < p_gene {
                    (w + normal.sample(rng)).clamp(-limit, limit)
                } else {
                    w
                }
            })
            .collect(),
    )
}

/// Single-point crossover taking the prefix `[0, cut)` from `a`.
pub fn crossover_at(a: &Genome, b: &Genome, cut: usize) -> Result<Genome, EvolutionError> {
    if a.len() != b.len() {
        return Err(EvolutionError::LengthMismatch(a.len(), b.len()));
    }
    let cut = cut.min(a.len());
    Ok(Genome(
        a.0[..cut].iter().chain(&b.0[cut..]).copied().collect(),
    ))
}

/// Single-point crossover with the cut uniform in `[1, L-1]`.
pub fn crossover<R: Rng + ?Sized>(
    a: &Genome,
    b: &Genome,
    rng: &mut R,
) -> Result<Genome, EvolutionError> {
    if a.len() != b.len() {
        return Err(EvolutionError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Ok(a.clone());
    }
    crossover_at(a, b, rng.gen_range(1..a.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub fitness: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationResult {
    pub fitness: f64,
    pub sdbc: RawCharacterisation,
    pub task_specific: [f64; TASK_SPECIFIC_LEN],
    pub trials: Vec<TrialSummary>,
}

/// Runs one trial per seed and averages fitness and both characterisations.
pub fn evaluate(
    genome: &Genome,
    task: &dyn Task,
    spec: ControllerSpec,
    seeds: &[u64],
) -> Result<EvaluationResult, EvolutionError> {
    if seeds.is_empty() {
        return Err(EvolutionError::NoTrials);
    }
    let mut controller = build_controller(genome, spec)?;
    task.check_controller(&controller)?;
    let mut sdbcs = Vec::with_capacity(seeds.len());
    let mut fitnesses = Vec::with_capacity(seeds.len());
    let mut ts = [0.0; TASK_SPECIFIC_LEN];
    let mut trials = Vec::with_capacity(seeds.len());
    for (trial, &seed) in seeds.iter().enumerate() {
        let rec = task
            .run_trial(&mut controller, seed, None)
            .map_err(|source| EvolutionError::Trial {
                trial,
                seed,
                source,
            })?;
        for (acc, v) in ts.iter_mut().zip(rec.task_specific) {
            *acc += v / seeds.len() as f64;
        }
        trials.push(TrialSummary {
            seed,
            fitness: rec.fitness,
            steps: rec.steps,
        });
        fitnesses.push(rec.fitness);
        sdbcs.push(rec.sdbc);
    }
    let (sdbc, fitness) = aggregate_trials(&sdbcs, &fitnesses)?;
    for v in ts.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(EvaluationResult {
        fitness,
        sdbc,
        task_specific: ts,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: u64,
    pub genome: Genome,
    pub eval: EvaluationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub method: Method,
    pub seed: u64,
    pub ga: GaParams,
    pub novelty: NoveltyParams,
    pub sdbc: SdbcParams,
}

/// Evolving population between generations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaState {
    /// Index of the generation held in `population`.
    pub generation: usize,
    pub population: Vec<Individual>,
    pub archive: NoveltyArchive,
    pub weights: Option<FeatureWeights>,
    pub next_id: u64,
    pub best: Option<Individual>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub id: u64,
    pub fitness: f64,
    pub novelty: f64,
    /// Position in the rank order, 0 best.
    pub rank: usize,
}

/// Everything the run log needs about one processed generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_id: u64,
    pub best_so_far: f64,
    pub archive_size: usize,
    pub individuals: Vec<IndividualRecord>,
    pub coefficients: Option<StandardisationCoefficients>,
    pub mi: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

/// Runs the GA for one task and method.
pub struct Evolver {
    task: Arc<dyn Task>,
    config: EvolutionConfig,
    spec: ControllerSpec,
}

impl Evolver {
    pub fn new(task: Arc<dyn Task>, config: EvolutionConfig) -> Result<Self, EvolutionError> {
        config.ga.validate()?;
        config.novelty.validate()?;
        config.sdbc.validate()?;
        let spec = task.controller_spec(config.ga.hidden);
        Ok(Self { task, config, spec })
    }

    pub fn spec(&self) -> ControllerSpec {
        self.spec
    }

    pub fn config(&self) -> &EvolutionConfig {
        &self.config
    }

    pub fn task(&self) -> &Arc<dyn Task> {
        &self.task
    }

    pub fn trial_seeds(&self, generation: usize, individual: usize) -> Vec<u64> {
        (0..self.config.ga.trials as u64)
            .map(|t| {
                derive_seed(
                    self.config.seed,
                    Stream::Trial,
                    generation as u64,
                    individual as u64,
                    t,
                )
            })
            .collect()
    }

    /// Evaluates `genomes` as members of `generation`, in parallel on the current rayon pool.
    fn evaluate_all(
        &self,
        generation: usize,
        genomes: &[Genome],
    ) -> Result<Vec<EvaluationResult>, EvolutionError> {
        genomes
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                evaluate(
                    g,
                    self.task.as_ref(),
                    self.spec,
                    &self.trial_seeds(generation, i),
                )
            })
            .collect()
    }

    /// Random initial population, evaluated.
    pub fn init(&self) -> Result<GaState, EvolutionError> {
        let ga = &self.config.ga;
        let mut rng = rng_for(self.config.seed, Stream::Init, 0, 0, 0);
        let genomes: Vec<Genome> = (0..ga.population)
            .map(|_| {
                Genome(
                    (0..self.spec.genome_len())
                        .map(|_| rng.gen_range(-ga.init_range..=ga.init_range))
                        .collect(),
                )
            })
            .collect();
        let evals = self.evaluate_all(0, &genomes)?;
        let population = genomes
            .into_iter()
            .zip(evals)
            .enumerate()
            .map(|(i, (genome, eval))| Individual {
                id: i as u64,
                genome,
                eval,
            })
            .collect();
        Ok(GaState {
            generation: 0,
            population,
            archive: NoveltyArchive::new(),
            weights: None,
            next_id: ga.population as u64,
            best: None,
        })
    }

    pub fn is_finished(&self, state: &GaState) -> bool {
        state.generation >= self.config.ga.generations
    }

    /// Scores, ranks and archives the current population, then breeds and
    /// evaluates the next one unless this was the final generation.
    pub fn run_generation(&self, state: &mut GaState) -> Result<GenerationReport, EvolutionError> {
        let cfg = &self.config;
        let g = state.generation;
        let method = cfg.method;

        let mut coefficients = None;
        let mut mi = None;
        let mut scored: Vec<ScoredIndividual> = state
            .population
            .iter()
            .map(|ind| ScoredIndividual {
                id: ind.id,
                fitness: ind.eval.fitness,
                characterisation: Vec::new(),
                novelty: 0.0,
            })
            .collect();

        let archive_view: Vec<Vec<f64>> = match method {
            Method::Fit => Vec::new(),
            Method::NsTs => {
                for (s, ind) in scored.iter_mut().zip(&state.population) {
                    s.characterisation = ind.eval.task_specific.to_vec();
                }
                state.archive.view(|raw| raw.to_vec())
            }
            Method::NsSd | Method::NsSdPlus => {
                let raws: Vec<&[f64]> = state
                    .population
                    .iter()
                    .map(|i| i.eval.sdbc.values.as_slice())
                    .collect();
                let fitness: Vec<f64> = state.population.iter().map(|i| i.eval.fitness).collect();
                let c = compute_standardisation(&raws)?;
                let estimate = compute_weights(&raws, &fitness, cfg.sdbc.delta, cfg.sdbc.mi_bins)?;
                let weights = if method == Method::NsSdPlus {
                    if state.weights.is_none() || g % cfg.sdbc.weight_update_period == 0 {
                        state.weights = Some(estimate.clone());
                    }
                    state.weights.clone().expect("weights set above")
                } else {
                    FeatureWeights::uniform(c.len())
                };
                let transform = |raw: &[f64]| -> Result<Vec<f64>, SdbcError> {
                    apply_weights(&apply_standardisation(raw, &c)?, &weights)
                };
                for (s, raw) in scored.iter_mut().zip(&raws) {
                    s.characterisation = transform(raw)?;
                }
                let view = state
                    .archive
                    .entries
                    .iter()
                    .map(|e| transform(&e.raw))
                    .collect::<Result<Vec<_>, _>>()?;
                mi = Some(estimate.mi);
                coefficients = Some(c);
                view
            }
        };

        let order = if method.uses_novelty() {
            score_population(&mut scored, &archive_view, cfg.novelty.k)?;
            rank_population(&scored)
        } else {
            rank_by_fitness(&scored)
        };

        if method.uses_novelty() {
            let mut rng = rng_for(cfg.seed, Stream::Archive, g as u64, 0, 0);
            let raws: Vec<&[f64]> = state
                .population
                .iter()
                .map(|ind| match method {
                    Method::NsTs => ind.eval.task_specific.as_slice(),
                    _ => ind.eval.sdbc.values.as_slice(),
                })
                .collect();
            update_archive(
                &mut state.archive,
                raws,
                g,
                &mut rng,
                cfg.novelty.archive_rate,
            );
        }

        let (best_idx, _) = state.population.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(bi, bf), (i, ind)| {
                if ind.eval.fitness > bf {
                    (i, ind.eval.fitness)
                } else {
                    (bi, bf)
                }
            },
        );
        let gen_best = &state.population[best_idx];
        if state
            .best
            .as_ref()
            .map_or(true, |b| gen_best.eval.fitness > b.eval.fitness)
        {
            state.best = Some(gen_best.clone());
        }
        let mut rank_of = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            rank_of[i] = r;
        }
        let n = state.population.len();
        let report = GenerationReport {
            generation: g,
            best_fitness: gen_best.eval.fitness,
            mean_fitness: state.population.iter().map(|i| i.eval.fitness).sum::<f64>() / n as f64,
            best_id: gen_best.id,
            best_so_far: state
                .best
                .as_ref()
                .map_or(f64::NEG_INFINITY, |b| b.eval.fitness),
            archive_size: state.archive.len(),
            individuals: scored
                .iter()
                .enumerate()
                .map(|(i, s)| IndividualRecord {
                    id: s.id,
                    fitness: s.fitness,
                    novelty: s.novelty,
                    rank: rank_of[i],
                })
                .collect(),
            coefficients,
            mi,
            weights: if method.uses_sdbc() {
                Some(match method {
                    Method::NsSdPlus => state.weights.clone().expect("set for ns-sd+").weights,
                    _ => vec![1.0; state.population[0].eval.sdbc.len()],
                })
            } else {
                None
            },
        };

        state.generation += 1;
        if !self.is_finished(state) {
            self.breed(state, &order)?;
        }
        Ok(report)
    }

    fn breed(&self, state: &mut GaState, order: &[usize]) -> Result<(), EvolutionError> {
        let ga = &self.config.ga;
        let n = state.population.len();
        let mut rng = rng_for(
            self.config.seed,
            Stream::Breed,
            state.generation as u64,
            0,
            0,
        );
        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            // positions in the rank order; the lowest position wins
            let best = (0..ga.tournament)
                .map(|_| rng.gen_range(0..n))
                .min()
                .expect("tournament >= 1");
            order[best]
        };
        let elites: Vec<Individual> = order[..ga.elites]
            .iter()
            .map(|&i| state.population[i].clone())
            .collect();
        let mut children = Vec::with_capacity(n - elites.len());
        while children.len() + elites.len() < n {
            let a = tournament(&mut rng);
            let parent = &state.population[a].genome;
            let child = if rng.gen::<f64>() < ga.crossover_rate {
                let b = tournament(&mut rng);
                crossover(parent, &state.population[b].genome, &mut rng)?
            } else {
                parent.clone()
            };
            children.push(mutate(
                &child,
                &mut rng,
                ga.gene_mutation_rate,
                ga.mutation_sigma,
                ga.weight_limit,
            ));
        }
        // elites keep their slots at the front and are not re-evaluated
        let offset = elites.len();
        let evals: Vec<EvaluationResult> = children
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                evaluate(
                    g,
                    self.task.as_ref(),
                    self.spec,
                    &self.trial_seeds(state.generation, offset + i),
                )
            })
            .collect::<Result<_, _>>()?;
        let mut population = elites;
        for (genome, eval) in children.into_iter().zip(evals) {
            population.push(Individual {
                id: state.next_id,
                genome,
                eval,
            });
            state.next_id += 1;
        }
        state.population = population;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{build_task, TaskKind, TaskParams};

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("novelty".parse::<Method>().is_err());
    }

    #[test]
    fn mutation_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Genome((0..50).map(|i| i as f64 / 10.0 - 2.5).collect());
        assert_eq!(mutate(&g, &mut rng, 0.0, 0.5, 10.0), g);
        let tiny = mutate(&g, &mut rng, 1.0, 1e-12, 10.0);
        for (a, b) in tiny.0.iter().zip(&g.0) {
            assert!((a - b).abs() < 1e-9);
        }
        let big = mutate(&g, &mut rng, 1.0, 100.0, 10.0);
        assert!(big.0.iter().all(|w| w.abs() <= 10.0));
    }

    #[test]
    fn mutation_count_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Genome::zeros(100);
        let reps = 1000;
        let total: usize = (0..reps)
            .map(|_| {
                mutate(&g, &mut rng, 0.1, 0.5, 10.0)
                    .0
                    .iter()
                    .filter(|w| **w != 0.0)
                    .count()
            })
            .sum();
        let mean = total as f64 / reps as f64;
        // sd of the mean of Bin(100, 0.1) over 1000 repetitions
        let sd = (100.0 * 0.1 * 0.9 / reps as f64).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn crossover_structure() {
        let a = Genome(vec![1.0, 2.0, 3.0, 4.0]);
        let b = Genome(vec![5.0, 6.0, 7.0, 8.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(crossover(&a, &a, &mut rng).unwrap(), a);
        assert_eq!(crossover_at(&a, &b, 1).unwrap().0, vec![1.0, 6.0, 7.0, 8.0]);
        for _ in 0..100 {
            let c = crossover(&a, &b, &mut rng).unwrap();
            let cut = c.0.iter().zip(&a.0).take_while(|(x, y)| x == y).count();
            assert!((1..4).contains(&cut));
            assert_eq!(&c.0[cut..], &b.0[cut..]);
        }
        assert!(crossover(&a, &Genome(vec![1.0]), &mut rng).is_err());
    }

    #[test]
    fn seeds_are_distinct_per_slot() {
        let mut seen = std::collections::HashSet::new();
        for g in 0..5 {
            for i in 0..5 {
                for t in 0..5 {
                    assert!(seen.insert(derive_seed(7, Stream::Trial, g, i, t)));
                }
            }
        }
        assert_ne!(
            derive_seed(7, Stream::Trial, 0, 0, 0),
            derive_seed(8, Stream::Trial, 0, 0, 0)
        );
        assert_ne!(
            derive_seed(7, Stream::Trial, 0, 0, 0),
            derive_seed(7, Stream::Breed, 0, 0, 0)
        );
    }

    fn small_config(method: Method) -> EvolutionConfig {
        EvolutionConfig {
            method,
            seed: 5,
            ga: GaParams {
                population: 8,
                generations: 3,
                trials: 2,
                hidden: 3,
                ..Default::default()
            },
            novelty: NoveltyParams {
                k: 3,
                ..Default::default()
            },
            sdbc: SdbcParams::default(),
        }
    }

    fn small_task() -> Arc<dyn Task> {
        let mut params = TaskParams::default();
        params.predator_prey.max_steps = 60;
        build_task(TaskKind::PredatorPrey, &params).unwrap()
    }

    #[test]
    fn evaluation_is_deterministic() {
        let task = small_task();
        let spec = task.controller_spec(3);
        let g = Genome(
            (0..spec.genome_len())
                .map(|i| (i as f64 * 0.37).sin())
                .collect(),
        );
        let a = evaluate(&g, task.as_ref(), spec, &[1, 2, 3]).unwrap();
        let b = evaluate(&g, task.as_ref(), spec, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let single = evaluate(&g, task.as_ref(), spec, &[9]).unwrap();
        let mut c = build_controller(&g, spec).unwrap();
        let rec = task.run_trial(&mut c, 9, None).unwrap();
        assert_eq!(single.fitness, rec.fitness);
        assert_eq!(single.sdbc.values, rec.sdbc.values);
        assert_eq!(single.task_specific, rec.task_specific);
        assert!(evaluate(&g, task.as_ref(), spec, &[]).is_err());
    }

    #[test]
    fn generations_are_closed_and_reproducible() {
        for method in Method::ALL {
            let run = || {
                let ev = Evolver::new(small_task(), small_config(method)).unwrap();
                let mut state = ev.init().unwrap();
                let mut reports = Vec::new();
                while !ev.is_finished(&state) {
                    reports.push(ev.run_generation(&mut state).unwrap());
                    assert_eq!(state.population.len(), 8);
                }
                reports
            };
            let a = run();
            assert_eq!(a.len(), 3);
            assert_eq!(a, run());
            for w in a.windows(2) {
                assert!(w[1].best_so_far >= w[0].best_so_far);
            }
            assert_eq!(a[0].mi.is_some(), method.uses_sdbc());
        }
    }

    #[test]
    fn full_elitism_freezes_population() {
        let mut cfg = small_config(Method::NsSdPlus);
        cfg.ga.elites = cfg.ga.population;
        let ev = Evolver::new(small_task(), cfg).unwrap();
        let mut state = ev.init().unwrap();
        let mut ids: Vec<u64> = state.population.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ev.run_generation(&mut state).unwrap();
        let mut after: Vec<u64> = state.population.iter().map(|i| i.id).collect();
        after.sort_unstable();
        assert_eq!(ids, after);
    }
}
