//! The three benchmark tasks: gate escape, resource sharing and predator-prey
//! pursuit. Each task owns its environment, sensors, fitness, hand-designed
//! characterisation and task-state adapter.

mod gate;
mod pursuit;
mod sharing;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::controller::{Controller, ControllerSpec};
use crate::formalism::{extract_features_into, FormalismError, StateLayout, TaskStateSnapshot};
use crate::geometry::Vec2;
use crate::sdbc::{CharacterisationSchema, FeatureAccumulator, RawCharacterisation, SdbcError};
use crate::simcore::TrajectorySink;

pub use gate::{GateEscape, GateEscapeParams, GateInit};
pub use pursuit::{prey_policy, PreyCommand, Pursuit, PursuitInit, PursuitParams};
pub use sharing::{ResourceSharing, ResourceSharingParams, SharingInit};

/// Length of every hand-designed task-specific characterisation.
pub const TASK_SPECIFIC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task parameter `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },
    #[error("controller topology {got} does not fit task `{task}` (needs {inputs} inputs, {outputs} outputs)")]
    ControllerMismatch {
        task: TaskKind,
        got: ControllerSpec,
        inputs: usize,
        outputs: usize,
    },
    #[error("fitness {fitness} outside [{lo}, {hi}] (seed {seed})")]
    FitnessOutOfRange {
        fitness: f64,
        lo: f64,
        hi: f64,
        seed: u64,
    },
    #[error("could not place entities without overlap (seed {seed})")]
    Placement { seed: u64 },
    #[error(transparent)]
    Formalism(#[from] FormalismError),
    #[error(transparent)]
    Sdbc(#[from] SdbcError),
}

pub(crate) fn invalid(field: &str, reason: &str) -> TaskError {
    TaskError::InvalidParams {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GateEscape,
    ResourceSharing,
    PredatorPrey,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::GateEscape,
        TaskKind::ResourceSharing,
        TaskKind::PredatorPrey,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::GateEscape => "gate-escape",
            TaskKind::ResourceSharing => "resource-sharing",
            TaskKind::PredatorPrey => "predator-prey",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                format!("unknown task `{s}` (expected one of gate-escape, resource-sharing, predator-prey)")
            })
    }
}

/// Which entity-group structure a task exposes to feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupLayout {
    /// Groups arranged so the feature counts are 10, 10 and 13.
    #[default]
    Published,
    /// Every described group declared as-is, giving 11, 10 and 12 features.
    Naive,
}

/// Outcome of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub fitness: f64,
    pub steps: usize,
    pub sdbc: RawCharacterisation,
    pub task_specific: [f64; TASK_SPECIFIC_LEN],
}

/// A benchmark task: everything needed to run seeded trials of a controller.
pub trait Task: Send + Sync {
    fn kind(&self) -> TaskKind;
    fn sensor_count(&self) -> usize;
    fn effector_count(&self) -> usize {
        2
    }
    fn max_steps(&self) -> usize;
    fn robot_count(&self) -> usize;
    fn layout(&self) -> &Arc<StateLayout>;
    fn schema(&self) -> &Arc<CharacterisationSchema>;
    /// Inclusive fitness bounds asserted after every trial.
    fn fitness_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    /// Runs one trial with initial conditions drawn from `seed`.
    fn run_trial(
        &self,
        controller: &mut Controller,
        seed: u64,
        sink: Option<&mut dyn TrajectorySink>,
    ) -> Result<TrialRecord, TaskError>;

    fn controller_spec(&self, hidden: usize) -> ControllerSpec {
        ControllerSpec::new(self.sensor_count(), hidden, self.effector_count())
    }

    fn check_controller(&self, controller: &Controller) -> Result<(), TaskError> {
        let spec = controller.spec();
        if spec.inputs != self.sensor_count() || spec.outputs != self.effector_count() {
            return Err(TaskError::ControllerMismatch {
                task: self.kind(),
                got: spec,
                inputs: self.sensor_count(),
                outputs: self.effector_count(),
            });
        }
        Ok(())
    }
}

/// Per-task parameter blocks, all overridable from the experiment config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub gate_escape: GateEscapeParams,
    pub resource_sharing: ResourceSharingParams,
    pub predator_prey: PursuitParams,
}

pub fn build_task(kind: TaskKind, params: &TaskParams) -> Result<Arc<dyn Task>, TaskError> {
    Ok(match kind {
        TaskKind::GateEscape => Arc::new(GateEscape::new(params.gate_escape.clone())?),
        TaskKind::ResourceSharing => {
            Arc::new(ResourceSharing::new(params.resource_sharing.clone())?)
        }
        TaskKind::PredatorPrey => Arc::new(Pursuit::new(params.predator_prey.clone())?),
    })
}

/// `F_g = (g + t/τ) / (1 + N)`
pub fn gate_fitness(escaped: usize, steps: usize, max_steps: usize, robots: usize) -> f64 {
    (escaped as f64 + steps as f64 / max_steps as f64) / (1.0 + robots as f64)
}

/// `F_s = (s + ē/e_max) / (1 + N)`
pub fn sharing_fitness(survivors: usize, mean_energy: f64, e_max: f64, robots: usize) -> f64 {
    (survivors as f64 + mean_energy / e_max) / (1.0 + robots as f64)
}

/// `2 - t/τ` on capture, otherwise `max(d_i - d_f, 0) / size`.
pub fn pursuit_fitness(
    captured: bool,
    steps: usize,
    max_steps: usize,
    initial_distance: f64,
    final_distance: f64,
    arena_diagonal: f64,
) -> f64 {
    if captured {
        2.0 - steps as f64 / max_steps as f64
    } else {
        (initial_distance - final_distance).max(0.0) / arena_diagonal
    }
}

pub(crate) fn check_fitness(task: &dyn Task, fitness: f64, seed: u64) -> Result<f64, TaskError> {
    let (lo, hi) = task.fitness_range();
    if !(lo..=hi).contains(&fitness) {
        return Err(TaskError::FitnessOutOfRange {
            fitness,
            lo,
            hi,
            seed,
        });
    }
    Ok(fitness)
}

/// Feeds task-state snapshots through feature extraction into a running aggregate.
pub(crate) struct SdbcSampler {
    pub snapshot: TaskStateSnapshot,
    values: Vec<f64>,
    acc: FeatureAccumulator,
}

impl SdbcSampler {
    pub fn new(snapshot: TaskStateSnapshot, schema: Arc<CharacterisationSchema>) -> Self {
        let f = schema.feature_count();
        Self {
            snapshot,
            values: vec![0.0; f],
            acc: FeatureAccumulator::new(schema),
        }
    }

    pub fn sample(&mut self) {
        extract_features_into(&self.snapshot, &mut self.values);
        self.acc.push_values(&self.values);
    }

    pub fn finish(&self, steps: usize, max_steps: usize) -> Result<RawCharacterisation, TaskError> {
        Ok(self.acc.finish(steps, max_steps)?)
    }
}

/// Rejection-samples `n` centres in `[lo, hi]²`, pairwise at least `min_gap` apart.
pub(crate) fn place_apart<R: Rng>(
    rng: &mut R,
    n: usize,
    lo: Vec2,
    hi: Vec2,
    min_gap: f64,
    seed: u64,
) -> Result<Vec<Vec2>, TaskError> {
    let mut out: Vec<Vec2> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 10_000 {
            return Err(TaskError::Placement { seed });
        }
        let p = Vec2::new(rng.gen_range(lo.x..=hi.x), rng.gen_range(lo.y..=hi.y));
        if out.iter().all(|q| q.distance(p) >= min_gap) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Normalised range and bearing/π of the nearest other robot within `range`,
/// or `(1, 0)` when none is sensed.
pub(crate) fn nearest_robot_input(
    me: usize,
    bodies: &[crate::simcore::RobotBody],
    alive: &[bool],
    range: f64,
) -> (f64, f64) {
    let mut best: Option<(f64, f64)> = None;
    for (j, other) in bodies.iter().enumerate() {
        if j == me || !alive[j] {
            continue;
        }
        if let Some((r, b)) =
            crate::simcore::sense_range_bearing(&bodies[me], other.position, range)
        {
            if best.map_or(true, |(br, _)| r < br) {
                best = Some((r, b));
            }
        }
    }
    best.map_or((1.0, 0.0), |(r, b)| (r, b / std::f64::consts::PI))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_fitness_examples() {
        assert_eq!(gate_fitness(0, 0, 500, 4), 0.0);
        assert_eq!(gate_fitness(4, 500, 500, 4), 1.0);
        assert_eq!(gate_fitness(2, 250, 500, 4), 0.5);
    }

    #[test]
    fn sharing_fitness_examples() {
        assert_eq!(sharing_fitness(0, 0.0, 100.0, 4), 0.0);
        assert_eq!(sharing_fitness(4, 100.0, 100.0, 4), 1.0);
        assert!((sharing_fitness(3, 50.0, 100.0, 4) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn pursuit_fitness_examples() {
        assert_eq!(pursuit_fitness(true, 300, 600, 2.0, 0.0, 8.0), 1.5);
        assert_eq!(pursuit_fitness(false, 600, 600, 2.0, 2.5, 8.0), 0.0);
        assert_eq!(pursuit_fitness(false, 600, 600, 3.0, 1.0, 8.0), 0.25);
    }

    #[test]
    fn task_names_roundtrip() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
        }
        assert!("gate".parse::<TaskKind>().is_err());
    }
}
