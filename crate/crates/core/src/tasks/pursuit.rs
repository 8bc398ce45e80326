//! Predator-prey pursuit: three predators from fixed starts must catch a prey
//! that flees from any predator it senses, inside a circular chase zone.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_fitness, invalid, pursuit_fitness, GroupLayout, SdbcSampler, Task, TaskError, TaskKind,
    TrialRecord,
};
use crate::evolution::controller::Controller;
use crate::formalism::{GroupDecl, Shape, SpatialDistance, StateLayout, TaskStateSnapshot};
use crate::geometry::{wrap_angle, Vec2};
use crate::sdbc::CharacterisationSchema;
use crate::simcore::{
    add_sensor_noise, resolve_collisions, sense_range_bearing, step_kinematics, RobotBody,
    TrajectoryRow, TrajectorySink,
};

const PREDATORS: usize = 0;
const PREY: usize = 1;
const BOUNDARY: usize = 2;
const SENSORS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PursuitParams {
    pub zone_radius: f64,
    /// Fixed predator start positions; all predators face north.
    pub predator_starts: Vec<[f64; 2]>,
    /// Prey starts uniformly in this disc.
    pub prey_spawn_centre: [f64; 2],
    pub prey_spawn_radius: f64,
    /// Minimum start distance between the prey and any predator.
    pub prey_spawn_clearance: f64,
    pub prey_sense_range: f64,
    /// Prey speed as a multiple of the predators' maximum speed.
    pub prey_speed_ratio: f64,
    pub max_steps: usize,
    pub robot_radius: f64,
    pub max_speed: f64,
    pub dt: f64,
    pub prey_sensor_range: f64,
    pub predator_sensor_range: f64,
    pub sensor_noise: f64,
    pub layout: GroupLayout,
}

impl Default for PursuitParams {
    fn default() -> Self {
        Self {
            zone_radius: 3.0,
            predator_starts: vec![[-0.5, -1.0], [0.0, -1.0], [0.5, -1.0]],
            prey_spawn_centre: [0.0, 0.5],
            prey_spawn_radius: 1.5,
            prey_spawn_clearance: 0.5,
            prey_sense_range: 0.5,
            prey_speed_ratio: 1.0,
            max_steps: 600,
            robot_radius: 0.06,
            max_speed: 0.2,
            dt: 0.1,
            prey_sensor_range: 2.5,
            predator_sensor_range: 6.0,
            sensor_noise: 0.0,
            layout: GroupLayout::Published,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PursuitInit {
    pub prey: Vec2,
}

/// Prey motor command: a heading and a speed fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreyCommand {
    pub heading: f64,
    pub speed: f64,
}

/// Flee at full speed directly away from the mean position of the predators
/// within `sense_range`; stop when none is sensed.
pub fn prey_policy(prey: &RobotBody, predators: &[RobotBody], sense_range: f64) -> PreyCommand {
    let mut sum = Vec2::ZERO;
    let mut count = 0usize;
    for p in predators {
        if p.position.distance(prey.position) <= sense_range {
            sum = sum + p.position;
            count += 1;
        }
    }
    if count == 0 {
        return PreyCommand {
            heading: prey.heading,
            speed: 0.0,
        };
    }
    let away = prey.position - sum * (1.0 / count as f64);
    if away.norm() == 0.0 {
        // sitting on the predators' centroid: keep the current heading
        return PreyCommand {
            heading: prey.heading,
            speed: 1.0,
        };
    }
    PreyCommand {
        heading: away.angle(),
        speed: 1.0,
    }
}

pub struct Pursuit {
    params: PursuitParams,
    layout: Arc<StateLayout>,
    schema: Arc<CharacterisationSchema>,
    distance: Arc<SpatialDistance>,
}

impl Pursuit {
    pub fn new(params: PursuitParams) -> Result<Self, TaskError> {
        let p = &params;
        if p.predator_starts.is_empty() {
            return Err(invalid(
                "predator_prey.predator_starts",
                "needs at least one predator",
            ));
        }
        if p.max_steps == 0 {
            return Err(invalid("predator_prey.max_steps", "must be at least 1"));
        }
        if !(p.zone_radius > 0.0) {
            return Err(invalid("predator_prey.zone_radius", "must be positive"));
        }
        if p.predator_starts
            .iter()
            .any(|s| Vec2::new(s[0], s[1]).norm() >= p.zone_radius)
        {
            return Err(invalid(
                "predator_prey.predator_starts",
                "must lie inside the chase zone",
            ));
        }
        let centre = Vec2::new(p.prey_spawn_centre[0], p.prey_spawn_centre[1]);
        if !(p.prey_spawn_radius >= 0.0 && centre.norm() + p.prey_spawn_radius < p.zone_radius) {
            return Err(invalid(
                "predator_prey.prey_spawn_radius",
                "spawn disc must lie inside the chase zone",
            ));
        }
        if !(p.prey_speed_ratio >= 0.0) {
            return Err(invalid(
                "predator_prey.prey_speed_ratio",
                "must be non-negative",
            ));
        }
        if !(p.dt > 0.0 && p.max_speed > 0.0 && p.robot_radius > 0.0) {
            return Err(invalid(
                "predator_prey",
                "dt, max_speed and robot_radius must be positive",
            ));
        }
        if !(p.prey_sense_range > 0.0 && p.prey_sensor_range > 0.0 && p.predator_sensor_range > 0.0)
        {
            return Err(invalid("predator_prey", "sensor ranges must be positive"));
        }
        let m = p.predator_starts.len();
        let attrs = ["x", "y", "turn speed", "linear speed"];
        let prey_min = match p.layout {
            // the prey leaves its group on capture
            GroupLayout::Published => 0,
            GroupLayout::Naive => 1,
        };
        let groups = vec![
            GroupDecl::new("predators", &attrs, m, m),
            GroupDecl::new("prey", &attrs, prey_min, 1),
            GroupDecl::new("boundary", &[], 1, 1),
        ];
        let layout = Arc::new(StateLayout::new(groups, &[])?);
        let schema = Arc::new(CharacterisationSchema::from_layout(&layout));
        let distance = Arc::new(SpatialDistance::new(vec![
            Shape::StatePoint,
            Shape::StatePoint,
            Shape::CircleBoundary,
        ]));
        Ok(Self {
            params,
            layout,
            schema,
            distance,
        })
    }

    pub fn params(&self) -> &PursuitParams {
        &self.params
    }

    /// Diagonal of the square bounding the chase zone.
    pub fn size(&self) -> f64 {
        2.0 * SQRT_2 * self.params.zone_radius
    }

    fn predator_bodies(&self) -> Vec<RobotBody> {
        self.params
            .predator_starts
            .iter()
            .map(|s| RobotBody::new(Vec2::new(s[0], s[1]), PI / 2.0, self.params.robot_radius))
            .collect()
    }

    pub fn sample_init(&self, seed: u64) -> Result<PursuitInit, TaskError> {
        let p = &self.params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = Vec2::new(p.prey_spawn_centre[0], p.prey_spawn_centre[1]);
        let starts: Vec<Vec2> = p
            .predator_starts
            .iter()
            .map(|s| Vec2::new(s[0], s[1]))
            .collect();
        for _ in 0..10_000 {
            let r = p.prey_spawn_radius * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(-PI..PI);
            let prey = centre + Vec2::from_angle(a) * r;
            if starts
                .iter()
                .all(|s| s.distance(prey) > p.prey_spawn_clearance)
            {
                return Ok(PursuitInit { prey });
            }
        }
        Err(TaskError::Placement { seed })
    }

    fn mean_distance(predators: &[RobotBody], prey: Vec2) -> f64 {
        predators
            .iter()
            .map(|b| b.position.distance(prey))
            .sum::<f64>()
            / predators.len() as f64
    }

    pub fn run_from(
        &self,
        init: &PursuitInit,
        controller: &mut Controller,
        seed: u64,
        mut sink: Option<&mut dyn TrajectorySink>,
    ) -> Result<TrialRecord, TaskError> {
        self.check_controller(controller)?;
        let p = &self.params;
        let tau = p.max_steps;
        let size = self.size();
        let boundary_props = [0.0, 0.0, p.zone_radius];
        let catch_distance = 2.0 * p.robot_radius;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e_4a7e);

        let mut predators = self.predator_bodies();
        let m = predators.len();
        let mut prey = RobotBody::new(init.prey, PI / 2.0, p.robot_radius);
        let initial_distance = Self::mean_distance(&predators, prey.position);

        let mut sampler = SdbcSampler::new(
            TaskStateSnapshot::new(self.layout.clone(), self.distance.clone()),
            self.schema.clone(),
        );
        let mut dispersion_sum = 0.0;
        let mut outputs = [0.0; 2];
        let mut others: Vec<(f64, f64)> = Vec::with_capacity(m);
        let mut captured = false;
        let mut steps = 0;

        for t in 1..=tau {
            steps = t;
            for i in 0..m {
                let (pr, pb) =
                    sense_range_bearing(&predators[i], prey.position, p.prey_sensor_range)
                        .map_or((1.0, 0.0), |(r, b)| (r, b / PI));
                others.clear();
                for (j, o) in predators.iter().enumerate() {
                    if j != i {
                        if let Some((r, b)) =
                            sense_range_bearing(&predators[i], o.position, p.predator_sensor_range)
                        {
                            others.push((r, b / PI));
                        }
                    }
                }
                others.sort_by(|a, b| a.0.total_cmp(&b.0));
                let first = others.first().copied().unwrap_or((1.0, 0.0));
                let second = others.get(1).copied().unwrap_or((1.0, 0.0));
                let inputs: [f64; SENSORS] = [
                    add_sensor_noise(pr, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    pb,
                    add_sensor_noise(first.0, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    first.1,
                    add_sensor_noise(second.0, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    second.1,
                ];
                controller.compute(&inputs, &mut outputs);
                predators[i].set_wheels(outputs[0], outputs[1]);
            }
            for b in predators.iter_mut() {
                *b = step_kinematics(b, p.dt, p.max_speed);
            }
            resolve_collisions(&mut predators, &[]);

            let cmd = prey_policy(&prey, &predators, p.prey_sense_range);
            let v = cmd.speed * p.prey_speed_ratio * p.max_speed;
            let turned = wrap_angle(cmd.heading - prey.heading);
            prey.position = prey.position + Vec2::from_angle(cmd.heading) * (v * p.dt);
            prey.heading = wrap_angle(cmd.heading);
            prey.linear_speed = v;
            prey.turn_speed = turned / p.dt;

            captured = predators
                .iter()
                .any(|b| b.position.distance(prey.position) <= catch_distance);
            let escaped = prey.position.norm() > p.zone_radius;

            let snap = &mut sampler.snapshot;
            let pg = snap.group_mut(PREDATORS);
            pg.clear();
            for b in &predators {
                pg.push(
                    &[b.position.x, b.position.y, b.turn_speed, b.linear_speed],
                    &[],
                )?;
            }
            let yg = snap.group_mut(PREY);
            yg.clear();
            if !(captured && p.layout == GroupLayout::Published) {
                yg.push(
                    &[
                        prey.position.x,
                        prey.position.y,
                        prey.turn_speed,
                        prey.linear_speed,
                    ],
                    &[],
                )?;
            }
            let bg = snap.group_mut(BOUNDARY);
            bg.clear();
            bg.push(&[], &boundary_props)?;
            sampler.sample();

            let centroid =
                predators.iter().fold(Vec2::ZERO, |a, b| a + b.position) * (1.0 / m as f64);
            dispersion_sum += predators
                .iter()
                .map(|b| b.position.distance(centroid))
                .sum::<f64>()
                / m as f64;

            if let Some(sink) = sink.as_deref_mut() {
                for (id, b) in predators.iter().chain(std::iter::once(&prey)).enumerate() {
                    sink.record(TrajectoryRow {
                        step: t,
                        robot: id,
                        x: b.position.x,
                        y: b.position.y,
                        heading: b.heading,
                        left: b.left,
                        right: b.right,
                    });
                }
            }
            if captured || escaped {
                break;
            }
        }

        let final_distance = Self::mean_distance(&predators, prey.position);
        let fitness = check_fitness(
            self,
            pursuit_fitness(captured, steps, tau, initial_distance, final_distance, size),
            seed,
        )?;
        let task_specific = [
            f64::from(u8::from(captured)),
            steps as f64 / tau as f64,
            (final_distance / size).clamp(0.0, 1.0),
            (dispersion_sum / steps as f64 / (size / 2.0)).clamp(0.0, 1.0),
        ];
        Ok(TrialRecord {
            seed,
            fitness,
            steps,
            sdbc: sampler.finish(steps, tau)?,
            task_specific,
        })
    }
}

impl Task for Pursuit {
    fn kind(&self) -> TaskKind {
        TaskKind::PredatorPrey
    }

    fn sensor_count(&self) -> usize {
        SENSORS
    }

    fn max_steps(&self) -> usize {
        self.params.max_steps
    }

    fn robot_count(&self) -> usize {
        self.params.predator_starts.len()
    }

    fn layout(&self) -> &Arc<StateLayout> {
        &self.layout
    }

    fn schema(&self) -> &Arc<CharacterisationSchema> {
        &self.schema
    }

    fn fitness_range(&self) -> (f64, f64) {
        (0.0, 2.0)
    }

    fn run_trial(
        &self,
        controller: &mut Controller,
        seed: u64,
        sink: Option<&mut dyn TrajectorySink>,
    ) -> Result<TrialRecord, TaskError> {
        let init = self.sample_init(seed)?;
        self.run_from(&init, controller, seed, sink)
    }
}
