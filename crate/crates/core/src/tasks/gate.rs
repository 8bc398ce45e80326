//! Gate escape: robots must gather at a narrow gate and pass through it before
//! it closes, shortly after the first robot has escaped.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_fitness, gate_fitness, invalid, nearest_robot_input, place_apart, GroupLayout,
    SdbcSampler, Task, TaskError, TaskKind, TrialRecord,
};
use crate::evolution::controller::Controller;
use crate::formalism::{GroupDecl, Shape, SpatialDistance, StateLayout, TaskStateSnapshot};
use crate::geometry::{Segment, Vec2};
use crate::sdbc::CharacterisationSchema;
use crate::simcore::{
    add_sensor_noise, resolve_collisions, sense_range_bearing, step_kinematics, RobotBody,
    TrajectoryRow, TrajectorySink,
};

const ROBOTS: usize = 0;
const GATE: usize = 1;
const WALLS: usize = 2;
const SENSORS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateEscapeParams {
    pub robots: usize,
    /// Side of the square arena, metres.
    pub arena_size: f64,
    pub gate_width: f64,
    /// Steps between the first escape and the gate being shut.
    pub gate_close_delay: usize,
    /// Steps the trial continues after the gate shuts with robots inside.
    pub grace_steps: usize,
    pub max_steps: usize,
    pub robot_radius: f64,
    pub max_speed: f64,
    pub dt: f64,
    pub robot_sense_range: f64,
    pub gate_sense_range: f64,
    pub wall_sense_range: f64,
    pub sensor_noise: f64,
    pub layout: GroupLayout,
}

impl Default for GateEscapeParams {
    fn default() -> Self {
        Self {
            robots: 4,
            arena_size: 2.0,
            gate_width: 0.3,
            gate_close_delay: 25,
            grace_steps: 10,
            max_steps: 500,
            robot_radius: 0.06,
            max_speed: 0.2,
            dt: 0.1,
            robot_sense_range: 1.0,
            gate_sense_range: 3.0,
            wall_sense_range: 0.3,
            sensor_noise: 0.0,
            layout: GroupLayout::Published,
        }
    }
}

/// Initial robot poses.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInit {
    pub positions: Vec<Vec2>,
    pub headings: Vec<f64>,
}

pub struct GateEscape {
    params: GateEscapeParams,
    layout: Arc<StateLayout>,
    schema: Arc<CharacterisationSchema>,
    distance: Arc<SpatialDistance>,
    walls: Vec<Segment>,
    gate: Segment,
}

impl GateEscape {
    pub fn new(params: GateEscapeParams) -> Result<Self, TaskError> {
        let p = &params;
        if p.robots == 0 {
            return Err(invalid("gate_escape.robots", "must be at least 1"));
        }
        if p.max_steps == 0 {
            return Err(invalid("gate_escape.max_steps", "must be at least 1"));
        }
        if !(p.gate_width > 2.0 * p.robot_radius && p.gate_width < p.arena_size) {
            return Err(invalid(
                "gate_escape.gate_width",
                "must exceed the robot diameter and fit the arena",
            ));
        }
        if !(p.dt > 0.0 && p.max_speed > 0.0 && p.robot_radius > 0.0) {
            return Err(invalid(
                "gate_escape",
                "dt, max_speed and robot_radius must be positive",
            ));
        }
        if p.robot_sense_range <= 0.0 || p.gate_sense_range <= 0.0 || p.wall_sense_range <= 0.0 {
            return Err(invalid("gate_escape", "sensor ranges must be positive"));
        }
        let w = p.arena_size;
        let (g0, g1) = ((w - p.gate_width) / 2.0, (w + p.gate_width) / 2.0);
        let walls = vec![
            Segment::new(0.0, 0.0, w, 0.0),
            Segment::new(w, 0.0, w, w),
            Segment::new(w, w, g1, w),
            Segment::new(g0, w, 0.0, w),
            Segment::new(0.0, w, 0.0, 0.0),
        ];
        let gate = Segment::new(g0, w, g1, w);
        let groups = vec![
            GroupDecl::new(
                "robots",
                &["x", "y", "turn speed", "linear speed", "passing gate"],
                0,
                p.robots,
            ),
            GroupDecl::new("gate", &["closing"], 1, 1),
            GroupDecl::new("walls", &[], 1, 1),
        ];
        let excluded: &[(usize, usize)] = match p.layout {
            // walls and gate are fixed and touching: their distance carries nothing
            GroupLayout::Published => &[(GATE, WALLS)],
            GroupLayout::Naive => &[],
        };
        let layout = Arc::new(StateLayout::new(groups, excluded)?);
        let schema = Arc::new(CharacterisationSchema::from_layout(&layout));
        let distance = Arc::new(SpatialDistance::new(vec![
            Shape::StatePoint,
            Shape::Segments,
            Shape::Segments,
        ]));
        Ok(Self {
            params,
            layout,
            schema,
            distance,
            walls,
            gate,
        })
    }

    pub fn params(&self) -> &GateEscapeParams {
        &self.params
    }

    pub fn gate(&self) -> Segment {
        self.gate
    }

    pub fn diagonal(&self) -> f64 {
        self.params.arena_size * std::f64::consts::SQRT_2
    }

    pub fn sample_init(&self, seed: u64) -> Result<GateInit, TaskError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &self.params;
        let margin = p.robot_radius + 0.05;
        let positions = place_apart(
            &mut rng,
            p.robots,
            Vec2::new(margin, margin),
            Vec2::new(p.arena_size - margin, p.arena_size - margin),
            2.0 * p.robot_radius + 0.02,
            seed,
        )?;
        let headings = (0..p.robots).map(|_| rng.gen_range(-PI..PI)).collect();
        Ok(GateInit {
            positions,
            headings,
        })
    }

    pub fn run_from(
        &self,
        init: &GateInit,
        controller: &mut Controller,
        seed: u64,
        mut sink: Option<&mut dyn TrajectorySink>,
    ) -> Result<TrialRecord, TaskError> {
        self.check_controller(controller)?;
        let p = &self.params;
        let n = p.robots;
        let tau = p.max_steps;
        let w = p.arena_size;
        let diag = self.diagonal();
        let gate_centre = (self.gate.a + self.gate.b) * 0.5;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_6a7e);

        let mut bodies: Vec<RobotBody> = init
            .positions
            .iter()
            .zip(&init.headings)
            .map(|(&pos, &h)| RobotBody::new(pos, h, p.robot_radius))
            .collect();
        let mut ids: Vec<usize> = (0..n).collect();
        let alive_mask = vec![true; n];
        let mut walls = self.walls.clone();

        let mut sampler = SdbcSampler::new(
            TaskStateSnapshot::new(self.layout.clone(), self.distance.clone()),
            self.schema.clone(),
        );
        let wall_props: Vec<f64> = self
            .walls
            .iter()
            .flat_map(|s| [s.a.x, s.a.y, s.b.x, s.b.y])
            .collect();
        let gate_props = [self.gate.a.x, self.gate.a.y, self.gate.b.x, self.gate.b.y];

        let mut escaped = 0usize;
        let mut first_passage: Option<usize> = None;
        let mut closed_at: Option<usize> = None;
        let mut gate_dist_sum = 0.0;
        let mut gate_dist_count = 0usize;
        let mut dispersion_sum = 0.0;
        let mut dispersion_count = 0usize;
        let mut outputs = [0.0; 2];
        let mut steps = 0;

        for t in 1..=tau {
            steps = t;
            let fraction = escaped as f64 / n as f64;
            for i in 0..bodies.len() {
                let (gr, gb) = sense_range_bearing(&bodies[i], gate_centre, p.gate_sense_range)
                    .map_or((1.0, 0.0), |(r, b)| (r, b / PI));
                let (rr, rb) = nearest_robot_input(
                    i,
                    &bodies,
                    &alive_mask[..bodies.len()],
                    p.robot_sense_range,
                );
                let wall = walls
                    .iter()
                    .map(|s| s.distance_to_point(bodies[i].position))
                    .fold(f64::INFINITY, f64::min);
                let wall = (wall / p.wall_sense_range).min(1.0);
                let inputs: [f64; SENSORS] = [
                    add_sensor_noise(gr, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    gb,
                    add_sensor_noise(rr, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    rb,
                    add_sensor_noise(wall, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    fraction,
                ];
                controller.compute(&inputs, &mut outputs);
                bodies[i].set_wheels(outputs[0], outputs[1]);
            }
            for b in bodies.iter_mut() {
                *b = step_kinematics(b, p.dt, p.max_speed);
            }
            resolve_collisions(&mut bodies, &walls);

            // escapes: centre fully beyond the gate line
            let mut k = 0;
            while k < bodies.len() {
                if bodies[k].position.y > w + bodies[k].radius {
                    bodies.remove(k);
                    ids.remove(k);
                    escaped += 1;
                    first_passage.get_or_insert(t);
                } else {
                    k += 1;
                }
            }
            if let Some(first) = first_passage {
                if closed_at.is_none() && t >= first + p.gate_close_delay {
                    closed_at = Some(t);
                    walls.push(self.gate);
                }
            }
            // latched: the gate starts closing at the first passage and never reopens
            let closing = first_passage.is_some();

            let snap = &mut sampler.snapshot;
            let robots = snap.group_mut(ROBOTS);
            robots.clear();
            for b in &bodies {
                let passing = b.position.y > w - b.radius
                    && b.position.x > self.gate.a.x - b.radius
                    && b.position.x < self.gate.b.x + b.radius;
                robots.push(
                    &[
                        b.position.x,
                        b.position.y,
                        b.turn_speed,
                        b.linear_speed,
                        f64::from(u8::from(passing)),
                    ],
                    &[],
                )?;
            }
            let gate = snap.group_mut(GATE);
            gate.clear();
            gate.push(&[f64::from(u8::from(closing))], &gate_props)?;
            let wall_group = snap.group_mut(WALLS);
            wall_group.clear();
            wall_group.push(&[], &wall_props)?;
            sampler.sample();

            if !bodies.is_empty() {
                let centroid = bodies.iter().fold(Vec2::ZERO, |acc, b| acc + b.position)
                    * (1.0 / bodies.len() as f64);
                let spread: f64 = bodies
                    .iter()
                    .map(|b| b.position.distance(centroid))
                    .sum::<f64>()
                    / bodies.len() as f64;
                dispersion_sum += spread;
                dispersion_count += 1;
                for b in &bodies {
                    gate_dist_sum += self.gate.distance_to_point(b.position);
                    gate_dist_count += 1;
                }
            }
            if let Some(sink) = sink.as_deref_mut() {
                for (b, &id) in bodies.iter().zip(&ids) {
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

            let trapped = closed_at.is_some_and(|c| t >= c + p.grace_steps);
            if bodies.is_empty() || trapped {
                break;
            }
        }

        let fitness = check_fitness(self, gate_fitness(escaped, steps, tau, n), seed)?;
        let mean_or_zero =
            |sum: f64, count: usize| if count > 0 { sum / count as f64 } else { 0.0 };
        let task_specific = [
            escaped as f64 / n as f64,
            first_passage.map_or(1.0, |s| s as f64 / tau as f64),
            (mean_or_zero(gate_dist_sum, gate_dist_count) / diag).clamp(0.0, 1.0),
            (mean_or_zero(dispersion_sum, dispersion_count) / (diag / 2.0)).clamp(0.0, 1.0),
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

impl Task for GateEscape {
    fn kind(&self) -> TaskKind {
        TaskKind::GateEscape
    }

    fn sensor_count(&self) -> usize {
        SENSORS
    }

    fn max_steps(&self) -> usize {
        self.params.max_steps
    }

    fn robot_count(&self) -> usize {
        self.params.robots
    }

    fn layout(&self) -> &Arc<StateLayout> {
        &self.layout
    }

    fn schema(&self) -> &Arc<CharacterisationSchema> {
        &self.schema
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
