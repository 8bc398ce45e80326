//! Resource sharing: robots burn energy as they move and must take turns at a
//! single charging station that holds one robot at a time.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_fitness, invalid, nearest_robot_input, place_apart, sharing_fitness, GroupLayout,
    SdbcSampler, Task, TaskError, TaskKind, TrialRecord,
};
use crate::evolution::controller::Controller;
use crate::formalism::{GroupDecl, Shape, SpatialDistance, StateLayout, TaskStateSnapshot};
use crate::geometry::{Segment, Vec2};
use crate::sdbc::CharacterisationSchema;
use crate::simcore::{
    add_sensor_noise, resolve_collisions, sense_range_bearing, step_kinematics, Arena, RobotBody,
    TrajectoryRow, TrajectorySink,
};

const ROBOTS: usize = 0;
const STATION: usize = 1;
const SENSORS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceSharingParams {
    pub robots: usize,
    pub arena_size: f64,
    pub station_radius: f64,
    pub max_energy: f64,
    /// Energy spent per step while standing still.
    pub base_consumption: f64,
    /// Extra energy per step at full mean wheel speed.
    pub motion_consumption: f64,
    pub recharge_rate: f64,
    /// Initial energy is drawn uniformly from this fraction of `max_energy` up to full.
    pub initial_energy_min: f64,
    pub max_steps: usize,
    pub robot_radius: f64,
    pub max_speed: f64,
    pub dt: f64,
    pub robot_sense_range: f64,
    pub sensor_noise: f64,
    pub layout: GroupLayout,
}

impl Default for ResourceSharingParams {
    fn default() -> Self {
        Self {
            robots: 4,
            arena_size: 2.0,
            station_radius: 0.2,
            max_energy: 100.0,
            base_consumption: 0.2,
            motion_consumption: 0.8,
            recharge_rate: 2.0,
            initial_energy_min: 0.5,
            max_steps: 1000,
            robot_radius: 0.06,
            max_speed: 0.2,
            dt: 0.1,
            robot_sense_range: 0.5,
            sensor_noise: 0.0,
            layout: GroupLayout::Published,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharingInit {
    pub positions: Vec<Vec2>,
    pub headings: Vec<f64>,
    pub energy: Vec<f64>,
}

pub struct ResourceSharing {
    params: ResourceSharingParams,
    layout: Arc<StateLayout>,
    schema: Arc<CharacterisationSchema>,
    distance: Arc<SpatialDistance>,
    arena: Arena,
}

impl ResourceSharing {
    pub fn new(params: ResourceSharingParams) -> Result<Self, TaskError> {
        let p = &params;
        if p.robots == 0 {
            return Err(invalid("resource_sharing.robots", "must be at least 1"));
        }
        if p.max_steps == 0 {
            return Err(invalid("resource_sharing.max_steps", "must be at least 1"));
        }
        if !(p.max_energy > 0.0) {
            return Err(invalid("resource_sharing.max_energy", "must be positive"));
        }
        if !(p.base_consumption >= 0.0 && p.motion_consumption >= 0.0 && p.recharge_rate >= 0.0) {
            return Err(invalid(
                "resource_sharing",
                "consumption and recharge rates must be non-negative",
            ));
        }
        if !(0.0 < p.initial_energy_min && p.initial_energy_min <= 1.0) {
            return Err(invalid(
                "resource_sharing.initial_energy_min",
                "must lie in (0, 1]",
            ));
        }
        if !(p.station_radius > 0.0 && 2.0 * p.station_radius < p.arena_size) {
            return Err(invalid(
                "resource_sharing.station_radius",
                "must be positive and fit the arena",
            ));
        }
        if !(p.dt > 0.0 && p.max_speed > 0.0 && p.robot_radius > 0.0 && p.robot_sense_range > 0.0) {
            return Err(invalid(
                "resource_sharing",
                "dt, max_speed, robot_radius and robot_sense_range must be positive",
            ));
        }
        let groups = vec![
            GroupDecl::new(
                "robots",
                &["x", "y", "turn speed", "linear speed", "energy", "charging"],
                0,
                p.robots,
            ),
            GroupDecl::new("station", &["occupied"], 1, 1),
        ];
        // both layouts coincide for this task
        let layout = Arc::new(StateLayout::new(groups, &[])?);
        let schema = Arc::new(CharacterisationSchema::from_layout(&layout));
        let distance = Arc::new(SpatialDistance::new(vec![
            Shape::StatePoint,
            Shape::FixedPoint,
        ]));
        let arena = Arena::rectangle(p.arena_size, p.arena_size);
        Ok(Self {
            params,
            layout,
            schema,
            distance,
            arena,
        })
    }

    pub fn params(&self) -> &ResourceSharingParams {
        &self.params
    }

    pub fn station(&self) -> Vec2 {
        Vec2::new(self.params.arena_size / 2.0, self.params.arena_size / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.arena.diagonal()
    }

    pub fn sample_init(&self, seed: u64) -> Result<SharingInit, TaskError> {
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
        let energy = (0..p.robots)
            .map(|_| rng.gen_range(p.initial_energy_min..=1.0) * p.max_energy)
            .collect();
        Ok(SharingInit {
            positions,
            headings,
            energy,
        })
    }

    pub fn run_from(
        &self,
        init: &SharingInit,
        controller: &mut Controller,
        seed: u64,
        mut sink: Option<&mut dyn TrajectorySink>,
    ) -> Result<TrialRecord, TaskError> {
        self.check_controller(controller)?;
        let p = &self.params;
        let n = p.robots;
        let tau = p.max_steps;
        let station = self.station();
        let station_props = [station.x, station.y];
        let walls: &[Segment] = &self.arena.walls;
        let diag = self.diagonal();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_05_4a7e);

        let mut bodies: Vec<RobotBody> = init
            .positions
            .iter()
            .zip(&init.headings)
            .map(|(&pos, &h)| RobotBody::new(pos, h, p.robot_radius))
            .collect();
        let mut ids: Vec<usize> = (0..n).collect();
        let mut energy = init.energy.clone();
        let all_alive = vec![true; n];
        // index into `bodies` of the robot holding the station
        let mut occupant: Option<usize> = None;

        let mut sampler = SdbcSampler::new(
            TaskStateSnapshot::new(self.layout.clone(), self.distance.clone()),
            self.schema.clone(),
        );
        let mut energy_sum = 0.0;
        let mut speed_sum = 0.0;
        let mut station_sum = 0.0;
        let mut alive_samples = 0usize;
        let mut outputs = [0.0; 2];
        let mut steps = 0;

        for t in 1..=tau {
            steps = t;
            for i in 0..bodies.len() {
                let (sr, sb) = sense_range_bearing(&bodies[i], station, diag)
                    .map_or((1.0, 0.0), |(r, b)| (r, b / PI));
                let (rr, rb) = nearest_robot_input(
                    i,
                    &bodies,
                    &all_alive[..bodies.len()],
                    p.robot_sense_range,
                );
                let taken = occupant.is_some_and(|o| o != i);
                let inputs: [f64; SENSORS] = [
                    add_sensor_noise(
                        energy[i] / p.max_energy,
                        p.sensor_noise,
                        0.0,
                        1.0,
                        &mut noise_rng,
                    ),
                    add_sensor_noise(sr, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    sb,
                    f64::from(u8::from(taken)),
                    add_sensor_noise(rr, p.sensor_noise, 0.0, 1.0, &mut noise_rng),
                    rb,
                ];
                controller.compute(&inputs, &mut outputs);
                bodies[i].set_wheels(outputs[0], outputs[1]);
            }
            for b in bodies.iter_mut() {
                *b = step_kinematics(b, p.dt, p.max_speed);
            }
            resolve_collisions(&mut bodies, walls);

            let inside = |b: &RobotBody| b.position.distance(station) <= p.station_radius;
            if !occupant.is_some_and(|o| inside(&bodies[o])) {
                occupant = bodies.iter().position(inside);
            }
            for (i, b) in bodies.iter().enumerate() {
                let wheel = ((b.left + b.right) / 2.0).abs();
                let mut e = energy[i] - (p.base_consumption + p.motion_consumption * wheel);
                if occupant == Some(i) {
                    e += p.recharge_rate;
                }
                energy[i] = e.min(p.max_energy);
            }
            energy_sum += energy.iter().map(|e| e.max(0.0)).sum::<f64>();
            for b in &bodies {
                speed_sum += b.linear_speed.abs() / p.max_speed;
                station_sum += b.position.distance(station) / diag;
            }
            alive_samples += bodies.len();

            // deaths; the occupant index shifts with removals
            let mut k = 0;
            while k < bodies.len() {
                if energy[k] <= 0.0 {
                    bodies.remove(k);
                    energy.remove(k);
                    ids.remove(k);
                    occupant = match occupant {
                        Some(o) if o == k => None,
                        Some(o) if o > k => Some(o - 1),
                        o => o,
                    };
                } else {
                    k += 1;
                }
            }

            let snap = &mut sampler.snapshot;
            let robots = snap.group_mut(ROBOTS);
            robots.clear();
            for (i, b) in bodies.iter().enumerate() {
                robots.push(
                    &[
                        b.position.x,
                        b.position.y,
                        b.turn_speed,
                        b.linear_speed,
                        energy[i],
                        f64::from(u8::from(occupant == Some(i))),
                    ],
                    &[],
                )?;
            }
            let st = snap.group_mut(STATION);
            st.clear();
            st.push(&[f64::from(u8::from(occupant.is_some()))], &station_props)?;
            sampler.sample();

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
            if bodies.is_empty() {
                break;
            }
        }

        let survivors = bodies.len();
        let mean_energy = energy_sum / (steps * n) as f64;
        let fitness = check_fitness(
            self,
            sharing_fitness(survivors, mean_energy, p.max_energy, n),
            seed,
        )?;
        let per_robot = |sum: f64| {
            if alive_samples > 0 {
                sum / alive_samples as f64
            } else {
                0.0
            }
        };
        let task_specific = [
            survivors as f64 / n as f64,
            (mean_energy / p.max_energy).clamp(0.0, 1.0),
            per_robot(speed_sum).clamp(0.0, 1.0),
            per_robot(station_sum).clamp(0.0, 1.0),
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

impl Task for ResourceSharing {
    fn kind(&self) -> TaskKind {
        TaskKind::ResourceSharing
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
