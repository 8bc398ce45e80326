//! Fixed-timestep 2D kinematic simulation of circular differential-drive robots.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Segment, Vec2};

pub const DEFAULT_DT: f64 = 0.1;
const MAX_RESOLUTION_PASSES: usize = 64;
const SEPARATION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotBody {
    pub position: Vec2,
    /// Radians in `[-π, π)`.
    pub heading: f64,
    pub radius: f64,
    /// Wheel speed commands in `[-1, 1]`, scaled by the maximum speed.
    pub left: f64,
    pub right: f64,
    /// Linear speed of the last step, m/s.
    pub linear_speed: f64,
    /// Angular speed of the last step, rad/s.
    pub turn_speed: f64,
}

impl RobotBody {
    pub fn new(position: Vec2, heading: f64, radius: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            radius,
            left: 0.0,
            right: 0.0,
            linear_speed: 0.0,
            turn_speed: 0.0,
        }
    }

    pub fn axle(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn set_wheels(&mut self, left: f64, right: f64) {
        self.left = left.clamp(-1.0, 1.0);
        self.right = right.clamp(-1.0, 1.0);
    }
}

/// Advances one body by `dt` along the exact circular arc of its wheel commands.
pub fn step_kinematics(body: &RobotBody, dt: f64, v_max: f64) -> RobotBody {
    let v = v_max * (body.left + body.right) / 2.0;
    let omega = v_max * (body.right - body.left) / body.axle();
    let theta = body.heading;
    let delta = if omega.abs() < 1e-12 {
        Vec2::new(theta.cos(), theta.sin()) * (v * dt)
    } else {
        let turned = theta + omega * dt;
        Vec2::new(turned.sin() - theta.sin(), theta.cos() - turned.cos()) * (v / omega)
    };
    RobotBody {
        position: body.position + delta,
        heading: wrap_angle(theta + omega * dt),
        linear_speed: v,
        turn_speed: omega,
        ..*body
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub walls: Vec<Segment>,
    pub min: Vec2,
    pub max: Vec2,
}

impl Arena {
    /// Closed rectangle `[0, width] × [0, height]`.
    pub fn rectangle(width: f64, height: f64) -> Self {
        Self {
            walls: vec![
                Segment::new(0.0, 0.0, width, 0.0),
                Segment::new(width, 0.0, width, height),
                Segment::new(width, height, 0.0, height),
                Segment::new(0.0, height, 0.0, 0.0),
            ],
            min: Vec2::ZERO,
            max: Vec2::new(width, height),
        }
    }

    /// An unwalled region; only used for bookkeeping such as the diagonal.
    pub fn open(min: Vec2, max: Vec2) -> Self {
        Self {
            walls: Vec::new(),
            min,
            max,
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.min.distance(self.max)
    }

    pub fn nearest_wall_distance(&self, p: Vec2) -> f64 {
        self.walls
            .iter()
            .map(|w| w.distance_to_point(p))
            .fold(f64::INFINITY, f64::min)
    }
}

fn push_out_of_walls(body: &mut RobotBody, walls: &[Segment]) -> bool {
    let mut moved = false;
    for w in walls {
        let c = w.closest_point(body.position);
        let offset = body.position - c;
        let d = offset.norm();
        if d < body.radius - SEPARATION_SLACK {
            let normal = if d > 1e-12 {
                offset * (1.0 / d)
            } else {
                // centre exactly on the wall: use the left-hand normal
                let t = w.b - w.a;
                Vec2::new(-t.y, t.x) * (1.0 / t.norm().max(1e-12))
            };
            body.position = c + normal * (body.radius + SEPARATION_SLACK);
            moved = true;
        }
    }
    moved
}

/// Separates overlapping robot pairs and pushes robots out of walls.
///
/// Robots at identical centres are split along the x axis, lower index to -x.
pub fn resolve_collisions(bodies: &mut [RobotBody], walls: &[Segment]) {
    for _ in 0..MAX_RESOLUTION_PASSES {
        let mut moved = false;
        for i in 0..bodies.len() {
            for j in i + 1..bodies.len() {
                let offset = bodies[j].position - bodies[i].position;
                let d = offset.norm();
                let reach = bodies[i].radius + bodies[j].radius;
                if d < reach - SEPARATION_SLACK {
                    let normal = if d > 1e-12 {
                        offset * (1.0 / d)
                    } else {
                        Vec2::new(1.0, 0.0)
                    };
                    let push = (reach - d) / 2.0 + SEPARATION_SLACK;
                    bodies[i].position = bodies[i].position - normal * push;
                    bodies[j].position = bodies[j].position + normal * push;
                    moved = true;
                }
            }
        }
        for b in bodies.iter_mut() {
            moved |= push_out_of_walls(b, walls);
        }
        if !moved {
            break;
        }
    }
}

/// Largest remaining overlap depth between robots or between a robot and a wall.
pub fn max_overlap(bodies: &[RobotBody], walls: &[Segment]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in bodies.iter().enumerate() {
        for b in &bodies[i + 1..] {
            worst = worst.max(a.radius + b.radius - a.position.distance(b.position));
        }
        for w in walls {
            worst = worst.max(a.radius - w.distance_to_point(a.position));
        }
    }
    worst
}

/// Normalised range and relative bearing of `target` as seen from `observer`,
/// or `None` when it lies beyond `max_range`.
pub fn sense_range_bearing(
    observer: &RobotBody,
    target: Vec2,
    max_range: f64,
) -> Option<(f64, f64)> {
    let offset = target - observer.position;
    let d = offset.norm();
    if d > max_range {
        return None;
    }
    let bearing = if d > 0.0 {
        wrap_angle(offset.angle() - observer.heading)
    } else {
        0.0
    };
    Some((d / max_range, bearing))
}

/// Adds zero-mean Gaussian noise to a sensor reading and clamps it to `[lo, hi]`.
pub fn add_sensor_noise<R: Rng + ?Sized>(
    value: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> f64 {
    if sd <= 0.0 {
        return value;
    }
    let noise = Normal::new(0.0, sd).map(|n| n.sample(rng)).unwrap_or(0.0);
    (value + noise).clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub robot: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub left: f64,
    pub right: f64,
}

/// Receives every robot's pose once per simulation step.
pub trait TrajectorySink {
    fn record(&mut self, row: TrajectoryRow);
}

impl TrajectorySink for Vec<TrajectoryRow> {
    fn record(&mut self, row: TrajectoryRow) {
        self.push(row);
    }
}

pub fn write_trajectory_csv<W: Write>(rows: &[TrajectoryRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,robot,x,y,heading,left,right")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.robot, r.x, r.y, r.heading, r.left, r.right
        )?;
    }
    Ok(())
}
