//! Kinematic target state shared by the channel, fusion and tracking code.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

/// A point or vector in the plane, metres or metres per second.
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub position: Point,
    pub velocity: Point,
}

impl TargetState {
    pub fn new(position: Point, velocity: Point) -> Self {
        Self { position, velocity }
    }

    /// `[alpha, beta, v_x, v_y]`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.position[0], self.position[1], self.velocity[0], self.velocity[1])
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            position: [v[0], v[1]],
            velocity: [v[2], v[3]],
        }
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
