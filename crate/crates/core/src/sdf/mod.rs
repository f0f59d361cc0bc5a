//! Signed distance representations.
//!
//! Values are negative inside, positive outside. Gradients point away from
//! the surface. [`AnalyticSdf`] provides exact ground truth; [`SdfGrid`] is the
//! trainable voxel stand-in with trilinear value and gradient queries.

mod analytic;
mod grid;

pub use analytic::AnalyticSdf;
pub use grid::{bake, ColorGrid, Corners, OutsidePolicy, SdfGrid};

use crate::geometry::{Pose, Vec3};

/// Value and spatial gradient of a signed distance field at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub value: f64,
    pub gradient: Vec3,
    /// Set where the gradient is undefined (medial axis); `gradient` is zero.
    pub degenerate: bool,
}

impl SdfSample {
    pub fn new(value: f64, gradient: Vec3) -> Self {
        SdfSample {
            value,
            gradient,
            degenerate: false,
        }
    }

    pub fn degenerate(value: f64) -> Self {
        SdfSample {
            value,
            gradient: Vec3::zeros(),
            degenerate: true,
        }
    }
}

pub trait SignedDistance {
    fn query(&self, x: &Vec3) -> SdfSample;

    fn value(&self, x: &Vec3) -> f64 {
        self.query(x).value
    }
}

/// Queries a field stored in its own canonical frame, placed in the world by
/// `pose`. The gradient is returned in world coordinates.
pub fn transform_query<F: SignedDistance + ?Sized>(field: &F, pose: &Pose, x_world: &Vec3) -> SdfSample {
    let local = pose.inverse().transform_point(x_world);
    let s = field.query(&local);
    SdfSample {
        value: s.value,
        gradient: pose.transform_vector(&s.gradient),
        degenerate: s.degenerate,
    }
}
