use serde::{Deserialize, Serialize};

use super::{SdfSample, SignedDistance};
use crate::geometry::{Pose, Vec3};

/// Closed-form signed distance shapes. Lengths in meters.
///
/// `Union` takes the minimum over children, which is exact outside all shapes
/// and inside disjoint ones, and a bound elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnalyticSdf {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
    /// Solid where `normal·x < offset`.
    HalfSpace { normal: [f64; 3], offset: f64 },
    Union(Vec<AnalyticSdf>),
    Transformed {
        #[serde(with = "crate::geometry::pose_serde")]
        pose: Pose,
        child: std::boxed::Box<AnalyticSdf>,
    },
}

fn v(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl AnalyticSdf {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        AnalyticSdf::Sphere { center: center.into(), radius }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3) -> Self {
        AnalyticSdf::Box { center: center.into(), half_extents: half_extents.into() }
    }

    pub fn capsule(a: Vec3, b: Vec3, radius: f64) -> Self {
        AnalyticSdf::Capsule { a: a.into(), b: b.into(), radius }
    }

    pub fn half_space(normal: Vec3, offset: f64) -> Self {
        AnalyticSdf::HalfSpace { normal: normal.normalize().into(), offset }
    }

    pub fn transformed(pose: &Pose, child: AnalyticSdf) -> Self {
        AnalyticSdf::Transformed { pose: *pose, child: std::boxed::Box::new(child) }
    }

    /// Axis-aligned bounds of the solid, when finite.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        match self {
            AnalyticSdf::Sphere { center, radius } => {
                let r = Vec3::repeat(*radius);
                Some((v(center) - r, v(center) + r))
            }
            AnalyticSdf::Box { center, half_extents } => Some((v(center) - v(half_extents), v(center) + v(half_extents))),
            AnalyticSdf::Capsule { a, b, radius } => {
                let r = Vec3::repeat(*radius);
                Some((v(a).inf(&v(b)) - r, v(a).sup(&v(b)) + r))
            }
            AnalyticSdf::HalfSpace { .. } => None,
            AnalyticSdf::Union(children) => {
                let mut acc: Option<(Vec3, Vec3)> = None;
                for c in children {
                    let (lo, hi) = c.bounds()?;
                    acc = Some(match acc {
                        None => (lo, hi),
                        Some((l, h)) => (l.inf(&lo), h.sup(&hi)),
                    });
                }
                acc
            }
            AnalyticSdf::Transformed { pose, child } => {
                let (lo, hi) = child.bounds()?;
                let mut out_lo = Vec3::repeat(f64::INFINITY);
                let mut out_hi = Vec3::repeat(f64::NEG_INFINITY);
                for k in 0..8 {
                    let c = Vec3::new(
                        if k & 1 == 0 { lo.x } else { hi.x },
                        if k & 2 == 0 { lo.y } else { hi.y },
                        if k & 4 == 0 { lo.z } else { hi.z },
                    );
                    let w = pose.transform_point(&c);
                    out_lo = out_lo.inf(&w);
                    out_hi = out_hi.sup(&w);
                }
                Some((out_lo, out_hi))
            }
        }
    }
}

impl SignedDistance for AnalyticSdf {
    fn query(&self, x: &Vec3) -> SdfSample {
        match self {
            AnalyticSdf::Sphere { center, radius } => {
                let d = x - v(center);
                let n = d.norm();
                if n < 1e-12 {
                    SdfSample::degenerate(-radius)
                } else {
                    SdfSample::new(n - radius, d / n)
                }
            }
            AnalyticSdf::Box { center, half_extents } => {
                let p = x - v(center);
                let q = p.abs() - v(half_extents);
                let outside = q.sup(&Vec3::zeros());
                let out_n = outside.norm();
                if out_n > 0.0 {
                    let g = Vec3::new(
                        p.x.signum() * outside.x,
                        p.y.signum() * outside.y,
                        p.z.signum() * outside.z,
                    ) / out_n;
                    SdfSample::new(out_n, g)
                } else {
                    let k = q.imax();
                    let mut g = Vec3::zeros();
                    if p[k] == 0.0 {
                        return SdfSample::degenerate(q[k]);
                    }
                    g[k] = p[k].signum();
                    SdfSample::new(q[k], g)
                }
            }
            AnalyticSdf::Capsule { a, b, radius } => {
                let (a, b) = (v(a), v(b));
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 { ((x - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = x - (a + ab * t);
                let n = d.norm();
                if n < 1e-12 {
                    SdfSample::degenerate(-radius)
                } else {
                    SdfSample::new(n - radius, d / n)
                }
            }
            AnalyticSdf::HalfSpace { normal, offset } => {
                let n = v(normal);
                SdfSample::new(n.dot(x) - offset, n)
            }
            AnalyticSdf::Union(children) => {
                let mut best = SdfSample::degenerate(f64::INFINITY);
                for c in children {
                    let s = c.query(x);
                    if s.value < best.value {
                        best = s;
                    }
                }
                best
            }
            AnalyticSdf::Transformed { pose, child } => {
                super::transform_query(child.as_ref(), pose, x)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rot3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_values() {
        let s = AnalyticSdf::sphere(Vec3::zeros(), 1.0);
        let c = s.query(&Vec3::zeros());
        assert_eq!(c.value, -1.0);
        assert!(c.degenerate);
        assert_eq!(c.gradient, Vec3::zeros());
        let o = s.query(&Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(o.value, 1.0);
        assert_eq!(o.gradient, Vec3::x());
    }

    #[test]
    fn translated_sphere() {
        let t = Vec3::new(0.5, -1.0, 2.0);
        let s = AnalyticSdf::transformed(&Pose::from_translation(t), AnalyticSdf::sphere(Vec3::zeros(), 0.3));
        let d = s.query(&(t + Vec3::x() * 0.35)).value;
        assert!((d - 0.05).abs() < 1e-12);
    }

    #[test]
    fn box_and_half_space() {
        let b = AnalyticSdf::cuboid(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0));
        assert!((b.value(&Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((b.value(&Vec3::new(0.5, 0.0, 0.0)) + 0.5).abs() < 1e-12);
        assert!((b.value(&Vec3::new(2.0, 3.0, 0.0)) - 2f64.sqrt()).abs() < 1e-12);
        let h = AnalyticSdf::half_space(Vec3::z(), 0.0);
        assert_eq!(h.value(&Vec3::new(3.0, 1.0, 0.25)), 0.25);
    }

    #[test]
    fn eikonal_on_primitives() {
        let shapes = [
            AnalyticSdf::sphere(Vec3::new(0.1, 0.2, 0.3), 0.4),
            AnalyticSdf::cuboid(Vec3::zeros(), Vec3::new(0.3, 0.2, 0.1)),
            AnalyticSdf::capsule(Vec3::zeros(), Vec3::new(0.5, 0.1, 0.0), 0.1),
            AnalyticSdf::half_space(Vec3::new(1.0, 1.0, 0.0), 0.2),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in &shapes {
            for _ in 0..500 {
                let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let q = s.query(&x);
                if !q.degenerate {
                    assert!((q.gradient.norm() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn union_is_min_of_children() {
        let a = AnalyticSdf::sphere(Vec3::new(-1.0, 0.0, 0.0), 0.3);
        let b = AnalyticSdf::sphere(Vec3::new(1.0, 0.0, 0.0), 0.3);
        let u = AnalyticSdf::Union(vec![a.clone(), b.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let m = a.value(&x).min(b.value(&x));
            assert!(u.value(&x) <= m + 1e-9);
            assert!((u.value(&x) - m).abs() < 1e-12);
        }
    }

    #[test]
    fn transformed_bounds_contain_shape() {
        let pose = Pose::new(Rot3::rot_z(0.7), Vec3::new(1.0, 2.0, 3.0));
        let s = AnalyticSdf::transformed(&pose, AnalyticSdf::cuboid(Vec3::zeros(), Vec3::new(0.2, 0.1, 0.3)));
        let (lo, hi) = s.bounds().unwrap();
        let c = pose.transform_point(&Vec3::new(0.2, 0.1, 0.3));
        assert!(c.x >= lo.x - 1e-12 && c.x <= hi.x + 1e-12);
        assert!(s.value(&c).abs() < 1e-12);
    }
}
