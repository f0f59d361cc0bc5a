//! Articulated human proxy: capsule bones, forward kinematics and linear
//! blend skinning between the canonical and the world frame.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_serde, rot_serde, skew, Mat3, Pose, Rot3, Vec3};
use crate::io;
use crate::sdf::{bake, AnalyticSdf, SdfGrid, SignedDistance};

pub const DEFAULT_SIGMA_SKIN: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 20;
const INVERSE_TOL: f64 = 1e-10;

/// Capsule in the bone's own frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Bone frame to canonical frame.
    #[serde(with = "pose_serde")]
    pub rest: Pose,
    pub capsule: Capsule,
}

#[derive(Clone, Debug)]
pub struct Skeleton {
    bones: Vec<Bone>,
    canonical_sdf: SdfGrid,
    sigma_skin: f64,
    /// Capsule axis endpoints in the canonical frame.
    axes: Vec<(Vec3, Vec3)>,
    /// `descendants[j]` holds j and every bone below it.
    descendants: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    #[serde(with = "rot_serde")]
    pub root_rotation: Rot3,
    pub root_translation: Vec3,
    #[serde(with = "rot_vec_serde")]
    pub local: Vec<Rot3>,
}

mod rot_vec_serde {
    use super::Rot3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Rot3], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|r| r.wxyz()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rot3>, D::Error> {
        let raw: Vec<[f64; 4]> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|q| Rot3::from_wxyz(q[0], q[1], q[2], q[3])).collect())
    }
}

impl BodyPose {
    pub fn rest(bones: usize) -> Self {
        BodyPose {
            root_rotation: Rot3::identity(),
            root_translation: Vec3::zeros(),
            local: vec![Rot3::identity(); bones],
        }
    }

    pub fn global(&self) -> Pose {
        Pose::new(self.root_rotation, self.root_translation)
    }

    pub fn set_global(&mut self, pose: &Pose) {
        self.root_rotation = pose.rotation;
        self.root_translation = pose.translation;
    }
}

pub(crate) fn closest_point(x: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((x - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

impl Skeleton {
    pub fn new(bones: Vec<Bone>, canonical_sdf: SdfGrid, sigma_skin: f64) -> Result<Self> {
        if bones.is_empty() {
            return Err(Error::EmptyInput("skeleton has no bones"));
        }
        if !(sigma_skin > 0.0 && sigma_skin.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma_skin must be positive, got {sigma_skin}")));
        }
        for (j, bone) in bones.iter().enumerate() {
            match (j, bone.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::InvalidInput("bone 0 must be the root".into())),
                (_, None) => return Err(Error::InvalidInput(format!("bone {j} has no parent"))),
                (_, Some(p)) if p >= j => {
                    return Err(Error::InvalidInput(format!("bone {j} has parent {p}; parents must precede children")))
                }
                _ => {}
            }
            if !(bone.capsule.radius > 0.0) {
                return Err(Error::InvalidInput(format!("bone {j} capsule radius must be positive")));
            }
        }
        let axes = bones
            .iter()
            .map(|b| (b.rest.transform_point(&b.capsule.a), b.rest.transform_point(&b.capsule.b)))
            .collect();
        let mut descendants: Vec<Vec<usize>> = (0..bones.len()).map(|j| vec![j]).collect();
        for j in (1..bones.len()).rev() {
            let p = bones[j].parent.unwrap();
            let below = descendants[j].clone();
            descendants[p].extend(below);
        }
        Ok(Skeleton { bones, canonical_sdf, sigma_skin, axes, descendants })
    }

    /// Torso with a three-link arm (upper arm, forearm, hand) held out along
    /// +x in the canonical frame. The canonical shape is the capsule union
    /// baked at `spacing`.
    pub fn standard_proxy(spacing: f64) -> Result<Self> {
        let bone = |name: &str, parent: Option<usize>, at: Vec3, a: Vec3, b: Vec3, radius: f64| Bone {
            name: name.into(),
            parent,
            rest: Pose::from_translation(at),
            capsule: Capsule { a, b, radius },
        };
        let bones = vec![
            bone("torso", None, Vec3::zeros(), Vec3::new(0.0, 0.0, -0.3), Vec3::new(0.0, 0.0, 0.3), 0.15),
            bone("upper_arm", Some(0), Vec3::new(0.2, 0.0, 0.25), Vec3::zeros(), Vec3::new(0.28, 0.0, 0.0), 0.05),
            bone("forearm", Some(1), Vec3::new(0.5, 0.0, 0.25), Vec3::zeros(), Vec3::new(0.24, 0.0, 0.0), 0.04),
            bone("hand", Some(2), Vec3::new(0.78, 0.0, 0.25), Vec3::new(0.0, -0.05, 0.0), Vec3::new(0.0, 0.05, 0.0), 0.03),
        ];
        let proxy = Skeleton::capsule_union(&bones);
        let (lo, hi) = proxy.bounds().expect("capsules are bounded");
        let pad = Vec3::repeat(0.1);
        let dims = ((hi - lo + 2.0 * pad) / spacing).map(|v| v.ceil() as usize + 1);
        let sdf = bake(&proxy, lo - pad, Vec3::repeat(spacing), [dims.x, dims.y, dims.z])?;
        Skeleton::new(bones, sdf, DEFAULT_SIGMA_SKIN)
    }

    fn capsule_union(bones: &[Bone]) -> AnalyticSdf {
        AnalyticSdf::Union(
            bones
                .iter()
                .map(|b| {
                    AnalyticSdf::capsule(
                        b.rest.transform_point(&b.capsule.a),
                        b.rest.transform_point(&b.capsule.b),
                        b.capsule.radius,
                    )
                })
                .collect(),
        )
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    pub fn sigma_skin(&self) -> f64 {
        self.sigma_skin
    }

    pub fn canonical_sdf(&self) -> &SdfGrid {
        &self.canonical_sdf
    }

    pub fn canonical_sdf_mut(&mut self) -> &mut SdfGrid {
        &mut self.canonical_sdf
    }

    /// Per-bone capsules in the canonical frame.
    pub fn capsule_proxy(&self) -> AnalyticSdf {
        Skeleton::capsule_union(&self.bones)
    }

    pub fn descendants(&self, j: usize) -> &[usize] {
        &self.descendants[j]
    }

    /// Normalized weights `w_b ∝ exp(-d_b²/σ²)` with `d_b` the distance to
    /// bone b's capsule axis.
    pub fn skin_weights(&self, x: &Vec3) -> Vec<f64> {
        self.skin_weights_grad(x).0
    }

    /// Weights and their spatial gradients.
    pub fn skin_weights_grad(&self, x: &Vec3) -> (Vec<f64>, Vec<Vec3>) {
        let s2 = self.sigma_skin * self.sigma_skin;
        let mut logits = Vec::with_capacity(self.axes.len());
        let mut dlogit = Vec::with_capacity(self.axes.len());
        for (a, b) in &self.axes {
            let d = x - closest_point(x, a, b);
            logits.push(-d.norm_squared() / s2);
            dlogit.push(d * (-2.0 / s2));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        let mean: Vec3 = w.iter().zip(&dlogit).map(|(wi, g)| g * *wi).sum();
        let grads = w.iter().zip(&dlogit).map(|(wi, g)| (g - mean) * *wi).collect();
        (w, grads)
    }

    fn check_pose(&self, pose: &BodyPose) -> Result<()> {
        if pose.local.len() != self.bones.len() {
            return Err(Error::DimensionMismatch(format!(
                "body pose has {} bone rotations, skeleton has {} bones",
                pose.local.len(),
                self.bones.len()
            )));
        }
        Ok(())
    }

    /// World transform of every bone frame.
    pub fn world_transforms(&self, pose: &BodyPose) -> Result<Vec<Pose>> {
        self.check_pose(pose)?;
        let mut world: Vec<Pose> = Vec::with_capacity(self.bones.len());
        for (j, bone) in self.bones.iter().enumerate() {
            let local = Pose::from_rotation(pose.local[j]);
            let w = match bone.parent {
                None => pose.global().compose(&bone.rest).compose(&local),
                Some(p) => {
                    let offset = self.bones[p].rest.inverse().compose(&bone.rest);
                    world[p].compose(&offset).compose(&local)
                }
            };
            world.push(w);
        }
        Ok(world)
    }

    /// Skinning transforms `T_b = W_b ∘ rest_b⁻¹` mapping canonical points
    /// rigidly with bone b.
    pub fn bone_transforms(&self, pose: &BodyPose) -> Result<Vec<Pose>> {
        let world = self.world_transforms(pose)?;
        Ok(world.iter().zip(&self.bones).map(|(w, b)| w.compose(&b.rest.inverse())).collect())
    }

    /// Precomputes bone transforms for repeated warps under one pose.
    pub fn posed(&self, pose: &BodyPose) -> Result<PosedSkeleton<'_>> {
        let world = self.world_transforms(pose)?;
        let skinning = world.iter().zip(&self.bones).map(|(w, b)| w.compose(&b.rest.inverse())).collect();
        Ok(PosedSkeleton { skeleton: self, world, skinning })
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        let sdf_name = format!(
            "{}.sdfg",
            json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("skeleton")
        );
        let file = SkeletonFile { sigma_skin: self.sigma_skin, canonical_sdf: sdf_name.clone(), bones: self.bones.clone() };
        io::write_json(json_path, &file)?;
        let dir = json_path.parent().unwrap_or(Path::new(""));
        self.canonical_sdf.save(&dir.join(sdf_name))
    }

    pub fn load(json_path: &Path) -> Result<Skeleton> {
        let file: SkeletonFile = io::read_json(json_path)?;
        let dir = json_path.parent().unwrap_or(Path::new(""));
        let sdf = SdfGrid::load(&dir.join(&file.canonical_sdf))?;
        Skeleton::new(file.bones, sdf, file.sigma_skin)
    }
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    sigma_skin: f64,
    /// Path of the SDFG grid, relative to the JSON file.
    canonical_sdf: String,
    bones: Vec<Bone>,
}

/// A skeleton under one body pose.
#[derive(Clone, Debug)]
pub struct PosedSkeleton<'a> {
    skeleton: &'a Skeleton,
    world: Vec<Pose>,
    skinning: Vec<Pose>,
}

/// Result of [`PosedSkeleton::inverse`].
#[derive(Clone, Copy, Debug)]
pub struct InverseWarp {
    pub canonical: Vec3,
    /// `∂x_world/∂x_canonical` at the solution.
    pub jacobian: Mat3,
    pub bone: usize,
}

impl PosedSkeleton<'_> {
    pub fn skeleton(&self) -> &Skeleton {
        self.skeleton
    }

    pub fn world_transforms(&self) -> &[Pose] {
        &self.world
    }

    pub fn skinning_transforms(&self) -> &[Pose] {
        &self.skinning
    }

    pub fn forward(&self, x: &Vec3) -> Vec3 {
        let w = self.skeleton.skin_weights(x);
        w.iter().zip(&self.skinning).map(|(wb, t)| t.transform_point(x) * *wb).sum()
    }

    /// Warped point and `J = Σ w_b R_b + Σ (T_b x) ∇w_bᵀ`.
    pub fn forward_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let (w, dw) = self.skeleton.skin_weights_grad(x);
        let mut y = Vec3::zeros();
        let mut jac = Mat3::zeros();
        for ((wb, g), t) in w.iter().zip(&dw).zip(&self.skinning) {
            let tx = t.transform_point(x);
            y += tx * *wb;
            jac += t.rotation.matrix() * *wb + tx * g.transpose();
        }
        (y, jac)
    }

    /// `∂x_world/∂ω_j` for a local perturbation `R_j ← R_j exp(ω_j)` of every
    /// joint, evaluated at canonical point `x`.
    pub fn joint_jacobians(&self, x: &Vec3) -> Vec<Mat3> {
        let w = self.skeleton.skin_weights(x);
        let moved: Vec<Vec3> = self.skinning.iter().map(|t| t.transform_point(x)).collect();
        (0..self.world.len())
            .map(|j| {
                let wj = &self.world[j];
                let inv = wj.inverse();
                let mut acc = Mat3::zeros();
                for &b in self.skeleton.descendants(j) {
                    if w[b] > 0.0 {
                        acc += skew(&inv.transform_point(&moved[b])) * w[b];
                    }
                }
                -(wj.rotation.matrix() * acc)
            })
            .collect()
    }

    fn newton(&self, target: &Vec3, start: Vec3, max_iter: usize) -> Option<(Vec3, Mat3)> {
        let mut x = start;
        let (mut y, mut jac) = self.forward_jacobian(&x);
        let mut err = (y - target).norm();
        for _ in 0..max_iter {
            if err < INVERSE_TOL {
                return Some((x, jac));
            }
            let step = jac.lu().solve(&(target - y))?;
            // backtrack until the residual decreases
            let mut t = 1.0;
            loop {
                let cand = x + step * t;
                let (yc, jc) = self.forward_jacobian(&cand);
                let ec = (yc - target).norm();
                if ec < err || t < 1e-3 {
                    x = cand;
                    y = yc;
                    jac = jc;
                    err = ec;
                    break;
                }
                t *= 0.5;
            }
        }
        (err < INVERSE_TOL).then_some((x, jac))
    }

    /// Canonical preimage of a world point. One Newton solve starts from each
    /// bone's rigid inverse; among converged candidates the one with the
    /// smallest canonical |ξ| wins.
    pub fn inverse(&self, x_world: &Vec3, max_iter: usize) -> Result<InverseWarp> {
        let sdf = &self.skeleton.canonical_sdf;
        let mut best: Option<(f64, InverseWarp)> = None;
        for (b, t) in self.skinning.iter().enumerate() {
            let start = t.inverse().transform_point(x_world);
            if let Some((x, jac)) = self.newton(x_world, start, max_iter) {
                let score = sdf.value(&x).abs();
                if best.as_ref().is_none_or(|(s, _)| score < *s) {
                    best = Some((score, InverseWarp { canonical: x, jacobian: jac, bone: b }));
                }
            }
        }
        best.map(|(_, w)| w).ok_or(Error::NoConvergence { iterations: max_iter })
    }
}

pub fn bone_transforms(skel: &Skeleton, pose: &BodyPose) -> Result<Vec<Pose>> {
    skel.bone_transforms(pose)
}

pub fn lbs_forward(skel: &Skeleton, pose: &BodyPose, x_canonical: &Vec3) -> Result<Vec3> {
    Ok(skel.posed(pose)?.forward(x_canonical))
}

pub fn lbs_inverse(skel: &Skeleton, pose: &BodyPose, x_world: &Vec3) -> Result<Vec3> {
    Ok(skel.posed(pose)?.inverse(x_world, DEFAULT_MAX_ITER)?.canonical)
}
