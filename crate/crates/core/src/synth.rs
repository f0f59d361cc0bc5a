//! Ground-truth scene generator: scripted geometry and motion, apparent
//! trajectories through the forward motion model, rendered observations,
//! contact labels and planted defects.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contact::{motion_gate, ContactLabel, ContactPointSet, ContactTimeline, PhysParams, VertexContact};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3, Pose, Rot3, Sim3, Twist, Vec3};
use crate::io;
use crate::render::{render_image, Camera, ComponentSet, HumanTrack, ObjectTrack, RenderBuffers, RenderConfig, SceneField};
use crate::sdf::{bake, AnalyticSdf, ColorGrid, SdfGrid, SignedDistance};
use crate::skeleton::{BodyPose, Skeleton};
use crate::trajectory::{
    compose_apparent, load_sim3, look_at, sim3_to_json, CameraTrajectory, FrameTag, ObjectMotion, TimedPose,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseKey {
    pub frame: usize,
    #[serde(with = "crate::geometry::pose_serde")]
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyKey {
    pub frame: usize,
    pub pose: BodyPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<AnalyticSdf>,
    pub spacing: f64,
    pub albedo: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Shape in the object's canonical frame.
    pub shape: AnalyticSdf,
    pub spacing: f64,
    pub albedo: [f32; 3],
    pub keyframes: Vec<PoseKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSpec {
    pub spacing: f64,
    pub albedo: [f32; 3],
    pub keyframes: Vec<BodyKey>,
    /// Spacing of the canonical contact point lattice.
    pub contact_spacing: f64,
    /// Contact vertices are those within this distance of the object in
    /// ground-truth contact frames.
    pub grasp_tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn camera(&self, pose: Pose) -> Result<Camera> {
        Camera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub intrinsics: Intrinsics,
    pub keyframes: Vec<PoseKey>,
}

/// Per-axis standard deviations of the right-multiplied trajectory noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_t: f64,
    /// Radians.
    pub sigma_r: f64,
}

/// Inclusive frame range shifted along the contact face normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSpan {
    pub start: usize,
    pub end: usize,
    pub mm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefectSpec {
    pub hover: Option<DefectSpan>,
    pub penetration: Option<DefectSpan>,
    /// Probability that a true contact vertex is missing from a frame's
    /// predicted probabilities.
    pub flicker_rate: f64,
    /// Probability that a non-contact vertex is reported in a frame.
    pub false_positive_rate: f64,
    /// Per-axis noise on the initial human root and object translations.
    pub pose_noise_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub frames: usize,
    pub scene: SceneSpec,
    pub object: ObjectSpec,
    pub human: HumanSpec,
    pub camera: CameraSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub defects: DefectSpec,
    #[serde(default)]
    pub render: RenderConfig,
    /// Render every n-th frame; 0 disables rendering.
    pub render_stride: usize,
    #[serde(default)]
    pub phys: PhysParams,
    pub seed: u64,
}

fn check_keys(what: &str, frames: impl Iterator<Item = usize>, n: usize) -> Result<()> {
    let keys: Vec<usize> = frames.collect();
    if keys.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: no keyframes")));
    }
    for w in keys.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidInput(format!("{what}: keyframes must be strictly increasing")));
        }
    }
    if *keys.last().unwrap() >= n {
        return Err(Error::InvalidInput(format!("{what}: keyframe beyond frame count {n}")));
    }
    Ok(())
}

impl SceneScript {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidInput("a script needs at least 2 frames".into()));
        }
        check_keys("object", self.object.keyframes.iter().map(|k| k.frame), self.frames)?;
        check_keys("human", self.human.keyframes.iter().map(|k| k.frame), self.frames)?;
        check_keys("camera", self.camera.keyframes.iter().map(|k| k.frame), self.frames)?;
        for (what, s) in [
            ("scene", self.scene.spacing),
            ("object", self.object.spacing),
            ("human", self.human.spacing),
            ("contact", self.human.contact_spacing),
        ] {
            if !(s > 0.0) {
                return Err(Error::InvalidInput(format!("{what} spacing must be positive")));
            }
        }
        if self.object.shape.bounds().is_none() {
            return Err(Error::InvalidInput("object shape must be bounded".into()));
        }
        let d = &self.defects;
        for r in [d.flicker_rate, d.false_positive_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidInput(format!("rate {r} outside [0, 1]")));
            }
        }
        if self.noise.sigma_t < 0.0 || self.noise.sigma_r < 0.0 || d.pose_noise_t < 0.0 {
            return Err(Error::InvalidInput("noise levels must be non-negative".into()));
        }
        self.render.validate()?;
        self.phys.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: SceneScript = io::read_json(path)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Piecewise-linear translation and slerp rotation between keyframes,
/// constant outside the keyed range.
pub fn interpolate_pose(keys: &[PoseKey], frame: usize) -> Pose {
    let (a, b, t) = bracket(keys.iter().map(|k| k.frame), frame);
    let (pa, pb) = (&keys[a].pose, &keys[b].pose);
    lerp_pose(pa, pb, t)
}

fn lerp_pose(pa: &Pose, pb: &Pose, t: f64) -> Pose {
    Pose::new(slerp(&pa.rotation, &pb.rotation, t), pa.translation + (pb.translation - pa.translation) * t)
}

fn slerp(a: &Rot3, b: &Rot3, t: f64) -> Rot3 {
    if t == 0.0 {
        return *a;
    }
    if t == 1.0 {
        return *b;
    }
    let rel = a.inverse().compose(b);
    a.compose(&Rot3::from_scaled_axis(&(rel.log() * t)))
}

pub fn interpolate_body(keys: &[BodyKey], frame: usize) -> BodyPose {
    let (a, b, t) = bracket(keys.iter().map(|k| k.frame), frame);
    let (pa, pb) = (&keys[a].pose, &keys[b].pose);
    let root = lerp_pose(&pa.global(), &pb.global(), t);
    let mut out = pa.clone();
    out.set_global(&root);
    out.local = pa.local.iter().zip(&pb.local).map(|(x, y)| slerp(x, y, t)).collect();
    out
}

fn bracket(frames: impl Iterator<Item = usize>, frame: usize) -> (usize, usize, f64) {
    let f: Vec<usize> = frames.collect();
    if frame <= f[0] {
        return (0, 0, 0.0);
    }
    for k in 1..f.len() {
        if frame <= f[k] {
            let t = (frame - f[k - 1]) as f64 / (f[k] - f[k - 1]) as f64;
            return (k - 1, k, t);
        }
    }
    (f.len() - 1, f.len() - 1, 0.0)
}

/// Room geometry of the standard scene: 4×4×3 m, floor at z = 0, with a table
/// under the object.
fn standard_room() -> Vec<AnalyticSdf> {
    let hs = AnalyticSdf::half_space;
    vec![
        hs(Vec3::new(0.0, 0.0, 1.0), 0.0),
        hs(Vec3::new(0.0, 0.0, -1.0), -3.0),
        hs(Vec3::new(1.0, 0.0, 0.0), -2.0),
        hs(Vec3::new(-1.0, 0.0, 0.0), -2.0),
        hs(Vec3::new(0.0, 1.0, 0.0), -2.0),
        hs(Vec3::new(0.0, -1.0, 0.0), -2.0),
        AnalyticSdf::cuboid(Vec3::new(0.0, 0.0, 0.35), Vec3::new(0.9, 0.5, 0.35)),
    ]
}

pub const STANDARD_FRAMES: usize = 120;
pub const STANDARD_MOTION_START: usize = 29;
pub const STANDARD_MOTION_END: usize = 91;

/// The standard fixture: a 0.4×0.3×0.3 m box on a table pushed 1 m along +x
/// between frames 29 and 91 of 120 (moving on frames 30..90) by the palm of
/// the arm proxy, seen by a camera orbiting 90°.
pub fn standard_scene() -> SceneScript {
    let n = STANDARD_FRAMES;
    let half = Vec3::new(0.2, 0.15, 0.15);
    let object_center = Vec3::new(-0.5, 0.0, 0.85);
    let shape = AnalyticSdf::cuboid(object_center, half);
    let push = Vec3::new(1.0, 0.0, 0.0);
    let object_keys = vec![
        PoseKey { frame: 0, pose: Pose::identity() },
        PoseKey { frame: STANDARD_MOTION_START, pose: Pose::identity() },
        PoseKey { frame: STANDARD_MOTION_END, pose: Pose::from_translation(push) },
        PoseKey { frame: n - 1, pose: Pose::from_translation(push) },
    ];

    // The human stands beside the table facing it, arm angled toward the
    // object, palm turned vertical; the touching offset comes from the proxy.
    let skel = Skeleton::standard_proxy(0.02).expect("standard proxy is valid");
    let mut base = BodyPose::rest(skel.len());
    base.root_rotation = Rot3::rot_z(-70f64.to_radians());
    base.local[3] = Rot3::rot_x(90f64.to_radians());
    let hand = skel.posed(&base).expect("rest pose matches skeleton").world_transforms()[3].translation;
    let hand_radius = skel.bones()[3].capsule.radius;
    let face_x = object_center.x - half.x;
    let mut touch = Vec3::new(face_x - hand_radius - hand.x, object_center.y - hand.y, object_center.z - hand.z);
    // skinning bends the palm near the wrist: settle on the skinned surface
    let points = ContactPointSet::on_proxy_surface(&skel, 0.01).expect("proxy points lie on the proxy");
    for _ in 0..4 {
        let mut p = base.clone();
        p.root_translation = touch;
        let posed = skel.posed(&p).expect("pose matches skeleton");
        let gap = points.world(&posed).iter().map(|x| shape.value(x)).fold(f64::INFINITY, f64::min);
        touch.x += gap;
    }
    let at = |frame: usize, dx: f64| {
        let mut p = base.clone();
        p.root_translation = touch + Vec3::new(dx, 0.0, 0.0);
        BodyKey { frame, pose: p }
    };
    let human_keys = vec![
        at(0, -0.2),
        at(STANDARD_MOTION_START, 0.0),
        at(STANDARD_MOTION_END, 1.0),
        at(n - 1, 0.8),
    ];

    let target = Vec3::new(0.0, 0.0, 0.9);
    let (start, sweep) = (-135f64.to_radians(), 90f64.to_radians());
    let mut camera_keys: Vec<PoseKey> = (0..n)
        .step_by(10)
        .chain(std::iter::once(n - 1))
        .map(|f| {
            let a = start + sweep * f as f64 / (n - 1) as f64;
            let eye = Vec3::new(1.8 * a.cos(), 1.8 * a.sin(), 1.65);
            PoseKey { frame: f, pose: look_at(&eye, &target) }
        })
        .collect();
    camera_keys.dedup_by_key(|k| k.frame);

    SceneScript {
        frames: n,
        scene: SceneSpec { primitives: standard_room(), spacing: 0.05, albedo: [0.7, 0.7, 0.7] },
        object: ObjectSpec { shape, spacing: 0.02, albedo: [0.2, 0.4, 0.8], keyframes: object_keys },
        human: HumanSpec {
            spacing: 0.02,
            albedo: [0.8, 0.5, 0.4],
            keyframes: human_keys,
            contact_spacing: 0.01,
            grasp_tolerance: 0.003,
        },
        camera: CameraSpec {
            intrinsics: Intrinsics { fx: 60.0, fy: 60.0, cx: 32.0, cy: 32.0, width: 64, height: 64 },
            keyframes: camera_keys,
        },
        noise: NoiseSpec::default(),
        defects: DefectSpec::default(),
        render: RenderConfig { jitter: false, samples_per_component: 32, ..RenderConfig::default() },
        render_stride: 1,
        phys: PhysParams::default(),
        seed: 0,
    }
}

/// [`standard_scene`] with 2 cm hover on frames 30..60, 1 cm penetration on
/// frames 61..90 and 5 mm initial pose noise.
pub fn standard_defect_scene() -> SceneScript {
    let mut s = standard_scene();
    s.defects = DefectSpec {
        hover: Some(DefectSpan { start: 30, end: 60, mm: 20.0 }),
        penetration: Some(DefectSpan { start: 61, end: 90, mm: 10.0 }),
        flicker_rate: 0.1,
        false_positive_rate: 0.002,
        pose_noise_t: 0.005,
    };
    s
}

/// One frame's rendered observation files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderEntry {
    pub frame: usize,
    pub color: PathBuf,
    pub depth: PathBuf,
    pub normal: PathBuf,
    pub mask: PathBuf,
}

/// Index of a generated dataset. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub frames: usize,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub render: RenderConfig,
    pub phys: PhysParams,
    /// Ground-truth camera-to-world poses.
    pub scene_trajectory_gt: PathBuf,
    /// Scene cameras as an estimator would report them (noise applied).
    pub scene_trajectory: PathBuf,
    pub apparent_trajectory_gt: PathBuf,
    pub apparent_trajectory: PathBuf,
    pub gauge: PathBuf,
    pub object_motion_gt: PathBuf,
    pub object_motion_init: PathBuf,
    pub human_poses_gt: PathBuf,
    pub human_poses_init: PathBuf,
    pub object_sdf: PathBuf,
    pub scene_sdf: PathBuf,
    pub skeleton: PathBuf,
    pub albedo: BTreeMap<String, [f32; 3]>,
    pub contact_points: PathBuf,
    pub contacts_gt: PathBuf,
    pub contacts_pred: PathBuf,
    pub renders: Vec<RenderEntry>,
}

/// A manifest with every artifact loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub scene_trajectory_gt: CameraTrajectory,
    pub scene_trajectory: CameraTrajectory,
    pub apparent_trajectory_gt: CameraTrajectory,
    pub apparent_trajectory: CameraTrajectory,
    pub gauge: Sim3,
    pub object_motion_gt: ObjectMotion,
    pub object_motion_init: ObjectMotion,
    pub human_poses_gt: BTreeMap<usize, BodyPose>,
    pub human_poses_init: BTreeMap<usize, BodyPose>,
    pub object_sdf: SdfGrid,
    pub scene_sdf: SdfGrid,
    pub skeleton: Skeleton,
    pub contact_points: ContactPointSet,
    pub contacts_gt: ContactTimeline,
    pub contacts_pred: ContactTimeline,
    pub observations: BTreeMap<usize, RenderBuffers>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Loads and validates every referenced artifact and its cross-references.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = io::read_json(path)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported manifest schema {}",
                path.display(),
                manifest.schema_version
            )));
        }
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let p = |rel: &Path| root.join(rel);
        let bodies = |rel: &Path| -> Result<BTreeMap<usize, BodyPose>> { io::read_json(&p(rel)) };
        let skeleton = Skeleton::load(&p(&manifest.skeleton))?;
        let points: Vec<[f64; 3]> = io::read_json(&p(&manifest.contact_points))?;
        let contact_points =
            ContactPointSet::new(points.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect(), skeleton.canonical_sdf())?;
        let mut observations = BTreeMap::new();
        for r in &manifest.renders {
            let buf = RenderBuffers::load(&p(&r.color), &p(&r.depth), &p(&r.normal), &p(&r.mask))?;
            if (buf.width, buf.height) != (manifest.intrinsics.width, manifest.intrinsics.height) {
                return Err(Error::DimensionMismatch(format!("render of frame {} has the wrong size", r.frame)));
            }
            observations.insert(r.frame, buf);
        }
        let data = Dataset {
            scene_trajectory_gt: CameraTrajectory::load(&p(&manifest.scene_trajectory_gt))?,
            scene_trajectory: CameraTrajectory::load(&p(&manifest.scene_trajectory))?,
            apparent_trajectory_gt: CameraTrajectory::load(&p(&manifest.apparent_trajectory_gt))?,
            apparent_trajectory: CameraTrajectory::load(&p(&manifest.apparent_trajectory))?,
            gauge: load_sim3(&p(&manifest.gauge))?,
            object_motion_gt: ObjectMotion::load(&p(&manifest.object_motion_gt))?,
            object_motion_init: ObjectMotion::load(&p(&manifest.object_motion_init))?,
            human_poses_gt: bodies(&manifest.human_poses_gt)?,
            human_poses_init: bodies(&manifest.human_poses_init)?,
            object_sdf: SdfGrid::load(&p(&manifest.object_sdf))?,
            scene_sdf: SdfGrid::load(&p(&manifest.scene_sdf))?,
            skeleton,
            contact_points,
            contacts_gt: ContactTimeline::load(&p(&manifest.contacts_gt))?,
            contacts_pred: ContactTimeline::load(&p(&manifest.contacts_pred))?,
            observations,
            root,
            manifest,
        };
        data.check_frames()?;
        Ok(data)
    }
}

impl Dataset {
    fn check_frames(&self) -> Result<()> {
        let n = self.manifest.frames;
        let expect: Vec<usize> = (0..n).collect();
        let check = |what: &str, got: Vec<usize>| {
            if got != expect {
                Err(Error::FrameMismatch(format!("{what} does not cover frames 0..{n}")))
            } else {
                Ok(())
            }
        };
        check("scene trajectory", self.scene_trajectory_gt.indices().collect())?;
        check("noisy scene trajectory", self.scene_trajectory.indices().collect())?;
        check("apparent trajectory", self.apparent_trajectory_gt.indices().collect())?;
        check("noisy apparent trajectory", self.apparent_trajectory.indices().collect())?;
        check("object motion", self.object_motion_gt.indices().collect())?;
        check("initial object motion", self.object_motion_init.indices().collect())?;
        check("human poses", self.human_poses_gt.keys().copied().collect())?;
        check("initial human poses", self.human_poses_init.keys().copied().collect())?;
        for (what, t) in [("ground-truth contacts", &self.contacts_gt), ("predicted contacts", &self.contacts_pred)] {
            check(what, t.frames.iter().map(|f| f.i).collect())?;
            if let Some(v) = t.frames.iter().flat_map(|f| &f.verts).find(|v| v.id >= self.contact_points.len()) {
                return Err(Error::InvalidInput(format!("{what}: vertex {} is not a contact point", v.id)));
            }
        }
        for pose in self.human_poses_gt.values().chain(self.human_poses_init.values()) {
            if pose.local.len() != self.skeleton.len() {
                return Err(Error::DimensionMismatch("body pose does not match the skeleton".into()));
            }
        }
        if let Some(f) = self.observations.keys().find(|f| **f >= n) {
            return Err(Error::FrameMismatch(format!("render for frame {f} outside the sequence")));
        }
        Ok(())
    }

    pub fn albedo(&self, name: &str) -> [f32; 3] {
        self.manifest.albedo.get(name).copied().unwrap_or([0.5; 3])
    }

    /// Components with ground-truth shapes and the given poses.
    pub fn components(&self, human: &BTreeMap<usize, BodyPose>, object: &ObjectMotion) -> ComponentSet {
        ComponentSet {
            human: Some(HumanTrack {
                albedo: ColorGrid::matching(self.skeleton.canonical_sdf(), self.albedo("human")),
                skeleton: self.skeleton.clone(),
                poses: human.clone(),
            }),
            object: Some(ObjectTrack {
                albedo: ColorGrid::matching(&self.object_sdf, self.albedo("object")),
                sdf: self.object_sdf.clone(),
                motion: object.clone(),
            }),
            scene: Some(SceneField { albedo: ColorGrid::matching(&self.scene_sdf, self.albedo("scene")), sdf: self.scene_sdf.clone() }),
        }
    }

    pub fn components_gt(&self) -> ComponentSet {
        self.components(&self.human_poses_gt, &self.object_motion_gt)
    }

    pub fn components_init(&self) -> ComponentSet {
        self.components(&self.human_poses_init, &self.object_motion_init)
    }

    pub fn camera(&self, frame: usize) -> Result<Camera> {
        let pose = self
            .scene_trajectory_gt
            .get(frame)
            .ok_or_else(|| Error::FrameMismatch(format!("no camera for frame {frame}")))?;
        self.manifest.intrinsics.camera(*pose)
    }
}

/// Right-multiplied noise `pose ∘ exp(ε)` with per-axis σ_R, σ_t.
pub fn perturb(pose: &Pose, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Pose {
    if noise.sigma_r == 0.0 && noise.sigma_t == 0.0 {
        return *pose;
    }
    let mut e = Twist::zeros();
    if noise.sigma_r > 0.0 {
        let n = Normal::new(0.0, noise.sigma_r).unwrap();
        (0..3).for_each(|k| e[k] = n.sample(rng));
    }
    if noise.sigma_t > 0.0 {
        let n = Normal::new(0.0, noise.sigma_t).unwrap();
        (3..6).for_each(|k| e[k] = n.sample(rng));
    }
    pose.compose(&exp_se3(&e))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random gauge with scale in [0.5, 2], uniform rotation and unit-scale
/// Gaussian translation.
pub fn random_gauge(rng: &mut ChaCha8Rng) -> Sim3 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let q: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
    let rot = Rot3::from_wxyz(q[0], q[1], q[2], q[3]);
    let scale = rng.random_range(0.5..=2.0);
    let t = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    Sim3::new(scale, rot, t).expect("scale is positive")
}

pub(crate) fn padded_bake(shape: &AnalyticSdf, spacing: f64, pad: f64) -> Result<SdfGrid> {
    let (lo, hi) = shape.bounds().ok_or_else(|| Error::InvalidInput("shape must be bounded".into()))?;
    let lo = lo - Vec3::repeat(pad);
    let dims = ((hi - lo + Vec3::repeat(pad)) / spacing).map(|v| v.ceil() as usize + 1);
    bake(shape, lo, Vec3::repeat(spacing), [dims.x, dims.y, dims.z])
}

/// Ground-truth scene trajectory, object motion and body poses of a script.
pub fn script_tracks(script: &SceneScript) -> Result<(CameraTrajectory, ObjectMotion, BTreeMap<usize, BodyPose>)> {
    let n = script.frames;
    let cams = (0..n).map(|i| TimedPose { index: i, pose: interpolate_pose(&script.camera.keyframes, i) }).collect();
    let objs = (0..n).map(|i| TimedPose { index: i, pose: interpolate_pose(&script.object.keyframes, i) }).collect();
    let bodies = (0..n).map(|i| (i, interpolate_body(&script.human.keyframes, i))).collect();
    Ok((CameraTrajectory::new(FrameTag::SceneFrame, cams)?, ObjectMotion::new(objs)?, bodies))
}

/// Per-frame ground-truth contact vertices: on motion-gated frames, the
/// contact points within the grasp tolerance of the object.
pub fn contact_ground_truth(
    script: &SceneScript,
    skel: &Skeleton,
    points: &ContactPointSet,
    p_obj: &ObjectMotion,
    bodies: &BTreeMap<usize, BodyPose>,
) -> Result<ContactTimeline> {
    let mut timeline = motion_gate(p_obj, &script.phys)?;
    let probs = timeline
        .frames
        .iter()
        .map(|f| -> Result<Vec<VertexContact>> {
            if f.label != ContactLabel::Contact {
                return Ok(Vec::new());
            }
            let posed = skel.posed(&bodies[&f.i])?;
            let inv = p_obj.get(f.i).unwrap().inverse();
            Ok(points
                .world(&posed)
                .iter()
                .enumerate()
                .filter(|(_, x)| script.object.shape.value(&inv.transform_point(x)) < script.human.grasp_tolerance)
                .map(|(id, _)| VertexContact { id, p: 1.0 })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    timeline.set_vertex_probs(probs)?;
    Ok(timeline)
}

/// Moves the human root along the object's outward face normal at the
/// contact vertices so that their mean signed distance becomes `mm`
/// millimeters.
fn shift_along_normal(
    script: &SceneScript,
    skel: &Skeleton,
    points: &ContactPointSet,
    body: &mut BodyPose,
    object_pose: &Pose,
    verts: &[VertexContact],
    mm: f64,
) -> Result<()> {
    if verts.is_empty() {
        return Ok(());
    }
    let posed = skel.posed(body)?;
    let world = points.world(&posed);
    let inv = object_pose.inverse();
    let mut normal = Vec3::zeros();
    let mut mean = 0.0;
    for v in verts {
        let q = script.object.shape.query(&inv.transform_point(&world[v.id]));
        normal += object_pose.rotation.rotate(&q.gradient);
        mean += q.value / verts.len() as f64;
    }
    if normal.norm() == 0.0 {
        return Ok(());
    }
    body.root_translation += normal.normalize() * (mm * 1e-3 - mean);
    Ok(())
}

/// Writes every dataset artifact under `out_dir` and returns the manifest.
pub fn generate(script: &SceneScript, out_dir: &Path) -> Result<DatasetManifest> {
    script.validate()?;
    let n = script.frames;
    let (c_scn, p_obj, bodies) = script_tracks(script)?;

    let gauge = random_gauge(&mut stream(script.seed, 1));
    let c_obj = compose_apparent(&c_scn, &p_obj, &gauge)?;
    let mut rng = stream(script.seed, 2);
    let noisy = |t: &CameraTrajectory, rng: &mut ChaCha8Rng| -> Result<CameraTrajectory> {
        let frames = t.frames().iter().map(|f| TimedPose { index: f.index, pose: perturb(&f.pose, &script.noise, rng) }).collect();
        CameraTrajectory::new(t.frame_tag(), frames)
    };
    let c_scn_noisy = noisy(&c_scn, &mut rng)?;
    let c_obj_noisy = noisy(&c_obj, &mut rng)?;

    let skeleton = Skeleton::standard_proxy(script.human.spacing)?;
    let object_sdf = padded_bake(&script.object.shape, script.object.spacing, 0.1)?;
    let room = AnalyticSdf::Union(script.scene.primitives.clone());
    let scene_lo = Vec3::new(-2.1, -2.1, -0.1);
    let scene_hi = Vec3::new(2.1, 2.1, 3.1);
    let sd = ((scene_hi - scene_lo) / script.scene.spacing).map(|v| v.ceil() as usize + 1);
    let scene_sdf = bake(&room, scene_lo, Vec3::repeat(script.scene.spacing), [sd.x, sd.y, sd.z])?;
    let points = ContactPointSet::on_proxy_surface(&skeleton, script.human.contact_spacing)?;
    let contacts_gt = contact_ground_truth(script, &skeleton, &points, &p_obj, &bodies)?;

    // initial estimates: defects on the body, noise on both translations
    let mut rng = stream(script.seed, 3);
    let noise = NoiseSpec { sigma_t: script.defects.pose_noise_t, sigma_r: 0.0 };
    let mut human_init = bodies.clone();
    for f in &contacts_gt.frames {
        let body = human_init.get_mut(&f.i).unwrap();
        let object_pose = p_obj.get(f.i).unwrap();
        for (span, sign) in [(script.defects.hover, 1.0), (script.defects.penetration, -1.0)] {
            if let Some(s) = span {
                if (s.start..=s.end).contains(&f.i) {
                    shift_along_normal(script, &skeleton, &points, body, object_pose, &f.verts, sign * s.mm)?;
                }
            }
        }
    }
    for body in human_init.values_mut() {
        let g = perturb(&Pose::from_translation(body.root_translation), &noise, &mut rng);
        body.root_translation = g.translation;
    }
    let object_init = ObjectMotion::new(
        p_obj
            .frames()
            .iter()
            .map(|f| {
                let t = perturb(&Pose::from_translation(f.pose.translation), &noise, &mut rng).translation;
                TimedPose { index: f.index, pose: Pose::new(f.pose.rotation, t) }
            })
            .collect(),
    )?;

    // predicted per-vertex contact probabilities: true vertices with
    // flicker, plus scattered false positives
    let mut rng = stream(script.seed, 4);
    let mut contacts_pred = contacts_gt.clone();
    let probs: Vec<Vec<VertexContact>> = contacts_gt
        .frames
        .iter()
        .map(|f| {
            let truth: BTreeSet<usize> = f.verts.iter().map(|v| v.id).collect();
            let mut out = Vec::new();
            for id in 0..points.len() {
                let keep = if truth.contains(&id) {
                    rng.random::<f64>() >= script.defects.flicker_rate
                } else {
                    rng.random::<f64>() < script.defects.false_positive_rate
                };
                if keep {
                    out.push(VertexContact { id, p: 0.9 });
                }
            }
            out
        })
        .collect();
    contacts_pred.set_vertex_probs(probs)?;

    let rel = |s: &str| PathBuf::from(s);
    let path = |s: &str| out_dir.join(s);
    c_scn.save(&path("scene_trajectory_gt.json"))?;
    c_scn_noisy.save(&path("scene_trajectory.json"))?;
    c_obj.save(&path("apparent_trajectory_gt.json"))?;
    c_obj_noisy.save(&path("apparent_trajectory.json"))?;
    io::write_text(&path("gauge.json"), &sim3_to_json(&gauge))?;
    p_obj.save(&path("object_motion_gt.json"))?;
    object_init.save(&path("object_motion_init.json"))?;
    io::write_json(&path("human_poses_gt.json"), &bodies)?;
    io::write_json(&path("human_poses_init.json"), &human_init)?;
    object_sdf.save(&path("object.sdfg"))?;
    scene_sdf.save(&path("scene.sdfg"))?;
    skeleton.save(&path("skeleton.json"))?;
    let pts: Vec<[f64; 3]> = points.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    io::write_json(&path("contact_points.json"), &pts)?;
    contacts_gt.save(&path("contacts_gt.json"))?;
    contacts_pred.save(&path("contacts_pred.json"))?;

    let albedo: BTreeMap<String, [f32; 3]> = [
        ("human".to_string(), script.human.albedo),
        ("object".to_string(), script.object.albedo),
        ("scene".to_string(), script.scene.albedo),
    ]
    .into_iter()
    .collect();
    let components = ComponentSet {
        human: Some(HumanTrack { albedo: ColorGrid::matching(skeleton.canonical_sdf(), script.human.albedo), skeleton, poses: bodies }),
        object: Some(ObjectTrack { albedo: ColorGrid::matching(&object_sdf, script.object.albedo), sdf: object_sdf, motion: p_obj }),
        scene: Some(SceneField { albedo: ColorGrid::matching(&scene_sdf, script.scene.albedo), sdf: scene_sdf }),
    };
    components.validate()?;
    let mut renders = Vec::new();
    if script.render_stride > 0 {
        for frame in (0..n).step_by(script.render_stride) {
            let cam = script.camera.intrinsics.camera(*c_scn.get(frame).unwrap())?;
            let buf = render_image(&components, &cam, frame, &script.render)?;
            let entry = RenderEntry {
                frame,
                color: rel(&format!("frames/{frame:04}_color.ppm")),
                depth: rel(&format!("frames/{frame:04}_depth.pfm")),
                normal: rel(&format!("frames/{frame:04}_normal.pfm")),
                mask: rel(&format!("frames/{frame:04}_mask.ppm")),
            };
            buf.save_color(&out_dir.join(&entry.color))?;
            buf.save_depth(&out_dir.join(&entry.depth))?;
            buf.save_normal(&out_dir.join(&entry.normal))?;
            buf.save_mask(&out_dir.join(&entry.mask))?;
            renders.push(entry);
        }
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        frames: n,
        seed: script.seed,
        intrinsics: script.camera.intrinsics,
        render: script.render,
        phys: script.phys,
        scene_trajectory_gt: rel("scene_trajectory_gt.json"),
        scene_trajectory: rel("scene_trajectory.json"),
        apparent_trajectory_gt: rel("apparent_trajectory_gt.json"),
        apparent_trajectory: rel("apparent_trajectory.json"),
        gauge: rel("gauge.json"),
        object_motion_gt: rel("object_motion_gt.json"),
        object_motion_init: rel("object_motion_init.json"),
        human_poses_gt: rel("human_poses_gt.json"),
        human_poses_init: rel("human_poses_init.json"),
        object_sdf: rel("object.sdfg"),
        scene_sdf: rel("scene.sdfg"),
        skeleton: rel("skeleton.json"),
        albedo,
        contact_points: rel("contact_points.json"),
        contacts_gt: rel("contacts_gt.json"),
        contacts_pred: rel("contacts_pred.json"),
        renders,
    };
    manifest.save(&path("manifest.json"))?;
    Ok(manifest)
}
