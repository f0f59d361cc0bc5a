//! Alternating refinement. Stage I fits the shape and albedo grids to the
//! observations with poses frozen; Stage II adjusts per-frame object and body
//! poses under the rendering and physical losses with grids frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{
    body_prior_loss, hand_sdf_loss, pose_term, sample_interior, ContactLabel, ContactPointSet, ContactTimeline,
    PhysParams, PhysTerm, PoseGradient, WristFalloff,
};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3, skew, Mat3, Rot3, Twist, Vec3};
use crate::io;
use crate::render::{
    ray_rng, render_image, sample_ray, Camera, ComponentId, ComponentSet, FrameView, RayTrace, RenderBuffers,
    RenderConfig, RaySample,
};
use crate::sdf::{AnalyticSdf, SdfGrid};
use crate::skeleton::{BodyPose, Skeleton};
use crate::synth::Dataset;

/// Losses are compared against `max(initial, DIVERGENCE_FLOOR)` so that a
/// run starting at an exact optimum does not trip on rounding noise.
pub const DIVERGENCE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_rgb: f64,
    pub w_mask: f64,
    pub w_depth: f64,
    pub w_normal: f64,
    pub w_contact: f64,
    pub w_collision: f64,
    pub w_body: f64,
    pub w_hand: f64,
    /// Unit-gradient penalty on every grid near its zero level.
    pub w_eikonal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_rgb: 1.0,
            w_mask: 0.1,
            w_depth: 100.0,
            w_normal: 0.1,
            w_contact: 1.0,
            w_collision: 1.0,
            w_body: 0.1,
            w_hand: 0.1,
            w_eikonal: 0.1,
        }
    }
}

impl LossWeights {
    fn all(&self) -> [(&'static str, f64); 9] {
        [
            ("w_rgb", self.w_rgb),
            ("w_mask", self.w_mask),
            ("w_depth", self.w_depth),
            ("w_normal", self.w_normal),
            ("w_contact", self.w_contact),
            ("w_collision", self.w_collision),
            ("w_body", self.w_body),
            ("w_hand", self.w_hand),
            ("w_eikonal", self.w_eikonal),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.all() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        if self.all().iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::InvalidInput("all loss weights are zero".into()));
        }
        Ok(())
    }

    fn rendering(&self) -> bool {
        self.w_rgb + self.w_mask + self.w_depth + self.w_normal > 0.0
    }
}

/// Fractions of each frame's ray budget drawn from human, object, hand and
/// scene pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRatios {
    pub human: f64,
    pub object: f64,
    pub hand: f64,
    pub scene: f64,
}

impl SamplingRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.human, self.object, self.hand, self.scene];
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("sampling ratios {r:?} must lie in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    ShapeFit,
    PoseRefine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub total_steps: usize,
    /// Leading fraction of steps that run Stage I only.
    pub stage1_warmup_fraction: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub ratios: SamplingRatios,
    pub early_ratios: SamplingRatios,
    pub early_epochs: usize,
    pub rays_per_frame: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_steps: 300,
            stage1_warmup_fraction: 0.25,
            stage1_epochs: 6,
            stage2_epochs: 4,
            ratios: SamplingRatios { human: 0.5, object: 0.3, hand: 0.1, scene: 0.1 },
            early_ratios: SamplingRatios { human: 0.2, object: 0.7, hand: 0.0, scene: 0.1 },
            early_epochs: 10,
            rays_per_frame: 4096,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stage1_warmup_fraction) {
            return Err(Error::InvalidInput("stage1_warmup_fraction must lie in [0, 1]".into()));
        }
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return Err(Error::InvalidInput("a cycle needs at least one epoch".into()));
        }
        if self.rays_per_frame == 0 {
            return Err(Error::InvalidInput("rays_per_frame must be positive".into()));
        }
        self.ratios.validate()?;
        self.early_ratios.validate()
    }

    pub fn warmup_steps(&self) -> usize {
        (self.total_steps as f64 * self.stage1_warmup_fraction).round() as usize
    }

    pub fn stage_at(&self, step: usize) -> Stage {
        let warm = self.warmup_steps();
        if step < warm || (step - warm) % (self.stage1_epochs + self.stage2_epochs) < self.stage1_epochs {
            Stage::ShapeFit
        } else {
            Stage::PoseRefine
        }
    }

    /// Cycle 0 is the warm-up; alternating cycles are numbered from 1.
    pub fn cycle_at(&self, step: usize) -> usize {
        let warm = self.warmup_steps();
        if step < warm {
            0
        } else {
            1 + (step - warm) / (self.stage1_epochs + self.stage2_epochs)
        }
    }

    pub fn ratios_at(&self, step: usize) -> &SamplingRatios {
        if step < self.early_epochs {
            &self.early_ratios
        } else {
            &self.ratios
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimParams {
    pub lr_grid: f64,
    pub lr_albedo: f64,
    /// Gradient-descent step sizes for pose twists.
    pub lr_translation: f64,
    pub lr_rotation: f64,
    pub clip_norm: f64,
    /// Largest change of one SDF node per step, in grid spacings.
    pub max_node_step: f64,
    pub divergence_factor: f64,
    /// Let RGB and normal residuals drive poses in Stage II. Off by default:
    /// poses then follow mask and depth only.
    pub photometric_pose_gradients: bool,
    /// At most this many contact vertices per frame, highest probability first.
    pub contact_cap: Option<usize>,
    pub pose_steps: bool,
    pub optimize_joints: bool,
    pub prior_samples: usize,
}

impl Default for OptimParams {
    fn default() -> Self {
        OptimParams {
            lr_grid: 2.0,
            lr_albedo: 0.5,
            lr_translation: 1e-3,
            lr_rotation: 2e-4,
            clip_norm: 1.0,
            max_node_step: 0.25,
            divergence_factor: 10.0,
            photometric_pose_gradients: false,
            contact_cap: None,
            pose_steps: true,
            optimize_joints: true,
            prior_samples: 2000,
        }
    }
}

impl OptimParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_grid", self.lr_grid),
            ("lr_albedo", self.lr_albedo),
            ("lr_translation", self.lr_translation),
            ("lr_rotation", self.lr_rotation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.max_node_step > 0.0) {
            return Err(Error::InvalidInput("max_node_step must be positive".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.divergence_factor > 1.0) {
            return Err(Error::InvalidInput("clip_norm must be positive and divergence_factor above 1".into()));
        }
        Ok(())
    }
}

/// Everything `refine` reads from its JSON config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub phys: PhysParams,
    pub params: OptimParams,
    pub render: RenderConfig,
    pub seed: u64,
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.phys.validate()?;
        self.params.validate()?;
        self.render.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RefineConfig = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub normal: f64,
    pub contact: f64,
    pub collision: f64,
    pub body: f64,
    pub hand: f64,
    pub eikonal: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.w_rgb * self.rgb
            + w.w_mask * self.mask
            + w.w_depth * self.depth
            + w.w_normal * self.normal
            + w.w_contact * self.contact
            + w.w_collision * self.collision
            + w.w_body * self.body
            + w.w_hand * self.hand
            + w.w_eikonal * self.eikonal
    }

    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.rgb += s * o.rgb;
        self.mask += s * o.mask;
        self.depth += s * o.depth;
        self.normal += s * o.normal;
        self.contact += s * o.contact;
        self.collision += s * o.collision;
        self.body += s * o.body;
        self.hand += s * o.hand;
        self.eikonal += s * o.eikonal;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub cycle: usize,
    pub stage: Stage,
    pub terms: LossTerms,
    pub total: f64,
}

/// Sum of pose increments applied to one frame so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameUpdate {
    pub object: Twist,
    pub human_root: Twist,
    pub joints: Vec<Vec3>,
}

#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub step: usize,
    pub seed: u64,
    pub log: Vec<LogRow>,
    pub updates: BTreeMap<usize, FrameUpdate>,
    initial_shape: Option<f64>,
    initial_pose: Option<f64>,
}

impl OptimState {
    pub fn new(seed: u64) -> Self {
        OptimState { seed, ..Default::default() }
    }

    pub fn is_finite(&self) -> bool {
        self.log.iter().all(|r| r.total.is_finite())
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,cycle,stage,rgb,mask,depth,normal,contact,collision,body,hand,eikonal,total\n");
        for r in &self.log {
            let t = &r.terms;
            let stage = match r.stage {
                Stage::ShapeFit => "I",
                Stage::PoseRefine => "II",
            };
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.step,
                r.cycle,
                stage,
                t.rgb,
                t.mask,
                t.depth,
                t.normal,
                t.contact,
                t.collision,
                t.body,
                t.hand,
                t.eikonal,
                r.total
            );
        }
        s
    }

    fn check_divergence(&mut self, stage: Stage, total: f64, factor: f64) -> Result<()> {
        let slot = match stage {
            Stage::ShapeFit => &mut self.initial_shape,
            Stage::PoseRefine => &mut self.initial_pose,
        };
        let initial = *slot.get_or_insert(total);
        if !total.is_finite() || total > factor * initial.max(DIVERGENCE_FLOOR) {
            return Err(Error::DivergenceDetected { step: self.step, loss: total, initial });
        }
        Ok(())
    }
}

/// One observed frame.
#[derive(Clone, Debug)]
pub struct Observation {
    pub camera: Camera,
    pub buffers: RenderBuffers,
}

#[derive(Clone, Debug, Default)]
pub struct Observations {
    frames: BTreeMap<usize, Observation>,
}

impl Observations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: usize, camera: Camera, buffers: RenderBuffers) -> Result<()> {
        if (buffers.width, buffers.height) != (camera.width, camera.height) {
            return Err(Error::DimensionMismatch(format!(
                "frame {frame}: {}x{} buffers for a {}x{} camera",
                buffers.width, buffers.height, camera.width, camera.height
            )));
        }
        self.frames.insert(frame, Observation { camera, buffers });
        Ok(())
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut out = Observations::new();
        for (f, buf) in &data.observations {
            out.insert(*f, data.camera(*f)?, buf.clone())?;
        }
        Ok(out)
    }

    /// Renders `components` from each camera.
    pub fn render(components: &ComponentSet, cameras: &BTreeMap<usize, Camera>, cfg: &RenderConfig) -> Result<Self> {
        let mut out = Observations::new();
        for (f, cam) in cameras {
            out.insert(*f, *cam, render_image(components, cam, *f, cfg)?)?;
        }
        Ok(out)
    }

    pub fn get(&self, frame: usize) -> Option<&Observation> {
        self.frames.get(&frame)
    }

    pub fn frames(&self) -> impl Iterator<Item = (usize, &Observation)> {
        self.frames.iter().map(|(f, o)| (*f, o))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ContactInputs {
    pub timeline: ContactTimeline,
    pub points: ContactPointSet,
}

/// Samples and references for the body and hand shape priors.
#[derive(Clone, Debug)]
pub struct ShapePriors {
    pub proxy: AnalyticSdf,
    pub interior: Vec<Vec3>,
    pub hand: Vec<Vec3>,
    pub falloff: WristFalloff,
}

impl ShapePriors {
    /// Interior samples of the capsule proxy and uniform samples around the
    /// hand bone; the falloff band sits at the wrist joint.
    pub fn from_skeleton(skel: &Skeleton, n: usize, seed: u64) -> Self {
        let proxy = skel.capsule_proxy();
        let interior = sample_interior(&proxy, n, seed);
        let bones = skel.bones();
        let h = bones.iter().position(|b| b.name == "hand").unwrap_or(bones.len() - 1);
        let hand = &bones[h];
        let (a, b) = (hand.rest.transform_point(&hand.capsule.a), hand.rest.transform_point(&hand.capsule.b));
        let center = (a + b) * 0.5;
        let wrist = hand.rest.translation;
        let parent_origin = hand.parent.map_or(wrist - Vec3::x(), |p| bones[p].rest.translation);
        let dir = wrist - parent_origin;
        let direction = if dir.norm() > 0.0 { dir.normalize() } else { Vec3::x() };
        let r = hand.capsule.radius;
        let reach = Vec3::repeat(r + 0.05) + (b - a).abs() * 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x68616e64);
        let samples = (0..n)
            .map(|_| {
                Vec3::new(
                    center.x + reach.x * (2.0 * rng.random::<f64>() - 1.0),
                    center.y + reach.y * (2.0 * rng.random::<f64>() - 1.0),
                    center.z + reach.z * (2.0 * rng.random::<f64>() - 1.0),
                )
            })
            .collect();
        ShapePriors { proxy, interior, hand: samples, falloff: WristFalloff { center: wrist, direction, width: 2.0 * r } }
    }
}

/// Inputs shared by every step.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub config: &'a RefineConfig,
    pub observations: &'a Observations,
    pub contacts: Option<&'a ContactInputs>,
    pub priors: Option<&'a ShapePriors>,
}

/// Fixed ray set per observed frame.
pub type RayPlan = BTreeMap<usize, Vec<usize>>;

/// Draws `n` pixels per observed frame, split across the ground-truth
/// human, object and scene masks and the projected hand region. Buckets
/// that are empty hand their share to the whole image.
pub fn plan_rays(
    components: &ComponentSet,
    obs: &Observations,
    ratios: &SamplingRatios,
    n: usize,
    seed: u64,
) -> Result<RayPlan> {
    ratios.validate()?;
    let mut plan = RayPlan::new();
    for (f, o) in obs.frames() {
        let cam = &o.camera;
        let buf = &o.buffers;
        let all: Vec<usize> = (0..cam.pixel_count()).collect();
        let of = |id: ComponentId| -> Vec<usize> { all.iter().copied().filter(|p| buf.mask[*p] == Some(id)).collect() };
        let human = of(ComponentId::Human);
        let object = of(ComponentId::Object);
        let scene: Vec<usize> =
            all.iter().copied().filter(|p| matches!(buf.mask[*p], None | Some(ComponentId::Scene))).collect();
        let hand = hand_pixels(components, cam, f, &human)?;
        let buckets = [(human, ratios.human), (object, ratios.object), (hand, ratios.hand), (scene, ratios.scene)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (f as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x7261_7973);
        let mut pixels = Vec::with_capacity(n);
        let mut assigned = 0;
        for (k, (bucket, r)) in buckets.iter().enumerate() {
            let count = if k == buckets.len() - 1 { n - assigned } else { ((r * n as f64).round() as usize).min(n - assigned) };
            assigned += count;
            let from = if bucket.is_empty() { &all } else { bucket };
            pixels.extend((0..count).map(|_| from[rng.random_range(0..from.len())]));
        }
        plan.insert(f, pixels);
    }
    Ok(plan)
}

fn hand_pixels(components: &ComponentSet, cam: &Camera, frame: usize, human_px: &[usize]) -> Result<Vec<usize>> {
    let Some(track) = &components.human else {
        return Ok(Vec::new());
    };
    let Some(pose) = track.poses.get(&frame) else {
        return Ok(Vec::new());
    };
    let skel = &track.skeleton;
    let posed = skel.posed(pose)?;
    let h = skel.bones().iter().position(|b| b.name == "hand").unwrap_or(skel.len() - 1);
    let bone = &skel.bones()[h];
    let mid = (bone.rest.transform_point(&bone.capsule.a) + bone.rest.transform_point(&bone.capsule.b)) * 0.5;
    let center = posed.skinning_transforms()[h].transform_point(&mid);
    let extent = 0.5 * (bone.capsule.b - bone.capsule.a).norm() + bone.capsule.radius;
    let in_cam = cam.pose.inverse().transform_point(&center);
    let Some((u, v)) = cam.project(&center) else {
        return Ok(Vec::new());
    };
    let radius = cam.fx * extent / in_cam.z.max(1e-6);
    Ok(human_px
        .iter()
        .copied()
        .filter(|p| {
            let (pu, pv) = ((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5);
            (pu - u).hypot(pv - v) <= radius
        })
        .collect())
}

struct PixelTarget {
    color: [f64; 3],
    mask: Option<ComponentId>,
    depth: Option<f64>,
    normal: Option<Vec3>,
}

impl PixelTarget {
    fn of(buf: &RenderBuffers, p: usize) -> Self {
        let hit = buf.mask[p].is_some() && buf.depth[p].is_finite();
        let n = buf.normal[p];
        let n = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
        PixelTarget {
            color: buf.color[p].map(|c| c as f64),
            mask: buf.mask[p],
            depth: hit.then_some(buf.depth[p] as f64),
            normal: (hit && n.norm() > 0.5).then(|| n.normalize()),
        }
    }
}

/// Per-ray rendering losses and their derivatives with respect to sample
/// weights τ and sample albedo.
struct RayLoss {
    terms: [f64; 4],
    dtau: [Vec<f64>; 4],
    dcolor: [f64; 3],
}

fn ray_loss(tr: &RayTrace, target: &PixelTarget, bg: [f64; 3]) -> RayLoss {
    let c = &tr.composite;
    let n = tr.samples.len();
    let tau = &c.tau;
    let mut terms = [0.0; 4];
    let mut dtau = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    let res: [f64; 3] = std::array::from_fn(|k| c.color[k] - target.color[k]);
    terms[0] = res.iter().map(|r| r * r).sum::<f64>() / 3.0;
    let dcolor = res.map(|r| 2.0 * r / 3.0);
    for i in 0..n {
        dtau[0][i] = (0..3).map(|k| dcolor[k] * (tr.colors[i][k] - bg[k])).sum();
    }

    let want: [f64; 3] = std::array::from_fn(|k| if target.mask.map(|m| m.slot()) == Some(k) { 1.0 } else { 0.0 });
    terms[1] = (0..3).map(|k| (c.weights[k] - want[k]).powi(2)).sum();
    for (i, s) in tr.samples.iter().enumerate() {
        let k = s.component.slot();
        dtau[1][i] = 2.0 * (c.weights[k] - want[k]);
    }

    if let Some(d_gt) = target.depth {
        if c.acc > 1e-6 {
            let d: f64 = tau.iter().zip(&tr.samples).map(|(w, s)| w * s.t).sum::<f64>() / c.acc;
            let r = d - d_gt;
            terms[2] = r * r;
            for (i, s) in tr.samples.iter().enumerate() {
                dtau[2][i] = 2.0 * r * (s.t - d) / c.acc;
            }
        }
    }

    if let Some(n_gt) = target.normal {
        let normals: Vec<Vec3> =
            tr.samples.iter().map(|s| if s.gradient.norm() > 0.0 { s.gradient.normalize() } else { Vec3::zeros() }).collect();
        let raw: Vec3 = normals.iter().zip(tau).map(|(nv, w)| nv * *w).sum();
        let len = raw.norm();
        if len > 1e-9 {
            let nn = raw / len;
            let r = nn - n_gt;
            terms[3] = r.norm_squared();
            let proj = (Mat3::identity() - nn * nn.transpose()) * r * (2.0 / len);
            for i in 0..n {
                dtau[3][i] = proj.dot(&normals[i]);
            }
        }
    }
    RayLoss { terms, dtau, dcolor }
}

/// Gradient of a ray loss with respect to grid values and albedo, keyed by
/// component slot and node index.
#[derive(Default)]
struct GridGrad {
    sdf: Vec<(usize, usize, f64)>,
    albedo: Vec<(usize, usize, [f64; 3])>,
}

fn component_grids<'a>(view: &FrameView<'a>, c: ComponentId) -> (&'a SdfGrid, &'a crate::sdf::ColorGrid) {
    match c {
        ComponentId::Human => {
            let t = view.human.as_ref().unwrap().track;
            (t.skeleton.canonical_sdf(), &t.albedo)
        }
        ComponentId::Object => {
            let t = view.object.as_ref().unwrap().track;
            (&t.sdf, &t.albedo)
        }
        ComponentId::Scene => {
            let f = view.scene.as_ref().unwrap().field;
            (&f.sdf, &f.albedo)
        }
    }
}

fn grid_gradient(view: &FrameView, tr: &RayTrace, loss: &RayLoss, w: &LossWeights) -> GridGrad {
    let n = tr.samples.len();
    let ws = [w.w_rgb, w.w_mask, w.w_depth, w.w_normal];
    let dl: Vec<f64> = (0..n).map(|i| (0..4).map(|k| ws[k] * loss.dtau[k][i]).sum()).collect();
    let dxi = tr.xi_gradients(&dl);
    let mut out = GridGrad::default();
    for (i, s) in tr.samples.iter().enumerate() {
        if !s.valid {
            continue;
        }
        let (sdf, albedo) = component_grids(view, s.component);
        let slot = s.component.slot();
        if dxi[i] != 0.0 {
            let c = sdf.corners(&s.canonical);
            for k in 0..8 {
                if c.weight[k] != 0.0 {
                    out.sdf.push((slot, c.index[k], dxi[i] * c.weight[k]));
                }
            }
        }
        let tau = tr.composite.tau[i];
        if w.w_rgb > 0.0 && tau != 0.0 {
            let g = loss.dcolor.map(|d| w.w_rgb * d * tau);
            let c = albedo.corners(&s.canonical);
            for k in 0..8 {
                if c.weight[k] != 0.0 {
                    out.albedo.push((slot, c.index[k], g.map(|v| v * c.weight[k])));
                }
            }
        }
    }
    out
}

/// Gradient of a ray loss with respect to the frame's poses, through the
/// sample positions in each component's canonical frame.
fn pose_gradient(view: &FrameView, tr: &RayTrace, loss: &RayLoss, w: &LossWeights, photometric: bool) -> PoseGradient {
    let bones = view.human.as_ref().map_or(0, |h| h.posed.world_transforms().len());
    let n = tr.samples.len();
    let ws = if photometric {
        [w.w_rgb, w.w_mask, w.w_depth, w.w_normal]
    } else {
        [0.0, w.w_mask, w.w_depth, 0.0]
    };
    let dl: Vec<f64> = (0..n).map(|i| (0..4).map(|k| ws[k] * loss.dtau[k][i]).sum()).collect();
    let dxi = tr.xi_gradients(&dl);
    let mut g = PoseGradient::zeros(bones);
    for (i, s) in tr.samples.iter().enumerate() {
        if !s.valid || dxi[i] == 0.0 {
            continue;
        }
        match s.component {
            ComponentId::Object => {
                let o = view.object.as_ref().unwrap();
                let gc = o.pose.rotation.matrix().transpose() * s.gradient * dxi[i];
                let y = s.canonical;
                g.object += stack(&(skew(&y).transpose() * gc), &(-gc));
            }
            ComponentId::Human => {
                let h = view.human.as_ref().unwrap();
                let gw = -s.gradient * dxi[i];
                let x = h.posed.forward(&s.canonical);
                let z = h.global.inverse().transform_point(&x);
                let gz = h.global.rotation.matrix().transpose() * gw;
                g.human_root += stack(&(-(skew(&z).transpose() * gz)), &gz);
                for (j, jac) in h.posed.joint_jacobians(&s.canonical).iter().enumerate() {
                    g.joints[j] += jac.transpose() * gw;
                }
            }
            ComponentId::Scene => {}
        }
    }
    g
}

fn stack(a: &Vec3, b: &Vec3) -> Twist {
    Twist::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Fixed samples for every planned ray at the current poses.
fn ray_samples(view: &FrameView, cam: &Camera, pixels: &[usize], cfg: &RenderConfig, frame: usize) -> Vec<Vec<RaySample>> {
    let boxes = view.boxes();
    pixels
        .iter()
        .map(|&p| {
            let mut rng = ray_rng(cfg.seed, frame, p);
            sample_ray(&boxes, &cam.ray(p % cam.width, p / cam.width), cfg.samples_per_component, cfg, &mut rng)
        })
        .collect()
}

/// Mean rendering loss of one frame over `pixels`, its weighted total, and
/// the requested gradients. With `samples` given, those sample positions are
/// used instead of fresh stratified ones.
pub struct FrameLoss {
    pub terms: LossTerms,
    pub total: f64,
    pub pose: Option<PoseGradient>,
    grid: Option<GridGrad>,
}

pub fn frame_render_loss(
    view: &FrameView,
    obs: &Observation,
    pixels: &[usize],
    cfg: &RefineConfig,
    samples: Option<&[Vec<RaySample>]>,
    want_grid: bool,
    want_pose: bool,
) -> FrameLoss {
    let cam = &obs.camera;
    let owned;
    let samples = match samples {
        Some(s) => s,
        None => {
            owned = ray_samples(view, cam, pixels, &cfg.render, view.frame);
            &owned
        }
    };
    let w = &cfg.weights;
    let per_ray: Vec<(RayLoss, Option<GridGrad>, Option<PoseGradient>)> = pixels
        .par_iter()
        .zip(samples.par_iter())
        .map(|(&p, smp)| {
            let ray = cam.ray(p % cam.width, p / cam.width);
            let tr = view.trace_samples(&ray, smp, &cfg.render);
            let loss = ray_loss(&tr, &PixelTarget::of(&obs.buffers, p), cfg.render.background);
            let gg = want_grid.then(|| grid_gradient(view, &tr, &loss, w));
            let pg = want_pose.then(|| pose_gradient(view, &tr, &loss, w, cfg.params.photometric_pose_gradients));
            (loss, gg, pg)
        })
        .collect();
    let scale = 1.0 / pixels.len().max(1) as f64;
    let bones = view.human.as_ref().map_or(0, |h| h.posed.world_transforms().len());
    let mut t = [0.0; 4];
    let mut grid = want_grid.then(GridGrad::default);
    let mut pose = want_pose.then(|| PoseGradient::zeros(bones));
    for (loss, gg, pg) in per_ray {
        for k in 0..4 {
            t[k] += loss.terms[k] * scale;
        }
        if let (Some(acc), Some(g)) = (grid.as_mut(), gg) {
            acc.sdf.extend(g.sdf.into_iter().map(|(s, i, v)| (s, i, v * scale)));
            acc.albedo.extend(g.albedo.into_iter().map(|(s, i, v)| (s, i, v.map(|x| x * scale))));
        }
        if let (Some(acc), Some(g)) = (pose.take(), pg) {
            pose = Some(acc.add(&g.scale(scale)));
        }
    }
    let terms = LossTerms { rgb: t[0], mask: t[1], depth: t[2], normal: t[3], ..Default::default() };
    FrameLoss { total: terms.total(w), terms, pose, grid }
}

fn slot_len(components: &ComponentSet, slot: usize) -> usize {
    match slot {
        0 => components.human.as_ref().map_or(0, |h| h.skeleton.canonical_sdf().values().len()),
        1 => components.object.as_ref().map_or(0, |o| o.sdf.values().len()),
        _ => components.scene.as_ref().map_or(0, |s| s.sdf.values().len()),
    }
}

/// Nodes whose value lies within this many grid spacings of zero carry the
/// unit-gradient penalty.
pub const EIKONAL_BAND: f64 = 3.0;

/// Mean of `(‖∇ξ‖ − 1)²` over nodes with `|ξ| < band`, using forward
/// differences. The gradient with respect to node values is added to `grad`.
pub fn eikonal_loss(grid: &SdfGrid, band: f64, mut grad: Option<&mut [f64]>) -> f64 {
    let [nx, ny, nz] = grid.dims();
    let h = grid.spacing();
    let v = grid.values();
    let at = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut terms = Vec::new();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let c = at(i, j, k);
                if (v[c] as f64).abs() >= band {
                    continue;
                }
                let nb = [at(i + 1, j, k), at(i, j + 1, k), at(i, j, k + 1)];
                let g = Vec3::new(
                    (v[nb[0]] - v[c]) as f64 / h.x,
                    (v[nb[1]] - v[c]) as f64 / h.y,
                    (v[nb[2]] - v[c]) as f64 / h.z,
                );
                terms.push((c, nb, g));
            }
        }
    }
    if terms.is_empty() {
        return 0.0;
    }
    let n = terms.len() as f64;
    let mut total = 0.0;
    for (c, nb, g) in terms {
        let len = g.norm();
        total += (len - 1.0).powi(2);
        if let (Some(out), true) = (grad.as_deref_mut(), len > 0.0) {
            let s = 2.0 * (len - 1.0) / (len * n);
            for a in 0..3 {
                let d = s * g[a] / h[a];
                out[nb[a]] += d;
                out[c] -= d;
            }
        }
    }
    total / n
}

fn clip(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// One Stage I step: rendering losses over the planned rays of every
/// observed frame plus the body and hand priors on the human grid.
pub fn shape_step(components: &mut ComponentSet, problem: &Problem, plan: &RayPlan, state: &mut OptimState) -> Result<LossTerms> {
    let cfg = problem.config;
    let w = &cfg.weights;
    let lens: [usize; 3] = std::array::from_fn(|s| slot_len(components, s));
    let offsets = [0, lens[0], lens[0] + lens[1]];
    let total_len = lens.iter().sum::<usize>();
    let mut g_sdf = vec![0.0; total_len];
    let mut g_alb = vec![0.0; 3 * total_len];
    let mut terms = LossTerms::default();

    let frames: Vec<usize> = plan.keys().copied().filter(|f| problem.observations.get(*f).is_some()).collect();
    if w.rendering() && !frames.is_empty() {
        let fs = 1.0 / frames.len() as f64;
        for &f in &frames {
            let view = components.frame(f)?;
            let fl = frame_render_loss(&view, problem.observations.get(f).unwrap(), &plan[&f], cfg, None, true, false);
            terms.add_scaled(&fl.terms, fs);
            let gg = fl.grid.unwrap();
            for (s, i, v) in gg.sdf {
                g_sdf[offsets[s] + i] += v * fs;
            }
            for (s, i, v) in gg.albedo {
                for k in 0..3 {
                    g_alb[3 * (offsets[s] + i) + k] += v[k] * fs;
                }
            }
        }
    }

    if let (Some(h), Some(pr)) = (&components.human, problem.priors) {
        let grid = h.skeleton.canonical_sdf();
        let mut tmp = vec![0.0; lens[0]];
        if w.w_body > 0.0 {
            terms.body = body_prior_loss(grid, &pr.interior, &cfg.phys, Some(&mut tmp));
            for (a, b) in g_sdf[..lens[0]].iter_mut().zip(&tmp) {
                *a += w.w_body * b;
            }
        }
        if w.w_hand > 0.0 {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            terms.hand = hand_sdf_loss(grid, &pr.proxy, &pr.hand, &pr.falloff, Some(&mut tmp));
            for (a, b) in g_sdf[..lens[0]].iter_mut().zip(&tmp) {
                *a += w.w_hand * b;
            }
        }
    }

    if w.w_eikonal > 0.0 {
        let grids: [Option<&SdfGrid>; 3] = [
            components.human.as_ref().map(|h| h.skeleton.canonical_sdf()),
            components.object.as_ref().map(|o| &o.sdf),
            components.scene.as_ref().map(|s| &s.sdf),
        ];
        let present = grids.iter().flatten().count() as f64;
        for (slot, grid) in grids.iter().enumerate() {
            if let Some(grid) = grid {
                let mut tmp = vec![0.0; lens[slot]];
                terms.eikonal += eikonal_loss(grid, EIKONAL_BAND * grid.min_spacing(), Some(&mut tmp)) / present;
                for (a, b) in g_sdf[offsets[slot]..offsets[slot] + lens[slot]].iter_mut().zip(&tmp) {
                    *a += w.w_eikonal * b / present;
                }
            }
        }
    }

    state.check_divergence(Stage::ShapeFit, terms.total(w), cfg.params.divergence_factor)?;

    // each component's grid is its own parameter group
    for slot in 0..3 {
        let range = offsets[slot]..offsets[slot] + lens[slot];
        clip(&mut g_sdf[range.clone()], cfg.params.clip_norm);
        clip(&mut g_alb[3 * range.start..3 * range.end], cfg.params.clip_norm);
    }
    let (d_sdf, d_alb) = (g_sdf, g_alb);
    let (lr_g, lr_a) = (cfg.params.lr_grid, cfg.params.lr_albedo);
    let max_step = cfg.params.max_node_step;
    let apply = |vals: &mut [f32], alb: &mut [[f32; 3]], off: usize, spacing: f64| {
        let cap = max_step * spacing;
        for (i, v) in vals.iter_mut().enumerate() {
            *v -= (lr_g * d_sdf[off + i]).clamp(-cap, cap) as f32;
        }
        for (i, c) in alb.iter_mut().enumerate() {
            for k in 0..3 {
                c[k] = (c[k] as f64 - lr_a * d_alb[3 * (off + i) + k]).clamp(0.0, 1.0) as f32;
            }
        }
    };
    if let Some(h) = components.human.as_mut() {
        let spacing = h.skeleton.canonical_sdf().min_spacing();
        apply(h.skeleton.canonical_sdf_mut().values_mut(), h.albedo.values_mut(), offsets[0], spacing);
    }
    if let Some(o) = components.object.as_mut() {
        let spacing = o.sdf.min_spacing();
        apply(o.sdf.values_mut(), o.albedo.values_mut(), offsets[1], spacing);
    }
    if let Some(s) = components.scene.as_mut() {
        let spacing = s.sdf.min_spacing();
        apply(s.sdf.values_mut(), s.albedo.values_mut(), offsets[2], spacing);
    }
    Ok(terms)
}

/// Contact vertices used on frame `f`: those of a Contact-labelled frame,
/// optionally capped to the most probable.
fn contact_vertices(inputs: &ContactInputs, f: usize, cap: Option<usize>) -> Vec<Vec3> {
    let Some(frame) = inputs.timeline.frames.iter().find(|c| c.i == f) else {
        return Vec::new();
    };
    if frame.label != ContactLabel::Contact {
        return Vec::new();
    }
    let mut verts = frame.verts.clone();
    if let Some(cap) = cap {
        verts.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.id.cmp(&b.id)));
        verts.truncate(cap);
        verts.sort_by_key(|v| v.id);
    }
    verts.iter().filter_map(|v| inputs.points.get(v.id).copied()).collect()
}

/// Per-frame objective for Stage II: rendering losses on observed frames
/// plus contact and collision terms. Returns the weighted terms and the
/// pose gradient.
pub fn frame_pose_objective(
    components: &ComponentSet,
    problem: &Problem,
    plan: &RayPlan,
    frame: usize,
) -> Result<(LossTerms, PoseGradient)> {
    let cfg = problem.config;
    let w = &cfg.weights;
    let view = components.frame(frame)?;
    let bones = view.human.as_ref().map_or(0, |h| h.posed.world_transforms().len());
    let mut terms = LossTerms::default();
    let mut grad = PoseGradient::zeros(bones);
    if let (Some(obs), Some(px)) = (problem.observations.get(frame), plan.get(&frame)) {
        if w.rendering() {
            let fl = frame_render_loss(&view, obs, px, cfg, None, false, true);
            terms = fl.terms;
            grad = fl.pose.unwrap();
        }
    }
    if let (Some(ci), Some(h), Some(o)) = (problem.contacts, &view.human, &view.object) {
        let pts = contact_vertices(ci, frame, cfg.params.contact_cap);
        if w.w_contact > 0.0 {
            let (l, g) = pose_term(PhysTerm::Contact, &h.posed, &h.global, &o.track.sdf, &o.pose, &pts, &cfg.phys);
            terms.contact = l;
            grad = grad.add(&g.scale(w.w_contact));
        }
        if w.w_collision > 0.0 {
            // every body point is repelled with the per-point weight of the
            // contact attraction
            let all = ci.points.points();
            let scale = all.len() as f64 / pts.len().max(1) as f64;
            let (l, g) = pose_term(PhysTerm::Collision, &h.posed, &h.global, &o.track.sdf, &o.pose, all, &cfg.phys);
            terms.collision = l * scale;
            grad = grad.add(&g.scale(w.w_collision * scale));
        }
    }
    Ok((terms, grad))
}

fn pose_frames(components: &ComponentSet) -> Vec<usize> {
    match (&components.object, &components.human) {
        (Some(o), _) => o.motion.indices().collect(),
        (None, Some(h)) => h.poses.keys().copied().collect(),
        _ => Vec::new(),
    }
}

/// One Stage II step over every frame. Grids are not touched.
pub fn pose_step(components: &mut ComponentSet, problem: &Problem, plan: &RayPlan, state: &mut OptimState) -> Result<LossTerms> {
    let cfg = problem.config;
    let prm = &cfg.params;
    let frames = pose_frames(components);
    if frames.is_empty() {
        return Ok(LossTerms::default());
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for &f in &frames {
        per_frame.push(frame_pose_objective(components, problem, plan, f)?);
    }
    let mut terms = LossTerms::default();
    let fs = 1.0 / frames.len() as f64;
    for (t, _) in &per_frame {
        terms.add_scaled(t, fs);
    }
    state.check_divergence(Stage::PoseRefine, terms.total(&cfg.weights), prm.divergence_factor)?;

    for (&f, (_, g)) in frames.iter().zip(per_frame) {
        let mut flat: Vec<f64> = g.object.iter().chain(g.human_root.iter()).copied().collect();
        if prm.optimize_joints {
            flat.extend(g.joints.iter().flat_map(|j| j.iter().copied()));
        }
        clip(&mut flat, prm.clip_norm);
        let scaled = |t: &[f64]| Twist::new(
            prm.lr_rotation * t[0],
            prm.lr_rotation * t[1],
            prm.lr_rotation * t[2],
            prm.lr_translation * t[3],
            prm.lr_translation * t[4],
            prm.lr_translation * t[5],
        );
        let d_obj = -scaled(&flat[0..6]);
        let d_root = -scaled(&flat[6..12]);
        let d_joints: Vec<Vec3> = if prm.optimize_joints {
            flat[12..].chunks(3).map(|c| -Vec3::new(c[0], c[1], c[2]) * prm.lr_rotation).collect()
        } else {
            Vec::new()
        };
        let upd = state.updates.entry(f).or_default();
        if let Some(o) = components.object.as_mut() {
            if let Some(tp) = o.motion.frames_mut().iter_mut().find(|t| t.index == f) {
                tp.pose = tp.pose.compose(&exp_se3(&d_obj));
                upd.object += d_obj;
            }
        }
        if let Some(h) = components.human.as_mut() {
            if let Some(bp) = h.poses.get_mut(&f) {
                bp.set_global(&bp.global().compose(&exp_se3(&d_root)));
                upd.human_root += d_root;
                if upd.joints.len() != bp.local.len() {
                    upd.joints = vec![Vec3::zeros(); bp.local.len()];
                }
                for (j, d) in d_joints.iter().enumerate() {
                    bp.local[j] = bp.local[j].compose(&Rot3::from_scaled_axis(d));
                    upd.joints[j] += d;
                }
            }
        }
    }
    Ok(terms)
}

fn stage_plan(components: &ComponentSet, problem: &Problem, ratios: &SamplingRatios, seed: u64) -> Result<RayPlan> {
    plan_rays(components, problem.observations, ratios, problem.config.schedule.rays_per_frame, seed)
}

fn log_step(state: &mut OptimState, problem: &Problem, stage: Stage, cycle: usize, terms: LossTerms) {
    let total = terms.total(&problem.config.weights);
    log::debug!("step {} {:?} loss {total:.6e}", state.step, stage);
    state.log.push(LogRow { step: state.step, cycle, stage, terms, total });
    state.step += 1;
}

/// Runs `steps` Stage I steps on a fixed ray plan.
pub fn stage1_fit(components: &mut ComponentSet, problem: &Problem, steps: usize, state: &mut OptimState) -> Result<()> {
    problem.config.validate()?;
    let plan = stage_plan(components, problem, &problem.config.schedule.ratios, state.seed)?;
    for _ in 0..steps {
        let t = shape_step(components, problem, &plan, state)?;
        log_step(state, problem, Stage::ShapeFit, 0, t);
    }
    Ok(())
}

/// Runs `steps` Stage II steps on a fixed ray plan.
pub fn stage2_refine(components: &mut ComponentSet, problem: &Problem, steps: usize, state: &mut OptimState) -> Result<()> {
    problem.config.validate()?;
    let plan = stage_plan(components, problem, &problem.config.schedule.ratios, state.seed)?;
    for _ in 0..steps {
        let t = pose_step(components, problem, &plan, state)?;
        log_step(state, problem, Stage::PoseRefine, 0, t);
    }
    Ok(())
}

/// Serializable pose snapshot written with each checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseSnapshot {
    pub human: BTreeMap<usize, BodyPose>,
    /// Row-major object-to-world matrices.
    pub object: BTreeMap<usize, [f64; 16]>,
}

impl PoseSnapshot {
    pub fn of(components: &ComponentSet) -> Self {
        PoseSnapshot {
            human: components.human.as_ref().map(|h| h.poses.clone()).unwrap_or_default(),
            object: components
                .object
                .as_ref()
                .map(|o| o.motion.frames().iter().map(|t| (t.index, t.pose.to_row_major())).collect())
                .unwrap_or_default(),
        }
    }
}

/// Writes `cycle_<k>/{grids.sdfg, poses.json, log.csv}` under `dir`. The
/// grid file holds the human, object and scene grids back to back.
pub fn write_checkpoint(dir: &Path, cycle: usize, components: &ComponentSet, state: &OptimState) -> Result<()> {
    let d = dir.join(format!("cycle_{cycle}"));
    let mut bytes = Vec::new();
    if let Some(h) = &components.human {
        bytes.extend(h.skeleton.canonical_sdf().to_bytes());
    }
    if let Some(o) = &components.object {
        bytes.extend(o.sdf.to_bytes());
    }
    if let Some(s) = &components.scene {
        bytes.extend(s.sdf.to_bytes());
    }
    io::write_bytes(&d.join("grids.sdfg"), &bytes)?;
    io::write_json(&d.join("poses.json"), &PoseSnapshot::of(components))?;
    io::write_text(&d.join("log.csv"), &state.log_csv())
}

/// Runs the full alternating schedule. Errors from a step are reported with
/// the cycle they occurred in. With `checkpoints` set, a checkpoint is written
/// at the end of every cycle.
pub fn run_schedule(
    mut components: ComponentSet,
    problem: &Problem,
    checkpoints: Option<&Path>,
) -> Result<(ComponentSet, OptimState)> {
    let cfg = problem.config;
    cfg.validate()?;
    components.validate()?;
    let sched = &cfg.schedule;
    let mut state = OptimState::new(cfg.seed);
    if sched.total_steps == 0 {
        return Ok((components, state));
    }
    if problem.observations.is_empty() && !(problem.contacts.is_some() || problem.priors.is_some()) {
        return Err(Error::EmptyInput("no observations, contacts or priors to refine against"));
    }
    let mut plan: Option<(bool, RayPlan)> = None;
    for step in 0..sched.total_steps {
        let stage = sched.stage_at(step);
        let cycle = sched.cycle_at(step);
        let early = step < sched.early_epochs;
        if plan.as_ref().is_none_or(|(e, _)| *e != early) {
            let p = stage_plan(&components, problem, sched.ratios_at(step), cfg.seed)
                .map_err(|e| Error::InCycle { cycle, source: Box::new(e) })?;
            plan = Some((early, p));
        }
        let rays = &plan.as_ref().unwrap().1;
        let result = match stage {
            Stage::ShapeFit => Some(shape_step(&mut components, problem, rays, &mut state)),
            Stage::PoseRefine if cfg.params.pose_steps => Some(pose_step(&mut components, problem, rays, &mut state)),
            Stage::PoseRefine => None,
        };
        match result {
            Some(r) => {
                let terms = r.map_err(|e| Error::InCycle { cycle, source: Box::new(e) })?;
                log_step(&mut state, problem, stage, cycle, terms);
            }
            None => state.step += 1,
        }
        let last_of_cycle = step + 1 == sched.total_steps || sched.cycle_at(step + 1) != cycle;
        if let (Some(dir), true) = (checkpoints, last_of_cycle) {
            write_checkpoint(dir, cycle, &components, &state).map_err(|e| Error::InCycle { cycle, source: Box::new(e) })?;
        }
    }
    Ok((components, state))
}
