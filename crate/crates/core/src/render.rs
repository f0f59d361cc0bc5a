//! Compositional volume rendering of the human, object and scene fields.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Vec3};
use crate::io;
use crate::sdf::{ColorGrid, SdfGrid, SdfSample, SignedDistance};
use crate::skeleton::{BodyPose, PosedSkeleton, Skeleton, DEFAULT_MAX_ITER};
use crate::trajectory::ObjectMotion;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentId {
    Human = 1,
    Object = 2,
    Scene = 3,
}

impl ComponentId {
    pub const ALL: [ComponentId; 3] = [ComponentId::Human, ComponentId::Object, ComponentId::Scene];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Position in per-component arrays.
    pub fn slot(self) -> usize {
        self as usize - 1
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ComponentId::Human),
            2 => Some(ComponentId::Object),
            3 => Some(ComponentId::Scene),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Pinhole camera looking along +z with +y down; `pose` is camera-to-world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(with = "crate::geometry::pose_serde")]
    pub pose: Pose,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, pose: Pose) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image resolution must be non-zero".into()));
        }
        Ok(Camera { fx, fy, cx, cy, width, height, pose })
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Camera { pose, ..*self }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the center of pixel (u, v).
    pub fn ray(&self, u: usize, v: usize) -> Ray {
        let d = Vec3::new((u as f64 + 0.5 - self.cx) / self.fx, (v as f64 + 0.5 - self.cy) / self.fy, 1.0);
        Ray { origin: self.pose.translation, dir: self.pose.rotation.rotate(&d.normalize()) }
    }

    /// Continuous pixel coordinates of a world point in front of the camera.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        let c = self.pose.inverse().transform_point(x);
        (c.z > 1e-9).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        Some(it.fold(Aabb { min: first, max: first }, |b, p| Aabb { min: b.min.inf(p), max: b.max.sup(p) }))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        std::array::from_fn(|k| {
            Vec3::new(
                if k & 1 == 0 { self.min.x } else { self.max.x },
                if k & 2 == 0 { self.min.y } else { self.max.y },
                if k & 4 == 0 { self.min.z } else { self.max.z },
            )
        })
    }

    pub fn of_grid(grid: &SdfGrid) -> Self {
        let (min, max) = grid.bounds();
        Aabb { min, max }
    }

    /// Box containing this one moved rigidly by `pose`.
    pub fn transformed(&self, pose: &Pose) -> Self {
        let c = self.corners().map(|p| pose.transform_point(&p));
        Aabb::from_points(&c).unwrap()
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    /// Parameter interval of the ray inside the box, clipped to [near, far].
    pub fn intersect(&self, ray: &Ray, near: f64, far: f64) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (near, far);
        for a in 0..3 {
            let inv = 1.0 / ray.dir[a];
            let (mut lo, mut hi) = ((self.min[a] - ray.origin[a]) * inv, (self.max[a] - ray.origin[a]) * inv);
            if inv.is_infinite() || lo.is_nan() || hi.is_nan() {
                if ray.origin[a] < self.min[a] || ray.origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Laplace-CDF density `σ = Ψ_β(−ξ)/β`.
pub fn sdf_to_density(xi: f64, beta: f64) -> f64 {
    let s = -xi;
    let psi = if s <= 0.0 { 0.5 * (s / beta).exp() } else { 1.0 - 0.5 * (-s / beta).exp() };
    psi / beta
}

/// `dσ/dξ`, the negated Laplace density scaled by `1/β`.
pub fn density_derivative(xi: f64, beta: f64) -> f64 {
    -0.5 * (-xi.abs() / beta).exp() / (beta * beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_per_component: usize,
    /// Overrides the per-component default of twice the grid spacing.
    pub beta: Option<f64>,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// Upper bound on the last sample's interval.
    pub far_cap: f64,
    pub seed: u64,
    /// Spread samples uniformly inside strata instead of at their centers.
    pub jitter: bool,
    pub lbs_max_iter: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_component: 64,
            beta: None,
            background: [1.0, 1.0, 1.0],
            near: 0.05,
            far: 20.0,
            far_cap: 1e10,
            seed: 0,
            jitter: true,
            lbs_max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_component < 2 {
            return Err(Error::InvalidInput("at least 2 samples per component are required".into()));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::InvalidInput(format!("beta must be positive, got {b}")));
            }
        }
        if !(self.near >= 0.0 && self.far > self.near && self.far_cap > 0.0) {
            return Err(Error::InvalidInput("need 0 <= near < far and a positive far cap".into()));
        }
        Ok(())
    }

    pub fn beta_for(&self, grid: &SdfGrid) -> f64 {
        self.beta.unwrap_or(2.0 * grid.min_spacing())
    }
}

#[derive(Clone, Debug)]
pub struct HumanTrack {
    pub skeleton: Skeleton,
    pub poses: BTreeMap<usize, BodyPose>,
    pub albedo: ColorGrid,
}

#[derive(Clone, Debug)]
pub struct ObjectTrack {
    pub sdf: SdfGrid,
    pub motion: ObjectMotion,
    pub albedo: ColorGrid,
}

#[derive(Clone, Debug)]
pub struct SceneField {
    pub sdf: SdfGrid,
    pub albedo: ColorGrid,
}

#[derive(Clone, Debug, Default)]
pub struct ComponentSet {
    pub human: Option<HumanTrack>,
    pub object: Option<ObjectTrack>,
    pub scene: Option<SceneField>,
}

/// Per-frame placement of the human.
pub struct HumanView<'a> {
    pub track: &'a HumanTrack,
    pub posed: PosedSkeleton<'a>,
    pub global: Pose,
    pub bounds: Aabb,
}

pub struct ObjectView<'a> {
    pub track: &'a ObjectTrack,
    pub pose: Pose,
    pub inverse: Pose,
    pub bounds: Aabb,
}

pub struct SceneView<'a> {
    pub field: &'a SceneField,
    pub bounds: Aabb,
}

/// Everything needed to trace rays at one frame.
pub struct FrameView<'a> {
    pub frame: usize,
    pub human: Option<HumanView<'a>>,
    pub object: Option<ObjectView<'a>>,
    pub scene: Option<SceneView<'a>>,
}

fn grid_boundary_positive(grid: &SdfGrid) -> bool {
    let [nx, ny, nz] = grid.dims();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let on_face = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                if on_face && grid.value_at(i, j, k) <= 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

impl ComponentSet {
    /// Human and object grids must enclose their surfaces: every boundary
    /// node is outside.
    pub fn validate(&self) -> Result<()> {
        if let Some(h) = &self.human {
            if !grid_boundary_positive(h.skeleton.canonical_sdf()) {
                return Err(Error::InvalidInput("human grid boundary cuts the surface".into()));
            }
        }
        if let Some(o) = &self.object {
            if !grid_boundary_positive(&o.sdf) {
                return Err(Error::InvalidInput("object grid boundary cuts the surface".into()));
            }
        }
        Ok(())
    }

    pub fn frame(&self, frame: usize) -> Result<FrameView<'_>> {
        let human = match &self.human {
            None => None,
            Some(track) => {
                let pose = track
                    .poses
                    .get(&frame)
                    .ok_or_else(|| Error::FrameMismatch(format!("no human pose for frame {frame}")))?;
                let posed = track.skeleton.posed(pose)?;
                let canon = Aabb::of_grid(track.skeleton.canonical_sdf()).corners();
                let moved: Vec<Vec3> = posed
                    .skinning_transforms()
                    .iter()
                    .flat_map(|t| canon.iter().map(move |c| t.transform_point(c)))
                    .collect();
                let bounds = Aabb::from_points(&moved).unwrap();
                Some(HumanView { track, posed, global: pose.global(), bounds })
            }
        };
        let object = match &self.object {
            None => None,
            Some(track) => {
                let pose = track
                    .motion
                    .get(frame)
                    .ok_or_else(|| Error::FrameMismatch(format!("no object pose for frame {frame}")))?;
                Some(ObjectView { track, pose: *pose, inverse: pose.inverse(), bounds: Aabb::of_grid(&track.sdf).transformed(pose) })
            }
        };
        let scene = self.scene.as_ref().map(|field| SceneView { field, bounds: Aabb::of_grid(&field.sdf) });
        Ok(FrameView { frame, human, object, scene })
    }
}

/// Ray parameter of one sample, with the stratum width of its component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub stride: f64,
    pub component: ComponentId,
}

/// Per-ray jitter stream keyed by (seed, frame, pixel).
pub fn ray_rng(seed: u64, frame: usize, pixel: usize) -> ChaCha8Rng {
    let key = seed
        ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (pixel as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    ChaCha8Rng::seed_from_u64(key)
}

/// Stratified samples over each component box hit by the ray, merged and
/// sorted by depth.
pub fn sample_ray(
    boxes: &[(ComponentId, Aabb)],
    ray: &Ray,
    n: usize,
    cfg: &RenderConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<RaySample> {
    let mut out = Vec::with_capacity(n * boxes.len());
    for (component, bounds) in boxes {
        let Some((t0, t1)) = bounds.intersect(ray, cfg.near, cfg.far) else {
            continue;
        };
        let stride = (t1 - t0) / n as f64;
        for k in 0..n {
            let u = if cfg.jitter { rng.random::<f64>() } else { 0.5 };
            out.push(RaySample { t: t0 + (k as f64 + u) * stride, stride, component: *component });
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.component.cmp(&b.component)));
    out
}

/// Input to [`composite`] for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeInput {
    pub t: f64,
    pub stride: f64,
    pub component: ComponentId,
    pub density: f64,
    pub color: [f64; 3],
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub depth: f64,
    pub normal: Vec3,
    pub acc: f64,
    pub weights: [f64; 3],
    pub mask: Option<ComponentId>,
    /// Interval length, opacity and weight per sample.
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Alpha compositing front to back. Each sample covers the gap to the next
/// sample, capped by its own component's stratum width; the last sample
/// covers min(`far_cap`, stride).
pub fn composite(samples: &[CompositeInput], background: [f64; 3], far_cap: f64) -> Result<Composite> {
    for (k, w) in samples.windows(2).enumerate() {
        if !(w[1].t >= w[0].t) {
            return Err(Error::UnsortedSamples { index: k + 1 });
        }
    }
    let n = samples.len();
    let mut delta = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut normal = Vec3::zeros();
    let mut weights = [0.0; 3];
    for (k, s) in samples.iter().enumerate() {
        let gap = if k + 1 < n { samples[k + 1].t - s.t } else { far_cap };
        let d = gap.min(s.stride);
        let a = 1.0 - (-s.density * d).exp();
        let w = a * trans;
        trans *= 1.0 - a;
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        depth += w * s.t;
        normal += s.normal * w;
        weights[s.component.slot()] += w;
        delta.push(d);
        alpha.push(a);
        tau.push(w);
    }
    let acc: f64 = tau.iter().sum();
    for c in 0..3 {
        color[c] += (1.0 - acc) * background[c];
    }
    let depth = if acc > 0.0 { depth / acc } else { f64::INFINITY };
    let normal = if normal.norm() > 0.0 { normal.normalize() } else { normal };
    let mask = (acc > 0.5).then(|| {
        ComponentId::ALL
            .into_iter()
            .max_by(|a, b| weights[a.slot()].total_cmp(&weights[b.slot()]).then(b.cmp(a)))
            .unwrap()
    });
    Ok(Composite { color, depth, normal, acc, weights, mask, delta, alpha, tau })
}

/// `dL/dα_i` from `dL/dτ_i`, using `U_i = α_i g_i + (1 − α_i) U_{i+1}` so
/// that `dL/dα_i = T_i (g_i − U_{i+1})`.
pub fn alpha_gradients(alpha: &[f64], dl_dtau: &[f64]) -> Vec<f64> {
    let n = alpha.len();
    let mut trans = Vec::with_capacity(n);
    let mut t = 1.0;
    for a in alpha {
        trans.push(t);
        t *= 1.0 - a;
    }
    let mut out = vec![0.0; n];
    let mut rest = 0.0;
    for i in (0..n).rev() {
        out[i] = trans[i] * (dl_dtau[i] - rest);
        rest = alpha[i] * dl_dtau[i] + (1.0 - alpha[i]) * rest;
    }
    out
}

/// Field evaluation at one sample, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct TracedSample {
    pub t: f64,
    pub component: ComponentId,
    /// Canonical coordinates of the sample in its component's grid.
    pub canonical: Vec3,
    pub xi: f64,
    /// Spatial gradient of ξ in world coordinates.
    pub gradient: Vec3,
    /// `∂x_world/∂x_canonical` for human samples.
    pub jacobian: Option<Mat3>,
    /// False when the inverse warp did not converge; ξ is then +∞.
    pub valid: bool,
    pub beta: f64,
    pub density: f64,
}

#[derive(Clone, Debug)]
pub struct RayTrace {
    pub samples: Vec<TracedSample>,
    pub composite: Composite,
    pub colors: Vec<[f64; 3]>,
}

impl FrameView<'_> {
    pub fn boxes(&self) -> Vec<(ComponentId, Aabb)> {
        let mut out = Vec::new();
        if let Some(h) = &self.human {
            out.push((ComponentId::Human, h.bounds));
        }
        if let Some(o) = &self.object {
            out.push((ComponentId::Object, o.bounds));
        }
        if let Some(s) = &self.scene {
            out.push((ComponentId::Scene, s.bounds));
        }
        out
    }

    pub fn beta(&self, component: ComponentId, cfg: &RenderConfig) -> f64 {
        match component {
            ComponentId::Human => cfg.beta_for(self.human.as_ref().unwrap().track.skeleton.canonical_sdf()),
            ComponentId::Object => cfg.beta_for(&self.object.as_ref().unwrap().track.sdf),
            ComponentId::Scene => cfg.beta_for(&self.scene.as_ref().unwrap().field.sdf),
        }
    }

    /// Field value, world gradient and albedo of one component at `x`.
    pub fn evaluate(&self, component: ComponentId, x: &Vec3, cfg: &RenderConfig) -> (TracedSampleCore, [f64; 3]) {
        match component {
            ComponentId::Scene => {
                let s = self.scene.as_ref().unwrap();
                let q = s.field.sdf.query(x);
                (TracedSampleCore { canonical: *x, sample: q, jacobian: None, valid: true }, s.field.albedo.sample(x))
            }
            ComponentId::Object => {
                let o = self.object.as_ref().unwrap();
                let y = o.inverse.transform_point(x);
                let q = o.track.sdf.query(&y);
                let sample = SdfSample { gradient: o.pose.rotation.rotate(&q.gradient), ..q };
                (TracedSampleCore { canonical: y, sample, jacobian: None, valid: true }, o.track.albedo.sample(&y))
            }
            ComponentId::Human => {
                let h = self.human.as_ref().unwrap();
                match h.posed.inverse(x, cfg.lbs_max_iter) {
                    Ok(w) => {
                        let q = h.track.skeleton.canonical_sdf().query(&w.canonical);
                        let grad = w
                            .jacobian
                            .try_inverse()
                            .map(|ji| ji.transpose() * q.gradient)
                            .unwrap_or(q.gradient);
                        let sample = SdfSample { gradient: grad, ..q };
                        let albedo = h.track.albedo.sample(&w.canonical);
                        (TracedSampleCore { canonical: w.canonical, sample, jacobian: Some(w.jacobian), valid: true }, albedo)
                    }
                    Err(_) => (
                        TracedSampleCore {
                            canonical: *x,
                            sample: SdfSample::new(f64::INFINITY, Vec3::zeros()),
                            jacobian: None,
                            valid: false,
                        },
                        [0.0; 3],
                    ),
                }
            }
        }
    }

    pub fn trace(&self, ray: &Ray, cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> RayTrace {
        let samples = sample_ray(&self.boxes(), ray, cfg.samples_per_component, cfg, rng);
        self.trace_samples(ray, &samples, cfg)
    }

    /// Evaluates and composites given sample positions. Samples of
    /// components absent from this view are skipped.
    pub fn trace_samples(&self, ray: &Ray, samples: &[RaySample], cfg: &RenderConfig) -> RayTrace {
        let present = |c: ComponentId| match c {
            ComponentId::Human => self.human.is_some(),
            ComponentId::Object => self.object.is_some(),
            ComponentId::Scene => self.scene.is_some(),
        };
        let samples: Vec<RaySample> = samples.iter().filter(|s| present(s.component)).copied().collect();
        let mut traced = Vec::with_capacity(samples.len());
        let mut inputs = Vec::with_capacity(samples.len());
        let mut colors = Vec::with_capacity(samples.len());
        for s in &samples {
            let x = ray.at(s.t);
            let beta = self.beta(s.component, cfg);
            let (core, albedo) = self.evaluate(s.component, &x, cfg);
            let density = if core.valid { sdf_to_density(core.sample.value, beta) } else { 0.0 };
            let n = core.sample.gradient;
            let normal = if n.norm() > 0.0 { n.normalize() } else { n };
            inputs.push(CompositeInput { t: s.t, stride: s.stride, component: s.component, density, color: albedo, normal });
            colors.push(albedo);
            traced.push(TracedSample {
                t: s.t,
                component: s.component,
                canonical: core.canonical,
                xi: core.sample.value,
                gradient: core.sample.gradient,
                jacobian: core.jacobian,
                valid: core.valid,
                beta,
                density,
            });
        }
        let composite = composite(&inputs, cfg.background, cfg.far_cap).expect("samples are sorted");
        RayTrace { samples: traced, composite, colors }
    }
}

/// Output of [`FrameView::evaluate`] without the rendering bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct TracedSampleCore {
    pub canonical: Vec3,
    pub sample: SdfSample,
    pub jacobian: Option<Mat3>,
    pub valid: bool,
}

impl RayTrace {
    /// `dL/dξ_i` for every sample given `dL/dτ_i`.
    pub fn xi_gradients(&self, dl_dtau: &[f64]) -> Vec<f64> {
        let da = alpha_gradients(&self.composite.alpha, dl_dtau);
        self.samples
            .iter()
            .zip(&da)
            .zip(&self.composite.delta)
            .zip(&self.composite.alpha)
            .map(|(((s, g), d), a)| {
                if !s.valid {
                    return 0.0;
                }
                g * d * (1.0 - a) * density_derivative(s.xi, s.beta)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub normal: Vec<[f32; 3]>,
    pub mask: Vec<Option<ComponentId>>,
    pub acc: Vec<f32>,
}

impl RenderBuffers {
    pub fn background(width: usize, height: usize, color: [f64; 3]) -> Self {
        let n = width * height;
        RenderBuffers {
            width,
            height,
            color: vec![color.map(|c| c as f32); n],
            depth: vec![f32::INFINITY; n],
            normal: vec![[0.0; 3]; n],
            mask: vec![None; n],
            acc: vec![0.0; n],
        }
    }

    pub fn mask_count(&self, id: ComponentId) -> usize {
        self.mask.iter().filter(|m| **m == Some(id)).count()
    }
}

/// Renders every pixel of `camera` at `frame`.
pub fn render_image(components: &ComponentSet, camera: &Camera, frame: usize, cfg: &RenderConfig) -> Result<RenderBuffers> {
    cfg.validate()?;
    let view = components.frame(frame)?;
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderBuffers::background(w, h, cfg.background);
    if view.boxes().is_empty() {
        return Ok(out);
    }
    let pixels: Vec<Composite> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let mut rng = ray_rng(cfg.seed, frame, p);
            view.trace(&camera.ray(p % w, p / w), cfg, &mut rng).composite
        })
        .collect();
    for (p, c) in pixels.into_iter().enumerate() {
        out.color[p] = c.color.map(|v| v as f32);
        out.depth[p] = c.depth as f32;
        out.normal[p] = [c.normal.x as f32, c.normal.y as f32, c.normal.z as f32];
        out.mask[p] = c.mask;
        out.acc[p] = c.acc as f32;
    }
    Ok(out)
}

const MASK_PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [230, 60, 60], [60, 120, 230], [120, 200, 120]];

fn mask_code(m: Option<ComponentId>) -> usize {
    m.map_or(0, |c| c.code() as usize)
}

impl RenderBuffers {
    pub fn save_color(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.color.iter().flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
        write_ppm(path, self.width, self.height, &bytes)
    }

    pub fn save_mask(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.mask.iter().flat_map(|m| MASK_PALETTE[mask_code(*m)]).collect();
        write_ppm(path, self.width, self.height, &bytes)
    }

    pub fn save_depth(&self, path: &Path) -> Result<()> {
        write_pfm(path, self.width, self.height, 1, &self.depth)
    }

    pub fn save_normal(&self, path: &Path) -> Result<()> {
        let flat: Vec<f32> = self.normal.iter().flatten().copied().collect();
        write_pfm(path, self.width, self.height, 3, &flat)
    }

    /// Reassembles observation buffers from the files written by the save
    /// methods. Colors carry 8-bit quantization.
    pub fn load(color: &Path, depth: &Path, normal: &Path, mask: &Path) -> Result<Self> {
        let (w, h, rgb) = read_ppm(color)?;
        let (dw, dh, dc, d) = read_pfm(depth)?;
        let (nw, nh, nc, n) = read_pfm(normal)?;
        let (mw, mh, m) = read_ppm(mask)?;
        if (dw, dh, dc) != (w, h, 1) || (nw, nh, nc) != (w, h, 3) || (mw, mh) != (w, h) {
            return Err(Error::DimensionMismatch("observation buffers differ in size".into()));
        }
        let mask = m
            .chunks_exact(3)
            .map(|px| {
                let code = MASK_PALETTE
                    .iter()
                    .position(|c| c == px)
                    .ok_or_else(|| Error::parse(mask, "pixel is not a mask palette color"))?;
                Ok(ComponentId::from_code(code as u8))
            })
            .collect::<Result<Vec<_>>>()?;
        let acc = mask.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 }).collect();
        Ok(RenderBuffers {
            width: w,
            height: h,
            color: rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|v| v as f32 / 255.0)).collect(),
            depth: d,
            normal: n.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            mask,
            acc,
        })
    }
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::DimensionMismatch(format!("{} bytes for {width}x{height} RGB", rgb.len())));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    io::write_bytes(path, &bytes)
}

/// Splits off `count` whitespace-separated header tokens.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    Some((tokens, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = io::read_bytes(path)?;
    let (tok, start) = header_tokens(&bytes, 4).ok_or_else(|| Error::parse(path, "truncated PPM header"))?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(Error::parse(path, "expected binary 8-bit PPM (P6, maxval 255)"));
    }
    let w: usize = tok[1].parse().map_err(|_| Error::parse(path, "bad width"))?;
    let h: usize = tok[2].parse().map_err(|_| Error::parse(path, "bad height"))?;
    let data = bytes.get(start..start + w * h * 3).ok_or_else(|| Error::parse(path, "truncated PPM data"))?;
    Ok((w, h, data.to_vec()))
}

/// Little-endian PFM; rows are stored bottom to top.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    let tag = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::InvalidInput(format!("PFM supports 1 or 3 channels, got {channels}"))),
    };
    if data.len() != width * height * channels {
        return Err(Error::DimensionMismatch(format!("{} floats for {width}x{height}x{channels}", data.len())));
    }
    let mut bytes = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    let row = width * channels;
    for r in (0..height).rev() {
        for v in &data[r * row..(r + 1) * row] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    io::write_bytes(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = io::read_bytes(path)?;
    let (tok, start) = header_tokens(&bytes, 4).ok_or_else(|| Error::parse(path, "truncated PFM header"))?;
    let channels = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(Error::parse(path, "expected PFM magic Pf or PF")),
    };
    let w: usize = tok[1].parse().map_err(|_| Error::parse(path, "bad width"))?;
    let h: usize = tok[2].parse().map_err(|_| Error::parse(path, "bad height"))?;
    let scale: f64 = tok[3].parse().map_err(|_| Error::parse(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::parse(path, "big-endian PFM is not supported"));
    }
    let row = w * channels;
    let body = bytes.get(start..start + 4 * row * h).ok_or_else(|| Error::parse(path, "truncated PFM data"))?;
    let mut data = vec![0f32; row * h];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let (r, col) = (k / row, k % row);
        data[(h - 1 - r) * row + col] = f32::from_le_bytes(c.try_into().unwrap());
    }
    Ok((w, h, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::{bake, AnalyticSdf};
    use crate::trajectory::{look_at, TimedPose};

    fn sphere_object(radius: f64, spacing: f64, center: Vec3) -> ComponentSet {
        let s = AnalyticSdf::sphere(Vec3::zeros(), radius);
        let half = radius + 0.1;
        let n = (2.0 * half / spacing).ceil() as usize + 1;
        let sdf = bake(&s, Vec3::repeat(-half), Vec3::repeat(spacing), [n, n, n]).unwrap();
        let albedo = ColorGrid::matching(&sdf, [0.8, 0.2, 0.1]);
        let motion = ObjectMotion::new(vec![TimedPose { index: 0, pose: Pose::from_translation(center) }]).unwrap();
        ComponentSet { object: Some(ObjectTrack { sdf, motion, albedo }), ..Default::default() }
    }

    fn camera(eye: Vec3, target: Vec3, res: usize) -> Camera {
        Camera::new(res as f64, res as f64, res as f64 / 2.0, res as f64 / 2.0, res, res, look_at(&eye, &target)).unwrap()
    }

    fn ray_sphere(ray: &Ray, c: &Vec3, r: f64) -> Option<f64> {
        let oc = ray.origin - c;
        let b = oc.dot(&ray.dir);
        let disc = b * b - (oc.norm_squared() - r * r);
        (disc >= 0.0).then(|| -b - disc.sqrt())
    }

    #[test]
    fn density_closed_form() {
        assert!((sdf_to_density(0.0, 0.01) - 50.0).abs() < 1e-12);
        assert!(sdf_to_density(1e6, 0.01) < 1e-300);
        assert!((sdf_to_density(-1e6, 0.01) - 100.0).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for k in 0..=200 {
            let xi = -0.1 + k as f64 * 1e-3;
            let s = sdf_to_density(xi, 0.01);
            assert!(s < prev);
            prev = s;
        }
        let h = 1e-7;
        for xi in [-0.02, -0.001, 0.003, 0.05] {
            let fd = (sdf_to_density(xi + h, 0.01) - sdf_to_density(xi - h, 0.01)) / (2.0 * h);
            assert!((fd - density_derivative(xi, 0.01)).abs() < 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_respects_boxes() {
        let cfg = RenderConfig::default();
        let ray = Ray { origin: Vec3::zeros(), dir: Vec3::x() };
        let mut rng = ray_rng(0, 0, 0);
        let miss = Aabb { min: Vec3::new(1.0, 1.0, 1.0), max: Vec3::new(2.0, 2.0, 2.0) };
        assert!(sample_ray(&[(ComponentId::Object, miss)], &ray, 4, &cfg, &mut rng).is_empty());
        let hit = Aabb { min: Vec3::new(1.0, -1.0, -1.0), max: Vec3::new(2.0, 1.0, 1.0) };
        let s = sample_ray(&[(ComponentId::Object, hit)], &ray, 4, &cfg, &mut rng);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|x| (1.0..=2.0).contains(&x.t)));
        assert!(s.windows(2).all(|w| w[0].t <= w[1].t));
        let other = Aabb { min: Vec3::new(1.5, -1.0, -1.0), max: Vec3::new(3.0, 1.0, 1.0) };
        let s = sample_ray(&[(ComponentId::Object, hit), (ComponentId::Scene, other)], &ray, 16, &cfg, &mut rng);
        let mut oracle: Vec<f64> = s.iter().map(|x| x.t).collect();
        oracle.sort_by(f64::total_cmp);
        assert_eq!(oracle, s.iter().map(|x| x.t).collect::<Vec<_>>());
    }

    fn input(t: f64, density: f64, component: ComponentId, color: [f64; 3]) -> CompositeInput {
        CompositeInput { t, stride: 1.0, component, density, color, normal: Vec3::z() }
    }

    #[test]
    fn composite_edge_cases() {
        let bg = [0.2, 0.3, 0.4];
        let empty = composite(&[input(1.0, 0.0, ComponentId::Scene, [1.0; 3])], bg, 1.0).unwrap();
        assert_eq!(empty.color, bg);
        assert_eq!(empty.acc, 0.0);
        assert!(empty.depth.is_infinite());
        let opaque = composite(&[input(1.5, f64::INFINITY, ComponentId::Object, [0.1, 0.5, 0.9])], bg, 1.0).unwrap();
        assert_eq!(opaque.color, [0.1, 0.5, 0.9]);
        assert_eq!(opaque.depth, 1.5);
        assert_eq!(opaque.mask, Some(ComponentId::Object));
        let unsorted = [input(2.0, 1.0, ComponentId::Scene, [0.0; 3]), input(1.0, 1.0, ComponentId::Scene, [0.0; 3])];
        assert!(matches!(composite(&unsorted, bg, 1.0), Err(Error::UnsortedSamples { index: 1 })));
    }

    #[test]
    fn composite_matches_sequential_oracle() {
        let samples: Vec<CompositeInput> = (0..12)
            .map(|k| {
                let comp = if k < 6 { ComponentId::Object } else { ComponentId::Scene };
                let density = if k == 4 { 1e9 } else { 0.3 * k as f64 };
                input(1.0 + 0.1 * k as f64, density, comp, [k as f64 / 12.0, 0.5, 1.0])
            })
            .collect();
        let c = composite(&samples, [0.0; 3], 0.1).unwrap();
        // oracle: "over" operator applied one sample at a time
        let mut remaining = 1.0;
        let mut color = 0.0;
        let mut weights = [0.0; 3];
        for (k, s) in samples.iter().enumerate() {
            let d: f64 = if k + 1 < samples.len() { samples[k + 1].t - s.t } else { 0.1 };
            let a = 1.0 - (-s.density * d.min(s.stride)).exp();
            color += remaining * a * s.color[0];
            weights[s.component.slot()] += remaining * a;
            remaining *= 1.0 - a;
        }
        assert!((c.color[0] - color).abs() < 1e-12);
        assert_eq!(weights[ComponentId::Scene.slot()], 0.0);
        assert_eq!(c.weights[ComponentId::Scene.slot()], 0.0);
        assert!(c.tau.iter().all(|t| *t >= 0.0) && c.acc <= 1.0);
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let alpha = [0.1, 0.5, 0.3, 0.9, 0.2];
        let g = [1.0, -2.0, 0.5, 3.0, -1.0];
        let loss = |a: &[f64]| {
            let mut t = 1.0;
            let mut l = 0.0;
            for (ai, gi) in a.iter().zip(&g) {
                l += gi * ai * t;
                t *= 1.0 - ai;
            }
            l
        };
        let analytic = alpha_gradients(&alpha, &g);
        for i in 0..alpha.len() {
            let h = 1e-7;
            let mut up = alpha;
            up[i] += h;
            let mut dn = alpha;
            dn[i] -= h;
            assert!(((loss(&up) - loss(&dn)) / (2.0 * h) - analytic[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn sphere_depth_matches_analytic_intersection() {
        let spacing = 0.02;
        let center = Vec3::new(0.0, 0.0, 0.0);
        let comps = sphere_object(0.5, spacing, center);
        let cam = camera(Vec3::new(0.0, -2.0, 0.3), center, 48);
        let mut errs = Vec::new();
        let mut medians = Vec::new();
        for beta in [2.0 * spacing, spacing, 0.5 * spacing] {
            let cfg = RenderConfig { beta: Some(beta), samples_per_component: 64, ..Default::default() };
            let buf = render_image(&comps, &cam, 0, &cfg).unwrap();
            errs.clear();
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let ray = cam.ray(u, v);
                    if let Some(t) = ray_sphere(&ray, &center, 0.5) {
                        let p = v * cam.width + u;
                        if buf.acc[p] > 0.5 {
                            errs.push((buf.depth[p] as f64 - t).abs());
                        }
                    }
                }
            }
            errs.sort_by(f64::total_cmp);
            medians.push(errs[errs.len() / 2]);
        }
        assert!(medians[0] < 2.0 * 2.0 * spacing, "{medians:?}");
        assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
    }

    #[test]
    fn hidden_object_has_empty_mask() {
        let mut comps = sphere_object(0.2, 0.02, Vec3::new(0.0, 2.0, 0.0));
        let wall = AnalyticSdf::half_space(-Vec3::y(), -1.0);
        let sdf = bake(&wall, Vec3::new(-2.0, -1.0, -2.0), Vec3::repeat(0.05), [81, 81, 81]).unwrap();
        let albedo = ColorGrid::matching(&sdf, [0.5; 3]);
        comps.scene = Some(SceneField { sdf, albedo });
        let cam = camera(Vec3::new(0.0, -1.0, 0.0), Vec3::new(0.0, 2.0, 0.0), 32);
        let buf = render_image(&comps, &cam, 0, &RenderConfig::default()).unwrap();
        assert_eq!(buf.mask_count(ComponentId::Object), 0);
        assert!(buf.mask_count(ComponentId::Scene) > 0);
    }

    #[test]
    fn empty_set_renders_background() {
        let cam = camera(Vec3::zeros(), Vec3::x(), 8);
        let buf = render_image(&ComponentSet::default(), &cam, 0, &RenderConfig::default()).unwrap();
        assert!(buf.color.iter().all(|c| *c == [1.0; 3]));
        assert!(buf.mask.iter().all(Option::is_none));
    }

    #[test]
    fn rendering_is_deterministic() {
        let comps = sphere_object(0.3, 0.02, Vec3::zeros());
        let cam = camera(Vec3::new(0.0, -1.5, 0.2), Vec3::zeros(), 16);
        let cfg = RenderConfig { seed: 9, ..Default::default() };
        assert_eq!(render_image(&comps, &cam, 0, &cfg).unwrap(), render_image(&comps, &cam, 0, &cfg).unwrap());
        assert!(render_image(&comps, &cam, 3, &cfg).is_err());
    }

    #[test]
    fn image_files_round_trip() {
        let comps = sphere_object(0.3, 0.02, Vec3::zeros());
        let cam = camera(Vec3::new(0.0, -1.5, 0.2), Vec3::zeros(), 12);
        let buf = render_image(&comps, &cam, 0, &RenderConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        buf.save_color(&p("c.ppm")).unwrap();
        buf.save_depth(&p("d.pfm")).unwrap();
        buf.save_normal(&p("n.pfm")).unwrap();
        buf.save_mask(&p("m.ppm")).unwrap();
        let back = RenderBuffers::load(&p("c.ppm"), &p("d.pfm"), &p("n.pfm"), &p("m.ppm")).unwrap();
        assert_eq!(back.depth, buf.depth);
        assert_eq!(back.normal, buf.normal);
        assert_eq!(back.mask, buf.mask);
        for (a, b) in back.color.iter().zip(&buf.color) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        let bytes = std::fs::read(p("d.pfm")).unwrap();
        assert!(bytes.starts_with(b"Pf\n12 12\n-1.0\n"));
    }
}
