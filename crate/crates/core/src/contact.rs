//! Physical plausibility terms between the posed human and the object, plus
//! the motion-gated contact timeline and its temporal filter.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, Pose, Twist, Vec3};
use crate::io;
use crate::sdf::{AnalyticSdf, SdfGrid, SignedDistance};
use crate::skeleton::{PosedSkeleton, Skeleton};
use crate::trajectory::ObjectMotion;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Box-filter window in frames for per-vertex probabilities.
    pub sigma_win: usize,
    pub margin: usize,
    pub min_span: usize,
    /// Motion gate, meters per frame.
    pub delta_t: f64,
    /// Motion gate, radians per frame.
    pub delta_r: f64,
}

impl Default for PhysParams {
    fn default() -> Self {
        PhysParams {
            alpha1: 1.0,
            alpha2: 0.01,
            beta1: 1.0,
            beta2: 0.01,
            gamma1: 1.0,
            gamma2: 0.01,
            sigma_win: 7,
            margin: 10,
            min_span: 5,
            delta_t: 0.005,
            delta_r: 0.5f64.to_radians(),
        }
    }
}

impl PhysParams {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("delta_t", self.delta_t),
            ("delta_r", self.delta_r),
        ];
        for (name, v) in scales {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sigma_win == 0 {
            return Err(Error::InvalidInput("sigma_win must be at least 1 frame".into()));
        }
        Ok(())
    }
}

fn tanh_sq(xi: f64, scale: f64, amp: f64) -> f64 {
    let t = (xi / scale).tanh();
    amp * t * t
}

fn tanh_sq_derivative(xi: f64, scale: f64, amp: f64) -> f64 {
    let t = (xi / scale).tanh();
    2.0 * amp * t * (1.0 - t * t) / scale
}

/// Attraction of a contact point at object distance `xi`; zero when the
/// point is inside the object.
pub fn contact_loss(xi: f64, p: &PhysParams) -> f64 {
    if xi >= 0.0 {
        tanh_sq(xi, p.alpha2, p.alpha1)
    } else {
        0.0
    }
}

pub fn contact_loss_derivative(xi: f64, p: &PhysParams) -> f64 {
    if xi >= 0.0 {
        tanh_sq_derivative(xi, p.alpha2, p.alpha1)
    } else {
        0.0
    }
}

/// Penalty on a human point inside the object; zero outside.
pub fn collision_loss(xi: f64, p: &PhysParams) -> f64 {
    if xi < 0.0 {
        tanh_sq(xi, p.beta2, p.beta1)
    } else {
        0.0
    }
}

pub fn collision_loss_derivative(xi: f64, p: &PhysParams) -> f64 {
    if xi < 0.0 {
        tanh_sq_derivative(xi, p.beta2, p.beta1)
    } else {
        0.0
    }
}

/// Accumulates `scale · ∂ξ/∂v` into a per-node gradient buffer.
fn scatter(grid: &SdfGrid, x: &Vec3, scale: f64, grad: &mut [f64]) {
    let c = grid.corners(x);
    for n in 0..8 {
        grad[c.index[n]] += scale * c.weight[n];
    }
}

/// Mean of `γ1 tanh(ξ/γ2)²` over interior samples where the human grid is
/// non-negative. When `grad` is given, the gradient with respect to the grid
/// values is added to it.
pub fn body_prior_loss(human_sdf: &SdfGrid, samples: &[Vec3], p: &PhysParams, mut grad: Option<&mut [f64]>) -> f64 {
    if samples.is_empty() {
        log::warn!("body prior: empty sample set");
        return 0.0;
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for x in samples {
        let xi = human_sdf.value(x);
        if xi >= 0.0 {
            total += tanh_sq(xi, p.gamma2, p.gamma1);
            if let Some(g) = grad.as_deref_mut() {
                scatter(human_sdf, x, tanh_sq_derivative(xi, p.gamma2, p.gamma1) / n, g);
            }
        }
    }
    total / n
}

/// Supervision weight that ramps from 0 to 1 across a band centered on the
/// wrist, measured along the forearm direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WristFalloff {
    pub center: Vec3,
    /// Unit vector pointing from forearm toward the hand.
    pub direction: Vec3,
    pub width: f64,
}

impl WristFalloff {
    pub fn weight(&self, x: &Vec3) -> f64 {
        if self.width <= 0.0 {
            return if (x - self.center).dot(&self.direction) >= 0.0 { 1.0 } else { 0.0 };
        }
        ((x - self.center).dot(&self.direction) / self.width + 0.5).clamp(0.0, 1.0)
    }
}

/// Mean of `w(x)·|ξ_grid(x) − ξ_proxy(x)|` over hand-region samples.
pub fn hand_sdf_loss<P: SignedDistance + ?Sized>(
    human_sdf: &SdfGrid,
    proxy: &P,
    samples: &[Vec3],
    falloff: &WristFalloff,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for x in samples {
        let w = falloff.weight(x);
        if w == 0.0 {
            continue;
        }
        let diff = human_sdf.value(x) - proxy.value(x);
        total += w * diff.abs();
        if let Some(g) = grad.as_deref_mut() {
            scatter(human_sdf, x, w * diff.signum() / n, g);
        }
    }
    total / n
}

/// Canonical points on the human surface; a point's vertex id is its index.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactPointSet {
    points: Vec<Vec3>,
}

impl ContactPointSet {
    /// Rejects points farther than two grid cells from the zero level set.
    pub fn new(points: Vec<Vec3>, human_sdf: &SdfGrid) -> Result<Self> {
        let tol = 2.0 * human_sdf.min_spacing();
        for (id, x) in points.iter().enumerate() {
            let xi = human_sdf.value(x);
            if xi.abs() >= tol {
                return Err(Error::InvalidInput(format!("contact vertex {id} is {xi} m from the surface")));
            }
        }
        Ok(ContactPointSet { points })
    }

    /// Fibonacci-distributed points on each bone capsule, dropping those
    /// buried inside another capsule.
    pub fn on_proxy_surface(skel: &Skeleton, spacing: f64) -> Result<Self> {
        let proxy = skel.capsule_proxy();
        let mut points = Vec::new();
        for bone in skel.bones() {
            let a = bone.rest.transform_point(&bone.capsule.a);
            let b = bone.rest.transform_point(&bone.capsule.b);
            let r = bone.capsule.radius;
            let len = (b - a).norm();
            let area = 4.0 * std::f64::consts::PI * r * r + 2.0 * std::f64::consts::PI * r * len;
            let n = ((area / (spacing * spacing)).ceil() as usize).max(8);
            let axis = if len > 0.0 { (b - a) / len } else { Vec3::z() };
            let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let u = axis.cross(&helper).normalize();
            let v = axis.cross(&u);
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for k in 0..n {
                // height along the unrolled capsule: cap, cylinder, cap
                let s = (k as f64 + 0.5) / n as f64 * (2.0 * r + len);
                let phi = golden * k as f64;
                let (along, radial) = if s < r {
                    let c = (r - s) / r;
                    (-(r - s), (1.0 - c * c).sqrt())
                } else if s > r + len {
                    let c = (s - r - len) / r;
                    (len + (s - r - len), (1.0 - c * c).sqrt())
                } else {
                    (s - r, 1.0)
                };
                let dir_r = u * phi.cos() + v * phi.sin();
                let base = a + axis * along.clamp(0.0, len);
                let overshoot = along - along.clamp(0.0, len);
                let p = base + axis * overshoot + dir_r * (r * radial);
                // place exactly on the capsule and skip buried points
                let seg = crate::skeleton::closest_point(&p, &a, &b);
                let d = p - seg;
                if d.norm() == 0.0 {
                    continue;
                }
                let p = seg + d.normalize() * r;
                if proxy.value(&p) > -1e-9 {
                    points.push(p);
                }
            }
        }
        ContactPointSet::new(points, skel.canonical_sdf())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Vec3> {
        self.points.get(id)
    }

    /// World positions at one body pose.
    pub fn world(&self, posed: &PosedSkeleton) -> Vec<Vec3> {
        self.points.iter().map(|x| posed.forward(x)).collect()
    }
}

/// Gradient of a physical term with respect to right-multiplied twists of the
/// object pose and the human global pose, and local joint rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGradient {
    pub object: Twist,
    pub human_root: Twist,
    pub joints: Vec<Vec3>,
}

impl PoseGradient {
    pub fn zeros(bones: usize) -> Self {
        PoseGradient { object: Twist::zeros(), human_root: Twist::zeros(), joints: vec![Vec3::zeros(); bones] }
    }

    pub(crate) fn add(mut self, other: &PoseGradient) -> Self {
        self.object += other.object;
        self.human_root += other.human_root;
        for (a, b) in self.joints.iter_mut().zip(&other.joints) {
            *a += b;
        }
        self
    }

    pub(crate) fn scale(mut self, s: f64) -> Self {
        self.object *= s;
        self.human_root *= s;
        self.joints.iter_mut().for_each(|j| *j *= s);
        self
    }
}

/// Which branch of the physical loss applies to a point set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhysTerm {
    Contact,
    Collision,
}

/// Mean loss over canonical human points `points` warped by `posed` and
/// measured against `object_sdf` placed at `object_pose`, with its pose
/// gradient. Per-point work runs in parallel; the sum is taken in input
/// order so the result does not depend on scheduling.
pub fn pose_term(
    term: PhysTerm,
    posed: &PosedSkeleton,
    global: &Pose,
    object_sdf: &SdfGrid,
    object_pose: &Pose,
    points: &[Vec3],
    p: &PhysParams,
) -> (f64, PoseGradient) {
    let bones = posed.world_transforms().len();
    if points.is_empty() {
        return (0.0, PoseGradient::zeros(bones));
    }
    let obj_inv = object_pose.inverse();
    let global_inv = global.inverse();
    let r_q = global.rotation.matrix();
    let r_p = object_pose.rotation.matrix();
    let per_point: Vec<(f64, PoseGradient)> = points
        .par_iter()
        .map(|xc| {
            let xw = posed.forward(xc);
            let y = obj_inv.transform_point(&xw);
            let s = object_sdf.query(&y);
            let (loss, dl) = match term {
                PhysTerm::Contact => (contact_loss(s.value, p), contact_loss_derivative(s.value, p)),
                PhysTerm::Collision => (collision_loss(s.value, p), collision_loss_derivative(s.value, p)),
            };
            let mut g = PoseGradient::zeros(bones);
            if dl == 0.0 {
                return (loss, g);
            }
            let gy = s.gradient * dl;
            g.object.fixed_rows_mut::<3>(0).copy_from(&(skew(&y).transpose() * gy));
            g.object.fixed_rows_mut::<3>(3).copy_from(&(-gy));
            let gw = r_p * gy;
            let z = global_inv.transform_point(&xw);
            let gz = r_q.transpose() * gw;
            g.human_root.fixed_rows_mut::<3>(0).copy_from(&(-(skew(&z).transpose() * gz)));
            g.human_root.fixed_rows_mut::<3>(3).copy_from(&gz);
            for (j, jac) in posed.joint_jacobians(xc).iter().enumerate() {
                g.joints[j] = jac.transpose() * gw;
            }
            (loss, g)
        })
        .collect();
    let n = points.len() as f64;
    let (loss, grad) = per_point
        .iter()
        .fold((0.0, PoseGradient::zeros(bones)), |(l, g), (pl, pg)| (l + pl, g.add(pg)));
    (loss / n, grad.scale(1.0 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactLabel {
    Contact,
    NoContact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexContact {
    pub id: usize,
    pub p: f64,
}

/// Unfiltered evidence kept alongside a filtered frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawContact {
    pub label: ContactLabel,
    pub verts: Vec<VertexContact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactFrame {
    pub i: usize,
    pub label: ContactLabel,
    pub verts: Vec<VertexContact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<RawContact>,
}

impl ContactFrame {
    fn evidence(&self) -> (ContactLabel, &[VertexContact]) {
        match &self.raw {
            Some(r) => (r.label, &r.verts),
            None => (self.label, &self.verts),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactTimeline {
    pub frames: Vec<ContactFrame>,
}

impl ContactTimeline {
    pub fn from_labels(indices: &[usize], labels: &[ContactLabel]) -> Result<Self> {
        if indices.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} indices, {} labels", indices.len(), labels.len())));
        }
        Ok(ContactTimeline {
            frames: indices
                .iter()
                .zip(labels)
                .map(|(&i, &label)| ContactFrame { i, label, verts: Vec::new(), raw: None })
                .collect(),
        })
    }

    pub fn labels(&self) -> Vec<ContactLabel> {
        self.frames.iter().map(|f| f.label).collect()
    }

    pub fn contact_frames(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.label == ContactLabel::Contact).map(|f| f.i).collect()
    }

    /// Replaces per-vertex probabilities; `probs[k]` belongs to the k-th frame.
    pub fn set_vertex_probs(&mut self, probs: Vec<Vec<VertexContact>>) -> Result<()> {
        if probs.len() != self.frames.len() {
            return Err(Error::DimensionMismatch(format!("{} frames, {} probability lists", self.frames.len(), probs.len())));
        }
        for (f, v) in self.frames.iter_mut().zip(probs) {
            if v.iter().any(|c| !c.p.is_finite()) {
                return Err(Error::InvalidInput(format!("frame {}: non-finite contact probability", f.i)));
            }
            f.verts = v;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Labels a frame `Contact` when the object moves on both sides of it: the
/// step into the frame and the step out of it both exceed a gate threshold.
/// The first frame only has a step out; the last frame copies its
/// predecessor.
pub fn motion_gate(p_obj: &ObjectMotion, p: &PhysParams) -> Result<ContactTimeline> {
    let frames = p_obj.frames();
    if frames.len() < 2 {
        return Err(Error::InvalidInput("motion gate needs at least 2 frames".into()));
    }
    let moving: Vec<bool> = frames
        .windows(2)
        .map(|w| {
            let rel = w[0].pose.inverse().compose(&w[1].pose);
            rel.translation.norm() > p.delta_t || rel.rotation.angle() > p.delta_r
        })
        .collect();
    let n = frames.len();
    let mut labels = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let before = k == 0 || moving[k - 1];
        labels.push(if before && moving[k] { ContactLabel::Contact } else { ContactLabel::NoContact });
    }
    labels.push(labels[n - 2]);
    let indices: Vec<usize> = frames.iter().map(|f| f.index).collect();
    ContactTimeline::from_labels(&indices, &labels)
}

fn runs(labels: &[ContactLabel]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..=labels.len() {
        if k == labels.len() || labels[k] != labels[start] {
            out.push((start, k));
            start = k;
        }
    }
    out
}

fn flip(l: ContactLabel) -> ContactLabel {
    match l {
        ContactLabel::Contact => ContactLabel::NoContact,
        ContactLabel::NoContact => ContactLabel::Contact,
    }
}

/// Flips runs shorter than `min_span`, shortest first (earliest on ties),
/// until none remain or one run covers everything.
pub fn remove_short_runs(labels: &mut [ContactLabel], min_span: usize) {
    loop {
        let r = runs(labels);
        if r.len() < 2 {
            return;
        }
        let Some(&(s, e)) = r.iter().filter(|(s, e)| e - s < min_span).min_by_key(|(s, e)| (e - s, *s)) else {
            return;
        };
        let to = flip(labels[s]);
        labels[s..e].iter_mut().for_each(|l| *l = to);
    }
}

/// Grows every contact run by `margin` frames on both sides.
pub fn dilate_contact(labels: &mut [ContactLabel], margin: usize) {
    let src = labels.to_vec();
    let n = src.len();
    for (k, l) in src.iter().enumerate() {
        if *l == ContactLabel::Contact {
            let lo = k.saturating_sub(margin);
            let hi = (k + margin).min(n - 1);
            labels[lo..=hi].iter_mut().for_each(|x| *x = ContactLabel::Contact);
        }
    }
}

/// Short-run removal, contact dilation and per-vertex box smoothing.
///
/// The filter always reads the raw evidence: a frame that has already been
/// filtered keeps its inputs in `raw`, so filtering again gives the same
/// result.
pub fn temporal_filter(timeline: &ContactTimeline, p: &PhysParams) -> Result<ContactTimeline> {
    p.validate()?;
    let n = timeline.frames.len();
    if n == 0 {
        return Ok(timeline.clone());
    }
    let evidence: Vec<(ContactLabel, &[VertexContact])> = timeline.frames.iter().map(|f| f.evidence()).collect();
    let mut labels: Vec<ContactLabel> = evidence.iter().map(|e| e.0).collect();
    remove_short_runs(&mut labels, p.min_span);
    dilate_contact(&mut labels, p.margin);

    let half = p.sigma_win / 2;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let lo = k.saturating_sub(half);
        let hi = (k + half).min(n - 1);
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for e in &evidence[lo..=hi] {
            for v in e.1 {
                *sums.entry(v.id).or_default() += v.p;
            }
        }
        let count = (hi - lo + 1) as f64;
        let verts = if labels[k] == ContactLabel::Contact {
            sums.into_iter()
                .map(|(id, s)| VertexContact { id, p: s / count })
                .filter(|v| v.p >= 0.5)
                .collect()
        } else {
            Vec::new()
        };
        let (raw_label, raw_verts) = evidence[k];
        frames.push(ContactFrame {
            i: timeline.frames[k].i,
            label: labels[k],
            verts,
            raw: Some(RawContact { label: raw_label, verts: raw_verts.to_vec() }),
        });
    }
    Ok(ContactTimeline { frames })
}

/// Uniform samples inside the capsule proxy, for the body prior.
pub fn sample_interior(proxy: &AnalyticSdf, n: usize, seed: u64) -> Vec<Vec3> {
    use rand::{Rng, SeedableRng};
    let Some((lo, hi)) = proxy.bounds() else {
        return Vec::new();
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 1000 * n.max(1) {
        tries += 1;
        let x = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
        if proxy.value(&x) < 0.0 {
            out.push(x);
        }
    }
    out
}
