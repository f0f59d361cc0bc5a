//! Geometry, image and contact evaluation metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{ContactPointSet, ContactTimeline};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::sdf::{SdfGrid, SignedDistance};
use crate::skeleton::{BodyPose, Skeleton};
use crate::trajectory::ObjectMotion;

pub const DEFAULT_F1_THRESHOLD: f64 = 0.02;
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.01;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceSource {
    Human,
    Object,
    Scene,
    Union,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Vec3>,
    pub source: SurfaceSource,
}

/// Sphere-traces rays from a Fibonacci lattice on the grid's bounding sphere
/// toward its center and keeps the surface hits.
pub fn extract_surface(grid: &SdfGrid, n_points: usize, source: SurfaceSource) -> Result<SurfaceSamples> {
    if !grid.has_zero_crossing() {
        return Err(Error::NoSurface);
    }
    let (lo, hi) = grid.bounds();
    let center = (lo + hi) * 0.5;
    let radius = (hi - lo).norm() * 0.5;
    let h = grid.min_spacing();
    let tol = 1e-3 * h;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let points: Vec<Vec3> = (0..n_points)
        .into_par_iter()
        .filter_map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n_points as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            let origin = center + Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius;
            let dir = (center - origin).normalize();
            trace_to_surface(grid, &origin, &dir, 2.0 * radius, tol)
        })
        .collect();
    Ok(SurfaceSamples { points, source })
}

fn trace_to_surface(grid: &SdfGrid, origin: &Vec3, dir: &Vec3, max_t: f64, tol: f64) -> Option<Vec3> {
    let min_step = 0.05 * grid.min_spacing();
    let mut t = 0.0;
    let mut v = grid.value(origin);
    if v <= 0.0 {
        return None;
    }
    for _ in 0..4096 {
        if v < tol {
            return Some(origin + dir * t);
        }
        let step = (0.9 * v).max(min_step);
        let t_next = t + step;
        if t_next > max_t {
            return None;
        }
        let v_next = grid.value(&(origin + dir * t_next));
        if v_next <= 0.0 {
            // bracketed: bisect
            let (mut a, mut b) = (t, t_next);
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                let vm = grid.value(&(origin + dir * m));
                if vm.abs() < tol {
                    return Some(origin + dir * m);
                }
                if vm > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Some(origin + dir * (0.5 * (a + b)));
        }
        t = t_next;
        v = v_next;
    }
    None
}

/// Exact nearest-neighbor queries over a uniform grid of buckets.
pub struct PointIndex<'a> {
    points: &'a [Vec3],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point set"));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).max();
        let cell = if extent > 0.0 { extent / (points.len() as f64).cbrt().max(1.0) } else { 1.0 };
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (k, p) in points.iter().enumerate() {
            buckets.entry(Self::key_of(p, cell)).or_default().push(k);
        }
        let (lo, hi) = (Self::key_of(&min, cell), Self::key_of(&max, cell));
        Ok(PointIndex { points, cell, buckets, lo, hi })
    }

    fn key_of(p: &Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Distance to the nearest indexed point.
    pub fn nearest(&self, q: &Vec3) -> f64 {
        let c = Self::key_of(q, self.cell);
        let mut best = f64::INFINITY;
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((c[a] - self.hi[a]).abs()))
            .max()
            .unwrap();
        for ring in 0..=max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.buckets.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &k in ids {
                                best = best.min((self.points[k] - q).norm());
                            }
                        }
                    }
                }
            }
            // anything in a farther ring is at least `ring` cells away
            if best <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Nearest-neighbor distance from every point of `from` to the set `to`.
pub fn nn_distances(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>> {
    if from.is_empty() {
        return Err(Error::EmptyInput("point set"));
    }
    let index = PointIndex::new(to)?;
    Ok(from.par_iter().map(|p| index.nearest(p)).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Mean of the two directional mean nearest-neighbor distances, meters.
pub fn chamfer(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    Ok(0.5 * (mean(&nn_distances(pred, gt)?) + mean(&nn_distances(gt, pred)?)))
}

/// Larger of the two directional maxima, meters.
pub fn hausdorff(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    Ok(max(&nn_distances(pred, gt)?).max(max(&nn_distances(gt, pred)?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From fractions in [0, 1], reported in percent.
    fn from_fractions(p: f64, r: f64) -> Self {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Prf { precision: 100.0 * p, recall: 100.0 * r, f1: 100.0 * f1 }
    }
}

/// Precision, recall and F-score at distance threshold `tau`, percent.
pub fn f_score(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<Prf> {
    let dp = nn_distances(pred, gt)?;
    let dg = nn_distances(gt, pred)?;
    let frac = |d: &[f64]| d.iter().filter(|x| **x < tau).count() as f64 / d.len() as f64;
    Ok(Prf::from_fractions(frac(&dp), frac(&dg)))
}

/// Geometry metrics computed from one pair of nearest-neighbor passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub chamfer_cm: f64,
    pub hausdorff_cm: f64,
    pub f1_percent: f64,
}

pub fn geometry_metrics(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<GeometryMetrics> {
    let dp = nn_distances(pred, gt)?;
    let dg = nn_distances(gt, pred)?;
    let frac = |d: &[f64]| d.iter().filter(|x| **x < tau).count() as f64 / d.len() as f64;
    Ok(GeometryMetrics {
        chamfer_cm: 100.0 * 0.5 * (mean(&dp) + mean(&dg)),
        hausdorff_cm: 100.0 * max(&dp).max(max(&dg)),
        f1_percent: Prf::from_fractions(frac(&dp), frac(&dg)).f1,
    })
}

/// `10·log10(1/MSE)` for values in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("image"));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub(crate) fn gaussian_window() -> [f64; SSIM_WIN] {
    let r = (SSIM_WIN / 2) as f64;
    let mut w: [f64; SSIM_WIN] = std::array::from_fn(|k| (-(k as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of a single-channel image.
fn filter_valid(img: &[f64], w: usize, h: usize, win: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|k| win[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels with an 11×11 Gaussian window (σ = 1.5) over
/// interleaved images in [0, 1]. Only windows fully inside the image count.
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != width * height * channels {
        return Err(Error::DimensionMismatch(format!(
            "{} and {} values for {width}x{height}x{channels}",
            pred.len(),
            gt.len()
        )));
    }
    if width < SSIM_WIN || height < SSIM_WIN {
        return Err(Error::DimensionMismatch(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels")));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..channels {
        let a: Vec<f64> = pred.iter().skip(c).step_by(channels).copied().collect();
        let b: Vec<f64> = gt.iter().skip(c).step_by(channels).copied().collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
        let mu_a = filter_valid(&a, width, height, &win);
        let mu_b = filter_valid(&b, width, height, &win);
        let aa = filter_valid(&prod(&|x, _| x * x), width, height, &win);
        let bb = filter_valid(&prod(&|_, y| y * y), width, height, &win);
        let ab = filter_valid(&prod(&|x, y| x * y), width, height, &win);
        let mut sum = 0.0;
        for k in 0..mu_a.len() {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = aa[k] - ma * ma;
            let vb = bb[k] - mb * mb;
            let cov = ab[k] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PdAggregation {
    /// Mean over frames of the deepest penetration in the frame.
    #[default]
    MeanOfFrameMax,
    /// Mean over all points of their penetration.
    MeanOverPoints,
}

/// Signed object distances of world points, the object placed by `pose`.
pub fn object_distances<F: SignedDistance + Sync + ?Sized>(field: &F, pose: &Pose, points: &[Vec3]) -> Vec<f64> {
    let inv = pose.inverse();
    points.iter().map(|x| field.value(&inv.transform_point(x))).collect()
}

/// Penetration depth, meters, from per-frame signed object distances.
pub fn penetration_depth(xi_per_frame: &[Vec<f64>], agg: PdAggregation) -> f64 {
    match agg {
        PdAggregation::MeanOfFrameMax => {
            if xi_per_frame.is_empty() {
                return 0.0;
            }
            let total: f64 = xi_per_frame
                .iter()
                .map(|f| f.iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max))
                .sum();
            total / xi_per_frame.len() as f64
        }
        PdAggregation::MeanOverPoints => {
            let n: usize = xi_per_frame.iter().map(Vec::len).sum();
            if n == 0 {
                return 0.0;
            }
            xi_per_frame.iter().flatten().map(|x| (-x).max(0.0)).sum::<f64>() / n as f64
        }
    }
}

/// (frame, vertex) pairs whose |ξ| is below `tau_c`.
pub fn contacts_within(frames: &[(usize, Vec<(usize, f64)>)], tau_c: f64) -> BTreeSet<(usize, usize)> {
    frames
        .iter()
        .flat_map(|(f, verts)| verts.iter().filter(|(_, xi)| xi.abs() < tau_c).map(move |(v, _)| (*f, *v)))
        .collect()
}

/// Precision/recall/F1 of predicted against ground-truth (frame, vertex)
/// contacts, percent. Empty predictions give zero precision.
pub fn contact_prf(pred: &BTreeSet<(usize, usize)>, gt: &BTreeSet<(usize, usize)>) -> Prf {
    let tp = pred.intersection(gt).count() as f64;
    let p = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let r = if gt.is_empty() { 0.0 } else { tp / gt.len() as f64 };
    Prf::from_fractions(p, r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactMetrics {
    pub penetration_depth_cm: f64,
    pub prf: Prf,
}

/// Penetration depth and contact precision/recall of posed bodies against a
/// moving object, over the ground-truth contact frames.
pub fn contact_metrics(
    skeleton: &Skeleton,
    bodies: &BTreeMap<usize, BodyPose>,
    object: &SdfGrid,
    motion: &ObjectMotion,
    points: &ContactPointSet,
    gt: &ContactTimeline,
    tau_c: f64,
    agg: PdAggregation,
) -> Result<ContactMetrics> {
    let frames = gt.contact_frames();
    let per_frame = frames
        .par_iter()
        .map(|&f| -> Result<(usize, Vec<f64>)> {
            let body = bodies.get(&f).ok_or_else(|| Error::FrameMismatch(format!("no body pose for frame {f}")))?;
            let pose = motion.get(f).ok_or_else(|| Error::FrameMismatch(format!("no object pose for frame {f}")))?;
            let posed = skeleton.posed(body)?;
            Ok((f, object_distances(object, pose, &points.world(&posed))))
        })
        .collect::<Result<Vec<_>>>()?;
    let xi: Vec<Vec<f64>> = per_frame.iter().map(|(_, d)| d.clone()).collect();
    let labelled: Vec<(usize, Vec<(usize, f64)>)> =
        per_frame.iter().map(|(f, d)| (*f, d.iter().copied().enumerate().collect())).collect();
    let truth: BTreeSet<(usize, usize)> =
        gt.frames.iter().flat_map(|fr| fr.verts.iter().map(move |v| (fr.i, v.id))).collect();
    Ok(ContactMetrics {
        penetration_depth_cm: 100.0 * penetration_depth(&xi, agg),
        prf: contact_prf(&contacts_within(&labelled, tau_c), &truth),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer_cm: Option<f64>,
    pub hausdorff_cm: Option<f64>,
    pub f1_at_2cm: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub penetration_depth_cm: Option<f64>,
    pub contact_precision: Option<f64>,
    pub contact_recall: Option<f64>,
    pub contact_f1: Option<f64>,
}

impl MetricReport {
    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let rows = [
            ("Chamfer [cm]", self.chamfer_cm),
            ("Hausdorff [cm]", self.hausdorff_cm),
            ("F1@2cm [%]", self.f1_at_2cm),
            ("PSNR [dB]", self.psnr_db),
            ("SSIM", self.ssim),
            ("PD [cm]", self.penetration_depth_cm),
            ("Contact P [%]", self.contact_precision),
            ("Contact R [%]", self.contact_recall),
            ("Contact F1 [%]", self.contact_f1),
        ];
        let mut out = String::new();
        for (name, v) in rows {
            let value = v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
            out.push_str(&format!("{name:<16}{value:>12}\n"));
        }
        out
    }
}
