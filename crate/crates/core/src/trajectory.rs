//! Static-frame detection and camera/object motion disentanglement.
//!
//! Camera poses are camera-to-world (`T_world_cam`). The apparent trajectory
//! `C_obj` is the camera path reconstructed from object pixels as if the
//! object never moved, expressed in an unknown similarity gauge `G`. With
//! `G ⋆ C` the similarity applied to a camera pose ([`Sim3::transform_pose`]):
//!
//! ```text
//! G ⋆ C_obj^i = (P_obj^i)⁻¹ ∘ C_scn^i
//! P_obj^i     = C_scn^i ∘ (G ⋆ C_obj^i)⁻¹
//! ```
//!
//! so at static frames (`P_obj = I`) the aligned apparent cameras coincide with
//! the scene cameras and the gauge follows from Umeyama on camera centers.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Rot3, Sim3, Vec3};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameTag {
    SceneFrame,
    ObjectFrame,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub index: usize,
    pub pose: Pose,
}

fn check_indices(frames: &[TimedPose]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("trajectory has no frames"));
    }
    for w in frames.windows(2) {
        if w[1].index <= w[0].index {
            return Err(Error::InvalidInput(format!(
                "frame indices must be strictly increasing ({} then {})",
                w[0].index, w[1].index
            )));
        }
    }
    Ok(())
}

fn same_indices(a: &[TimedPose], b: &[TimedPose]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.index != y.index) {
        return Err(Error::FrameMismatch(format!(
            "{} frames vs {} frames with differing indices",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Per-frame camera-to-world poses in one declared frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    frame_tag: FrameTag,
    frames: Vec<TimedPose>,
}

impl CameraTrajectory {
    pub fn new(frame_tag: FrameTag, frames: Vec<TimedPose>) -> Result<Self> {
        check_indices(&frames)?;
        Ok(CameraTrajectory { frame_tag, frames })
    }

    pub fn frame_tag(&self) -> FrameTag {
        self.frame_tag
    }

    pub fn frames(&self) -> &[TimedPose] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Pose> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|k| &self.frames[k].pose)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.iter().map(|f| f.index)
    }

    /// Applies a fixed pose to every camera (re-basing the world frame).
    pub fn rebased(&self, world: &Pose) -> CameraTrajectory {
        CameraTrajectory {
            frame_tag: self.frame_tag,
            frames: self
                .frames
                .iter()
                .map(|f| TimedPose {
                    index: f.index,
                    pose: world.compose(&f.pose),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TrajectoryFile = io::read_json(path)?;
        let frames = file
            .frames
            .iter()
            .map(|f| {
                Ok(TimedPose {
                    index: f.i,
                    pose: Pose::from_row_major(&f.t_world_cam).map_err(|e| Error::parse(path, e))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CameraTrajectory::new(file.frame_tag, frames).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json(&self) -> String {
        let tag = match self.frame_tag {
            FrameTag::SceneFrame => "SceneFrame",
            FrameTag::ObjectFrame => "ObjectFrame",
        };
        io::pose_list_json(Some(("frame_tag", tag)), "T_world_cam", self.frames.iter().map(|f| (f.index, &f.pose)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_json())
    }
}

#[derive(Deserialize)]
struct TrajectoryFile {
    frame_tag: FrameTag,
    frames: Vec<TrajectoryEntry>,
}

#[derive(Deserialize)]
struct TrajectoryEntry {
    i: usize,
    #[serde(rename = "T_world_cam")]
    t_world_cam: Vec<f64>,
}

#[derive(Deserialize)]
struct MotionFile {
    frames: Vec<MotionEntry>,
}

#[derive(Deserialize)]
struct MotionEntry {
    i: usize,
    #[serde(rename = "T_world_obj")]
    t_world_obj: Vec<f64>,
}

/// Object-to-world poses per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMotion {
    frames: Vec<TimedPose>,
}

impl ObjectMotion {
    pub fn new(frames: Vec<TimedPose>) -> Result<Self> {
        check_indices(&frames)?;
        Ok(ObjectMotion { frames })
    }

    pub fn frames(&self) -> &[TimedPose] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [TimedPose] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Pose> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|k| &self.frames[k].pose)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.iter().map(|f| f.index)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MotionFile = io::read_json(path)?;
        let frames = file
            .frames
            .iter()
            .map(|f| {
                Ok(TimedPose {
                    index: f.i,
                    pose: Pose::from_row_major(&f.t_world_obj).map_err(|e| Error::parse(path, e))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ObjectMotion::new(frames).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json(&self) -> String {
        io::pose_list_json(None, "T_world_obj", self.frames.iter().map(|f| (f.index, &f.pose)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_json())
    }
}

/// Reads a similarity file `{"scale": s, "R": [9 row-major], "t": [3]}`.
pub fn load_sim3(path: &Path) -> Result<Sim3> {
    let file: Sim3File = io::read_json(path)?;
    if file.rotation.len() != 9 || file.translation.len() != 3 {
        return Err(Error::parse(path, "expected R with 9 entries and t with 3"));
    }
    let mut m = [0.0; 16];
    for r in 0..3 {
        for c in 0..3 {
            m[r * 4 + c] = file.rotation[r * 3 + c];
        }
        m[r * 4 + 3] = file.translation[r];
    }
    m[15] = 1.0;
    let pose = Pose::from_row_major(&m).map_err(|e| Error::parse(path, e))?;
    Sim3::new(file.scale, pose.rotation, pose.translation).map_err(|e| Error::parse(path, e))
}

pub fn sim3_to_json(s: &Sim3) -> String {
    let r = s.rotation.matrix();
    let rot: Vec<String> = (0..9).map(|k| io::fmt_f64(r[(k / 3, k % 3)])).collect();
    let t: Vec<String> = (0..3).map(|k| io::fmt_f64(s.translation[k])).collect();
    format!(
        "{{\"scale\": {}, \"R\": [{}], \"t\": [{}]}}\n",
        io::fmt_f64(s.scale()),
        rot.join(", "),
        t.join(", ")
    )
}

#[derive(Deserialize)]
struct Sim3File {
    scale: f64,
    #[serde(rename = "R")]
    rotation: Vec<f64>,
    #[serde(rename = "t")]
    translation: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Camera-center distance threshold, meters.
    pub max_center_distance: f64,
    /// Relative rotation threshold, radians.
    pub max_rotation: f64,
    pub min_sample: usize,
    /// `None` selects `max(3, 10% of frames)`.
    pub min_inliers: Option<usize>,
    pub seed: u64,
    /// Keep extracting consensus sets after the first one, so that every
    /// static segment (each with its own gauge) is reported.
    pub sequential: bool,
    pub parallel: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 1000,
            max_center_distance: 0.01,
            max_rotation: 1f64.to_radians(),
            min_sample: 3,
            min_inliers: None,
            seed: 0,
            sequential: true,
            parallel: true,
        }
    }
}

impl RansacConfig {
    pub fn required_inliers(&self, n_frames: usize) -> usize {
        self.min_inliers
            .unwrap_or_else(|| 3.max((n_frames as f64 * 0.1).ceil() as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResidual {
    pub index: usize,
    pub rotation: f64,
    pub center_distance: f64,
}

#[derive(Clone, Debug)]
pub struct StaticSegment {
    pub alignment: Sim3,
    pub frames: BTreeSet<usize>,
}

/// Outcome of [`detect_static_frames`]. `alignment` and `inlier_frames`
/// belong to the largest consensus set; `segments` lists every consensus set
/// found (largest first) when sequential extraction is enabled.
#[derive(Clone, Debug)]
pub struct StaticFrameReport {
    pub alignment: Sim3,
    pub inlier_frames: BTreeSet<usize>,
    pub per_frame_residual: Vec<FrameResidual>,
    pub segments: Vec<StaticSegment>,
}

impl StaticFrameReport {
    /// Union of all static segments.
    pub fn static_frames(&self) -> BTreeSet<usize> {
        self.segments.iter().flat_map(|s| s.frames.iter().copied()).collect()
    }
}

fn residual(align: &Sim3, obj: &Pose, scn: &Pose) -> (f64, f64) {
    let mapped = align.transform_pose(obj);
    let rot = scn.rotation.compose(&mapped.rotation.inverse()).angle();
    (rot, (mapped.translation - scn.translation).norm())
}

struct Hypothesis {
    index: usize,
    inliers: Vec<usize>,
}

fn consensus(
    align: &Sim3,
    candidates: &[usize],
    obj: &[TimedPose],
    scn: &[TimedPose],
    cfg: &RansacConfig,
) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&k| {
            let (r, d) = residual(align, &obj[k].pose, &scn[k].pose);
            r < cfg.max_rotation && d < cfg.max_center_distance
        })
        .collect()
}

/// Rotation from the chordal mean of the per-frame relative orientations,
/// then scale (unless given) and translation from the camera centers.
fn fit_sample(positions: &[usize], obj: &[TimedPose], scn: &[TimedPose], fixed_scale: Option<f64>) -> Result<Sim3> {
    let mut m = Mat3::zeros();
    for &k in positions {
        m += scn[k].pose.rotation.matrix() * obj[k].pose.rotation.matrix().transpose();
    }
    let rot = Rot3::nearest(&m).ok_or_else(|| Error::DegenerateConfiguration("rotation average".into()))?;
    let n = positions.len() as f64;
    let mean_o = positions.iter().map(|&k| obj[k].pose.translation).sum::<Vec3>() / n;
    let mean_s = positions.iter().map(|&k| scn[k].pose.translation).sum::<Vec3>() / n;
    if let Some(scale) = fixed_scale {
        return Sim3::new(scale, rot, mean_s - rot.rotate(&mean_o) * scale);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &k in positions {
        let a = rot.rotate(&(obj[k].pose.translation - mean_o));
        num += a.dot(&(scn[k].pose.translation - mean_s));
        den += a.norm_squared();
    }
    if den < 1e-12 || num <= 0.0 {
        return Err(Error::DegenerateConfiguration("camera centers do not determine a scale".into()));
    }
    let scale = num / den;
    Sim3::new(scale, rot, mean_s - rot.rotate(&mean_o) * scale)
}

/// One RANSAC round over the `candidates` (positions into the frame lists).
fn ransac_round(
    candidates: &[usize],
    obj: &[TimedPose],
    scn: &[TimedPose],
    cfg: &RansacConfig,
    round: u64,
    fixed_scale: Option<f64>,
) -> Option<(Sim3, Vec<usize>)> {
    if candidates.len() < cfg.min_sample {
        return None;
    }
    // Draw all minimal samples up front so the result does not depend on
    // how hypotheses are scheduled.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let samples: Vec<Vec<usize>> = (0..cfg.iterations)
        .map(|_| {
            sample(&mut rng, candidates.len(), cfg.min_sample)
                .into_iter()
                .map(|j| candidates[j])
                .collect()
        })
        .collect();
    let evaluate = |(index, s): (usize, &Vec<usize>)| -> Option<Hypothesis> {
        let align = fit_sample(s, obj, scn, fixed_scale).ok()?;
        Some(Hypothesis {
            index,
            inliers: consensus(&align, candidates, obj, scn, cfg),
        })
    };
    let better = |a: Hypothesis, b: Hypothesis| {
        if (b.inliers.len(), std::cmp::Reverse(b.index)) > (a.inliers.len(), std::cmp::Reverse(a.index)) {
            b
        } else {
            a
        }
    };
    let best = if cfg.parallel {
        samples
            .par_iter()
            .enumerate()
            .filter_map(evaluate)
            .reduce_with(better)
    } else {
        samples.iter().enumerate().filter_map(evaluate).reduce(better)
    }?;

    // Refit on the consensus set until it stops changing.
    let mut inliers = best.inliers;
    let mut align = fit_sample(&inliers, obj, scn, fixed_scale).ok()?;
    for _ in 0..10 {
        let next = consensus(&align, candidates, obj, scn, cfg);
        if next == inliers || next.len() < cfg.min_sample {
            break;
        }
        inliers = next;
        align = fit_sample(&inliers, obj, scn, fixed_scale).ok()?;
    }
    let inliers = consensus(&align, candidates, obj, scn, cfg);
    Some((align, inliers))
}

/// Finds the similarity between apparent and scene cameras by RANSAC; frames
/// in consensus are the frames where the object is static.
pub fn detect_static_frames(
    c_obj: &CameraTrajectory,
    c_scn: &CameraTrajectory,
    cfg: &RansacConfig,
) -> Result<StaticFrameReport> {
    same_indices(&c_obj.frames, &c_scn.frames)?;
    let n = c_obj.len();
    if cfg.min_sample < 3 {
        return Err(Error::InvalidInput("RANSAC minimal sample must be at least 3".into()));
    }
    if n < cfg.min_sample {
        return Err(Error::InvalidInput(format!(
            "need at least {} frames, got {n}",
            cfg.min_sample
        )));
    }
    let required = cfg.required_inliers(n);
    let obj = &c_obj.frames;
    let scn = &c_scn.frames;

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut segments: Vec<StaticSegment> = Vec::new();
    let mut best_count = 0;
    let mut round = 0u64;
    loop {
        // the object moves rigidly, so every static segment shares the scale
        // of the first one
        let fixed_scale = segments.first().map(|s| s.alignment.scale());
        let Some((align, inliers)) = ransac_round(&remaining, obj, scn, cfg, round, fixed_scale) else {
            break;
        };
        round += 1;
        best_count = best_count.max(inliers.len());
        if inliers.len() < required {
            break;
        }
        let taken: BTreeSet<usize> = inliers.iter().copied().collect();
        remaining.retain(|k| !taken.contains(k));
        segments.push(StaticSegment {
            alignment: align,
            frames: inliers.iter().map(|&k| obj[k].index).collect(),
        });
        if !cfg.sequential {
            break;
        }
    }
    if segments.is_empty() {
        return Err(Error::NoConsensus {
            best: best_count,
            required,
        });
    }
    segments.sort_by(|a, b| {
        b.frames
            .len()
            .cmp(&a.frames.len())
            .then(a.frames.iter().next().cmp(&b.frames.iter().next()))
    });
    let primary = &segments[0];
    let per_frame_residual = obj
        .iter()
        .zip(scn)
        .map(|(o, s)| {
            let (rotation, center_distance) = residual(&primary.alignment, &o.pose, &s.pose);
            FrameResidual {
                index: o.index,
                rotation,
                center_distance,
            }
        })
        .collect();
    Ok(StaticFrameReport {
        alignment: primary.alignment,
        inlier_frames: primary.frames.clone(),
        per_frame_residual,
        segments,
    })
}

/// Removes the real camera motion from the apparent motion.
pub fn disentangle(c_obj: &CameraTrajectory, c_scn: &CameraTrajectory, align: &Sim3) -> Result<ObjectMotion> {
    same_indices(&c_obj.frames, &c_scn.frames)?;
    let frames = c_obj
        .frames
        .iter()
        .zip(&c_scn.frames)
        .map(|(o, s)| TimedPose {
            index: o.index,
            pose: s.pose.compose(&align.transform_pose(&o.pose).inverse()),
        })
        .collect();
    ObjectMotion::new(frames)
}

/// Forward model: the apparent trajectory seen from object pixels given the
/// scene cameras, the object motion and the gauge.
pub fn compose_apparent(c_scn: &CameraTrajectory, p_obj: &ObjectMotion, align: &Sim3) -> Result<CameraTrajectory> {
    same_indices(&p_obj.frames, &c_scn.frames)?;
    let inv = align.inverse();
    let frames = c_scn
        .frames
        .iter()
        .zip(&p_obj.frames)
        .map(|(s, p)| TimedPose {
            index: s.index,
            pose: inv.transform_pose(&p.pose.inverse().compose(&s.pose)),
        })
        .collect();
    CameraTrajectory::new(FrameTag::ObjectFrame, frames)
}

/// Relative rotation angle and translation of `P_obj` from identity.
pub fn deviation_from_identity(p: &Pose) -> (f64, f64) {
    (p.rotation.angle(), p.translation.norm())
}

/// Convenience for tests and the generator.
pub fn orbit_trajectory(n: usize, radius: f64, height: f64, target: Vec3, start: f64, sweep: f64) -> CameraTrajectory {
    let frames = (0..n)
        .map(|i| {
            let a = start + sweep * i as f64 / (n.max(2) - 1) as f64;
            let eye = Vec3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), height);
            TimedPose {
                index: i,
                pose: look_at(&eye, &target),
            }
        })
        .collect();
    CameraTrajectory::new(FrameTag::SceneFrame, frames).expect("orbit frames are ordered")
}

/// Camera-to-world pose looking from `eye` at `target` with +z up in the world
/// and the camera z axis forward, y down.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Pose {
    let fwd = (target - eye).normalize();
    let mut right = fwd.cross(&Vec3::z());
    if right.norm() < 1e-9 {
        right = Vec3::x();
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    let m = crate::geometry::Mat3::from_columns(&[right, down, fwd]);
    Pose::new(Rot3::from_matrix(&m), *eye)
}
