//! On-disk layout of a refined reconstruction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hoirecon::io;
use hoirecon::render::{ComponentSet, HumanTrack, ObjectTrack, SceneField};
use hoirecon::sdf::{ColorGrid, SdfGrid};
use hoirecon::skeleton::{BodyPose, Skeleton};
use hoirecon::trajectory::ObjectMotion;
use serde::{Deserialize, Serialize};

pub const RECONSTRUCTION_FILE: &str = "reconstruction.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Index of a reconstruction directory. Paths are relative to the index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionIndex {
    pub schema_version: u32,
    pub frames: usize,
    pub skeleton: PathBuf,
    pub human_albedo: PathBuf,
    pub human_poses: PathBuf,
    pub object_sdf: PathBuf,
    pub object_albedo: PathBuf,
    pub object_motion: PathBuf,
    pub scene_sdf: PathBuf,
    pub scene_albedo: PathBuf,
    pub log: PathBuf,
}

/// Albedo is stored as three single-channel grids on the shape's lattice.
fn save_albedo(path: &Path, shape: &SdfGrid, albedo: &ColorGrid) -> Result<()> {
    let mut bytes = Vec::new();
    for ch in 0..3 {
        let values = albedo.values().iter().map(|c| c[ch]).collect();
        let grid = SdfGrid::new(shape.origin(), shape.spacing(), shape.dims(), values, shape.outside_policy())?;
        bytes.extend(grid.to_bytes());
    }
    io::write_bytes(path, &bytes)?;
    Ok(())
}

fn load_albedo(path: &Path, shape: &SdfGrid) -> Result<ColorGrid> {
    let channels = SdfGrid::load_many(path)?;
    if channels.len() != 3 || channels.iter().any(|c| c.dims() != shape.dims()) {
        anyhow::bail!(crate::Usage(format!("{}: expected 3 channels matching the shape grid", path.display())));
    }
    let mut albedo = ColorGrid::matching(shape, [0.0; 3]);
    for (i, v) in albedo.values_mut().iter_mut().enumerate() {
        *v = [channels[0].values()[i], channels[1].values()[i], channels[2].values()[i]];
    }
    Ok(albedo)
}

pub fn save(dir: &Path, components: &ComponentSet, frames: usize, log_csv: &str) -> Result<ReconstructionIndex> {
    let (Some(h), Some(o), Some(s)) = (&components.human, &components.object, &components.scene) else {
        anyhow::bail!("a reconstruction needs human, object and scene components");
    };
    let index = ReconstructionIndex {
        schema_version: SCHEMA_VERSION,
        frames,
        skeleton: "skeleton.json".into(),
        human_albedo: "human_albedo.sdfg".into(),
        human_poses: "human_poses.json".into(),
        object_sdf: "object.sdfg".into(),
        object_albedo: "object_albedo.sdfg".into(),
        object_motion: "object_motion.json".into(),
        scene_sdf: "scene.sdfg".into(),
        scene_albedo: "scene_albedo.sdfg".into(),
        log: "log.csv".into(),
    };
    h.skeleton.save(&dir.join(&index.skeleton))?;
    save_albedo(&dir.join(&index.human_albedo), h.skeleton.canonical_sdf(), &h.albedo)?;
    io::write_json(&dir.join(&index.human_poses), &h.poses)?;
    o.sdf.save(&dir.join(&index.object_sdf))?;
    save_albedo(&dir.join(&index.object_albedo), &o.sdf, &o.albedo)?;
    o.motion.save(&dir.join(&index.object_motion))?;
    s.sdf.save(&dir.join(&index.scene_sdf))?;
    save_albedo(&dir.join(&index.scene_albedo), &s.sdf, &s.albedo)?;
    io::write_text(&dir.join(&index.log), log_csv)?;
    io::write_json(&dir.join(RECONSTRUCTION_FILE), &index)?;
    Ok(index)
}

pub fn load(dir: &Path) -> Result<ComponentSet> {
    let path = dir.join(RECONSTRUCTION_FILE);
    let index: ReconstructionIndex = io::read_json(&path)?;
    if index.schema_version != SCHEMA_VERSION {
        anyhow::bail!(crate::Usage(format!("{}: unsupported schema {}", path.display(), index.schema_version)));
    }
    let p = |rel: &Path| dir.join(rel);
    let skeleton = Skeleton::load(&p(&index.skeleton))?;
    let human_albedo = load_albedo(&p(&index.human_albedo), skeleton.canonical_sdf())?;
    let poses: BTreeMap<usize, BodyPose> = io::read_json(&p(&index.human_poses))?;
    let object_sdf = SdfGrid::load(&p(&index.object_sdf))?;
    let object_albedo = load_albedo(&p(&index.object_albedo), &object_sdf)?;
    let scene_sdf = SdfGrid::load(&p(&index.scene_sdf))?;
    let scene_albedo = load_albedo(&p(&index.scene_albedo), &scene_sdf)?;
    let components = ComponentSet {
        human: Some(HumanTrack { skeleton, poses, albedo: human_albedo }),
        object: Some(ObjectTrack {
            sdf: object_sdf,
            motion: ObjectMotion::load(&p(&index.object_motion))?,
            albedo: object_albedo,
        }),
        scene: Some(SceneField { sdf: scene_sdf, albedo: scene_albedo }),
    };
    components.validate().with_context(|| format!("{}: inconsistent reconstruction", path.display()))?;
    Ok(components)
}
