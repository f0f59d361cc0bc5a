use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hoirecon::contact::{temporal_filter, ContactTimeline, PhysParams};
use hoirecon::io;
use hoirecon::metrics::{
    contact_metrics, extract_surface, geometry_metrics, psnr, ssim, GeometryMetrics, MetricReport, PdAggregation,
    SurfaceSource, DEFAULT_CONTACT_THRESHOLD, DEFAULT_F1_THRESHOLD,
};
use hoirecon::optimize::{run_schedule, ContactInputs, Observations, Problem, RefineConfig, ShapePriors};
use hoirecon::render::{render_image, ComponentId, ComponentSet};
use hoirecon::sdf::SdfGrid;
use hoirecon::synth::{generate, standard_defect_scene, standard_scene, DatasetManifest, SceneScript};
use hoirecon::trajectory::{detect_static_frames, disentangle, load_sim3, sim3_to_json, CameraTrajectory, RansacConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::recon::{self, RECONSTRUCTION_FILE};
use crate::{Cli, Command, DisentangleArgs, EvalArgs, FilterArgs, GenArgs, PdMode, PoseSource, Preset, RefineArgs, RenderArgs, Usage};

pub const JSON_SCHEMA_VERSION: u32 = 1;

pub fn run(cli: &Cli) -> Result<()> {
    log::info!(
        "global options: seed {:?}, threads {}, out {}, json {}",
        cli.seed,
        rayon::current_num_threads(),
        cli.out.display(),
        cli.json
    );
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let (name, result) = match &cli.command {
        Command::Gen(a) => ("gen", gen(cli, a)?),
        Command::Disentangle(a) => ("disentangle", disentangle_cmd(cli, a)?),
        Command::Render(a) => ("render", render(cli, a)?),
        Command::Refine(a) => ("refine", refine(cli, a)?),
        Command::FilterContacts(a) => ("filter-contacts", filter_contacts(cli, a)?),
        Command::Eval(a) => ("eval", eval(cli, a)?),
    };
    if cli.json {
        let out = json!({ "schema_version": JSON_SCHEMA_VERSION, "command": name, "result": result });
        println!("{}", serde_json::to_string_pretty(&out)?);
    }
    Ok(())
}

fn log_config<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => log::info!("resolved {what}: {s}"),
        Err(e) => log::warn!("cannot serialize {what}: {e}"),
    }
}

fn out_path(cli: &Cli, name: &str) -> PathBuf {
    cli.out.join(name)
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<Value> {
    let mut script = match (&a.script, a.preset) {
        (Some(path), _) => SceneScript::load(path)?,
        (None, Some(Preset::Standard)) => standard_scene(),
        (None, Some(Preset::Defect)) => standard_defect_scene(),
        (None, None) => bail!(Usage("gen needs a script path or --preset".into())),
    };
    if let Some(seed) = cli.seed {
        script.seed = seed;
    }
    if let Some(stride) = a.render_stride {
        script.render_stride = stride;
    }
    script.validate()?;
    log_config("script", &script);
    let manifest = generate(&script, &cli.out)?;
    if a.save_script {
        script.save(&out_path(cli, "script.json"))?;
    }
    log::info!("wrote {} frames ({} rendered) to {}", manifest.frames, manifest.renders.len(), cli.out.display());
    Ok(json!({
        "manifest": out_path(cli, "manifest.json"),
        "frames": manifest.frames,
        "rendered_frames": manifest.renders.len(),
        "seed": manifest.seed,
    }))
}

fn disentangle_cmd(cli: &Cli, a: &DisentangleArgs) -> Result<Value> {
    let c_obj = CameraTrajectory::load(&a.obj)?;
    let c_scn = CameraTrajectory::load(&a.scn)?;
    let mut static_frames = None;
    let align = match &a.align {
        Some(path) => load_sim3(path)?,
        None => {
            let mut cfg = RansacConfig { seed: cli.seed.unwrap_or(0), ..RansacConfig::default() };
            if let Some(d) = a.max_center_distance {
                cfg.max_center_distance = d;
            }
            if let Some(deg) = a.max_rotation_deg {
                cfg.max_rotation = deg.to_radians();
            }
            if let Some(n) = a.ransac_iterations {
                cfg.iterations = n;
            }
            log_config("static-frame detection", &cfg);
            let report = detect_static_frames(&c_obj, &c_scn, &cfg)?;
            // anchor the object frame at its earliest static placement
            let first = report
                .segments
                .iter()
                .min_by_key(|s| s.frames.iter().next().copied().unwrap_or(usize::MAX))
                .map(|s| s.alignment)
                .unwrap_or_else(|| report.alignment);
            let frames: Vec<usize> = report.static_frames().into_iter().collect();
            io::write_json(&out_path(cli, "static_frames.json"), &frames)?;
            static_frames = Some(frames);
            first
        }
    };
    log::info!("alignment scale {}", align.scale());
    let p_obj = disentangle(&c_obj, &c_scn, &align)?;
    p_obj.save(&out_path(cli, "object_motion.json"))?;
    io::write_text(&out_path(cli, "alignment.json"), &sim3_to_json(&align))?;
    Ok(json!({
        "object_motion": out_path(cli, "object_motion.json"),
        "alignment": out_path(cli, "alignment.json"),
        "frames": p_obj.len(),
        "static_frames": static_frames,
    }))
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<Value> {
    let data = DatasetManifest::load(&a.manifest)?;
    if a.frame >= data.manifest.frames {
        bail!(Usage(format!("frame {} outside 0..{}", a.frame, data.manifest.frames)));
    }
    let mut cfg = data.manifest.render;
    if let Some(n) = a.samples_per_component {
        cfg.samples_per_component = n;
    }
    if a.beta.is_some() {
        cfg.beta = a.beta;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    log_config("render config", &cfg);
    let components = match a.poses {
        PoseSource::Gt => data.components_gt(),
        PoseSource::Init => data.components_init(),
    };
    let buf = render_image(&components, &data.camera(a.frame)?, a.frame, &cfg)?;
    let stem = format!("frame_{:04}", a.frame);
    let files = [
        out_path(cli, &format!("{stem}_color.ppm")),
        out_path(cli, &format!("{stem}_depth.pfm")),
        out_path(cli, &format!("{stem}_normal.pfm")),
        out_path(cli, &format!("{stem}_mask.ppm")),
    ];
    buf.save_color(&files[0])?;
    buf.save_depth(&files[1])?;
    buf.save_normal(&files[2])?;
    buf.save_mask(&files[3])?;
    Ok(json!({
        "frame": a.frame,
        "files": files,
        "mask_pixels": {
            "human": buf.mask_count(ComponentId::Human),
            "object": buf.mask_count(ComponentId::Object),
            "scene": buf.mask_count(ComponentId::Scene),
        },
    }))
}

fn refine(cli: &Cli, a: &RefineArgs) -> Result<Value> {
    let data = DatasetManifest::load(&a.manifest)?;
    let mut config = match &a.config {
        Some(path) => RefineConfig::load(path)?,
        None => RefineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = a.steps {
        config.schedule.total_steps = n;
    }
    if let Some(n) = a.rays_per_frame {
        config.schedule.rays_per_frame = n;
    }
    if a.no_contact_loss {
        config.weights.w_contact = 0.0;
        config.weights.w_collision = 0.0;
    }
    config.validate()?;
    log_config("refine config", &config);

    let observations = Observations::from_dataset(&data)?;
    if observations.is_empty() {
        bail!(Usage(format!("{}: dataset has no rendered frames", a.manifest.display())));
    }
    let contacts = ContactInputs {
        timeline: temporal_filter(&data.contacts_pred, &config.phys)?,
        points: data.contact_points.clone(),
    };
    let priors = ShapePriors::from_skeleton(&data.skeleton, config.params.prior_samples, config.seed);
    let problem = Problem { config: &config, observations: &observations, contacts: Some(&contacts), priors: Some(&priors) };
    let init = match a.poses {
        PoseSource::Gt => data.components_gt(),
        PoseSource::Init => data.components_init(),
    };
    let checkpoints = out_path(cli, "checkpoints");
    let (result, state) = run_schedule(init, &problem, (!a.no_checkpoints).then_some(checkpoints.as_path()))?;
    recon::save(&cli.out, &result, data.manifest.frames, &state.log_csv())?;
    config.save(&out_path(cli, "refine_config.json"))?;
    let first = state.log.first().map(|r| r.total);
    let last = state.log.last().map(|r| r.total);
    log::info!("refined {} steps, total loss {:?} -> {:?}", state.step, first, last);
    Ok(json!({
        "reconstruction": out_path(cli, RECONSTRUCTION_FILE),
        "steps": state.step,
        "initial_total": first,
        "final_total": last,
        "seed": config.seed,
    }))
}

fn filter_contacts(cli: &Cli, a: &FilterArgs) -> Result<Value> {
    let timeline = ContactTimeline::load(&a.timeline)?;
    let mut phys: PhysParams = match &a.config {
        Some(path) => io::read_json(path)?,
        None => PhysParams::default(),
    };
    if let Some(n) = a.sigma_win {
        phys.sigma_win = n;
    }
    if let Some(n) = a.margin {
        phys.margin = n;
    }
    if let Some(n) = a.min_span {
        phys.min_span = n;
    }
    phys.validate()?;
    log_config("phys params", &phys);
    let filtered = temporal_filter(&timeline, &phys)?;
    let path = out_path(cli, "contacts_filtered.json");
    filtered.save(&path)?;
    let changed = timeline.labels().iter().zip(filtered.labels()).filter(|(a, b)| **a != *b).count();
    Ok(json!({
        "timeline": path,
        "frames": filtered.frames.len(),
        "contact_frames": filtered.contact_frames().len(),
        "changed_labels": changed,
    }))
}

fn surface_metrics(pred: &SdfGrid, gt: &SdfGrid, n: usize, source: SurfaceSource) -> Result<GeometryMetrics> {
    let p = extract_surface(pred, n, source)?;
    let g = extract_surface(gt, n, source)?;
    Ok(geometry_metrics(&p.points, &g.points, DEFAULT_F1_THRESHOLD)?)
}

fn load_prediction(dir: &Path) -> Result<ComponentSet> {
    if dir.join(RECONSTRUCTION_FILE).is_file() {
        recon::load(dir)
    } else if dir.join("manifest.json").is_file() {
        Ok(DatasetManifest::load(&dir.join("manifest.json"))?.components_init())
    } else {
        bail!(Usage(format!("{}: no {RECONSTRUCTION_FILE} or manifest.json", dir.display())))
    }
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<Value> {
    let gt_manifest = a.gt.join("manifest.json");
    if !gt_manifest.is_file() {
        bail!(Usage(format!("{}: ground-truth manifest not found", gt_manifest.display())));
    }
    let gt = DatasetManifest::load(&gt_manifest)?;
    let pred = load_prediction(&a.pred)?;
    let (Some(ph), Some(po)) = (&pred.human, &pred.object) else {
        bail!(Usage("prediction lacks a human or object".into()));
    };
    let agg = match a.pd {
        PdMode::FrameMax => PdAggregation::MeanOfFrameMax,
        PdMode::Points => PdAggregation::MeanOverPoints,
    };
    log::info!("evaluating {} against {}", a.pred.display(), a.gt.display());

    let object = surface_metrics(&po.sdf, &gt.object_sdf, a.surface_points, SurfaceSource::Object)?;
    let human = surface_metrics(ph.skeleton.canonical_sdf(), gt.skeleton.canonical_sdf(), a.surface_points, SurfaceSource::Human)?;

    let mut images = Vec::new();
    if a.image_stride > 0 {
        for (&f, obs) in gt.observations.iter().step_by(a.image_stride) {
            let buf = render_image(&pred, &gt.camera(f)?, f, &gt.manifest.render)?;
            let flat = |c: &[[f32; 3]]| -> Vec<f64> { c.iter().flatten().map(|v| *v as f64).collect() };
            let (p, g) = (flat(&buf.color), flat(&obs.color));
            images.push((f, psnr(&p, &g)?, ssim(&p, &g, obs.width, obs.height, 3)?));
        }
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let contacts = contact_metrics(
        &ph.skeleton,
        &ph.poses,
        &po.sdf,
        &po.motion,
        &gt.contact_points,
        &gt.contacts_gt,
        DEFAULT_CONTACT_THRESHOLD,
        agg,
    )?;
    let report = MetricReport {
        chamfer_cm: Some(object.chamfer_cm),
        hausdorff_cm: Some(object.hausdorff_cm),
        f1_at_2cm: Some(object.f1_percent),
        psnr_db: mean(images.iter().map(|i| i.1).collect()),
        ssim: mean(images.iter().map(|i| i.2).collect()),
        penetration_depth_cm: Some(contacts.penetration_depth_cm),
        contact_precision: Some(contacts.prf.precision),
        contact_recall: Some(contacts.prf.recall),
        contact_f1: Some(contacts.prf.f1),
    };
    let result = json!({
        "report": report,
        "object": object,
        "human": human,
        "image_frames": images.iter().map(|i| i.0).collect::<Vec<_>>(),
    });
    io::write_json(&out_path(cli, "metrics.json"), &result)?;
    if !cli.json {
        print!("{}", report.table());
    }
    Ok(result)
}
