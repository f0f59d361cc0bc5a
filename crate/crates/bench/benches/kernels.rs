use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hoirecon::contact::{pose_term, ContactPointSet, PhysParams, PhysTerm};
use hoirecon::geometry::{Pose, Rot3, Vec3};
use hoirecon::metrics::chamfer;
use hoirecon::render::{render_image, Camera, ComponentSet, ObjectTrack, RenderConfig};
use hoirecon::sdf::{bake, AnalyticSdf, ColorGrid, SdfGrid, SignedDistance};
use hoirecon::skeleton::{BodyPose, Skeleton};
use hoirecon::trajectory::{look_at, ObjectMotion, TimedPose};

fn sphere(spacing: f64) -> SdfGrid {
    let n = (1.2 / spacing).ceil() as usize + 1;
    bake(&AnalyticSdf::sphere(Vec3::zeros(), 0.5), Vec3::repeat(-0.6), Vec3::repeat(spacing), [n, n, n]).unwrap()
}

/// Deterministic points spread through a cube of half-width `r`.
fn lattice(n: usize, r: f64) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let f = |k: f64| ((i as f64 * k).fract() * 2.0 - 1.0) * r;
            Vec3::new(f(0.618_034), f(0.414_214), f(0.732_051))
        })
        .collect()
}

fn sdf_query(c: &mut Criterion) {
    let grid = sphere(0.02);
    let pts = lattice(10_000, 0.55);
    c.bench_function("sdf_query_10k", |b| {
        b.iter(|| pts.iter().map(|p| grid.query(black_box(p)).value).sum::<f64>())
    });
}

fn render(c: &mut Criterion) {
    let sdf = sphere(0.02);
    let set = ComponentSet {
        object: Some(ObjectTrack {
            albedo: ColorGrid::matching(&sdf, [0.8, 0.2, 0.1]),
            sdf,
            motion: ObjectMotion::new(vec![TimedPose { index: 0, pose: Pose::identity() }]).unwrap(),
        }),
        ..Default::default()
    };
    let cam = Camera::new(32.0, 32.0, 16.0, 16.0, 32, 32, look_at(&Vec3::new(0.0, -2.0, 0.3), &Vec3::zeros())).unwrap();
    let cfg = RenderConfig { samples_per_component: 32, ..Default::default() };
    c.bench_function("render_sphere_32x32", |b| b.iter(|| render_image(black_box(&set), &cam, 0, &cfg).unwrap()));
}

fn physical_term(c: &mut Criterion) {
    let skel = Skeleton::standard_proxy(0.02).unwrap();
    let obj = bake(&AnalyticSdf::cuboid(Vec3::zeros(), Vec3::new(0.2, 0.15, 0.15)), Vec3::repeat(-0.35), Vec3::repeat(0.02), [36, 36, 36])
        .unwrap();
    let pts = ContactPointSet::on_proxy_surface(&skel, 0.01).unwrap();
    let mut body = BodyPose::rest(skel.len());
    body.root_translation = Vec3::new(-1.005, 0.0, -0.25);
    let posed = skel.posed(&body).unwrap();
    let object_pose = Pose::new(Rot3::rot_z(0.05), Vec3::zeros());
    let p = PhysParams::default();
    c.bench_function("collision_pose_term_all_points", |b| {
        b.iter(|| pose_term(PhysTerm::Collision, &posed, &body.global(), &obj, &object_pose, black_box(pts.points()), &p))
    });
}

fn chamfer_distance(c: &mut Criterion) {
    let a = lattice(4000, 0.5);
    let b: Vec<Vec3> = lattice(4000, 0.5).iter().map(|p| p * 1.01).collect();
    c.bench_function("chamfer_4k", |bench| bench.iter(|| chamfer(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, sdf_query, render, physical_term, chamfer_distance);
criterion_main!(benches);
