use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use poselab_bench::patch;
use poselab_core::labelgen::{
    camera_pose_from_board, domain_randomize, label_frame, plan_samples, propagate_labels, DrConfig, FrameRecord,
    Session,
};
use poselab_core::synth::{generate_session, SessionConfig};

fn labels(c: &mut Criterion) {
    let s = generate_session(&SessionConfig { n_frames: 300, ..SessionConfig::default() }).unwrap();
    let f = &s.frames[0];
    c.bench_function("camera_pose_from_board/35", |b| {
        b.iter(|| camera_pose_from_board(black_box(&f.corners), &s.board, &s.intrinsics))
    });
    let camera_from_object = f.camera_pose_in_marker.invert().compose(&s.marker_from_object);
    c.bench_function("label_frame", |b| {
        b.iter(|| label_frame(black_box(&camera_from_object), &s.model, &s.intrinsics))
    });
    let mut session = Session::new("bench");
    session.object_pose_in_marker = Some(s.marker_from_object);
    session.frames = s
        .frames
        .iter()
        .map(|f| FrameRecord {
            camera_pose_in_marker: Some(f.camera_pose_in_marker),
            ..FrameRecord::new(&f.frame_id, format!("{}.png", f.frame_id))
        })
        .collect();
    c.bench_function("propagate_labels/300", |b| {
        b.iter(|| propagate_labels(black_box(&session), &s.model, &s.intrinsics))
    });
}

fn randomize(c: &mut Criterion) {
    let patches = vec![patch(120, 80), patch(60, 90)];
    let bgs = vec![
        image::RgbImage::from_pixel(640, 480, image::Rgb([20, 120, 40])),
        image::RgbImage::from_pixel(800, 600, image::Rgb([40, 40, 160])),
    ];
    let sizes: Vec<_> = bgs.iter().map(|b| b.dimensions()).collect();
    let cfg = DrConfig { n_samples: 2000, ..DrConfig::default() };
    c.bench_function("plan_samples/2000", |b| b.iter(|| plan_samples(black_box(&patches), &sizes, &cfg)));
    let small = DrConfig { n_samples: 20, ..DrConfig::default() };
    c.bench_function("domain_randomize/20", |b| b.iter(|| domain_randomize(black_box(&patches), &bgs, &small)));
}

criterion_group!(benches, labels, randomize);
criterion_main!(benches);
