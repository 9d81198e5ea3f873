use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use trackmap::config::PipelineConfig;
use trackmap::exec::Execution;
use trackmap::fuse::{finalize_map, SurfaceMap};
use trackmap::geometry::RigidTransform;
use trackmap::pipeline::{annotate_frames, build_mesh, frames_from_sim, fuse_frames, map_grid, render_frames};
use trackmap::sim::{generate_world, prediction_oracle, simulate_run};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.set_seed(3);
    cfg.run.route = vec![[-16.0, -5.5], [-10.0, -5.5], [-10.0, 5.5], [-2.0, 5.5]];
    cfg.run.image_width = 96;
    cfg.run.image_height = 72;
    cfg.run.focal = 60.0;
    cfg
}

fn stages(c: &mut Criterion) {
    let cfg = small_config();
    let world = generate_world(&cfg.world).unwrap();
    let sim = simulate_run(&world, &cfg.run, cfg.seed, Execution::Sequential).unwrap();
    let frames = frames_from_sim(&cfg, &sim, Execution::Sequential).unwrap();
    let preds: Vec<_> = sim
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| prediction_oracle(&f.truth, &cfg.oracle, cfg.seed, k as u64).unwrap())
        .collect();
    let poses: Vec<RigidTransform> = frames.iter().map(|f| f.base_to_world).collect();
    let grid = map_grid(&cfg, &poses).unwrap();
    let mut fused = SurfaceMap::new(grid);
    fuse_frames(&cfg, &mut fused, &sim.calib, &frames, &preds, Execution::Sequential).unwrap();
    let mesh = build_mesh(&cfg, &finalize_map(&fused)).unwrap();

    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_run(&world, &cfg.run, cfg.seed, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("annotate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| annotate_frames(&cfg, &sim.calib, &frames, &sim.tracklets, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("fuse");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut map = SurfaceMap::new(grid);
                fuse_frames(&cfg, &mut map, &sim.calib, &frames, &preds, exec).unwrap();
                black_box(map)
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render_frames(mesh.as_ref(), &sim.calib, &poses, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
