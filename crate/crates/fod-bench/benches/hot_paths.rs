use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array3, ArrayD, IxDyn};

use fod_core::autograd::Graph;
use fod_core::denoiser::{DenoiserModel, NetConfig, Variant};
use fod_core::diffusion::{ddpm_step, q_sample, NoiseSchedule};
use fod_core::phantom::{fiber_to_coeffs, FiberSpec};
use fod_core::rng::Rng;
use fod_core::spharm::{extract_peaks, spharm_basis, PeakGrid};

fn bench_spharm(c: &mut Criterion) {
    let mut rng = Rng::from_seed(1);
    let dirs: Vec<[f64; 3]> = (0..256).map(|_| rng.unit_vector()).collect();
    c.bench_function("spharm_basis_256_dirs", |b| {
        b.iter(|| spharm_basis(&dirs, 8).unwrap())
    });

    let coeffs: Vec<f32> = fiber_to_coeffs(&FiberSpec {
        direction: [0.0, 0.0, 1.0],
        weight: 1.0,
        concentration: 45.0,
    })
    .unwrap()
    .iter()
    .map(|&v| v as f32)
    .collect();
    let grid = PeakGrid::default_grid();
    c.bench_function("extract_peaks_level4", |b| {
        b.iter(|| extract_peaks(&coeffs, &grid, 0.5, 3).unwrap())
    });
}

fn bench_diffusion(c: &mut Criterion) {
    let sched = NoiseSchedule::default_1000();
    let mut rng = Rng::from_seed(2);
    let x0 = ArrayD::from_shape_fn(IxDyn(&[12, 12, 12]), |_| rng.normal() as f32);
    let eps = ArrayD::from_shape_fn(IxDyn(&[12, 12, 12]), |_| rng.normal() as f32);
    c.bench_function("q_sample_12cube", |b| {
        b.iter(|| q_sample(&x0, 500, &eps, &sched).unwrap())
    });
    let v = eps.clone();
    c.bench_function("ddpm_step_12cube", |b| {
        let mut step_rng = Rng::from_seed(3);
        b.iter(|| ddpm_step(&x0, &v, 500, &mut step_rng, &sched).unwrap())
    });
}

fn bench_denoiser(c: &mut Criterion) {
    let model = DenoiserModel::new(
        NetConfig {
            variant: Variant::Vol,
            ..Default::default()
        },
        7,
    )
    .unwrap();
    let mut rng = Rng::from_seed(4);
    let x_t = Array3::from_shape_fn((12, 12, 12), |_| rng.normal() as f32);
    let cond = Array3::from_shape_fn((12, 12, 12), |_| rng.normal() as f32);
    let mask = Array3::<f32>::zeros((12, 12, 12));
    let vol = fod_core::spharm::volume_index_table(8).unwrap()[10];
    c.bench_function("denoise_forward_12cube", |b| {
        b.iter(|| {
            model
                .denoise_volume(&x_t, 100, vol, Some((&cond, &mask)), None)
                .unwrap()
        })
    });
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::from_seed(5);
    let x = ArrayD::from_shape_fn(IxDyn(&[8, 12, 12, 12]), |_| rng.normal() as f32);
    let w = ArrayD::from_shape_fn(IxDyn(&[8, 8 * 27]), |_| rng.normal() as f32 * 0.05);
    c.bench_function("conv3d_8ch_12cube", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            g.conv3d(xi, wi, 1);
        })
    });
}

criterion_group!(spharm, bench_spharm);
criterion_group!(diffusion, bench_diffusion);
criterion_group!(denoiser, bench_denoiser);
criterion_group!(conv, bench_conv);
criterion_main!(spharm, diffusion, denoiser, conv);
