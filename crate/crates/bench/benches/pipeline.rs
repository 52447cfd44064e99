//! Microbenchmarks for the hot paths: batch OMP encoding, one K-SVD
//! sweep, and a forward pass of the residue net.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resfuse_core::net::forward_eval;
use resfuse_core::{
    batch_encode, dct_init, ksvd_update, make_grid, net_init, EncodeOptions, Modality, NetSpec,
    PatchSet,
};

fn random_patch_set(n: usize, seed: u64) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = make_grid((1, 8, 8), (1, 8, 8), (8, 8, 8)).unwrap();
    PatchSet {
        grid,
        patches: (0..n)
            .map(|_| Array3::from_shape_fn((1, 8, 8), |_| rng.gen::<f64>() * 255.0))
            .collect(),
        intensity_max: 255.0,
        modality: Modality::Synthetic,
    }
}

fn bench_omp(c: &mut Criterion) {
    let ps = random_patch_set(512, 1);
    let dict = dct_init((1, 8, 8), 256).unwrap();
    let opts = EncodeOptions {
        sparsity: 4,
        eps: 1.0,
    };
    c.bench_function("omp_batch_encode_512x64", |b| {
        b.iter(|| batch_encode(&dict, &ps, &opts).unwrap())
    });
}

fn bench_ksvd(c: &mut Criterion) {
    let ps = random_patch_set(256, 2);
    let opts = EncodeOptions {
        sparsity: 4,
        eps: 1.0,
    };
    c.bench_function("ksvd_single_sweep_256_patches", |b| {
        b.iter_batched(
            || {
                let dict = dct_init((1, 8, 8), 256).unwrap();
                let codes = batch_encode(&dict, &ps, &opts).unwrap();
                (dict, codes)
            },
            |(mut dict, mut codes)| ksvd_update(&mut dict, &ps, &mut codes, 1, &opts).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn bench_net_forward(c: &mut Criterion) {
    let spec = NetSpec::for_patch(5, 16, (1, 8, 8)).unwrap();
    let params = net_init(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = ndarray::Array5::from_shape_fn((32, 1, 1, 8, 8), |_| rng.gen::<f64>());
    c.bench_function("net_forward_eval_32x8x8", |b| {
        b.iter(|| forward_eval(&params, &batch).unwrap())
    });
}

criterion_group!(benches, bench_omp, bench_ksvd, bench_net_forward);
criterion_main!(benches);
