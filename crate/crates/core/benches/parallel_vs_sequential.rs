//! Parallel (rayon) against forced-sequential execution of the hot paths.
//! Without the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use ttaseg::engine::{run_tta, TtaConfig};
use ttaseg::exec;
use ttaseg::geometry::{grid_affine, sample_params, AugmentationPrior, Interp, Resample};
use ttaseg::metrics::{hausdorff_pair, region_binarize, RegionSpec};
use ttaseg::predictor::{generate_phantom, PerturbedPredictor, PhantomSpec, ThresholdPredictor};
use ttaseg::rng::sample_stream;
use ttaseg::uncertainty::entropy_map;
use ttaseg::volume::{normalize, MaskPolicy};

fn modes<F: FnMut()>(c: &mut Criterion, group: &str, mut f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(&mut f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| exec::run_sequential(&mut f)));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    let (raw, gt) = generate_phantom(&spec, 1).unwrap();
    let image = normalize(&raw, MaskPolicy::Nonzero).unwrap();
    let p = sample_params(&AugmentationPrior::default(), &mut sample_stream(1, 0, 0));
    let a = grid_affine(&p, image.grid());

    modes(c, "resample_trilinear_64", || {
        black_box(image.resample(&a, Interp::Trilinear, 0.0).unwrap());
    });

    let pred = PerturbedPredictor::new(ThresholdPredictor::new(vec![-0.9, 0.2, 1.3], 0, 0.0).unwrap(), 0.2, 3).unwrap();
    let cfg = TtaConfig { num_samples: 8, seed: 5, ..TtaConfig::default() };
    modes(c, "run_tta_64_n8", || {
        black_box(run_tta(&image, &pred, &cfg).unwrap());
    });

    let samples = run_tta(&image, &pred, &cfg).unwrap().samples.unwrap();
    modes(c, "entropy_map_64_n8", || {
        black_box(entropy_map(samples.maps()).unwrap());
    });

    let wt = RegionSpec::wt();
    let a_mask = region_binarize(&samples.maps()[0], &wt);
    let b_mask = region_binarize(&gt, &wt);
    modes(c, "hausdorff_64", || {
        black_box(hausdorff_pair(&a_mask, &b_mask).unwrap());
    });
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
