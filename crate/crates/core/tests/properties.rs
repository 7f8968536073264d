mod common;

use std::f64::consts::FRAC_PI_2;
use std::io::Cursor;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttaseg::engine::{average_probs, majority_vote, plain_prediction, run_tta, TtaConfig};
use ttaseg::exec;
use ttaseg::geometry::{
    grid_affine, inverse_spatial, params_to_affine, sample_params, Affine, AugmentationParams, AugmentationPrior,
    Interp, Resample, Scale,
};
use ttaseg::metrics::{dice, hausdorff_pair, summarize, CaseMetrics, Mask, RegionMetrics};
use ttaseg::predictor::protocol::{self, Header, DTYPE};
use ttaseg::predictor::{PerturbedPredictor, Predictor, ThresholdPredictor};
use ttaseg::rng::sample_stream;
use ttaseg::uncertainty::entropy_map;
use ttaseg::volume::{
    argmax_labels, load_label_map, load_volume, masked_stats, normalize, save_label_map, save_volume, Grid,
    LabelAlphabet, LabelMap, MaskPolicy, ProbMap, Volume,
};

use common::hausdorff_oracle;

fn dims(max: usize) -> impl Strategy<Value = [usize; 3]> {
    [1..=max, 1..=max, 1..=max]
}

fn spacing() -> impl Strategy<Value = [f64; 3]> {
    [0.25f64..3.0, 0.25f64..3.0, 0.25f64..3.0]
}

fn volume(max: usize, channels: usize) -> impl Strategy<Value = Volume> {
    (dims(max), spacing()).prop_flat_map(move |(d, s)| {
        let n = d.iter().product::<usize>() * channels;
        prop::collection::vec(-100.0f32..100.0, n)
            .prop_map(move |data| Volume::new(Grid::new(d, s).unwrap(), channels, data).unwrap())
    })
}

fn labels(grid: Grid, alphabet: &'static [u8]) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(prop::sample::select(alphabet), grid.len()).prop_map(move |l| LabelMap::new(grid, l).unwrap())
}

fn stack(max: usize, n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<LabelMap>> {
    (dims(max), n).prop_flat_map(|(d, n)| {
        prop::collection::vec(labels(Grid::new(d, [1.0; 3]).unwrap(), &[0, 1, 2, 4]), n)
    })
}

fn probs(grid: Grid, classes: usize) -> impl Strategy<Value = ProbMap> {
    prop::collection::vec(0.0f32..1.0, grid.len() * classes).prop_map(move |raw| {
        let n = grid.len();
        let mut p = vec![0.0f32; raw.len()];
        for i in 0..n {
            let sum: f32 = (0..classes).map(|k| raw[k * n + i] + 0.01).sum();
            for k in 0..classes {
                p[k * n + i] = (raw[k * n + i] + 0.01) / sum;
            }
        }
        ProbMap::new(grid, classes, p).unwrap()
    })
}

fn quarter_params() -> impl Strategy<Value = AugmentationParams> {
    ([any::<bool>(), any::<bool>(), any::<bool>()], [0u32..4, 0u32..4, 0u32..4]).prop_map(|(flips, q)| {
        AugmentationParams { flips, rotations: q.map(|q| q as f64 * FRAC_PI_2), scale: Scale::Isotropic(1.0), noise_seed: 0 }
    })
}

fn mask(grid: Grid, density: f64) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(density), grid.len()).prop_map(move |b| Mask::new(grid, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn nifti_round_trip_volume(v in volume(7, 2)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.channels(), v.channels());
        let bits = |d: &[f32]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.data()), bits(v.data()));
        for (a, b) in back.spacing().iter().zip(v.spacing()) {
            prop_assert_eq!(*a, b as f32 as f64);
        }
    }

    #[test]
    fn nifti_round_trip_labels(l in dims(8).prop_flat_map(|d| labels(Grid::new(d, [1.0; 3]).unwrap(), &[0, 1, 2, 4, 255]))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.nii");
        save_label_map(&l, &path).unwrap();
        prop_assert_eq!(load_label_map(&path).unwrap(), l);
    }

    #[test]
    fn normalize_is_standard_over_mask(v in volume(8, 2)) {
        prop_assume!(v.grid().len() >= 8);
        let Ok(out) = normalize(&v, MaskPolicy::All) else { return Ok(()) };
        for c in 0..2 {
            let s = masked_stats(&out, c, MaskPolicy::All).unwrap();
            prop_assert!(s.mean.abs() < 1e-4, "mean {}", s.mean);
            prop_assert!((s.std - 1.0).abs() < 1e-3, "std {}", s.std);
        }
    }

    #[test]
    fn argmax_matches_scan(p in dims(6).prop_flat_map(|d| probs(Grid::new(d, [1.0; 3]).unwrap(), 4))) {
        let alphabet = LabelAlphabet::default();
        let l = argmax_labels(&p, &alphabet).unwrap();
        for i in 0..p.grid().len() {
            let v = p.voxel(i);
            let mut best = 0;
            for k in 1..v.len() {
                if v[k] > v[best] {
                    best = k;
                }
            }
            prop_assert_eq!(l.labels()[i], alphabet.label(best));
        }
    }

    #[test]
    fn affine_inverse_within_tolerance(seed in any::<u64>(), center in [0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0]) {
        let p = sample_params(&AugmentationPrior::default(), &mut sample_stream(seed, 0, 0));
        let a = params_to_affine(&p, center);
        let inv = a.invert().unwrap();
        prop_assert!(inv.compose(&a).max_abs_diff(&Affine::IDENTITY) <= 1e-9);
        prop_assert!(a.compose(&inv).max_abs_diff(&Affine::IDENTITY) <= 1e-9);
    }

    #[test]
    fn quarter_turns_are_exact_permutations(
        n in 1usize..9,
        p in quarter_params(),
        seed in any::<u64>(),
    ) {
        let grid = Grid::cube(n);
        let l = common::random_labels(&mut ChaCha8Rng::seed_from_u64(seed), grid, &[0, 1, 2, 4]);
        let moved = l.resample(&grid_affine(&p, &grid), Interp::Nearest, 9.0).unwrap();
        // a permutation never reads outside the grid
        prop_assert!(!moved.labels().contains(&9));
        let mut a = l.labels().to_vec();
        let mut b = moved.labels().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(inverse_spatial(&moved, &p).unwrap(), l);
    }

    #[test]
    fn trilinear_stays_within_bounds(v in volume(7, 1), seed in any::<u64>(), fill in -200.0f32..200.0) {
        let p = sample_params(&AugmentationPrior::default(), &mut sample_stream(seed, 1, 2));
        let out = v.resample(&grid_affine(&p, v.grid()), Interp::Trilinear, fill).unwrap();
        let lo = v.data().iter().copied().fold(fill, f32::min);
        let hi = v.data().iter().copied().fold(fill, f32::max);
        prop_assert!(out.data().iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), case in any::<u64>(), i in any::<u64>()) {
        let prior = AugmentationPrior::default();
        let a = sample_params(&prior, &mut sample_stream(seed, case, i));
        let b = sample_params(&prior, &mut sample_stream(seed, case, i));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn predictor_outputs_are_distributions(
        v in volume(6, 1),
        softness in prop_oneof![Just(0.0), 0.01f64..5.0],
        flip_rate in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let base = ThresholdPredictor::new(vec![-30.0, 0.0, 40.0], 0, softness).unwrap();
        let p = PerturbedPredictor::new(base, flip_rate, seed).unwrap();
        let out = p.predict(&v, seed % 7).unwrap();
        prop_assert!(ProbMap::check(out.grid(), out.classes(), out.probs()).is_ok());
        for i in 0..v.grid().len() {
            let sum: f32 = out.voxel(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn threshold_is_equivariant(n in 1usize..8, p in quarter_params(), seed in any::<u64>(), soft in any::<bool>()) {
        let v = common::random_volume(&mut ChaCha8Rng::seed_from_u64(seed), [n, n, n], 1);
        let pred = ThresholdPredictor::new(vec![-1.0, 0.0, 1.0], 0, if soft { 0.4 } else { 0.0 }).unwrap();
        let a = grid_affine(&p, v.grid());
        let moved = v.resample(&a, Interp::Nearest, 0.0).unwrap();
        let lhs = pred.predict(&moved, 0).unwrap();
        let rhs = pred.predict(&v, 0).unwrap().resample(&a, Interp::Nearest, 0.0).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn run_tta_independent_of_workers(seed in any::<u64>(), n in 1usize..6, flip_rate in 0.0f64..0.5) {
        let v = common::random_volume(&mut ChaCha8Rng::seed_from_u64(seed), [9, 7, 5], 1);
        let pred = PerturbedPredictor::new(ThresholdPredictor::new(vec![-1.0, 0.0, 1.0], 0, 0.0).unwrap(), flip_rate, seed).unwrap();
        let cfg = TtaConfig { num_samples: n, seed, ..TtaConfig::default() };
        let par = run_tta(&v, &pred, &cfg).unwrap();
        let seq = exec::run_sequential(|| run_tta(&v, &pred, &cfg).unwrap());
        let two = exec::with_jobs(2, || run_tta(&v, &pred, &cfg).unwrap());
        prop_assert_eq!(&par.labels, &seq.labels);
        prop_assert_eq!(&par.labels, &two.labels);
        prop_assert_eq!(par.samples, seq.samples);
    }

    #[test]
    fn single_identity_sample_is_plain(seed in any::<u64>()) {
        let v = common::random_volume(&mut ChaCha8Rng::seed_from_u64(seed), [6, 5, 4], 1);
        let pred = ThresholdPredictor::new(vec![-1.0, 0.5], 0, 0.0).unwrap();
        let cfg = TtaConfig { num_samples: 1, seed, prior: AugmentationPrior::identity(), ..TtaConfig::default() };
        let plain = plain_prediction(&v, &pred, &cfg.labels).unwrap();
        prop_assert_eq!(run_tta(&v, &pred, &cfg).unwrap().labels, plain);
    }

    #[test]
    fn vote_is_in_multiset(maps in stack(5, 1..=9)) {
        let fused = majority_vote(&maps).unwrap();
        for i in 0..fused.grid().len() {
            prop_assert!(maps.iter().any(|m| m.labels()[i] == fused.labels()[i]));
        }
    }

    #[test]
    fn average_is_permutation_invariant(
        maps in (dims(5), 2usize..6).prop_flat_map(|(d, n)| prop::collection::vec(probs(Grid::new(d, [1.0; 3]).unwrap(), 3), n)),
        rotate in 0usize..6,
    ) {
        let a = average_probs(&maps).unwrap();
        let mut shuffled = maps.clone();
        shuffled.rotate_left(rotate % maps.len());
        shuffled.reverse();
        let b = average_probs(&shuffled).unwrap();
        let worst = a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 1e-7, "max difference {worst}");
    }

    #[test]
    fn entropy_bounds(maps in stack(5, 1..=12)) {
        let u = entropy_map(&maps).unwrap();
        for i in 0..u.grid().len() {
            let mut seen: Vec<u8> = maps.iter().map(|m| m.labels()[i]).collect();
            seen.sort_unstable();
            seen.dedup();
            let h = u.values()[i];
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (seen.len() as f64).ln() + 1e-12);
            prop_assert_eq!(h == 0.0, seen.len() == 1);
        }
    }

    #[test]
    fn entropy_invariances(maps in stack(4, 2..=10), rotate in 0usize..10) {
        let base = entropy_map(&maps).unwrap();

        let mut reordered = maps.clone();
        reordered.rotate_left(rotate % maps.len());
        let relabeled: Vec<LabelMap> = maps
            .iter()
            .map(|m| LabelMap::new(*m.grid(), m.labels().iter().map(|&l| 200 - l).collect()).unwrap())
            .collect();
        let doubled: Vec<LabelMap> = maps.iter().chain(maps.iter()).cloned().collect();

        for other in [entropy_map(&reordered).unwrap(), entropy_map(&relabeled).unwrap()] {
            for (a, b) in base.values().iter().zip(other.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(entropy_map(&doubled).unwrap(), base);
    }

    #[test]
    fn dice_symmetry(
        (a, b) in (dims(6), 0.0f64..1.0, 0.0f64..1.0).prop_flat_map(|(d, pa, pb)| {
            let g = Grid::new(d, [1.0; 3]).unwrap();
            (mask(g, pa), mask(g, pb))
        })
    ) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn hausdorff_matches_brute_force(
        (a, b) in (dims(8), spacing(), 0.05f64..0.7, 0.05f64..0.7).prop_flat_map(|(d, s, pa, pb)| {
            let g = Grid::new(d, s).unwrap();
            (mask(g, pa), mask(g, pb))
        })
    ) {
        let (hd95, hd) = hausdorff_pair(&a, &b).unwrap();
        let (rev95, rev) = hausdorff_pair(&b, &a).unwrap();
        prop_assert_eq!(hd, rev);
        prop_assert_eq!(hd95, rev95);
        match hausdorff_oracle(a.grid(), a.bits(), b.bits()) {
            Some((o95, omax)) => {
                prop_assert!((hd.unwrap() - omax).abs() <= 1e-9);
                prop_assert!((hd95.unwrap() - o95).abs() <= 1e-9);
            }
            None => prop_assert!(hd.is_none() && hd95.is_none()),
        }
    }

    #[test]
    fn spacing_scales_hausdorff(
        (d, s, a, b) in (dims(7), spacing(), 0.1f64..0.6, 0.1f64..0.6).prop_flat_map(|(d, s, pa, pb)| {
            let g = Grid::new(d, s).unwrap();
            (Just(d), Just(s), mask(g, pa), mask(g, pb))
        }),
        k in 0.1f64..10.0,
    ) {
        let scaled = Grid::new(d, s.map(|x| x * k)).unwrap();
        let a2 = Mask::new(scaled, a.bits().to_vec()).unwrap();
        let b2 = Mask::new(scaled, b.bits().to_vec()).unwrap();
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&a2, &b2).unwrap());
        let (h95, h) = hausdorff_pair(&a, &b).unwrap();
        let (k95, kh) = hausdorff_pair(&a2, &b2).unwrap();
        if let (Some(h), Some(kh), Some(h95), Some(k95)) = (h, kh, h95, k95) {
            prop_assert!((kh - k * h).abs() <= 1e-9 * kh.max(1.0));
            prop_assert!((k95 - k * h95).abs() <= 1e-9 * k95.max(1.0));
        } else {
            prop_assert!(h.is_none() && kh.is_none());
        }
    }

    #[test]
    fn summarize_is_permutation_invariant(values in prop::collection::vec((0.0f64..100.0, prop::option::of(0.0f64..50.0)), 1..12), rotate in 0usize..12) {
        let cases: Vec<CaseMetrics> = values
            .iter()
            .enumerate()
            .map(|(i, &(d, h))| CaseMetrics {
                case: format!("c{i}"),
                regions: vec![RegionMetrics { region: "WT".into(), dice: d, hd95: h, hd: h }],
            })
            .collect();
        let mut shuffled = cases.clone();
        shuffled.rotate_left(rotate % cases.len());
        shuffled.reverse();
        prop_assert_eq!(summarize(&cases).unwrap(), summarize(&shuffled).unwrap());
    }

    #[test]
    fn frames_round_trip(d in dims(5), channels in 1usize..3, values in prop::collection::vec(any::<f32>(), 0..1)) {
        let n = d.iter().product::<usize>() * channels;
        let payload: Vec<f32> = (0..n).map(|i| values.first().copied().unwrap_or(0.5) * i as f32).collect();
        let header = Header::Predict { dims: d, channels, spacing: [1.0, 0.5, 2.0], dtype: DTYPE.into() };
        let mut buf = Vec::new();
        protocol::write_frame(&mut buf, &header, &protocol::encode_f32(&payload)).unwrap();
        let frame = protocol::read_frame(&mut Cursor::new(&buf)).unwrap();
        prop_assert_eq!(frame.header, header);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&protocol::decode_f32(&frame.payload).unwrap()), bits(&payload));
    }
}

#[test]
fn identity_params_give_identity_matrix() {
    let p = AugmentationParams::identity();
    assert_eq!(params_to_affine(&p, [3.5, 7.0, 11.25]), Affine::IDENTITY);
    let g = Grid::new([5, 9, 4], [0.7, 1.3, 2.5]).unwrap();
    assert_eq!(grid_affine(&p, &g), Affine::IDENTITY);
}
