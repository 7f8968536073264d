//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttaseg::engine::{majority_vote, plain_prediction, run_tta, TtaConfig};
use ttaseg::experiment::{run_experiment, ExperimentConfig, CONTROL_TOLERANCE, REQUIRED_IMPROVED};
use ttaseg::geometry::{grid_affine, inverse_spatial, sample_params, Affine, AugmentationParams, AugmentationPrior, Interp, Resample, Scale};
use ttaseg::metrics::{dice, hausdorff_pair, summarize, CaseMetrics, Mask, RegionMetrics};
use ttaseg::predictor::{generate_phantom, PhantomSpec, ThresholdPredictor};
use ttaseg::uncertainty::{boundary_distance, entropy_map};
use ttaseg::volume::{Grid, LabelAlphabet, LabelMap};

use common::{entropy_oracle, hausdorff_oracle, random_labels, random_volume, vote_oracle};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn timed(limit: Duration, outcome: Outcome, elapsed: Duration) -> Outcome {
    let within = elapsed <= limit;
    check(
        outcome.pass && within,
        format!("{}; {:.2} s (limit {:.0} s)", outcome.detail, elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn entropy_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe1);
    let alphabet = [0u8, 1, 2, 4];
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=40usize);
        let m = rng.random_range(2..=4usize);
        let votes: Vec<u8> = (0..n).map(|_| alphabet[rng.random_range(0..m)]).collect();
        let maps: Vec<LabelMap> = votes.iter().map(|&v| LabelMap::filled(Grid::cube(1), v)).collect();
        let h = entropy_map(&maps).unwrap().values()[0];
        worst = worst.max((h - entropy_oracle(&votes)).abs());
    }
    let agree: Vec<LabelMap> = (0..20).map(|_| LabelMap::filled(Grid::cube(1), 2)).collect();
    let zero = entropy_map(&agree).unwrap().values()[0];
    let split: Vec<LabelMap> = (0..20).map(|i| LabelMap::filled(Grid::cube(1), if i < 10 { 1 } else { 4 })).collect();
    let half = entropy_map(&split).unwrap().values()[0];
    check(
        worst <= 1e-6 && zero.to_bits() == 0 && (half - LN_2).abs() <= 1e-9,
        format!(
            "max |H - oracle| = {worst:.2e} over 1000 multisets; all-agree H = {zero}; 10/10 |H - ln 2| = {:.2e}",
            (half - LN_2).abs()
        ),
    )
}

fn vote_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe2);
    let grid = Grid::cube(8);
    let (mut agree, mut total, mut ties) = (0usize, 0usize, 0usize);
    for _ in 0..100 {
        let stack: Vec<LabelMap> = (0..20).map(|_| random_labels(&mut rng, grid, &[0, 1, 2, 4])).collect();
        let fused = majority_vote(&stack).unwrap();
        for i in 0..grid.len() {
            let votes: Vec<u8> = stack.iter().map(|m| m.labels()[i]).collect();
            let mut counts = [0usize; 5];
            votes.iter().for_each(|&v| counts[v as usize] += 1);
            let top = *counts.iter().max().unwrap();
            if counts.iter().filter(|&&c| c == top).count() > 1 {
                ties += 1;
            }
            agree += (fused.labels()[i] == vote_oracle(&votes)) as usize;
            total += 1;
        }
    }
    check(agree == total, format!("{agree}/{total} voxels agree ({ties} tied voxels)"))
}

fn quarter_turn_params(flips: [bool; 3], quarters: [u32; 3]) -> AugmentationParams {
    AugmentationParams {
        flips,
        rotations: quarters.map(|q| q as f64 * FRAC_PI_2),
        scale: Scale::Isotropic(1.0),
        noise_seed: 0,
    }
}

fn geometry_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe3);

    let mut exact = 0usize;
    let mut combos = 0usize;
    for n in [8usize, 9] {
        let labels = random_labels(&mut rng, Grid::cube(n), &[0, 1, 2, 4]);
        for f in 0..8u32 {
            let flips = [f & 1 != 0, f & 2 != 0, f & 4 != 0];
            for q in 0..64u32 {
                let p = quarter_turn_params(flips, [q % 4, (q / 4) % 4, q / 16]);
                let forward = labels.resample(&grid_affine(&p, labels.grid()), Interp::Nearest, 0.0).unwrap();
                let back = inverse_spatial(&forward, &p).unwrap();
                exact += (back == labels) as usize;
                combos += 1;
            }
        }
    }

    let prior = AugmentationPrior::default();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = sample_params(&prior, &mut rng);
        let center = [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)];
        let a = ttaseg::geometry::params_to_affine(&p, center);
        worst = worst.max(a.compose(&a.invert().unwrap()).max_abs_diff(&Affine::IDENTITY));
    }

    let spec = PhantomSpec { dims: [48; 3], radii_mm: [18.0, 12.0, 6.0], ..PhantomSpec::default() };
    let (_, gt) = generate_phantom(&spec, 7).unwrap();
    let distance = boundary_distance(&gt);
    let mut min_agreement = 1.0f64;
    for _ in 0..20 {
        let p = sample_params(&prior, &mut rng);
        let forward = gt.resample(&grid_affine(&p, gt.grid()), Interp::Nearest, 0.0).unwrap();
        let back = inverse_spatial(&forward, &p).unwrap();
        let (mut same, mut counted) = (0usize, 0usize);
        for i in 0..gt.grid().len() {
            // at least two voxels between this voxel and any label transition
            if distance[i] >= 3 {
                counted += 1;
                same += (back.labels()[i] == gt.labels()[i]) as usize;
            }
        }
        min_agreement = min_agreement.min(same as f64 / counted as f64);
    }

    check(
        exact == combos && worst <= 1e-9 && min_agreement >= 0.99,
        format!(
            "{exact}/{combos} flip/quarter-turn round trips exact; max |a·a⁻¹ - I| = {worst:.2e}; \
             worst sphere round-trip agreement {:.4}%",
            100.0 * min_agreement
        ),
    )
}

fn collapse_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe4);
    let predictor = ThresholdPredictor::new(vec![-0.5, 0.3, 1.1], 0, 0.0).unwrap().with_channels(2).unwrap();
    let labels = LabelAlphabet::default();
    let mut identical = 0usize;
    let mut runs = 0usize;
    for n in [1usize, 2, 3, 7, 20, 41] {
        for dims in [[12, 10, 9], [16, 16, 16]] {
            let v = random_volume(&mut rng, dims, 2);
            let plain = plain_prediction(&v, &predictor, &labels).unwrap();
            let cfg = TtaConfig {
                num_samples: n,
                prior: AugmentationPrior::flips_only(),
                seed: rng.random(),
                keep_samples: false,
                ..TtaConfig::default()
            };
            let fused = run_tta(&v, &predictor, &cfg).unwrap().labels;
            identical += (fused == plain) as usize;
            runs += 1;
        }
    }
    check(identical == runs, format!("{identical}/{runs} runs bit-identical to plain prediction"))
}

fn experiment_criteria() -> (Outcome, Outcome) {
    let started = Instant::now();
    let run = run_experiment(&ExperimentConfig::default(), 0).unwrap();
    let elapsed = started.elapsed();
    let v = &run.verdict;
    let n = v.seeds.len();
    let improved = v.seeds.iter().filter(|s| s.improved).count();
    let worst_control = v.seeds.iter().filter_map(|s| s.control.as_ref()).map(|c| c.abs_delta).fold(0.0, f64::max);
    let hotter = v.seeds.iter().filter(|s| s.boundary_higher).count();
    let min_margin = v.seeds.iter().map(|s| s.fused_dice - s.mean_sample_dice).fold(f64::INFINITY, f64::min);
    let min_ratio = v
        .seeds
        .iter()
        .map(|s| s.boundary.boundary_mean / s.boundary.interior_mean.max(f64::MIN_POSITIVE))
        .fold(f64::INFINITY, f64::min);
    let improvement = timed(
        Duration::from_secs(120),
        check(
            n == 20 && improved >= REQUIRED_IMPROVED && worst_control <= CONTROL_TOLERANCE,
            format!(
                "{improved}/{n} seeds improved (min fused - mean sample = {min_margin:.2} Dice points); \
                 control max |fused - plain| = {worst_control:.3}"
            ),
        ),
        elapsed,
    );
    let boundary = check(
        n == 20 && hotter == n,
        format!("{hotter}/{n} seeds with boundary entropy > interior (min ratio {min_ratio:.2})"),
    );
    (improvement, boundary)
}

fn mask(grid: Grid, f: impl Fn([usize; 3]) -> bool) -> Mask {
    Mask::new(grid, (0..grid.len()).map(|i| f(grid.coords(i))).collect()).unwrap()
}

fn metric_criterion() -> Outcome {
    let grid = Grid::cube(6);
    let empty = mask(grid, |_| false);
    let cube = mask(grid, |[x, y, z]| x < 2 && y < 2 && z < 2);
    let slab = mask(grid, |[x, y, z]| x < 4 && y < 2 && z < 2);
    let far = mask(grid, |[x, y, z]| x > 3 && y > 3 && z > 3);
    let analytic = [
        (dice(&cube, &cube).unwrap(), 100.0),
        (dice(&cube, &far).unwrap(), 0.0),
        (dice(&empty, &empty).unwrap(), 100.0),
        (dice(&empty, &cube).unwrap(), 0.0),
        (dice(&cube, &slab).unwrap(), 200.0 * 8.0 / 24.0),
    ];
    let dice_exact = analytic.iter().all(|(got, want)| got == want);

    let mut rng = ChaCha8Rng::seed_from_u64(0xe7);
    let mut worst = 0.0f64;
    let mut defined = 0usize;
    let mut agree_undefined = true;
    for _ in 0..50 {
        let dims = [rng.random_range(2..=12), rng.random_range(2..=12), rng.random_range(2..=12)];
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let grid = Grid::new(dims, spacing).unwrap();
        let (pa, pb) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
        let a: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(pb)).collect();
        let (hd95, hd) = hausdorff_pair(&Mask::new(grid, a.clone()).unwrap(), &Mask::new(grid, b.clone()).unwrap()).unwrap();
        match (hausdorff_oracle(&grid, &a, &b), hd95, hd) {
            (Some((o95, omax)), Some(h95), Some(hmax)) => {
                defined += 1;
                worst = worst.max((o95 - h95).abs()).max((omax - hmax).abs());
            }
            (None, None, None) => {}
            _ => agree_undefined = false,
        }
    }

    let cases: Vec<CaseMetrics> = [3.0, 1.0, 4.0, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &d)| CaseMetrics {
            case: format!("c{i}"),
            regions: vec![RegionMetrics { region: "WT".into(), dice: d, hd95: None, hd: None }],
        })
        .collect();
    let summary = summarize(&cases).unwrap();
    let s = summary[0].stats.unwrap();
    let quantiles_ok = s.median == 2.5
        && s.q25 == 1.75
        && s.q75 == 3.25
        && s.mean == 2.5
        && (s.std - 1.25f64.sqrt()).abs() < 1e-15
        && summary[1].undefined == 4
        && summary[1].stats.is_none();

    check(
        dice_exact && worst <= 1e-9 && agree_undefined && quantiles_ok,
        format!(
            "analytic Dice exact: {dice_exact}; Hausdorff max error {worst:.2e} over {defined} defined pairs; \
             quantiles of {{1,2,3,4}}: median {} q25 {} q75 {}",
            s.median, s.q25, s.q75
        ),
    )
}

fn tta(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tta")).args(args).output().expect("launch tta")
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["ph_seg.nii", "ph_uncertainty.nii", "ph_manifest.json"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).expect("artifact written")))
        .collect()
}

fn determinism_criterion() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"dims": [32, 32, 32], "radii_mm": [12.0, 8.0, 4.0]}"#).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let made = tta(&["phantom", "--config", &s(&spec), "--seed", "3", "--out", &s(root), "--name", "ph"]);
    assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));
    let predictor = r#"{"kind": "perturbed", "base": {"kind": "threshold", "thresholds": [-0.6, 0.3, 1.2]}, "flip_rate": 0.1, "seed": 5}"#;
    let mut runs = Vec::new();
    for (i, jobs) in ["1", "1", "8", "8"].iter().enumerate() {
        let out = root.join(format!("run{i}"));
        let r = tta(&[
            "run", &s(&root.join("ph.nii")), "--out", &s(&out), "--seed", "11", "--samples", "12",
            "--predictor", predictor, "--jobs", jobs,
        ]);
        if !r.status.success() {
            return check(false, format!("run failed: {}", String::from_utf8_lossy(&r.stderr)));
        }
        runs.push(artifacts(&out));
    }
    let identical = runs.iter().all(|r| *r == runs[0]);
    let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    check(identical, format!("segmentation, uncertainty and manifest ({bytes} bytes) identical across 2 runs each at jobs 1 and 8"))
}

fn main() {
    let mut failures = 0usize;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += (!o.pass) as usize;
    };
    let run = |limit: u64, f: fn() -> Outcome| {
        let started = Instant::now();
        let o = f();
        timed(Duration::from_secs(limit), o, started.elapsed())
    };

    report("entropy_oracle", run(1, entropy_criterion));
    report("vote_oracle", run(5, vote_criterion));
    report("geometry_exactness", run(10, geometry_criterion));
    report("equivariance_collapse", run(10, collapse_criterion));
    let (improvement, boundary) = experiment_criteria();
    report("tta_improvement", improvement);
    report("boundary_uncertainty", boundary);
    report("metric_oracles", run(30, metric_criterion));
    report("determinism", determinism_criterion());
    println!(
        "SKIP protocol_conformance: the Python adapter is not part of this build; \
         the client side is covered by the external_predictor tests"
    );

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
