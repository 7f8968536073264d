//! Command-line front end: `run`, `eval`, `phantom` and `experiment`.
//!
//! Settings are resolved in three layers, later layers winning:
//! built-in defaults, then the JSON document given with `--config`, then
//! the individual flags (`--seed`, `--samples`, `--fusion`, `--predictor`).
//! For `run` and `eval` the document is a [`RunConfig`] (a run manifest is
//! accepted too and replays its recorded configuration); for `phantom` it
//! is a [`PhantomSpec`] and for `experiment` an [`ExperimentConfig`].
//!
//! Failures print one JSON object on stderr and exit with status 2 for bad
//! usage or inputs and 1 for anything else.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::{run_tta, warn_if_not_normalized, Fusion, MultiViewPredictor, TtaConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::experiment::{run_experiment, ExperimentConfig, Verdict};
use crate::geometry::AugmentationPrior;
use crate::metrics::{evaluate_case, MetricReport, RegionSpec};
use crate::predictor::{
    generate_phantom, Concurrency, ExternalPredictor, ExternalSpec, PerturbedPredictor, PhantomSpec, Predictor,
    ThresholdPredictor,
};
use crate::uncertainty::entropy_map;
use crate::volume::{
    load_label_map, load_raw, load_volume, normalize_with_stats, save_label_map, save_label_stack, save_uncertainty,
    save_volume, LabelAlphabet, MaskPolicy, Volume,
};

#[derive(Debug, Parser)]
#[command(name = "tta", version, about = "Test-time augmentation for volumetric segmentation")]
pub struct Cli {
    /// JSON configuration document for the chosen command.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores, 1 runs sequentially.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Predictor as JSON, `threshold:T1,T2,...` or `external:PROGRAM ARGS...`.
    #[arg(long, global = true, value_name = "SPEC")]
    pub predictor: Option<String>,
    /// `majority-vote` or `prob-average`.
    #[arg(long, global = true)]
    pub fusion: Option<Fusion>,
    /// Number of augmented samples per case.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment volumes with TTA and write labels, uncertainty and a manifest.
    Run(RunArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Write a nested-sphere phantom and its ground truth.
    Phantom(PhantomArgs),
    /// Run the synthetic closed-loop experiment and write a verdict.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input volumes (`.nii`, or the `.json` header of a raw volume).
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Feed the volumes to the predictor without z-scoring.
    #[arg(long)]
    pub no_normalize: bool,
    /// Also write the back-mapped samples as `<case>_samples.nii`.
    #[arg(long)]
    pub save_samples: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding `<case>_seg.nii` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory holding `<case>_gt.nii`, `<case>_seg.nii` or `<case>.nii`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value = "phantom")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(short, long, default_value = "experiment")]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub flip_rate: Option<f64>,
}

/// A segmentation model, either built in or launched as a child process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    Threshold {
        thresholds: Vec<f64>,
        #[serde(default)]
        channel: usize,
        #[serde(default)]
        softness: f64,
    },
    Perturbed {
        base: Box<PredictorSpec>,
        flip_rate: f64,
        #[serde(default)]
        seed: u64,
    },
    MultiView {
        views: Box<[PredictorSpec; 3]>,
    },
    External(ExternalSpec),
}

impl PredictorSpec {
    /// Parses JSON or one of the `threshold:` / `external:` shorthands.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return serde_json::from_str(s).map_err(|e| Error::Config(format!("predictor spec: {e}")));
        }
        if let Some(rest) = s.strip_prefix("threshold:") {
            let thresholds = rest
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("threshold list {rest:?}: {e}")))?;
            return Ok(PredictorSpec::Threshold { thresholds, channel: 0, softness: 0.0 });
        }
        if let Some(rest) = s.strip_prefix("external:") {
            let command: Vec<String> = rest.split_whitespace().map(str::to_owned).collect();
            if command.is_empty() {
                return Err(Error::Config("external predictor needs a command".into()));
            }
            return Ok(PredictorSpec::External(ExternalSpec::new(command)));
        }
        Err(Error::Config(format!(
            "unrecognized predictor {s:?} (expected JSON, threshold:T1,T2,... or external:PROGRAM ARGS...)"
        )))
    }

    /// Instantiates the predictor for inputs with `channels` channels.
    pub fn build(&self, channels: usize) -> Result<Box<dyn Predictor>> {
        Ok(match self {
            PredictorSpec::Threshold { thresholds, channel, softness } => {
                let p = ThresholdPredictor::new(thresholds.clone(), *channel, *softness)?;
                let n = channels.max(channel + 1);
                Box::new(p.with_channels(n)?)
            }
            PredictorSpec::Perturbed { base, flip_rate, seed } => {
                Box::new(PerturbedPredictor::new(base.build(channels)?, *flip_rate, *seed)?)
            }
            PredictorSpec::MultiView { views } => {
                let [a, b, c] = &**views;
                Box::new(MultiViewPredictor::new([a.build(channels)?, b.build(channels)?, c.build(channels)?])?)
            }
            PredictorSpec::External(spec) => Box::new(ExternalPredictor::launch(spec)?),
        })
    }
}

/// Configuration document for `run` and `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub predictor: Option<PredictorSpec>,
    pub num_samples: usize,
    pub seed: u64,
    pub fusion: Fusion,
    pub prior: AugmentationPrior,
    pub labels: LabelAlphabet,
    pub regions: Vec<RegionSpec>,
    pub normalize: bool,
    pub save_samples: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tta = TtaConfig::default();
        Self {
            inputs: Vec::new(),
            output_dir: None,
            predictor: None,
            num_samples: tta.num_samples,
            seed: tta.seed,
            fusion: tta.fusion,
            prior: tta.prior,
            labels: tta.labels,
            regions: RegionSpec::brats(),
            normalize: true,
            save_samples: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config("no input volumes given".into()));
        }
        if self.inputs.iter().any(|p| p.as_os_str().is_empty()) {
            return Err(Error::Config("input paths must not be empty".into()));
        }
        if self.predictor.is_none() {
            return Err(Error::Config("no predictor configured (use --predictor or the \"predictor\" key)".into()));
        }
        self.tta(0).validate()
    }

    pub fn tta(&self, case: u64) -> TtaConfig {
        TtaConfig {
            num_samples: self.num_samples,
            prior: self.prior.clone(),
            seed: self.seed,
            fusion: self.fusion,
            keep_samples: true,
            case,
            labels: self.labels.clone(),
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_owned(), source })
}

fn from_value<T: serde::de::DeserializeOwned>(value: Value, path: &Path) -> Result<T> {
    serde_json::from_value(value).map_err(|source| Error::Json { path: path.to_owned(), source })
}

/// Loads a [`RunConfig`]; a run manifest yields the configuration it recorded.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut value = read_json(path)?;
    if value_is_manifest(&value) {
        value = value["config"].take();
    }
    from_value(value, path)
}

fn value_is_manifest(v: &Value) -> bool {
    v.get("samples").is_some() && v.get("config").is_some()
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_owned(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Case name of an input: file name minus `.nii` / `.json`.
pub fn case_name(path: &Path) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("cannot derive a case name from {}", path.display())))?;
    let stem = name.strip_suffix(".nii").or_else(|| name.strip_suffix(".json")).unwrap_or(name);
    Ok(stem.to_owned())
}

/// Stable 64-bit id of a case name (FNV-1a), so that sample streams do not
/// depend on the order in which cases are listed.
pub fn case_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn load_input(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => load_raw(path.with_extension("")),
        _ => load_volume(path),
    }
}

/// Paths written for one case by [`cmd_run`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseOutputs {
    pub case: String,
    pub seg: PathBuf,
    pub uncertainty: PathBuf,
    pub manifest: PathBuf,
    pub timings: PathBuf,
    pub samples: Option<PathBuf>,
}

fn run_case(cfg: &RunConfig, pred: &dyn Predictor, input: &Path, out: &Path) -> Result<CaseOutputs> {
    let started = Instant::now();
    let case = case_name(input)?;
    let raw = load_input(input)?;
    let (volume, stats) = if cfg.normalize {
        let (v, s) = normalize_with_stats(&raw, MaskPolicy::Nonzero)?;
        (v, Some(s))
    } else {
        warn_if_not_normalized(&raw);
        (raw, None)
    };
    let loaded = started.elapsed();

    let stream = case_id(&case);
    let tta = cfg.tta(stream);
    let result = run_tta(&volume, pred, &tta)?;
    let samples = result.samples.expect("samples kept");
    let uncertainty = entropy_map(samples.maps())?;
    let inferred = started.elapsed();

    let file = |suffix: &str| out.join(format!("{case}_{suffix}"));
    let outputs = CaseOutputs {
        seg: file("seg.nii"),
        uncertainty: file("uncertainty.nii"),
        manifest: file("manifest.json"),
        timings: file("timings.json"),
        samples: cfg.save_samples.then(|| file("samples.nii")),
        case: case.clone(),
    };
    save_label_map(&result.labels, &outputs.seg)?;
    save_uncertainty(&uncertainty, &outputs.uncertainty)?;
    if let Some(path) = &outputs.samples {
        save_label_stack(samples.maps(), path)?;
    }

    let recorded = RunConfig { output_dir: None, ..cfg.clone() };
    let contract = pred.contract();
    let name_of = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    let manifest = json!({
        "tool": concat!("ttaseg ", env!("CARGO_PKG_VERSION")),
        "case": case,
        "input": input,
        "seed": cfg.seed,
        "case_stream": stream,
        "config": recorded,
        "predictor": { "name": contract.name, "classes": contract.classes, "channels": contract.channels },
        "normalization": stats,
        "samples": samples.params(),
        "outputs": {
            "seg": name_of(&outputs.seg),
            "uncertainty": name_of(&outputs.uncertainty),
            "samples": outputs.samples.as_deref().and_then(name_of),
        },
    });
    write_json_file(&outputs.manifest, &manifest)?;
    let written = started.elapsed();

    let timings = json!({
        "case": case,
        "jobs": exec::workers(),
        "load_s": loaded.as_secs_f64(),
        "tta_s": (inferred - loaded).as_secs_f64(),
        "write_s": (written - inferred).as_secs_f64(),
        "total_s": written.as_secs_f64(),
    });
    write_json_file(&outputs.timings, &timings)?;
    log::info!("{case}: {} samples in {:.2} s", cfg.num_samples, written.as_secs_f64());
    Ok(outputs)
}

/// Segments every input of `cfg` into `out`.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<Vec<CaseOutputs>> {
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    for input in &cfg.inputs {
        if !seen.insert(case_name(input)?) {
            return Err(Error::Config(format!("duplicate case name for {}", input.display())));
        }
    }
    create_dir(out)?;
    let channels = load_input(&cfg.inputs[0])?.channels();
    let pred = cfg.predictor.as_ref().expect("validated").build(channels)?;
    let results = if pred.contract().concurrency == Concurrency::ConcurrentSafe {
        exec::map_indices(cfg.inputs.len(), |i| run_case(cfg, &*pred, &cfg.inputs[i], out))
    } else {
        cfg.inputs.iter().map(|input| run_case(cfg, &*pred, input, out)).collect()
    };
    results.into_iter().collect()
}

fn find_gt(gt_dir: &Path, case: &str) -> Result<PathBuf> {
    let candidates = [format!("{case}_gt.nii"), format!("{case}_seg.nii"), format!("{case}.nii")];
    candidates
        .iter()
        .map(|c| gt_dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Io {
            path: gt_dir.join(&candidates[0]),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no ground truth for case"),
        })
}

/// Prediction files in `dir` as (case, path), sorted by case.
fn list_predictions(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(case) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix("_seg.nii")) {
            found.push((case.to_owned(), path));
        }
    }
    if found.is_empty() {
        return Err(Error::Empty(format!("no *_seg.nii files in {}", dir.display())));
    }
    found.sort();
    Ok(found)
}

/// Evaluates every `<case>_seg.nii` in `pred_dir` and writes `report.csv`,
/// `summary.csv` and `report.json` into `out`.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, regions: &[RegionSpec], out: &Path) -> Result<MetricReport> {
    if regions.is_empty() {
        return Err(Error::Config("at least one region is required".into()));
    }
    let cases = list_predictions(pred_dir)?;
    let evaluated = exec::map_indices(cases.len(), |i| {
        let (case, path) = &cases[i];
        let pred = load_label_map(path)?;
        let gt = load_label_map(find_gt(gt_dir, case)?)?;
        evaluate_case(case, &pred, &gt, regions)
    });
    let report = MetricReport::new(evaluated.into_iter().collect::<Result<Vec<_>>>()?)?;
    create_dir(out)?;
    report.write_cases_csv(out.join("report.csv"))?;
    report.write_summary_csv(out.join("summary.csv"))?;
    report.write_json(out.join("report.json"))?;
    Ok(report)
}

/// Writes `<name>.nii`, `<name>_gt.nii` and `<name>_spec.json`.
pub fn cmd_phantom(spec: &PhantomSpec, seed: u64, out: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    let (volume, gt) = generate_phantom(spec, seed)?;
    create_dir(out)?;
    let image = out.join(format!("{name}.nii"));
    let truth = out.join(format!("{name}_gt.nii"));
    save_volume(&volume, &image)?;
    save_label_map(&gt, &truth)?;
    write_json_file(&out.join(format!("{name}_spec.json")), &json!({ "seed": seed, "spec": spec }))?;
    Ok((image, truth))
}

/// Runs the experiment, writes `verdict.json` plus the first seed's
/// image, ground truth, fused labels, uncertainty and samples.
pub fn cmd_experiment(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Verdict> {
    let run = run_experiment(cfg, seed)?;
    create_dir(out)?;
    if let Some(a) = &run.first {
        save_volume(&a.image, out.join("seed_00_image.nii"))?;
        save_label_map(&a.ground_truth, out.join("seed_00_gt.nii"))?;
        save_label_map(&a.fused, out.join("seed_00_seg.nii"))?;
        save_uncertainty(&a.uncertainty, out.join("seed_00_uncertainty.nii"))?;
        save_label_stack(&a.samples, out.join("seed_00_samples.nii"))?;
    }
    write_json_file(&out.join("verdict.json"), &run.verdict)?;
    Ok(run.verdict)
}

fn reject_flags(command: &str, flags: &[(&str, bool)]) -> Result<()> {
    match flags.iter().find(|(_, set)| *set) {
        Some((flag, _)) => Err(Error::Config(format!("{flag} has no effect on `{command}`"))),
        None => Ok(()),
    }
}

fn resolve_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.samples {
        cfg.num_samples = n;
    }
    if let Some(f) = cli.fusion {
        cfg.fusion = f;
    }
    if let Some(p) = &cli.predictor {
        cfg.predictor = Some(PredictorSpec::parse(p)?);
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let mut cfg = resolve_run_config(cli)?;
            if !args.inputs.is_empty() {
                cfg.inputs = args.inputs.clone();
            }
            if args.no_normalize {
                cfg.normalize = false;
            }
            if args.save_samples {
                cfg.save_samples = true;
            }
            let out = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            for o in cmd_run(&cfg, &out)? {
                println!("{}", o.seg.display());
            }
            Ok(())
        }
        Command::Eval(args) => {
            reject_flags(
                "eval",
                &[
                    ("--seed", cli.seed.is_some()),
                    ("--samples", cli.samples.is_some()),
                    ("--fusion", cli.fusion.is_some()),
                    ("--predictor", cli.predictor.is_some()),
                ],
            )?;
            let cfg = resolve_run_config(cli)?;
            let out = args.out.clone().unwrap_or_else(|| args.pred.clone());
            let report = cmd_eval(&args.pred, &args.gt, &cfg.regions, &out)?;
            println!("evaluated {} cases into {}", report.cases.len(), out.display());
            Ok(())
        }
        Command::Phantom(args) => {
            reject_flags(
                "phantom",
                &[
                    ("--samples", cli.samples.is_some()),
                    ("--fusion", cli.fusion.is_some()),
                    ("--predictor", cli.predictor.is_some()),
                ],
            )?;
            let spec: PhantomSpec = match &cli.config {
                Some(path) => from_value(read_json(path)?, path)?,
                None => PhantomSpec::default(),
            };
            let (image, gt) = cmd_phantom(&spec, cli.seed.unwrap_or(0), &args.out, &args.name)?;
            println!("{}\n{}", image.display(), gt.display());
            Ok(())
        }
        Command::Experiment(args) => {
            reject_flags(
                "experiment",
                &[("--fusion", cli.fusion.is_some()), ("--predictor", cli.predictor.is_some())],
            )?;
            let mut cfg: ExperimentConfig = match &cli.config {
                Some(path) => from_value(read_json(path)?, path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(n) = cli.samples {
                cfg.num_samples = n;
            }
            if let Some(n) = args.seeds {
                cfg.seeds = n;
            }
            if let Some(r) = args.flip_rate {
                cfg.flip_rate = r;
            }
            let verdict = cmd_experiment(&cfg, cli.seed.unwrap_or(0), &args.out)?;
            for c in &verdict.criteria {
                println!("{} {}: {} (required {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.observed, c.required);
            }
            Ok(())
        }
    }
}

/// Machine-readable description of an error, as printed on stderr.
pub fn error_json(err: &Error) -> Value {
    json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
            "path": err.path(),
        }
    })
}

/// Exit status for an error: 2 for usage or input problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let jobs = cli.jobs.unwrap_or(0);
    let outcome = if jobs == 0 { dispatch(&cli) } else { exec::with_jobs(jobs, || dispatch(&cli)) };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            exit_code(&err)
        }
    }
}
