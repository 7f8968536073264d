//! The Monte Carlo test-time augmentation loop and the two fusion rules.
//!
//! For sample `i` the engine draws parameters from the stream
//! `(seed, case, i)`, augments the image, predicts, takes the hard labels,
//! and maps them back onto the input grid. Samples may run concurrently but
//! are always gathered and folded in index order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{apply_augmentation, inverse_spatial, sample_params, AugmentationParams, AugmentationPrior};
use crate::predictor::{check_channels, Concurrency, Predictor, PredictorContract};
use crate::rng;
use crate::volume::{argmax_labels, masked_stats, Grid, LabelAlphabet, LabelMap, MaskPolicy, ProbMap, Volume};

/// Call index used for plain (non-augmented) inference.
pub const PLAIN_CALL: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Per-voxel mode of the hard labels, smallest label on ties.
    #[default]
    MajorityVote,
    /// Argmax of the mean of the back-mapped probability maps.
    ProbAverage,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority-vote" | "vote" => Ok(Fusion::MajorityVote),
            "prob-average" | "average" => Ok(Fusion::ProbAverage),
            other => Err(Error::Config(format!("unknown fusion {other:?} (majority-vote | prob-average)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub num_samples: usize,
    pub prior: AugmentationPrior,
    pub seed: u64,
    pub fusion: Fusion,
    /// Return the per-sample label maps along with the fused result.
    pub keep_samples: bool,
    /// Case index; selects an independent family of sample streams.
    pub case: u64,
    /// Label written for each predictor class.
    pub labels: LabelAlphabet,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            num_samples: 20,
            prior: AugmentationPrior::default(),
            seed: 0,
            fusion: Fusion::MajorityVote,
            keep_samples: true,
            case: 0,
            labels: LabelAlphabet::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be at least 1".into()));
        }
        self.prior.validate()
    }

    /// Parameters of every sample, in index order.
    pub fn draw_params(&self) -> Vec<AugmentationParams> {
        (0..self.num_samples)
            .map(|i| sample_params(&self.prior, &mut rng::sample_stream(self.seed, self.case, i as u64)))
            .collect()
    }
}

/// Back-mapped hard predictions of all samples, ordered by sample index.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStack {
    maps: Vec<LabelMap>,
    params: Vec<AugmentationParams>,
}

impl SampleStack {
    pub fn new(maps: Vec<LabelMap>, params: Vec<AugmentationParams>) -> Result<Self> {
        if maps.len() != params.len() {
            return Err(Error::Contract("one parameter set per sample map is required".into()));
        }
        if let Some(first) = maps.first() {
            for m in &maps[1..] {
                first.grid().check_same(m.grid(), "sample stack")?;
            }
        }
        Ok(Self { maps, params })
    }

    pub fn maps(&self) -> &[LabelMap] {
        &self.maps
    }

    pub fn params(&self) -> &[AugmentationParams] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TtaOutput {
    pub labels: LabelMap,
    pub samples: Option<SampleStack>,
    /// Mean back-mapped probabilities (probability-average fusion only).
    pub probs: Option<ProbMap>,
}

struct SampleResult {
    labels: LabelMap,
    probs: Option<ProbMap>,
}

/// Logs a warning when a channel does not look z-scored.
pub fn warn_if_not_normalized(v: &Volume) {
    for c in 0..v.channels() {
        match masked_stats(v, c, MaskPolicy::Nonzero) {
            Ok(s) if (s.std - 1.0).abs() > 0.1 => {
                log::warn!("channel {c}: masked std is {:.3}; the input does not look normalized", s.std)
            }
            Err(_) => log::warn!("channel {c}: no usable intensity statistics"),
            _ => {}
        }
    }
}

/// Plain inference: argmax of one prediction on the unmodified image.
pub fn plain_prediction(v: &Volume, pred: &dyn Predictor, labels: &LabelAlphabet) -> Result<LabelMap> {
    check_channels(pred.contract(), v)?;
    argmax_labels(&pred.predict(v, PLAIN_CALL)?, labels)
}

pub fn run_tta(v: &Volume, pred: &dyn Predictor, cfg: &TtaConfig) -> Result<TtaOutput> {
    cfg.validate()?;
    let contract = pred.contract();
    check_channels(contract, v)?;
    if cfg.labels.len() < contract.classes {
        return Err(Error::Config(format!(
            "{} classes but only {} labels configured",
            contract.classes,
            cfg.labels.len()
        )));
    }
    warn_if_not_normalized(v);

    let params = cfg.draw_params();
    let batch = match contract.concurrency {
        Concurrency::ConcurrentSafe => exec::workers().max(1),
        Concurrency::Serial => 1,
    };
    let grid = *v.grid();
    let mut maps = Vec::with_capacity(cfg.num_samples);
    let mut acc = (cfg.fusion == Fusion::ProbAverage).then(|| ProbAccumulator::new(grid, contract.classes));

    for start in (0..cfg.num_samples).step_by(batch) {
        let len = batch.min(cfg.num_samples - start);
        let results = exec::map_indices(len, |j| run_sample(v, pred, contract, cfg, start + j, &params[start + j]));
        for (j, result) in results.into_iter().enumerate() {
            let sample = result.map_err(|e| Error::SampleFailed { index: start + j, source: Box::new(e) })?;
            if let (Some(acc), Some(p)) = (acc.as_mut(), sample.probs.as_ref()) {
                acc.add(p)?;
            }
            maps.push(sample.labels);
        }
    }

    let (labels, probs) = match acc {
        None => (majority_vote(&maps)?, None),
        Some(acc) => {
            let mean = acc.mean()?;
            (argmax_labels(&mean, &cfg.labels)?, Some(mean))
        }
    };
    let samples = if cfg.keep_samples { Some(SampleStack::new(maps, params)?) } else { None };
    Ok(TtaOutput { labels, samples, probs })
}

fn run_sample(
    v: &Volume,
    pred: &dyn Predictor,
    contract: &PredictorContract,
    cfg: &TtaConfig,
    index: usize,
    params: &AugmentationParams,
) -> Result<SampleResult> {
    let augmented = apply_augmentation(v, params, &cfg.prior)?;
    let probs = pred.predict(&augmented, index as u64)?;
    if probs.classes() != contract.classes || probs.dims() != v.dims() {
        return Err(Error::Contract(format!(
            "predictor returned {:?} x {} classes for a {:?} input with {} declared classes",
            probs.dims(),
            probs.classes(),
            v.dims(),
            contract.classes
        )));
    }
    let labels = inverse_spatial(&argmax_labels(&probs, &cfg.labels)?, params)?;
    let probs = match cfg.fusion {
        Fusion::ProbAverage => Some(inverse_spatial(&probs, params)?),
        Fusion::MajorityVote => None,
    };
    Ok(SampleResult { labels, probs })
}

/// Per-voxel most frequent label; ties go to the smallest label value.
pub fn majority_vote(maps: &[LabelMap]) -> Result<LabelMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("majority vote over zero samples".into()))?;
    let grid = *first.grid();
    for m in maps {
        grid.check_same(m.grid(), "majority vote")?;
    }
    let mut out = vec![0u8; grid.len()];
    let slice = grid.slice_len();
    exec::for_each_chunk_mut(&mut out, slice, |z, chunk| {
        let mut counts = [0u32; 256];
        for (j, o) in chunk.iter_mut().enumerate() {
            let i = z * slice + j;
            for m in maps {
                counts[m.labels()[i] as usize] += 1;
            }
            let mut best = (0u32, 0u8);
            for m in maps {
                let l = m.labels()[i];
                let c = counts[l as usize];
                if c > best.0 || (c == best.0 && l < best.1) {
                    best = (c, l);
                }
            }
            *o = best.1;
            for m in maps {
                counts[m.labels()[i] as usize] = 0;
            }
        }
    });
    Ok(LabelMap::from_parts(grid, out))
}

/// Sums probability maps in f64 in the order they are added.
struct ProbAccumulator {
    grid: Grid,
    classes: usize,
    sum: Vec<f64>,
    count: usize,
}

impl ProbAccumulator {
    fn new(grid: Grid, classes: usize) -> Self {
        Self { grid, classes, sum: vec![0.0; classes * grid.len()], count: 0 }
    }

    fn add(&mut self, p: &ProbMap) -> Result<()> {
        self.grid.check_same(p.grid(), "probability average")?;
        if p.classes() != self.classes {
            return Err(Error::DimensionMismatch(format!("{} vs {} classes", p.classes(), self.classes)));
        }
        let src = p.probs();
        exec::for_each_chunk_mut(&mut self.sum, self.grid.slice_len(), |k, chunk| {
            let base = k * chunk.len();
            for (s, &x) in chunk.iter_mut().zip(&src[base..]) {
                *s += x as f64;
            }
        });
        self.count += 1;
        Ok(())
    }

    fn mean(self) -> Result<ProbMap> {
        if self.count == 0 {
            return Err(Error::Empty("average of zero probability maps".into()));
        }
        let n = self.count as f64;
        let probs = self.sum.into_iter().map(|s| (s / n) as f32).collect();
        Ok(ProbMap::from_parts(self.grid, self.classes, probs))
    }
}

/// Voxel-wise arithmetic mean of probability maps.
pub fn average_probs(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("average of zero probability maps".into()))?;
    let mut acc = ProbAccumulator::new(*first.grid(), first.classes());
    for m in maps {
        acc.add(m)?;
    }
    acc.mean()
}

/// Mean of the axial, sagittal and coronal predictors' outputs.
pub fn multi_view_fuse(v: &Volume, views: [&dyn Predictor; 3], call: u64) -> Result<ProbMap> {
    let classes = views[0].contract().classes;
    if views.iter().any(|p| p.contract().classes != classes) {
        return Err(Error::InvalidPredictor("view predictors disagree on the class count".into()));
    }
    let maps = views.iter().map(|p| p.predict(v, call)).collect::<Result<Vec<_>>>()?;
    average_probs(&maps)
}

/// Three view predictors fused by probability averaging, usable anywhere a
/// single predictor is (in particular inside [`run_tta`]).
pub struct MultiViewPredictor<P> {
    views: [P; 3],
    contract: PredictorContract,
}

impl<P: Predictor> MultiViewPredictor<P> {
    pub fn new(views: [P; 3]) -> Result<Self> {
        let c0 = views[0].contract();
        if views.iter().any(|p| p.contract().classes != c0.classes || p.contract().channels != c0.channels) {
            return Err(Error::InvalidPredictor("view predictors disagree on classes or channels".into()));
        }
        let all_safe = views.iter().all(|p| p.contract().concurrency == Concurrency::ConcurrentSafe);
        let contract = PredictorContract {
            name: format!("multi-view({})", views.iter().map(|p| p.contract().name.as_str()).collect::<Vec<_>>().join(",")),
            classes: c0.classes,
            channels: c0.channels,
            concurrency: if all_safe { Concurrency::ConcurrentSafe } else { Concurrency::Serial },
        };
        Ok(Self { views, contract })
    }
}

impl<P: Predictor> Predictor for MultiViewPredictor<P> {
    fn contract(&self) -> &PredictorContract {
        &self.contract
    }

    fn predict(&self, v: &Volume, call: u64) -> Result<ProbMap> {
        let [a, b, c] = &self.views;
        multi_view_fuse(v, [a, b, c], call)
    }
}

/// TTA per view with probability averaging, then the mean over views.
pub fn tta_then_fuse(v: &Volume, views: [&dyn Predictor; 3], cfg: &TtaConfig) -> Result<ProbMap> {
    let cfg = TtaConfig { fusion: Fusion::ProbAverage, keep_samples: false, ..cfg.clone() };
    let fused = views
        .iter()
        .map(|p| run_tta(v, *p, &cfg).map(|out| out.probs.expect("probability fusion yields probabilities")))
        .collect::<Result<Vec<_>>>()?;
    average_probs(&fused)
}
