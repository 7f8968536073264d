//! The predictor contract and the built-in predictors.
//!
//! A predictor maps an image to per-voxel class probabilities. Hard labels
//! are derived downstream with [`crate::volume::argmax_labels`], so the same
//! predictor serves both majority-vote and probability-averaging fusion.

mod external;
mod phantom;
pub mod protocol;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use external::{ExternalPredictor, ExternalSpec, DEFAULT_TIMEOUT};
pub use phantom::{generate_phantom, PhantomSpec};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;
use crate::volume::{argmax_classes, ProbMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    /// Calls must not overlap.
    Serial,
    /// `predict` may be called from several threads at once.
    ConcurrentSafe,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorContract {
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub concurrency: Concurrency,
}

/// A segmentation model.
///
/// `call` identifies the invocation (the TTA engine passes the sample index).
/// Predictors with internal randomness must derive it from `call` alone so
/// that results do not depend on scheduling.
pub trait Predictor: Send + Sync {
    fn contract(&self) -> &PredictorContract;

    fn predict(&self, v: &Volume, call: u64) -> Result<ProbMap>;
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn contract(&self) -> &PredictorContract {
        (**self).contract()
    }

    fn predict(&self, v: &Volume, call: u64) -> Result<ProbMap> {
        (**self).predict(v, call)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn contract(&self) -> &PredictorContract {
        (**self).contract()
    }

    fn predict(&self, v: &Volume, call: u64) -> Result<ProbMap> {
        (**self).predict(v, call)
    }
}

pub(crate) fn check_channels(contract: &PredictorContract, v: &Volume) -> Result<()> {
    if v.channels() != contract.channels {
        return Err(Error::ChannelMismatch {
            name: contract.name.clone(),
            expected: contract.channels,
            actual: v.channels(),
        });
    }
    Ok(())
}

/// Voxel-wise intensity thresholding on one channel: the class is the number
/// of thresholds strictly below the value. With `softness > 0` the class
/// boundaries become logistic ramps of that width.
#[derive(Clone, Debug)]
pub struct ThresholdPredictor {
    contract: PredictorContract,
    thresholds: Vec<f64>,
    channel: usize,
    softness: f64,
}

impl ThresholdPredictor {
    pub fn new(thresholds: Vec<f64>, channel: usize, softness: f64) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidPredictor("at least one threshold is required".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPredictor(format!("thresholds must be strictly ascending, got {thresholds:?}")));
        }
        if !(softness.is_finite() && softness >= 0.0) {
            return Err(Error::InvalidPredictor(format!("softness {softness}")));
        }
        let contract = PredictorContract {
            name: "threshold".into(),
            classes: thresholds.len() + 1,
            channels: channel + 1,
            concurrency: Concurrency::ConcurrentSafe,
        };
        Ok(Self { contract, thresholds, channel, softness })
    }

    /// Declares the number of input channels (must exceed the read channel).
    pub fn with_channels(mut self, channels: usize) -> Result<Self> {
        if channels <= self.channel {
            return Err(Error::InvalidPredictor(format!(
                "channel {} does not exist in a {channels}-channel input",
                self.channel
            )));
        }
        self.contract.channels = channels;
        Ok(self)
    }

    /// Class probabilities for one intensity.
    pub fn probabilities(&self, value: f32, out: &mut [f32]) {
        let x = value as f64;
        if self.softness == 0.0 {
            let class = self.thresholds.iter().filter(|&&t| t < x).count();
            out.iter_mut().enumerate().for_each(|(k, p)| *p = (k == class) as u8 as f32);
            return;
        }
        // P(class >= k) is a logistic in (x - t_k); successive differences
        // telescope to 1 and are non-negative because thresholds ascend.
        let above = |k: usize| -> f64 {
            match k {
                0 => 1.0,
                k if k > self.thresholds.len() => 0.0,
                k => 1.0 / (1.0 + (-(x - self.thresholds[k - 1]) / self.softness).exp()),
            }
        };
        for (k, p) in out.iter_mut().enumerate() {
            *p = (above(k) - above(k + 1)) as f32;
        }
    }
}

impl Predictor for ThresholdPredictor {
    fn contract(&self) -> &PredictorContract {
        &self.contract
    }

    fn predict(&self, v: &Volume, _call: u64) -> Result<ProbMap> {
        check_channels(&self.contract, v)?;
        let n = v.grid().len();
        let classes = self.contract.classes;
        let src = v.channel(self.channel);
        let slice = v.grid().slice_len();
        // voxel-major scratch, transposed to class-major below
        let mut scratch = vec![0.0f32; n * classes];
        exec::for_each_chunk_mut(&mut scratch, slice * classes, |z, chunk| {
            for (j, probs) in chunk.chunks_mut(classes).enumerate() {
                self.probabilities(src[z * slice + j], probs);
            }
        });
        let mut probs = vec![0.0f32; n * classes];
        for (i, voxel) in scratch.chunks(classes).enumerate() {
            for (k, &p) in voxel.iter().enumerate() {
                probs[k * n + i] = p;
            }
        }
        Ok(ProbMap::from_parts(*v.grid(), classes, probs))
    }
}

/// Wraps a predictor and corrupts its hard decision: each voxel, with
/// probability `flip_rate`, becomes certain of a uniformly chosen other
/// class. The corruption is drawn from `(seed, call)` only.
pub struct PerturbedPredictor<P> {
    base: P,
    flip_rate: f64,
    seed: u64,
    contract: PredictorContract,
}

impl<P: Predictor> PerturbedPredictor<P> {
    pub fn new(base: P, flip_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&flip_rate) {
            return Err(Error::InvalidPredictor(format!("flip_rate {flip_rate} outside [0, 1)")));
        }
        let mut contract = base.contract().clone();
        contract.name = format!("perturbed({})", contract.name);
        Ok(Self { base, flip_rate, seed, contract })
    }
}

impl<P: Predictor> Predictor for PerturbedPredictor<P> {
    fn contract(&self) -> &PredictorContract {
        &self.contract
    }

    fn predict(&self, v: &Volume, call: u64) -> Result<ProbMap> {
        let probs = self.base.predict(v, call)?;
        if self.flip_rate == 0.0 {
            return Ok(probs);
        }
        let classes = probs.classes();
        let grid = *probs.grid();
        let n = grid.len();
        let mut argmax = argmax_classes(&probs);
        let call_seed = rng::derive_seed(self.seed, &[call]);
        // u32::MAX marks "unchanged"
        let mut flipped = vec![u32::MAX; n];
        exec::for_each_chunk_pair_mut(&mut argmax, grid.slice_len(), &mut flipped, grid.slice_len(), |z, cls, out| {
            let mut rng = rng::stream(call_seed, z as u64);
            for (c, o) in cls.iter().zip(out.iter_mut()) {
                if rng.random::<f64>() < self.flip_rate {
                    let mut k = rng.random_range(0..classes - 1);
                    if k >= *c as usize {
                        k += 1;
                    }
                    *o = k as u32;
                }
            }
        });
        let mut data = probs.into_probs();
        for (i, &k) in flipped.iter().enumerate() {
            if k != u32::MAX {
                for c in 0..classes {
                    data[c * n + i] = (c == k as usize) as u8 as f32;
                }
            }
        }
        Ok(ProbMap::from_parts(grid, classes, data))
    }
}
