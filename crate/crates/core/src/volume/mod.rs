//! Dense voxel containers: images, label maps, probability maps and
//! uncertainty maps, plus intensity normalization and file I/O.
//!
//! Every container stores its samples in one flat buffer. Within a 3D block
//! the x index varies fastest, then y, then z; multi-channel containers
//! (image channels, probability classes) stack whole blocks channel after
//! channel.

mod nifti;
mod raw;

pub use nifti::{
    load_label_map, load_label_stack, load_volume, save_label_map, save_label_stack,
    save_uncertainty, save_volume,
};
pub use raw::{load_raw, save_raw, RawHeader};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Tolerance on the per-voxel class sum of a [`ProbMap`].
pub const PROB_SUM_TOLERANCE: f32 = 1e-4;

/// Voxel counts and physical spacing (mm) of a 3D grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spaced grid.
    pub fn cube(n: usize) -> Self {
        Self { dims: [n, n, n], spacing: [1.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Geometric center in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        self.dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    /// 6-connected neighbours of voxel `i` that lie inside the grid.
    pub fn neighbors6(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coords(i);
        (0..3).flat_map(move |axis| {
            let stride = [1, self.dims[0], self.slice_len()][axis];
            let lo = (c[axis] > 0).then(|| i - stride);
            let hi = (c[axis] + 1 < self.dims[axis]).then(|| i + stride);
            lo.into_iter().chain(hi)
        })
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Ordered list of label values; class index `k` of a probability map is
/// written as label `alphabet[k]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelAlphabet(Vec<u8>);

impl LabelAlphabet {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("label alphabet must not be empty".into()));
        }
        let mut seen = [false; 256];
        for &l in &labels {
            if std::mem::replace(&mut seen[l as usize], true) {
                return Err(Error::Config(format!("label {l} repeated in alphabet")));
            }
        }
        Ok(Self(labels))
    }

    /// `0..classes` as labels.
    pub fn identity(classes: usize) -> Self {
        Self((0..classes.min(256)).map(|c| c as u8).collect())
    }

    pub fn labels(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn label(&self, class: usize) -> u8 {
        self.0[class]
    }

    pub fn class_of(&self, label: u8) -> Option<usize> {
        self.0.iter().position(|&l| l == label)
    }
}

/// BraTS convention: background, necrotic/non-enhancing core, edema, enhancing.
impl Default for LabelAlphabet {
    fn default() -> Self {
        Self(vec![0, 1, 2, 4])
    }
}

impl TryFrom<Vec<u8>> for LabelAlphabet {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelAlphabet> for Vec<u8> {
    fn from(a: LabelAlphabet) -> Self {
        a.0
    }
}

/// Multi-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidVolume("channel count must be positive".into()));
        }
        if data.len() != channels * grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} != channels {} x voxels {}",
                data.len(),
                channels,
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Self { grid, channels: channels.max(1), data: vec![0.0; channels.max(1) * grid.len()] }
    }

    pub(crate) fn from_parts(grid: Grid, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * grid.len());
        Self { grid, channels, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// One hard label per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "label count {} != voxels {}",
                labels.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn filled(grid: Grid, label: u8) -> Self {
        Self { grid, labels: vec![label; grid.len()] }
    }

    pub(crate) fn from_parts(grid: Grid, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), grid.len());
        Self { grid, labels }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Fails on the first voxel whose label is not in `alphabet`.
    pub fn check_alphabet(&self, alphabet: &LabelAlphabet) -> Result<()> {
        let mut allowed = [false; 256];
        alphabet.labels().iter().for_each(|&l| allowed[l as usize] = true);
        match self.labels.iter().position(|&l| !allowed[l as usize]) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidVolume(format!(
                "label {} at voxel {:?} is not in alphabet {:?}",
                self.labels[i],
                self.grid.coords(i),
                alphabet.labels()
            ))),
        }
    }
}

/// Per-voxel class probabilities, stored class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    grid: Grid,
    classes: usize,
    probs: Vec<f32>,
}

/// Why a probability buffer was rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbViolation {
    pub voxel: usize,
    pub reason: String,
}

impl ProbMap {
    pub fn new(grid: Grid, classes: usize, probs: Vec<f32>) -> Result<Self> {
        Self::check(&grid, classes, &probs).map_err(|v| {
            Error::InvalidVolume(format!("voxel {:?}: {}", grid.coords(v.voxel), v.reason))
        })?;
        Ok(Self { grid, classes, probs })
    }

    pub(crate) fn from_parts(grid: Grid, classes: usize, probs: Vec<f32>) -> Self {
        debug_assert_eq!(probs.len(), classes * grid.len());
        Self { grid, classes, probs }
    }

    /// One-hot map from class indices.
    pub fn one_hot(grid: Grid, classes: usize, class_of: &[usize]) -> Result<Self> {
        if class_of.len() != grid.len() {
            return Err(Error::InvalidVolume("class index count != voxels".into()));
        }
        let n = grid.len();
        let mut probs = vec![0.0; classes * n];
        for (i, &k) in class_of.iter().enumerate() {
            if k >= classes {
                return Err(Error::InvalidVolume(format!("class {k} >= {classes}")));
            }
            probs[k * n + i] = 1.0;
        }
        Ok(Self { grid, classes, probs })
    }

    /// Checks length, finiteness, non-negativity and unit class sums.
    pub fn check(grid: &Grid, classes: usize, probs: &[f32]) -> Result<(), ProbViolation> {
        let n = grid.len();
        if classes == 0 || probs.len() != classes * n {
            return Err(ProbViolation {
                voxel: 0,
                reason: format!("expected {} values for {classes} classes, got {}", classes * n, probs.len()),
            });
        }
        for i in 0..n {
            let mut sum = 0.0f64;
            for k in 0..classes {
                let p = probs[k * n + i];
                if !p.is_finite() || p < 0.0 {
                    return Err(ProbViolation { voxel: i, reason: format!("class {k} has probability {p}") });
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE as f64 {
                return Err(ProbViolation { voxel: i, reason: format!("class probabilities sum to {sum}") });
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn class_plane(&self, k: usize) -> &[f32] {
        let n = self.grid.len();
        &self.probs[k * n..(k + 1) * n]
    }

    pub fn voxel(&self, i: usize) -> Vec<f32> {
        let n = self.grid.len();
        (0..self.classes).map(|k| self.probs[k * n + i]).collect()
    }

    pub fn into_probs(self) -> Vec<f32> {
        self.probs
    }
}

/// Voxel-wise entropy in nats. Values are kept in double precision; files
/// store them as float32.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    grid: Grid,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidVolume("uncertainty length != voxels".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidVolume("entropy values must be finite and >= 0".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Which voxels define the normalization statistics of a channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Voxels that are nonzero in the channel (skull-stripped brain mask).
    #[default]
    Nonzero,
    /// Every voxel.
    All,
}

/// Statistics used to normalize one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-channel z-scoring over the masked voxels; unmasked voxels become 0.
pub fn normalize(v: &Volume, policy: MaskPolicy) -> Result<Volume> {
    normalize_with_stats(v, policy).map(|(out, _)| out)
}

pub fn normalize_with_stats(v: &Volume, policy: MaskPolicy) -> Result<(Volume, Vec<ChannelStats>)> {
    let stats = (0..v.channels)
        .map(|c| masked_stats(v, c, policy))
        .collect::<Result<Vec<_>>>()?;
    let n = v.grid.len();
    let slice = v.grid.slice_len();
    let mut out = vec![0.0f32; v.data.len()];
    exec::for_each_chunk_mut(&mut out, slice, |chunk_idx, chunk| {
        let start = chunk_idx * slice;
        let c = start / n;
        let ChannelStats { mean, std, .. } = stats[c];
        let src = &v.data[start..start + chunk.len()];
        for (o, &x) in chunk.iter_mut().zip(src) {
            if in_mask(x, policy) {
                *o = ((x as f64 - mean) / std) as f32;
            }
        }
    });
    Ok((Volume::from_parts(v.grid, v.channels, out), stats))
}

/// Masked statistics of channel `c` (population standard deviation).
pub fn masked_stats(v: &Volume, c: usize, policy: MaskPolicy) -> Result<ChannelStats> {
    let data = v.channel(c);
    let slice = v.grid.slice_len();
    let nz = v.grid.dims[2];
    let slab = |z: usize| &data[z * slice..(z + 1) * slice];

    let partial = exec::map_indices(nz, |z| {
        slab(z).iter().filter(|&&x| in_mask(x, policy)).fold((0.0f64, 0usize), |(s, k), &x| (s + x as f64, k + 1))
    });
    let (sum, count) = partial.iter().fold((0.0, 0), |(s, k), &(ps, pk)| (s + ps, k + pk));
    if count == 0 {
        return Err(Error::DegenerateChannel { channel: c, std: 0.0, count });
    }
    let mean = sum / count as f64;
    let sq: f64 = exec::map_indices(nz, |z| {
        slab(z)
            .iter()
            .filter(|&&x| in_mask(x, policy))
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
    })
    .into_iter()
    .sum();
    let std = (sq / count as f64).sqrt();
    if std < 1e-6 {
        return Err(Error::DegenerateChannel { channel: c, std, count });
    }
    Ok(ChannelStats { mean, std, count })
}

#[inline]
fn in_mask(x: f32, policy: MaskPolicy) -> bool {
    match policy {
        MaskPolicy::Nonzero => x != 0.0,
        MaskPolicy::All => true,
    }
}

/// Hard decision per voxel: the most probable class (lowest index on ties),
/// written as its label from `alphabet`.
pub fn argmax_labels(p: &ProbMap, alphabet: &LabelAlphabet) -> Result<LabelMap> {
    if alphabet.len() < p.classes {
        return Err(Error::Contract(format!(
            "alphabet {:?} has fewer labels than the {} classes",
            alphabet.labels(),
            p.classes
        )));
    }
    let classes = argmax_classes(p);
    Ok(LabelMap::from_parts(p.grid, classes.into_iter().map(|k| alphabet.label(k as usize)).collect()))
}

/// Class index of the per-voxel maximum, lowest index on ties.
pub fn argmax_classes(p: &ProbMap) -> Vec<u16> {
    let n = p.grid.len();
    let mut out = vec![0u16; n];
    let slice = p.grid.slice_len();
    exec::for_each_chunk_mut(&mut out, slice, |z, chunk| {
        let base = z * slice;
        for (j, o) in chunk.iter_mut().enumerate() {
            let i = base + j;
            let mut best = 0;
            let mut best_p = p.probs[i];
            for k in 1..p.classes {
                let q = p.probs[k * n + i];
                if q > best_p {
                    best = k;
                    best_p = q;
                }
            }
            *o = best as u16;
        }
    });
    out
}
