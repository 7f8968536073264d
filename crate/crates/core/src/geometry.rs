//! Augmentation model: parameter priors, the affine realization of a draw,
//! forward/inverse resampling and additive Gaussian noise.
//!
//! A draw is applied as one output-to-input map about the volume center,
//!
//! ```text
//! input = T(c) · S(1/s) · Rx(-rx) · Ry(-ry) · Rz(-rz) · F · T(-c) · output
//! ```
//!
//! so the forward image transform scales, rotates (Rz·Ry·Rx) and flips.
//! Rotations act in physical space: for anisotropic voxels the linear part is
//! conjugated by the spacing before it is applied to voxel indices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;
use crate::volume::{Grid, LabelMap, ProbMap, Volume};

const TAU: f64 = std::f64::consts::TAU;

/// Which axes the rotation prior acts on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Independent angle about each of x, y and z.
    #[default]
    AllAxes,
    /// Only about z (the axial slice plane); x and y angles are forced to 0.
    InPlane,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Isotropic,
    PerAxis,
}

/// Sampling law for augmentation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPrior {
    /// Bernoulli probability of flipping each axis.
    #[serde(deserialize_with = "de::per_axis")]
    pub flip_prob: [f64; 3],
    /// Uniform `[lo, hi]` rotation angle per axis, radians.
    #[serde(rename = "rotation_range_rad", deserialize_with = "de::per_axis_range")]
    pub rotation_range: [[f64; 2]; 3],
    /// Uniform `[lo, hi]` scale factor.
    pub scale_range: [f64; 2],
    /// Standard deviation of the additive noise, normalized-intensity units.
    pub noise_sigma: f64,
    pub rotation_mode: RotationMode,
    pub scale_mode: ScaleMode,
}

impl Default for AugmentationPrior {
    /// Flips ~ Bern(0.5), rotations ~ U(0, 2π) per axis, scale ~ U(0.8, 1.2),
    /// noise ~ N(0, 0.05²).
    fn default() -> Self {
        Self {
            flip_prob: [0.5; 3],
            rotation_range: [[0.0, TAU]; 3],
            scale_range: [0.8, 1.2],
            noise_sigma: 0.05,
            rotation_mode: RotationMode::AllAxes,
            scale_mode: ScaleMode::Isotropic,
        }
    }
}

impl AugmentationPrior {
    /// Every draw is the identity transform with no noise.
    pub fn identity() -> Self {
        Self {
            flip_prob: [0.0; 3],
            rotation_range: [[0.0, 0.0]; 3],
            scale_range: [1.0, 1.0],
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    /// Random axis flips only, noiseless.
    pub fn flips_only() -> Self {
        Self { flip_prob: [0.5; 3], ..Self::identity() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPrior(msg));
        if let Some(p) = self.flip_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("flip_prob {p} outside [0, 1]"));
        }
        for [lo, hi] in self.rotation_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("rotation range [{lo}, {hi}]"));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("scale range [{lo}, {hi}]"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Isotropic or per-axis scale factor of one draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scale {
    Isotropic(f64),
    PerAxis([f64; 3]),
}

impl Scale {
    pub fn factors(&self) -> [f64; 3] {
        match *self {
            Scale::Isotropic(s) => [s; 3],
            Scale::PerAxis(s) => s,
        }
    }
}

/// One Monte Carlo draw: flips, rotation angles, scale and the noise seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub flips: [bool; 3],
    pub rotations: [f64; 3],
    pub scale: Scale,
    pub noise_seed: u64,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self { flips: [false; 3], rotations: [0.0; 3], scale: Scale::Isotropic(1.0), noise_seed: 0 }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Draws flips (x, y, z), angles (x, y, z), scale and noise seed, in that
/// order. The number of draws does not depend on the prior's values, so two
/// priors that differ only in ranges consume the stream identically.
pub fn sample_params<R: Rng + ?Sized>(prior: &AugmentationPrior, rng: &mut R) -> AugmentationParams {
    let flips = prior.flip_prob.map(|p| rng.random::<f64>() < p);
    let mut rotations = [0.0; 3];
    for (r, range) in rotations.iter_mut().zip(prior.rotation_range) {
        *r = uniform(rng, range);
    }
    if prior.rotation_mode == RotationMode::InPlane {
        rotations[0] = 0.0;
        rotations[1] = 0.0;
    }
    let scale = match prior.scale_mode {
        ScaleMode::Isotropic => Scale::Isotropic(uniform(rng, prior.scale_range)),
        ScaleMode::PerAxis => Scale::PerAxis([(); 3].map(|_| uniform(rng, prior.scale_range))),
    };
    let noise_seed = rng.random::<u64>();
    AugmentationParams { flips, rotations, scale, noise_seed }
}

/// 4×4 homogeneous matrix (row-major) mapping output voxel coordinates to
/// input voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: [[f64; 4]; 4],
}

type Mat3 = [[f64; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// sin/cos with results within 1e-12 of 0 or ±1 snapped, so quarter turns
/// are exact permutations.
fn sin_cos_snapped(theta: f64) -> (f64, f64) {
    let snap = |v: f64| if (v - v.round()).abs() < 1e-12 { v.round() } else { v };
    let (s, c) = theta.sin_cos();
    (snap(s), snap(c))
}

fn rot_x(theta: f64) -> Mat3 {
    let (s, c) = sin_cos_snapped(theta);
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(theta: f64) -> Mat3 {
    let (s, c) = sin_cos_snapped(theta);
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = sin_cos_snapped(theta);
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
    };

    /// From a 3×3 linear part and a translation.
    pub fn from_linear(linear: Mat3, translation: [f64; 3]) -> Self {
        let mut m = Self::IDENTITY.m;
        for i in 0..3 {
            m[i][..3].copy_from_slice(&linear[i]);
            m[i][3] = translation[i];
        }
        Affine { m }
    }

    /// Linear part `l` applied about `center`: `x ↦ center + l·(x − center)`.
    pub fn about_center(linear: Mat3, center: [f64; 3]) -> Self {
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = center[i] - (0..3).map(|j| linear[i][j] * center[j]).sum::<f64>();
        }
        Self::from_linear(linear, t)
    }

    pub fn linear(&self) -> Mat3 {
        [0, 1, 2].map(|i| [self.m[i][0], self.m[i][1], self.m[i][2]])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &Affine) -> Affine {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Affine { m }
    }

    pub fn det3(&self) -> f64 {
        let a = self.linear();
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    /// Inverse via the adjugate of the linear part.
    pub fn invert(&self) -> Result<Affine> {
        let a = self.linear();
        let det = self.det3();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::SingularMatrix { det });
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
        let inv: Mat3 = [
            [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
            [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
        ];
        let t = self.translation();
        let t_inv = [0, 1, 2].map(|i| -(0..3).map(|j| inv[i][j] * t[j]).sum::<f64>());
        Ok(Affine::from_linear(inv, t_inv))
    }

    /// Largest absolute entry-wise difference from `other`.
    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        self.m.iter().flatten().zip(other.m.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Output-to-input linear part of a draw, in isotropic voxel units.
fn params_linear(p: &AugmentationParams) -> Mat3 {
    let [rx, ry, rz] = p.rotations;
    let s = p.scale.factors();
    let scale_inv: Mat3 = [[1.0 / s[0], 0.0, 0.0], [0.0, 1.0 / s[1], 0.0], [0.0, 0.0, 1.0 / s[2]]];
    let f = p.flips.map(|b| if b { -1.0 } else { 1.0 });
    let flip: Mat3 = [[f[0], 0.0, 0.0], [0.0, f[1], 0.0], [0.0, 0.0, f[2]]];
    let rot = mat3_mul(&mat3_mul(&rot_x(-rx), &rot_y(-ry)), &rot_z(-rz));
    mat3_mul(&mat3_mul(&scale_inv, &rot), &flip)
}

/// Output-to-input affine of a draw about `center` (voxel coordinates),
/// treating voxels as isotropic.
pub fn params_to_affine(p: &AugmentationParams, center: [f64; 3]) -> Affine {
    Affine::about_center(params_linear(p), center)
}

/// Output-to-input affine of a draw on `grid`: the transform is defined in
/// physical millimetres about the grid center. Equal to
/// [`params_to_affine`] when the spacing is isotropic.
pub fn grid_affine(p: &AugmentationParams, grid: &Grid) -> Affine {
    let mut l = params_linear(p);
    let s = grid.spacing;
    for (i, row) in l.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= s[j] / s[i];
        }
    }
    Affine::about_center(l, grid.center())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Nearest,
    #[default]
    Trilinear,
}

/// Containers that can be resampled onto their own grid through an affine.
pub trait Resample: Sized {
    /// Interpolation used when mapping predictions back.
    const DEFAULT_INTERP: Interp;

    fn grid(&self) -> &Grid;

    /// `out[o] = self[a·o]`; coordinates outside the grid take `fill`.
    fn resample(&self, a: &Affine, interp: Interp, fill: f32) -> Result<Self>;
}

impl Resample for Volume {
    const DEFAULT_INTERP: Interp = Interp::Trilinear;

    fn grid(&self) -> &Grid {
        Volume::grid(self)
    }

    fn resample(&self, a: &Affine, interp: Interp, fill: f32) -> Result<Self> {
        let fills = vec![fill; self.channels()];
        let data = match interp {
            Interp::Nearest => resample_nearest(self.grid(), self.data(), a, &fills),
            Interp::Trilinear => resample_trilinear(self.grid(), self.data(), a, &fills),
        };
        Ok(Volume::from_parts(*self.grid(), self.channels(), data))
    }
}

impl Resample for LabelMap {
    const DEFAULT_INTERP: Interp = Interp::Nearest;

    fn grid(&self) -> &Grid {
        LabelMap::grid(self)
    }

    /// Nearest neighbour only; `fill` is truncated to a label.
    fn resample(&self, a: &Affine, interp: Interp, fill: f32) -> Result<Self> {
        if interp != Interp::Nearest {
            return Err(Error::Contract("label maps can only be resampled with nearest neighbour".into()));
        }
        let labels = resample_nearest(self.grid(), self.labels(), a, &[fill as u8]);
        Ok(LabelMap::from_parts(*self.grid(), labels))
    }
}

impl Resample for ProbMap {
    const DEFAULT_INTERP: Interp = Interp::Trilinear;

    fn grid(&self) -> &Grid {
        ProbMap::grid(self)
    }

    /// Out-of-grid voxels become certain of class 0 (`fill` is ignored);
    /// trilinear output is renormalized per voxel.
    fn resample(&self, a: &Affine, interp: Interp, _fill: f32) -> Result<Self> {
        let classes = self.classes();
        let mut fills = vec![0.0f32; classes];
        fills[0] = 1.0;
        let probs = match interp {
            Interp::Nearest => resample_nearest(self.grid(), self.probs(), a, &fills),
            Interp::Trilinear => {
                let mut probs = resample_trilinear(self.grid(), self.probs(), a, &fills);
                renormalize(&mut probs, self.grid().len(), classes);
                probs
            }
        };
        Ok(ProbMap::from_parts(*self.grid(), classes, probs))
    }
}

fn renormalize(probs: &mut [f32], n: usize, classes: usize) {
    for i in 0..n {
        let sum: f64 = (0..classes).map(|k| probs[k * n + i] as f64).sum();
        if sum > 0.0 {
            for k in 0..classes {
                probs[k * n + i] = (probs[k * n + i] as f64 / sum) as f32;
            }
        }
    }
}

/// Nearest-neighbour resampling of `fills.len()` stacked planes.
fn resample_nearest<T: Copy + Send + Sync>(grid: &Grid, data: &[T], a: &Affine, fills: &[T]) -> Vec<T> {
    let n = grid.len();
    let slice = grid.slice_len();
    let [nx, ny, nz] = grid.dims;
    let mut out = vec![fills[0]; data.len()];
    exec::for_each_chunk_mut(&mut out, slice, |chunk_idx, chunk| {
        let plane = chunk_idx * slice / n;
        let z = (chunk_idx * slice % n) / slice;
        let src = &data[plane * n..(plane + 1) * n];
        let fill = fills[plane];
        for y in 0..ny {
            for x in 0..nx {
                let p = a.apply([x as f64, y as f64, z as f64]);
                let (ix, iy, iz) = (p[0].round(), p[1].round(), p[2].round());
                chunk[y * nx + x] = if ix >= 0.0 && iy >= 0.0 && iz >= 0.0 && ix < nx as f64 && iy < ny as f64 && iz < nz as f64 {
                    src[grid.index(ix as usize, iy as usize, iz as usize)]
                } else {
                    fill
                };
            }
        }
    });
    out
}

/// Lower corner index and weight of the upper neighbour along one axis, or
/// `None` outside `[0, n-1]` (with a small tolerance).
#[inline]
fn axis_cell(p: f64, n: usize) -> Option<(usize, f64)> {
    const EPS: f64 = 1e-6;
    let hi = (n - 1) as f64;
    if !(p >= -EPS && p <= hi + EPS) {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let p = p.clamp(0.0, hi);
    let i0 = (p.floor() as usize).min(n - 2);
    Some((i0, p - i0 as f64))
}

fn resample_trilinear(grid: &Grid, data: &[f32], a: &Affine, fills: &[f32]) -> Vec<f32> {
    let n = grid.len();
    let slice = grid.slice_len();
    let [nx, ny, nz] = grid.dims;
    let sx = if nx > 1 { 1 } else { 0 };
    let sy = if ny > 1 { nx } else { 0 };
    let sz = if nz > 1 { slice } else { 0 };
    let mut out = vec![0.0f32; data.len()];
    exec::for_each_chunk_mut(&mut out, slice, |chunk_idx, chunk| {
        let plane = chunk_idx * slice / n;
        let z = (chunk_idx * slice % n) / slice;
        let src = &data[plane * n..(plane + 1) * n];
        let fill = fills[plane];
        for y in 0..ny {
            for x in 0..nx {
                let p = a.apply([x as f64, y as f64, z as f64]);
                let cell = (axis_cell(p[0], nx), axis_cell(p[1], ny), axis_cell(p[2], nz));
                chunk[y * nx + x] = match cell {
                    (Some((x0, fx)), Some((y0, fy)), Some((z0, fz))) => {
                        let base = grid.index(x0, y0, z0);
                        let v = |off: usize| src[base + off] as f64;
                        let c00 = v(0) * (1.0 - fx) + v(sx) * fx;
                        let c10 = v(sy) * (1.0 - fx) + v(sy + sx) * fx;
                        let c01 = v(sz) * (1.0 - fx) + v(sz + sx) * fx;
                        let c11 = v(sz + sy) * (1.0 - fx) + v(sz + sy + sx) * fx;
                        let c0 = c00 * (1.0 - fy) + c10 * fy;
                        let c1 = c01 * (1.0 - fy) + c11 * fy;
                        (c0 * (1.0 - fz) + c1 * fz) as f32
                    }
                    _ => fill,
                };
            }
        }
    });
    out
}

/// Adds an i.i.d. N(0, sigma²) field. Each (channel, z-slice) block draws
/// from its own stream of `seed`, so the field does not depend on threading.
pub fn add_noise(v: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidPrior(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidPrior(e.to_string()))?;
    let mut data = v.data().to_vec();
    exec::for_each_chunk_mut(&mut data, v.grid().slice_len(), |block, chunk| {
        let mut rng = rng::stream(seed, block as u64);
        for x in chunk.iter_mut() {
            *x = (*x as f64 + normal.sample(&mut rng)) as f32;
        }
    });
    Ok(Volume::from_parts(*v.grid(), v.channels(), data))
}

/// Spatial transform (trilinear, zero fill) followed by additive noise.
pub fn apply_augmentation(v: &Volume, p: &AugmentationParams, prior: &AugmentationPrior) -> Result<Volume> {
    let a = grid_affine(p, v.grid());
    let moved = if a == Affine::IDENTITY { v.clone() } else { v.resample(&a, Interp::Trilinear, 0.0)? };
    add_noise(&moved, prior.noise_sigma, p.noise_seed)
}

/// Maps a prediction made on an augmented image back onto the original
/// grid. Labels use nearest neighbour; probabilities trilinear plus
/// renormalization. Noise is not invertible and is left alone.
pub fn inverse_spatial<T: Resample + Clone>(pred: &T, p: &AugmentationParams) -> Result<T> {
    let inv = grid_affine(p, pred.grid()).invert()?;
    if inv == Affine::IDENTITY {
        return Ok(pred.clone());
    }
    pred.resample(&inv, T::DEFAULT_INTERP, 0.0)
}

mod de {
    //! Lenient readers: a scalar or a single range applies to all three axes.
    use serde::{Deserialize, Deserializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum PerAxis {
        One(f64),
        Three([f64; 3]),
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum PerAxisRange {
        One([f64; 2]),
        Three([[f64; 2]; 3]),
    }

    pub fn per_axis<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        Ok(match PerAxis::deserialize(d)? {
            PerAxis::One(v) => [v; 3],
            PerAxis::Three(v) => v,
        })
    }

    pub fn per_axis_range<'de, D: Deserializer<'de>>(d: D) -> Result<[[f64; 2]; 3], D::Error> {
        Ok(match PerAxisRange::deserialize(d)? {
            PerAxisRange::One(v) => [v; 3],
            PerAxisRange::Three(v) => v,
        })
    }
}
