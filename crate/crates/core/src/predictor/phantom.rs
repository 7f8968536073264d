//! Nested-sphere phantoms with known ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::add_noise;
use crate::rng;
use crate::volume::{Grid, LabelMap, Volume};

/// Concentric spheres about the grid center. Labels from the outside in:
/// 0 background, 2 outer shell, 1 middle shell, 4 inner sphere, so that the
/// union of {1, 2, 4} is the outer sphere, {1, 4} the middle one and {4} the
/// inner one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Outer, middle and inner radius in mm, strictly decreasing.
    pub radii_mm: [f64; 3],
    /// Per channel: mean intensity of background, outer, middle, inner.
    pub means: Vec<[f32; 4]>,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            spacing: [1.0; 3],
            radii_mm: [24.0, 16.0, 8.0],
            means: vec![[0.0, 2.0, 1.0, 3.0]],
            noise_sigma: 0.1,
        }
    }
}

/// Label of each region, in the order of [`PhantomSpec::means`].
pub const REGION_LABELS: [u8; 4] = [0, 2, 1, 4];

impl PhantomSpec {
    pub fn validate(&self) -> Result<Grid> {
        let grid = Grid::new(self.dims, self.spacing).map_err(|e| Error::InvalidPhantom(e.to_string()))?;
        let [outer, middle, inner] = self.radii_mm;
        if !(inner > 0.0 && middle > inner && outer > middle) {
            return Err(Error::InvalidPhantom(format!("radii {:?} must be positive and strictly decreasing", self.radii_mm)));
        }
        let half_extent = (0..3).map(|k| self.dims[k] as f64 * self.spacing[k] / 2.0).fold(f64::INFINITY, f64::min);
        if outer > half_extent {
            return Err(Error::InvalidPhantom(format!("outer radius {outer} mm exceeds half extent {half_extent} mm")));
        }
        if self.means.is_empty() || self.means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidPhantom("need finite region means for at least one channel".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidPhantom(format!("noise sigma {}", self.noise_sigma)));
        }
        Ok(grid)
    }

    /// Index into [`REGION_LABELS`] of a point at `r` mm from the center.
    fn region(&self, r: f64) -> usize {
        let [outer, middle, inner] = self.radii_mm;
        if r <= inner {
            3
        } else if r <= middle {
            2
        } else if r <= outer {
            1
        } else {
            0
        }
    }
}

/// Image (region means plus Gaussian noise) and its exact label map.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelMap)> {
    let grid = spec.validate()?;
    let c = grid.center();
    let n = grid.len();
    let regions: Vec<usize> = (0..n)
        .map(|i| {
            let p = grid.coords(i);
            let r2: f64 = (0..3).map(|k| ((p[k] as f64 - c[k]) * grid.spacing[k]).powi(2)).sum();
            spec.region(r2.sqrt())
        })
        .collect();
    let labels = LabelMap::new(grid, regions.iter().map(|&r| REGION_LABELS[r]).collect())?;
    let channels = spec.means.len();
    let mut data = Vec::with_capacity(channels * n);
    for means in &spec.means {
        data.extend(regions.iter().map(|&r| means[r]));
    }
    let clean = Volume::new(grid, channels, data)?;
    let image = add_noise(&clean, spec.noise_sigma, rng::derive_seed(seed, &[0x9a4e_7051]))?;
    Ok((image, labels))
}
