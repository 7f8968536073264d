//! Voxel-wise aleatoric uncertainty from the spread of TTA samples.
//!
//! At each voxel the N back-mapped hard labels define an empirical label
//! distribution; its entropy `-Σ p̂ ln p̂` (nats) is the uncertainty. Labels
//! are counted directly, never taken from averaged probabilities.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{LabelMap, UncertaintyMap};

/// Entropy of a label multiset given as counts. Zero counts contribute 0.
pub fn entropy_of_counts(counts: &[u32]) -> f64 {
    let total: u32 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    0.0 - counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn entropy_map(maps: &[LabelMap]) -> Result<UncertaintyMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("entropy of zero samples".into()))?;
    let grid = *first.grid();
    for m in maps {
        grid.check_same(m.grid(), "entropy map")?;
    }
    let mut values = vec![0.0f64; grid.len()];
    let slice = grid.slice_len();
    exec::for_each_chunk_mut(&mut values, slice, |z, chunk| {
        let mut counts = [0u32; 256];
        let mut present: Vec<u8> = Vec::with_capacity(maps.len());
        for (j, out) in chunk.iter_mut().enumerate() {
            let i = z * slice + j;
            present.clear();
            for m in maps {
                let l = m.labels()[i];
                if counts[l as usize] == 0 {
                    present.push(l);
                }
                counts[l as usize] += 1;
            }
            // canonical summation order: ascending label
            present.sort_unstable();
            let tally: Vec<u32> = present.iter().map(|&l| counts[l as usize]).collect();
            *out = entropy_of_counts(&tally);
            present.iter().for_each(|&l| counts[l as usize] = 0);
        }
    });
    UncertaintyMap::new(grid, values)
}

/// Chebyshev distance (in voxels, starting at 1) from every voxel to the
/// nearest voxel that has a 6-neighbour with a different label. Voxels of a
/// map without any label transition get `u32::MAX`.
pub fn boundary_distance(labels: &LabelMap) -> Vec<u32> {
    let grid = *labels.grid();
    let l = labels.labels();
    let mut dist = vec![u32::MAX; grid.len()];
    let mut queue = VecDeque::new();
    for i in 0..grid.len() {
        if grid.neighbors6(i).any(|j| l[j] != l[i]) {
            dist[i] = 1;
            queue.push_back(i);
        }
    }
    let [nx, ny, nz] = grid.dims.map(|d| d as isize);
    while let Some(i) = queue.pop_front() {
        let [x, y, z] = grid.coords(i).map(|c| c as isize);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (a, b, c) = (x + dx, y + dy, z + dz);
                    if a < 0 || b < 0 || c < 0 || a >= nx || b >= ny || c >= nz {
                        continue;
                    }
                    let j = grid.index(a as usize, b as usize, c as usize);
                    if dist[j] == u32::MAX {
                        dist[j] = dist[i] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    dist
}

/// Voxels within `width` voxels of a label transition: `width` voxels on
/// each side of every interface between two labels.
pub fn boundary_shell(labels: &LabelMap, width: u32) -> Vec<bool> {
    boundary_distance(labels).into_iter().map(|d| d <= width).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub boundary_mean: f64,
    pub interior_mean: f64,
    pub boundary_voxels: usize,
    pub interior_voxels: usize,
}

/// Mean entropy on the boundary shell of `labels` versus everywhere else.
pub fn boundary_uncertainty_summary(u: &UncertaintyMap, labels: &LabelMap, shell_width: u32) -> Result<BoundarySummary> {
    u.grid().check_same(labels.grid(), "boundary summary")?;
    let shell = boundary_shell(labels, shell_width.max(1));
    let (mut bs, mut bn, mut is, mut inn) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &on) in u.values().iter().zip(&shell) {
        if on {
            bs += v;
            bn += 1;
        } else {
            is += v;
            inn += 1;
        }
    }
    if bn == 0 {
        return Err(Error::NoBoundary);
    }
    if inn == 0 {
        return Err(Error::Empty("every voxel lies on the boundary shell".into()));
    }
    Ok(BoundarySummary {
        boundary_mean: bs / bn as f64,
        interior_mean: is / inn as f64,
        boundary_voxels: bn,
        interior_voxels: inn,
    })
}
