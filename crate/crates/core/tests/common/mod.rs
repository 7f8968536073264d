//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use ttaseg::volume::{Grid, LabelMap, Volume};

/// H = ln N − (1/N) Σ c ln c, accumulated smallest term first.
pub fn entropy_oracle(votes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &v in votes {
        counts[v as usize] += 1;
    }
    let n = votes.len() as f64;
    let mut terms: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 * (c as f64).ln()).collect();
    terms.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for t in terms {
        let y = t - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    (n.ln() - sum / n).max(0.0)
}

/// Most frequent value, smallest on ties, by scanning all 256 labels.
pub fn vote_oracle(votes: &[u8]) -> u8 {
    let mut best = 0u8;
    let mut best_count = 0usize;
    for label in 0..=255u8 {
        let c = votes.iter().filter(|&&v| v == label).count();
        if c > best_count {
            best = label;
            best_count = c;
        }
    }
    best
}

/// Voxels of `grid` per voxel index, as physical coordinates.
fn physical(grid: &Grid, i: usize) -> [f64; 3] {
    let [nx, ny, _] = grid.dims;
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    [x as f64 * grid.spacing[0], y as f64 * grid.spacing[1], z as f64 * grid.spacing[2]]
}

/// Foreground voxels with a 6-neighbour outside the mask or the grid.
pub fn surface_oracle(grid: &Grid, bits: &[bool]) -> Vec<usize> {
    let [nx, ny, nz] = grid.dims;
    let at = |x: i64, y: i64, z: i64| {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            false
        } else {
            bits[(z as usize * ny + y as usize) * nx + x as usize]
        }
    };
    let mut out = Vec::new();
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                if !at(x, y, z) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|(dx, dy, dz)| !at(x + dx, y + dy, z + dz)) {
                    out.push((z as usize * ny + y as usize) * nx + x as usize);
                }
            }
        }
    }
    out
}

fn percentile_oracle(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// All-pairs surface distances: (hd95, hd), `None` if either surface is empty.
pub fn hausdorff_oracle(grid: &Grid, a: &[bool], b: &[bool]) -> Option<(f64, f64)> {
    let sa = surface_oracle(grid, a);
    let sb = surface_oracle(grid, b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let directed = |from: &[usize], to: &[usize]| -> Vec<f64> {
        from.iter()
            .map(|&i| {
                let p = physical(grid, i);
                to.iter()
                    .map(|&j| {
                        let q = physical(grid, j);
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let ab = directed(&sa, &sb);
    let ba = directed(&sb, &sa);
    let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
    let hd95 = percentile_oracle(ab, 95.0).max(percentile_oracle(ba, 95.0));
    Some((hd95, hd))
}

pub fn random_labels<R: Rng>(rng: &mut R, grid: Grid, alphabet: &[u8]) -> LabelMap {
    let labels = (0..grid.len()).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    LabelMap::new(grid, labels).unwrap()
}

pub fn random_volume<R: Rng>(rng: &mut R, dims: [usize; 3], channels: usize) -> Volume {
    let grid = Grid::new(dims, [1.0; 3]).unwrap();
    let data = (0..grid.len() * channels).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    Volume::new(grid, channels, data).unwrap()
}

/// Label map with `inside` for voxels within `radius` (voxels) of the center.
pub fn sphere_labels(n: usize, radius: f64, inside: u8) -> LabelMap {
    let grid = Grid::cube(n);
    let c = (n as f64 - 1.0) / 2.0;
    let labels = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
            if d <= radius {
                inside
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(grid, labels).unwrap()
}
