//! Overlap and surface-distance metrics per evaluation region, and cohort
//! summaries (mean, population std, median, quartiles).
//!
//! Dice is reported in percent. Hausdorff distances are in millimetres,
//! measured between the centers of the surface voxels of the two masks (a
//! foreground voxel is on the surface when one of its 6-neighbours is
//! background or lies outside the grid). HD95 is the larger of the two
//! directed 95th percentiles; HD is the larger directed maximum.
//! Percentiles interpolate linearly between order statistics.
//!
//! Empty masks: both empty gives Dice 100 and an undefined Hausdorff
//! distance; exactly one empty gives Dice 0 and undefined Hausdorff.
//! Undefined values are left out of cohort statistics and counted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{Grid, LabelMap};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub labels: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("region label set must not be empty".into()));
        }
        Ok(Self { name: name.into(), labels })
    }

    /// Enhancing tumor.
    pub fn et() -> Self {
        Self { name: "ET".into(), labels: vec![4] }
    }

    /// Whole tumor.
    pub fn wt() -> Self {
        Self { name: "WT".into(), labels: vec![1, 2, 4] }
    }

    /// Tumor core.
    pub fn tc() -> Self {
        Self { name: "TC".into(), labels: vec![1, 4] }
    }

    /// ET, WT, TC.
    pub fn brats() -> Vec<Self> {
        vec![Self::et(), Self::wt(), Self::tc()]
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }
}

/// Binary voxel mask on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::InvalidVolume("mask length != voxels".into()));
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground voxels with a background (or out-of-grid) 6-neighbour.
    pub fn surface(&self) -> Vec<usize> {
        let g = &self.grid;
        (0..g.len())
            .filter(|&i| self.bits[i] && (g.neighbors6(i).count() < 6 || g.neighbors6(i).any(|j| !self.bits[j])))
            .collect()
    }
}

pub fn region_binarize(l: &LabelMap, r: &RegionSpec) -> Mask {
    let mut member = [false; 256];
    r.labels.iter().for_each(|&x| member[x as usize] = true);
    Mask { grid: *l.grid(), bits: l.labels().iter().map(|&x| member[x as usize]).collect() }
}

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    a.grid.check_same(&b.grid, "masks")?;
    if a.grid.spacing != b.grid.spacing {
        return Err(Error::DimensionMismatch(format!("spacing {:?} vs {:?}", a.grid.spacing, b.grid.spacing)));
    }
    Ok(())
}

/// Dice overlap in percent.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_pair(a, b)?;
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (na + nb) as f64)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted values.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Symmetric surface distance at `percentile` (95 for HD95, 100 for HD).
/// `None` when either mask is empty.
pub fn hausdorff(a: &Mask, b: &Mask, percentile: f64) -> Result<Option<f64>> {
    check_pair(a, b)?;
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Config(format!("percentile {percentile} outside [0, 100]")));
    }
    let (sa, sb) = (a.surface(), b.surface());
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let directed = |from: &[usize], to: &[usize]| -> f64 {
        let field = squared_distance_field(&a.grid, to);
        let mut d: Vec<f64> = from.iter().map(|&i| field[i].sqrt()).collect();
        d.sort_by(f64::total_cmp);
        percentile_sorted(&d, percentile)
    };
    Ok(Some(directed(&sa, &sb).max(directed(&sb, &sa))))
}

/// Both Hausdorff variants at once, sharing the distance fields.
pub fn hausdorff_pair(a: &Mask, b: &Mask) -> Result<(Option<f64>, Option<f64>)> {
    check_pair(a, b)?;
    let (sa, sb) = (a.surface(), b.surface());
    if sa.is_empty() || sb.is_empty() {
        return Ok((None, None));
    }
    let directed = |from: &[usize], to: &[usize]| -> Vec<f64> {
        let field = squared_distance_field(&a.grid, to);
        let mut d: Vec<f64> = from.iter().map(|&i| field[i].sqrt()).collect();
        d.sort_by(f64::total_cmp);
        d
    };
    let (ab, ba) = (directed(&sa, &sb), directed(&sb, &sa));
    let at = |q| percentile_sorted(&ab, q).max(percentile_sorted(&ba, q));
    Ok((Some(at(95.0)), Some(at(100.0))))
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel; separable lower-envelope transform, one axis at a time.
pub fn squared_distance_field(grid: &Grid, seeds: &[usize]) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let [sx, sy, sz] = grid.spacing;
    let mut f = vec![f64::INFINITY; grid.len()];
    seeds.iter().for_each(|&i| f[i] = 0.0);

    // x lines are contiguous
    exec::for_each_chunk_mut(&mut f, nx, |_, line| {
        let input = line.to_vec();
        envelope_1d(&input, sx, line);
    });
    // y lines within each z slab
    exec::for_each_chunk_mut(&mut f, nx * ny, |_, slab| {
        let mut line = vec![0.0; ny];
        let mut out = vec![0.0; ny];
        for x in 0..nx {
            for y in 0..ny {
                line[y] = slab[y * nx + x];
            }
            envelope_1d(&line, sy, &mut out);
            for y in 0..ny {
                slab[y * nx + x] = out[y];
            }
        }
    });
    // z lines: gather per (x, y) column, scatter back in order
    let slice = nx * ny;
    let columns = exec::map_indices(slice, |xy| {
        let line: Vec<f64> = (0..nz).map(|z| f[z * slice + xy]).collect();
        let mut out = vec![0.0; nz];
        envelope_1d(&line, sz, &mut out);
        out
    });
    for (xy, col) in columns.into_iter().enumerate() {
        for (z, v) in col.into_iter().enumerate() {
            f[z * slice + xy] = v;
        }
    }
    f
}

/// `out[q] = min_p (s·(q − p))² + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let pos = |p: usize| s * p as f64;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let mut boundary = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            let (xq, xp) = (pos(q), pos(p));
            let b = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if b <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                boundary = b;
                break;
            }
        }
        v.push(q);
        z.push(if v.len() == 1 { f64::NEG_INFINITY } else { boundary });
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = pos(q);
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let d = xq - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    /// Percent.
    pub dice: f64,
    /// mm; `None` when undefined.
    pub hd95: Option<f64>,
    pub hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub regions: Vec<RegionMetrics>,
}

pub fn evaluate_case(case: &str, pred: &LabelMap, gt: &LabelMap, regions: &[RegionSpec]) -> Result<CaseMetrics> {
    pred.grid().check_same(gt.grid(), "prediction vs ground truth")?;
    let regions = regions
        .iter()
        .map(|r| {
            let (a, b) = (region_binarize(pred, r), region_binarize(gt, r));
            let (hd95, hd) = hausdorff_pair(&a, &b)?;
            Ok(RegionMetrics { region: r.name.clone(), dice: dice(&a, &b)?, hd95, hd })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseMetrics { case: case.to_string(), regions })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Stats {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Stats {
            mean,
            std,
            median: percentile_sorted(&v, 50.0),
            q25: percentile_sorted(&v, 25.0),
            q75: percentile_sorted(&v, 75.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub region: String,
    pub metric: String,
    pub n: usize,
    pub undefined: usize,
    pub stats: Option<Stats>,
}

pub const METRIC_NAMES: [&str; 3] = ["dice", "hd95", "hd"];

impl RegionMetrics {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "dice" => Some(self.dice),
            "hd95" => self.hd95,
            "hd" => self.hd,
            _ => None,
        }
    }
}

/// Cohort statistics per region and metric, in the region order of the
/// first case and metric order dice, hd95, hd.
pub fn summarize(cases: &[CaseMetrics]) -> Result<Vec<MetricSummary>> {
    let first = cases.first().ok_or_else(|| Error::Empty("no cases to summarize".into()))?;
    let mut out = Vec::new();
    for region in first.regions.iter().map(|r| &r.region) {
        for metric in METRIC_NAMES {
            let mut values = Vec::with_capacity(cases.len());
            let mut undefined = 0;
            for case in cases {
                let rm = case.regions.iter().find(|r| &r.region == region).ok_or_else(|| {
                    Error::Config(format!("case {} has no region {region}", case.case))
                })?;
                match rm.metric(metric) {
                    Some(v) => values.push(v),
                    None => undefined += 1,
                }
            }
            out.push(MetricSummary {
                region: region.clone(),
                metric: metric.into(),
                n: values.len(),
                undefined,
                stats: Stats::of(&values),
            });
        }
    }
    Ok(out)
}

/// Per-case metrics (sorted by case id) and their cohort summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub summary: Vec<MetricSummary>,
}

impl MetricReport {
    pub fn new(mut cases: Vec<CaseMetrics>) -> Result<Self> {
        cases.sort_by(|a, b| a.case.cmp(&b.case));
        let summary = summarize(&cases)?;
        Ok(Self { cases, summary })
    }

    /// `case,region,metric,value`; undefined values are written as `NA`.
    pub fn write_cases_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case", "region", "metric", "value"])?;
        for case in &self.cases {
            for rm in &case.regions {
                for metric in METRIC_NAMES {
                    let value = rm.metric(metric).map_or_else(|| "NA".to_string(), |v| format!("{v}"));
                    w.write_record([case.case.as_str(), &rm.region, metric, &value])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `region,metric,statistic,value` with statistics n, undefined, mean,
    /// std, median, q25, q75.
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["region", "metric", "statistic", "value"])?;
        for s in &self.summary {
            let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
            let st = s.stats;
            let rows = [
                ("n", s.n.to_string()),
                ("undefined", s.undefined.to_string()),
                ("mean", fmt(st.map(|x| x.mean))),
                ("std", fmt(st.map(|x| x.std))),
                ("median", fmt(st.map(|x| x.median))),
                ("q25", fmt(st.map(|x| x.q25))),
                ("q75", fmt(st.map(|x| x.q75))),
            ];
            for (name, value) in &rows {
                w.write_record([s.region.as_str(), &s.metric, name, value])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.into(), source: e })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
