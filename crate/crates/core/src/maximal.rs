//! Hardy–Littlewood maximal function over grid-aligned cubes, its power and
//! sharp variants, and the two cube-family sums `M_{j,1/m}` and `𝒥_{j,ε}`.
//!
//! "Grid-aligned cube" means a cube whose faces lie on grid lines of the
//! field, with any side length from one spacing to the whole box. The
//! maximal functions are uncentred: every such cube containing the point counts.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{for_each_in_ranges, Cube, Field};
use crate::stats;

/// Summed-area table of a grid array, `(N+1)^n` entries.
struct Prefix {
    n: usize,
    res: usize,
    table: Vec<f64>,
}

impl Prefix {
    fn new(values: &[f64], n: usize, res: usize) -> Self {
        let side = res + 1;
        let mut table = vec![0.0; side.pow(n as u32)];
        // copy values shifted by one along every axis
        let ranges = vec![(0, res); n];
        for_each_in_ranges(&ranges, |multi| {
            let src = multi.iter().fold(0, |acc, &i| acc * res + i);
            let dst = multi.iter().fold(0, |acc, &i| acc * side + i + 1);
            table[dst] = values[src];
        });
        // cumulative sums along each axis
        for axis in 0..n {
            let stride = side.pow((n - 1 - axis) as u32);
            for idx in 0..table.len() {
                if (idx / stride) % side != 0 {
                    table[idx] += table[idx - stride];
                }
            }
        }
        Self { n, res, table }
    }

    /// Sum over cells `lo_k ≤ i_k < hi_k`.
    fn box_sum(&self, lo: &[usize], hi: &[usize]) -> f64 {
        let side = self.res + 1;
        let mut total = 0.0;
        for corner in 0..1usize << self.n {
            let mut idx = 0;
            let mut sign = 1.0;
            for k in 0..self.n {
                let take_lo = (corner >> k) & 1 == 1;
                idx = idx * side + if take_lo { lo[k] } else { hi[k] };
                if take_lo {
                    sign = -sign;
                }
            }
            total += sign * self.table[idx];
        }
        total
    }
}

/// Range of cube corners `a` (per axis) of side `s` cells whose closed cube contains coordinate `x`.
fn corner_range(f: &Field, axis: usize, x: f64, s: usize) -> Option<(usize, usize)> {
    let h = f.spacing();
    let t = (x - f.cube().lo(axis)) / h;
    let res = f.resolution();
    let eps = 1e-9;
    let lo = (t - s as f64 - eps).ceil().max(0.0) as usize;
    let hi = ((t + eps).floor().max(0.0) as usize).min(res - s);
    (lo <= hi).then_some((lo, hi + 1))
}

fn check_point(f: &Field, x: &[f64]) -> Result<()> {
    if x.len() != f.n() || !f.cube().contains_point(x) {
        return Err(Error::domain("point lies outside the grid box"));
    }
    Ok(())
}

/// Sup over grid-aligned cubes containing `x` of the average of `|f|^power`, raised to `1/power`.
pub fn hl_maximal(f: &Field, x: &[f64], power: f64) -> Result<f64> {
    if !(power > 0.0) {
        return Err(Error::domain("maximal power must be positive"));
    }
    check_point(f, x)?;
    let n = f.n();
    let g: Vec<f64> = f.samples().iter().map(|v| v.abs().powf(power)).collect();
    let prefix = Prefix::new(&g, n, f.resolution());
    let mut best: f64 = 0.0;
    for s in 1..=f.resolution() {
        let ranges: Option<Vec<(usize, usize)>> = (0..n).map(|k| corner_range(f, k, x[k], s)).collect();
        let Some(ranges) = ranges else { continue };
        let vol = (s as f64).powi(n as i32);
        let mut hi = vec![0; n];
        for_each_in_ranges(&ranges, |a| {
            let avg = if s == 1 {
                g[a.iter().fold(0, |acc, &i| acc * f.resolution() + i)]
            } else {
                for k in 0..n {
                    hi[k] = a[k] + s;
                }
                prefix.box_sum(a, &hi) / vol
            };
            best = best.max(avg);
        });
    }
    Ok(best.powf(1.0 / power))
}

/// Mean oscillation `avg_Q |g − avg_Q g|` over the cube with corner `a` and side `s` cells.
fn oscillation(g: &[f64], n: usize, res: usize, a: &[usize], s: usize) -> f64 {
    let ranges: Vec<(usize, usize)> = a.iter().map(|&lo| (lo, lo + s)).collect();
    let mut vals = Vec::with_capacity(s.pow(n as u32));
    for_each_in_ranges(&ranges, |multi| vals.push(g[multi.iter().fold(0, |acc, &i| acc * res + i)]));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).abs()).sum::<f64>() / vals.len() as f64
}

/// Sharp maximal function with the cube average as the reference constant.
pub fn sharp_maximal(f: &Field, x: &[f64], power: f64) -> Result<f64> {
    if !(power > 0.0 && power < 1.0) {
        return Err(Error::domain("sharp maximal power must lie in (0, 1)"));
    }
    check_point(f, x)?;
    let n = f.n();
    let res = f.resolution();
    let g: Vec<f64> = f.samples().iter().map(|v| v.abs().powf(power)).collect();
    let mut best: f64 = 0.0;
    for s in 1..=res {
        let ranges: Option<Vec<(usize, usize)>> = (0..n).map(|k| corner_range(f, k, x[k], s)).collect();
        let Some(ranges) = ranges else { continue };
        for_each_in_ranges(&ranges, |a| best = best.max(oscillation(&g, n, res, a, s)));
    }
    Ok(best.powf(1.0 / power))
}

/// For corner-indexed values of cubes with side `s`, the max over all cubes
/// containing each cell (separable sliding-window maximum).
fn spread_max(vals: Vec<f64>, n: usize, res: usize, s: usize) -> Vec<f64> {
    let len_in = res - s + 1;
    let mut shape = vec![len_in; n];
    let mut data = vals;
    for axis in 0..n {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut next = vec![0.0; outer * res * inner];
        let mut line = vec![0.0; len_in];
        for o in 0..outer {
            for i in 0..inner {
                for (a, slot) in line.iter_mut().enumerate() {
                    *slot = data[(o * len_in + a) * inner + i];
                }
                // out[c] = max line[a] for a in [c+1-s, c] ∩ [0, len_in)
                let mut dq: VecDeque<usize> = VecDeque::new();
                let mut pushed = 0;
                for c in 0..res {
                    while pushed <= c && pushed < len_in {
                        while dq.back().is_some_and(|&b| line[b] <= line[pushed]) {
                            dq.pop_back();
                        }
                        dq.push_back(pushed);
                        pushed += 1;
                    }
                    while dq.front().is_some_and(|&fr| fr + s <= c) {
                        dq.pop_front();
                    }
                    next[(o * res + c) * inner + i] = line[*dq.front().expect("window is nonempty")];
                }
            }
        }
        shape[axis] = res;
        data = next;
    }
    data
}

/// `M(|f|^power)^{1/power}` at every node.
pub fn hl_maximal_field(f: &Field, power: f64) -> Result<Field> {
    if !(power > 0.0) {
        return Err(Error::domain("maximal power must be positive"));
    }
    let n = f.n();
    let res = f.resolution();
    let g: Vec<f64> = f.samples().iter().map(|v| v.abs().powf(power)).collect();
    let prefix = Prefix::new(&g, n, res);
    let mut best = vec![0.0_f64; f.len()];
    let mut hi = vec![0; n];
    for s in 1..=res {
        let vol = (s as f64).powi(n as i32);
        let ranges = vec![(0, res - s + 1); n];
        let mut vals = Vec::with_capacity((res - s + 1).pow(n as u32));
        if s == 1 {
            // single cells: read the samples directly, avoiding table cancellation
            vals.extend_from_slice(&g);
        } else {
            for_each_in_ranges(&ranges, |a| {
                for k in 0..n {
                    hi[k] = a[k] + s;
                }
                vals.push(prefix.box_sum(a, &hi) / vol);
            });
        }
        for (b, v) in best.iter_mut().zip(spread_max(vals, n, res, s)) {
            *b = b.max(v);
        }
    }
    f.with_samples(best.into_iter().map(|b| b.max(0.0).powf(1.0 / power)).collect())
}

/// Sharp maximal function at every node.
pub fn sharp_maximal_field(f: &Field, power: f64) -> Result<Field> {
    if !(power > 0.0 && power < 1.0) {
        return Err(Error::domain("sharp maximal power must lie in (0, 1)"));
    }
    let n = f.n();
    let res = f.resolution();
    let g: Vec<f64> = f.samples().iter().map(|v| v.abs().powf(power)).collect();
    let mut best = vec![0.0_f64; f.len()];
    for s in 1..=res {
        let ranges = vec![(0, res - s + 1); n];
        let mut vals = Vec::with_capacity((res - s + 1).pow(n as u32));
        if n == 1 {
            for a in 0..=res - s {
                let w = &g[a..a + s];
                let mean = w.iter().sum::<f64>() / s as f64;
                vals.push(w.iter().map(|v| (v - mean).abs()).sum::<f64>() / s as f64);
            }
        } else {
            for_each_in_ranges(&ranges, |a| vals.push(oscillation(&g, n, res, a, s)));
        }
        for (b, v) in best.iter_mut().zip(spread_max(vals, n, res, s)) {
            *b = b.max(v);
        }
    }
    f.with_samples(best.into_iter().map(|b| b.powf(1.0 / power)).collect())
}

/// A finite family of cubes (centres and side lengths).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CubeFamilySummary {
    pub cubes: Vec<Cube>,
}

impl CubeFamilySummary {
    pub fn new(cubes: Vec<Cube>) -> Self {
        Self { cubes }
    }

    pub fn total_measure(&self) -> f64 {
        self.cubes.iter().map(Cube::volume).sum()
    }
}

/// `Σ_k [ℓ_k / ((4/5)|x − c_k|)]^{ε/m} |Q_k| / |x − c_k|^n`.
pub fn marcinkiewicz_sum(fam: &CubeFamilySummary, x: &[f64], m: usize, eps: f64) -> Result<f64> {
    if m == 0 || !(eps > 0.0) {
        return Err(Error::domain("need m >= 1 and epsilon > 0"));
    }
    let mut terms = Vec::with_capacity(fam.cubes.len());
    for (k, q) in fam.cubes.iter().enumerate() {
        let d = stats::dist(x, q.center());
        if d == 0.0 {
            return Err(Error::Singularity(k));
        }
        let n = q.n() as i32;
        terms.push((q.side() / (0.8 * d)).powf(eps / m as f64) * q.volume() / d.powi(n));
    }
    Ok(crate::grid::pairwise_sum(&terms))
}

/// `Σ_k ℓ_k^{n+ε} / (ℓ_k + |x − c_k|)^{n+ε}`.
pub fn j_function(fam: &CubeFamilySummary, x: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::domain("epsilon must be positive"));
    }
    let terms: Vec<f64> = fam
        .cubes
        .iter()
        .map(|q| {
            let p = q.n() as f64 + eps;
            let l = q.side();
            (l / (l + stats::dist(x, q.center()))).powf(p)
        })
        .collect();
    Ok(crate::grid::pairwise_sum(&terms))
}
