//! Uniform grids over axis-aligned cubes, dyadic cube trees, and the two
//! quadrature primitives everything else is built on: spatial sums over grid
//! nodes and the scale integral `∫ F(v) dv/v`.
//!
//! Grid nodes sit at cell centres. With a power-of-two resolution every
//! dyadic sub-cube of the grid box is a union of whole cells, so cube
//! averages are exact finite sums.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when comparing cube extents.
const EXTENT_TOL: f64 = 1e-12;

/// Axis-aligned cube in `Rⁿ`, stored as centre and half side length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    center: Vec<f64>,
    half_width: f64,
}

impl Cube {
    pub fn new(center: Vec<f64>, half_width: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::domain("cube dimension must be at least 1"));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::domain(format!("cube half width must be positive, got {half_width}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("cube center must be finite"));
        }
        Ok(Self { center, half_width })
    }

    /// The cube `[-h, h]ⁿ`.
    pub fn centered(n: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![0.0; n], half_width)
    }

    /// Cube from its lower corner and side length.
    pub fn from_corner(lo: &[f64], side: f64) -> Result<Self> {
        let center = lo.iter().map(|l| l + 0.5 * side).collect();
        Self::new(center, 0.5 * side)
    }

    pub fn n(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn side(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.n() as i32)
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - self.half_width
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + self.half_width
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        self.side() * (self.n() as f64).sqrt()
    }

    fn slack(&self) -> f64 {
        EXTENT_TOL * (self.half_width + self.center.iter().fold(0.0_f64, |a, c| a.max(c.abs())))
    }

    /// Closed containment of a point.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        let tol = self.slack();
        x.len() == self.n()
            && x.iter()
                .zip(&self.center)
                .all(|(xi, ci)| (xi - ci).abs() <= self.half_width + tol)
    }

    pub fn contains_cube(&self, other: &Cube) -> bool {
        let tol = self.slack().max(other.slack());
        other.n() == self.n()
            && (0..self.n()).all(|k| other.lo(k) >= self.lo(k) - tol && other.hi(k) <= self.hi(k) + tol)
    }

    /// True when the interiors intersect.
    pub fn overlaps(&self, other: &Cube) -> bool {
        let tol = self.slack().max(other.slack());
        (0..self.n()).all(|k| other.lo(k) < self.hi(k) - tol && self.lo(k) < other.hi(k) - tol)
    }

    /// Same centre, side multiplied by `factor`.
    pub fn dilate(&self, factor: f64) -> Cube {
        Cube { center: self.center.clone(), half_width: self.half_width * factor }
    }

    /// The 2ⁿ congruent children, in row-major order (axis 0 slowest).
    pub fn children(&self) -> Vec<Cube> {
        let n = self.n();
        let q = 0.5 * self.half_width;
        (0..1usize << n)
            .map(|mask| {
                let center = (0..n)
                    .map(|k| {
                        let bit = (mask >> (n - 1 - k)) & 1;
                        self.center[k] + if bit == 1 { q } else { -q }
                    })
                    .collect();
                Cube { center, half_width: q }
            })
            .collect()
    }
}

/// Scalar samples on the uniform cell-centred grid of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    cube: Cube,
    resolution: usize,
    samples: Vec<f64>,
}

impl Field {
    pub fn new(cube: Cube, resolution: usize, samples: Vec<f64>) -> Result<Self> {
        if resolution == 0 || !resolution.is_power_of_two() {
            return Err(Error::domain(format!("resolution must be a power of two, got {resolution}")));
        }
        let expected = resolution
            .checked_pow(cube.n() as u32)
            .ok_or_else(|| Error::domain("grid too large"))?;
        if samples.len() != expected {
            return Err(Error::domain(format!(
                "expected {expected} samples for resolution {resolution} in dimension {}, got {}",
                cube.n(),
                samples.len()
            )));
        }
        Ok(Self { cube, resolution, samples })
    }

    pub fn zeros(cube: Cube, resolution: usize) -> Result<Self> {
        let len = resolution.checked_pow(cube.n() as u32).unwrap_or(usize::MAX);
        if len == usize::MAX {
            return Err(Error::domain("grid too large"));
        }
        Self::new(cube, resolution, vec![0.0; len])
    }

    /// Samples `f` at every node.
    pub fn from_fn(cube: Cube, resolution: usize, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut field = Self::zeros(cube, resolution)?;
        let mut p = vec![0.0; field.n()];
        for i in 0..field.len() {
            field.node_point(i, &mut p);
            field.samples[i] = f(&p);
        }
        Ok(field)
    }

    /// Same grid, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(self.cube.clone(), self.resolution, samples)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            cube: self.cube.clone(),
            resolution: self.resolution,
            samples: self.samples.iter().map(|&s| f(s)).collect(),
        }
    }

    pub fn cube(&self) -> &Cube {
        &self.cube
    }

    pub fn n(&self) -> usize {
        self.cube.n()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Grid spacing along every axis.
    pub fn spacing(&self) -> f64 {
        self.cube.side() / self.resolution as f64
    }

    /// Quadrature weight of one node, `spacing^n`.
    pub fn node_weight(&self) -> f64 {
        self.spacing().powi(self.n() as i32)
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        self.resolution == other.resolution && self.cube == other.cube
    }

    /// Row-major multi-index of a flat node index (axis 0 slowest).
    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let n = self.n();
        let mut out = vec![0; n];
        for k in (0..n).rev() {
            out[k] = idx % self.resolution;
            idx /= self.resolution;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.resolution + i)
    }

    /// Writes the coordinates of node `idx` into `out`.
    pub fn node_point(&self, mut idx: usize, out: &mut [f64]) {
        let h = self.spacing();
        for k in (0..self.n()).rev() {
            let i = idx % self.resolution;
            idx /= self.resolution;
            out[k] = self.cube.lo(k) + (i as f64 + 0.5) * h;
        }
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n()];
        self.node_point(idx, &mut p);
        p
    }

    /// Coordinates of every node, flattened `n` per node.
    pub fn points(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * self.len()];
        for (i, chunk) in out.chunks_mut(n).enumerate() {
            self.node_point(i, chunk);
        }
        out
    }

    /// Coordinate of grid line `i` (cell boundary) along `axis`.
    pub fn grid_line(&self, axis: usize, i: usize) -> f64 {
        self.cube.lo(axis) + i as f64 * self.spacing()
    }

    /// Index range `[a, b)` of cells along `axis` whose centres lie in `[lo, hi]`.
    pub(crate) fn cell_range(&self, axis: usize, lo: f64, hi: f64) -> (usize, usize) {
        let h = self.spacing();
        let base = self.cube.lo(axis);
        let first = ((lo - base) / h - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - base) / h - 0.5).floor();
        if last < 0.0 {
            return (0, 0);
        }
        let end = (last as usize + 1).min(self.resolution);
        (first.min(end), end)
    }

    /// Maximum absolute sample.
    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |a, s| a.max(s.abs()))
    }

    /// `(Σ |f|^p · node weight)^{1/p}`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let terms: Vec<f64> = self.samples.iter().map(|s| s.abs().powf(p)).collect();
        (pairwise_sum(&terms) * self.node_weight()).powf(1.0 / p)
    }

    pub fn l1_norm(&self) -> f64 {
        self.lp_norm(1.0)
    }
}

/// Sum over the nodes of `f` whose centres lie inside `region`, times the
/// node weight.
pub fn integrate_field(f: &Field, region: &Cube) -> Result<f64> {
    if region.n() != f.n() {
        return Err(Error::domain("region dimension differs from field dimension"));
    }
    if !f.cube().contains_cube(region) {
        return Err(Error::domain("integration region is not contained in the field box"));
    }
    let ranges: Vec<(usize, usize)> = (0..f.n()).map(|k| f.cell_range(k, region.lo(k), region.hi(k))).collect();
    let mut terms = Vec::new();
    for_each_in_ranges(&ranges, |multi| terms.push(f.samples[f.flat_index(multi)]));
    Ok(pairwise_sum(&terms) * f.node_weight())
}

/// Visits every multi-index in the product of `[a_k, b_k)` ranges, row-major.
pub(crate) fn for_each_in_ranges(ranges: &[(usize, usize)], mut visit: impl FnMut(&[usize])) {
    if ranges.iter().any(|(a, b)| a >= b) {
        return;
    }
    let n = ranges.len();
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    loop {
        visit(&idx);
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < ranges[k].1 {
                break;
            }
            idx[k] = ranges[k].0;
        }
    }
}

/// Pairwise (tree) summation; deterministic and exact for power-of-two
/// counts of equal values.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len().next_power_of_two() / 2;
    let mid = if mid >= xs.len() { xs.len() / 2 } else { mid };
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Trapezoid nodes for `∫_{v_min}^{v_max} F(v) dv/v` in the variable `u = ln v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LogGrid {
    pub fn new(v_min: f64, v_max: f64, points_per_decade: usize) -> Result<Self> {
        if !(v_min > 0.0 && v_max > v_min && v_max.is_finite()) {
            return Err(Error::domain(format!("invalid scale range [{v_min}, {v_max}]")));
        }
        if points_per_decade < 4 {
            return Err(Error::domain("points_per_decade must be at least 4"));
        }
        let decades = (v_max / v_min).log10();
        let mut intervals = (decades * points_per_decade as f64).ceil().max(2.0) as usize;
        // even so the stride-2 error estimate lands on the end points
        intervals += intervals % 2;
        let (a, b) = (v_min.ln(), v_max.ln());
        let du = (b - a) / intervals as f64;
        let nodes: Vec<f64> = (0..=intervals)
            .map(|i| if i == intervals { v_max } else { (a + i as f64 * du).exp() })
            .collect();
        let weights = (0..=intervals)
            .map(|i| if i == 0 || i == intervals { 0.5 * du } else { du })
            .collect();
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trapezoid sum of already evaluated values.
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        let terms: Vec<f64> = values.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        pairwise_sum(&terms)
    }

    /// The same integral on every other node (spacing doubled).
    pub fn integrate_values_coarse(&self, values: &[f64]) -> f64 {
        let last = self.nodes.len() - 1;
        let terms: Vec<f64> = (0..=last)
            .step_by(2)
            .map(|i| {
                let w = if i == 0 || i == last { self.weights[i] * 2.0 * 0.5 } else { self.weights[i] * 2.0 };
                values[i] * w
            })
            .collect();
        pairwise_sum(&terms)
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> Result<f64> {
        let mut values = Vec::with_capacity(self.nodes.len());
        for &v in &self.nodes {
            let y = f(v);
            if !y.is_finite() {
                return Err(Error::NonFinite { v });
            }
            values.push(y);
        }
        Ok(self.integrate_values(&values))
    }
}

/// Trapezoid approximation of `∫_{v_min}^{v_max} F(v) dv/v` under `v = e^u`.
pub fn log_scale_integral(
    f: impl Fn(f64) -> f64,
    v_min: f64,
    v_max: f64,
    points_per_decade: usize,
) -> Result<f64> {
    LogGrid::new(v_min, v_max, points_per_decade)?.integrate(f)
}

/// Dyadic subdivision of a root cube down to `max_depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicTree {
    root: Cube,
    max_depth: usize,
}

impl DyadicTree {
    pub fn new(root: Cube, max_depth: usize) -> Self {
        Self { root, max_depth }
    }

    /// Tree whose leaves are the cells of `field`'s grid.
    pub fn over_field(field: &Field) -> Self {
        Self::new(field.cube().clone(), field.resolution().trailing_zeros() as usize)
    }

    pub fn root(&self) -> &Cube {
        &self.root
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn enumerate(&self, depth: usize) -> Result<Vec<Cube>> {
        enumerate_dyadic_cubes(self, depth)
    }
}

/// The `2^(n·depth)` cubes of one generation, row-major.
pub fn enumerate_dyadic_cubes(tree: &DyadicTree, depth: usize) -> Result<Vec<Cube>> {
    if depth > tree.max_depth {
        return Err(Error::domain(format!("depth {depth} exceeds max depth {}", tree.max_depth)));
    }
    let n = tree.root.n();
    let per_axis = 1usize << depth;
    let side = tree.root.side() / per_axis as f64;
    let ranges = vec![(0, per_axis); n];
    let mut out = Vec::with_capacity(per_axis.pow(n as u32));
    let mut lo = vec![0.0; n];
    for_each_in_ranges(&ranges, |multi| {
        for k in 0..n {
            lo[k] = tree.root.lo(k) + multi[k] as f64 * side;
        }
        out.push(Cube::from_corner(&lo, side).expect("positive side"));
    });
    Ok(out)
}

/// Writes `x1,...,xn,value` rows, row-major, 17 significant digits.
pub fn write_field_csv<W: Write>(field: &Field, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = field.n();
    let mut header: Vec<String> = (1..=n).map(|k| format!("x{k}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    let mut p = vec![0.0; n];
    let mut row = Vec::with_capacity(n + 1);
    for i in 0..field.len() {
        field.node_point(i, &mut p);
        row.clear();
        row.extend(p.iter().map(|c| format!("{c:.16e}")));
        row.push(format!("{:.16e}", field.samples[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`]. Values are bit-exact; the
/// box is reconstructed from the node coordinates.
pub fn read_field_csv<R: Read>(reader: R) -> Result<Field> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let n = headers.len().checked_sub(1).filter(|&n| n >= 1).ok_or_else(|| Error::domain("CSV needs x1..xn,value columns"))?;
    for (k, h) in headers.iter().take(n).enumerate() {
        if h != format!("x{}", k + 1) {
            return Err(Error::domain(format!("unexpected CSV header `{h}`")));
        }
    }
    if &headers[n] != "value" {
        return Err(Error::domain("last CSV column must be `value`"));
    }
    let mut coords: Vec<Vec<f64>> = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let parsed = parsed.map_err(|e| Error::domain(format!("bad number in CSV: {e}")))?;
        if parsed.len() != n + 1 {
            return Err(Error::domain("ragged CSV row"));
        }
        values.push(parsed[n]);
        coords.push(parsed[..n].to_vec());
    }
    let rows = values.len();
    let res = (rows as f64).powf(1.0 / n as f64).round() as usize;
    if res < 2 || res.pow(n as u32) != rows {
        return Err(Error::domain(format!("{rows} rows do not form a grid of dimension {n} with resolution >= 2")));
    }
    let first = &coords[0];
    let last = &coords[rows - 1];
    let h = (last[0] - first[0]) / (res - 1) as f64;
    let center: Vec<f64> = (0..n).map(|k| 0.5 * (first[k] + last[k])).collect();
    let cube = Cube::new(center, 0.5 * h * res as f64)?;
    Field::new(cube, res, values)
}
