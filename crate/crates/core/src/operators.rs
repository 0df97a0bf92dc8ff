//! The square function `T`, its truncations, the maximal variants `T*`/`T**`,
//! and application of an approximation to the identity to a field.
//!
//! For a fixed evaluation point every quantity is assembled from the same
//! per-scale spatial integrals: the full integral, the part over
//! `U_δ(x) = {Σ|x − y_i|² < δ²}` and the part over
//! `V_δ(x) = {min_j |x − y_j| ≥ δ}` for every `δ` in the configured grid.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, Field, LogGrid};
use crate::kernels::{ApproxIdentity, Kernel, Structure};
use crate::stats;

/// Upper limit on enumerated `y⃗`-tuples per evaluation point.
const MAX_TUPLES: usize = 40_000_000;

/// Strictly increasing list of truncation radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaGrid(Vec<f64>);

impl DeltaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("delta grid must be nonempty"));
        }
        if values.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::domain("delta values must be positive and finite"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("delta grid must be strictly increasing"));
        }
        Ok(Self(values))
    }

    pub fn single(delta: f64) -> Result<Self> {
        Self::new(vec![delta])
    }

    /// `start·ratio^k`, `k = 0..count`.
    pub fn geometric(start: f64, ratio: f64, count: usize) -> Result<Self> {
        if !(ratio > 1.0) {
            return Err(Error::domain("delta grid ratio must exceed 1"));
        }
        Self::new((0..count).map(|k| start * ratio.powi(k as i32)).collect())
    }

    /// `count` geometric points from `lo` to `hi`.
    pub fn spanning(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(hi > lo) || count < 2 {
            return Err(Error::domain("delta span needs lo < hi and at least two points"));
        }
        Self::new(stats::geometric_points(lo, hi, count))
    }

    /// Inserts the geometric midpoint between every pair of neighbours.
    pub fn refined(&self) -> Self {
        let mut out = Vec::with_capacity(2 * self.0.len());
        for w in self.0.windows(2) {
            out.push(w[0]);
            out.push((w[0] * w[1]).sqrt());
        }
        out.push(*self.0.last().expect("nonempty"));
        Self(out)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareFunctionConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub points_per_decade: usize,
    pub deltas: DeltaGrid,
}

impl SquareFunctionConfig {
    pub const DEFAULT_V_MIN: f64 = 1e-4;
    pub const DEFAULT_V_MAX: f64 = 1e4;
    pub const DEFAULT_POINTS_PER_DECADE: usize = 32;
    pub const DEFAULT_DELTA_COUNT: usize = 16;

    pub fn new(v_min: f64, v_max: f64, points_per_decade: usize, deltas: DeltaGrid) -> Result<Self> {
        LogGrid::new(v_min, v_max, points_per_decade)?;
        Ok(Self { v_min, v_max, points_per_decade, deltas })
    }

    /// Default scale window with a 16-point δ-grid from the grid spacing to the box diameter.
    pub fn for_field(f: &Field) -> Self {
        Self {
            v_min: Self::DEFAULT_V_MIN,
            v_max: Self::DEFAULT_V_MAX,
            points_per_decade: Self::DEFAULT_POINTS_PER_DECADE,
            deltas: default_deltas(f),
        }
    }

    /// Scale window `[h/4, 8·side]` at 16 points per decade: below a quarter
    /// of the spacing the sampled kernel vanishes at every other node, and
    /// above the box size the integrand decays polynomially.
    pub fn adapted(f: &Field) -> Self {
        Self {
            v_min: f.spacing() / 4.0,
            v_max: 8.0 * f.cube().side(),
            points_per_decade: 16,
            deltas: default_deltas(f),
        }
    }

    pub fn with_deltas(mut self, deltas: DeltaGrid) -> Self {
        self.deltas = deltas;
        self
    }

    pub fn log_grid(&self) -> Result<LogGrid> {
        LogGrid::new(self.v_min, self.v_max, self.points_per_decade)
    }
}

fn default_deltas(f: &Field) -> DeltaGrid {
    DeltaGrid::spanning(f.spacing(), f.cube().diameter(), SquareFunctionConfig::DEFAULT_DELTA_COUNT)
        .expect("spacing is below the diameter")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationKind {
    /// Complement of `U_δ(x)`: `Σ|x − y_i|² ≥ δ²`.
    InnerBallComplement,
    /// `V_δ(x)`: `min_j |x − y_j| ≥ δ`.
    FarField,
    /// `(U_δ(x) ∪ V_δ(x))^c`.
    Annulus,
}

/// Which of the three partition pieces a tuple belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    InnerBall,
    FarField,
    Annulus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationGeometry {
    pub kind: TruncationKind,
    pub delta: f64,
    pub center: Vec<f64>,
}

impl TruncationGeometry {
    pub fn new(kind: TruncationKind, delta: f64, center: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::domain("truncation radius must be positive"));
        }
        Ok(Self { kind, delta, center })
    }

    /// Partition piece of `y⃗` (flat, `m·n`).
    pub fn classify(&self, ys: &[f64]) -> Region {
        let n = self.center.len();
        let mut sq = 0.0;
        let mut min = f64::INFINITY;
        for y in ys.chunks(n) {
            let r = stats::dist(&self.center, y);
            sq += r * r;
            min = min.min(r);
        }
        if sq < self.delta * self.delta {
            Region::InnerBall
        } else if min >= self.delta {
            Region::FarField
        } else {
            Region::Annulus
        }
    }

    pub fn contains(&self, ys: &[f64]) -> bool {
        let region = self.classify(ys);
        match self.kind {
            TruncationKind::InnerBallComplement => region != Region::InnerBall,
            TruncationKind::FarField => region == Region::FarField,
            TruncationKind::Annulus => region == Region::Annulus,
        }
    }
}

/// A value with the difference to the same quadrature on every other scale node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: f64,
    pub quadrature_error_estimate: f64,
}

/// Nonzero samples of one input: node coordinates and `f · node weight`.
struct NonZero {
    coords: Vec<f64>,
    fw: Vec<f64>,
}

impl NonZero {
    fn of(f: &Field) -> Self {
        let n = f.n();
        let w = f.node_weight();
        let mut coords = Vec::new();
        let mut fw = Vec::new();
        let mut p = vec![0.0; n];
        for (i, &s) in f.samples().iter().enumerate() {
            if s != 0.0 {
                f.node_point(i, &mut p);
                coords.extend_from_slice(&p);
                fw.push(s * w);
            }
        }
        Self { coords, fw }
    }
}

/// One input seen from an evaluation point, sorted by distance.
struct SlotView {
    u: Vec<f64>,
    y: Vec<f64>,
    r: Vec<f64>,
    fw: Vec<f64>,
}

impl SlotView {
    fn new(nz: &NonZero, x: &[f64]) -> Self {
        let n = x.len();
        let count = nz.fw.len();
        let mut order: Vec<(f64, usize)> = (0..count)
            .map(|k| (stats::dist(x, &nz.coords[k * n..(k + 1) * n]), k))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut u = Vec::with_capacity(count * n);
        let mut y = Vec::with_capacity(count * n);
        let mut r = Vec::with_capacity(count);
        let mut fw = Vec::with_capacity(count);
        for (dist, k) in order {
            let yk = &nz.coords[k * n..(k + 1) * n];
            u.extend(x.iter().zip(yk).map(|(a, b)| a - b));
            y.extend_from_slice(yk);
            r.push(dist);
            fw.push(nz.fw[k]);
        }
        Self { u, y, r, fw }
    }

    fn len(&self) -> usize {
        self.fw.len()
    }

    /// `#{k : r_k < d}`.
    fn count_below(&self, d: f64) -> usize {
        self.r.partition_point(|&r| r < d)
    }
}

enum Plan {
    /// Product kernel, `m = 1` or no truncation needed.
    Product,
    /// Product kernel with `m = 2`: for every δ and every first-slot node
    /// inside the ball, the number of second-slot nodes completing a tuple in `U_δ`.
    Product2 { inner_counts: Vec<Vec<usize>> },
    /// Explicit tuple list.
    Tuples(TupleList),
}

struct TupleList {
    idx: Vec<u32>,
    weight: Vec<f64>,
    inner_bucket: Vec<u16>,
    far_bucket: Vec<u16>,
}

/// Per-scale spatial integrals at one evaluation point.
#[derive(Debug, Clone, Default)]
struct ScaleIntegrals {
    full: f64,
    /// Integral over the complement of `U_δ`.
    outer: Vec<f64>,
    far: Vec<f64>,
}

struct PointEngine<'a> {
    kernel: &'a dyn Kernel,
    x: Vec<f64>,
    slots: Vec<SlotView>,
    deltas: Vec<f64>,
    plan: Plan,
    product: bool,
}

impl<'a> PointEngine<'a> {
    fn new(kernel: &'a dyn Kernel, inputs: &[NonZero], x: &[f64], deltas: &[f64]) -> Result<Self> {
        let m = kernel.m();
        let n = x.len();
        let slots: Vec<SlotView> = inputs.iter().map(|nz| SlotView::new(nz, x)).collect();
        let structure = kernel.structure();
        let product = structure != Structure::General;
        let plan = if structure == Structure::Product && (m == 1 || deltas.is_empty()) {
            Plan::Product
        } else if structure == Structure::Product && m == 2 {
            let s1 = &slots[0];
            let s2 = &slots[1];
            let inner_counts = deltas
                .iter()
                .map(|&d| {
                    let c1 = s1.count_below(d);
                    (0..c1).map(|k| s2.count_below((d * d - s1.r[k] * s1.r[k]).max(0.0).sqrt())).collect()
                })
                .collect();
            Plan::Product2 { inner_counts }
        } else {
            let total: usize = slots.iter().map(SlotView::len).product();
            if total > MAX_TUPLES {
                return Err(Error::domain(format!("{total} input tuples exceed the limit of {MAX_TUPLES}")));
            }
            let mut list = TupleList {
                idx: Vec::with_capacity(total * m),
                weight: Vec::with_capacity(total),
                inner_bucket: Vec::with_capacity(total),
                far_bucket: Vec::with_capacity(total),
            };
            if total > 0 {
                let ranges: Vec<(usize, usize)> = slots.iter().map(|s| (0, s.len())).collect();
                let mut ys = vec![0.0; m * n];
                crate::grid::for_each_in_ranges(&ranges, |multi| {
                    let mut w = 1.0;
                    let mut sq = 0.0;
                    let mut min = f64::INFINITY;
                    for (j, &k) in multi.iter().enumerate() {
                        let s = &slots[j];
                        w *= s.fw[k];
                        sq += s.r[k] * s.r[k];
                        min = min.min(s.r[k]);
                        ys[j * n..(j + 1) * n].copy_from_slice(&s.y[k * n..(k + 1) * n]);
                        list.idx.push(k as u32);
                    }
                    if structure == Structure::WeightedProduct {
                        w *= kernel.tuple_weight(x, &ys);
                    }
                    list.weight.push(w);
                    list.inner_bucket.push(deltas.partition_point(|d| d * d <= sq) as u16);
                    list.far_bucket.push(deltas.partition_point(|&d| d <= min) as u16);
                });
            }
            Plan::Tuples(list)
        };
        Ok(Self { kernel, x: x.to_vec(), slots, deltas: deltas.to_vec(), plan, product })
    }

    fn factors(&self, v: f64, j: usize, with_f: bool) -> Vec<f64> {
        let s = &self.slots[j];
        let n = self.x.len();
        (0..s.len())
            .map(|k| {
                let a = self.kernel.factor(v, &s.u[k * n..(k + 1) * n]);
                if with_f {
                    a * s.fw[k]
                } else {
                    a
                }
            })
            .collect()
    }

    fn integrals(&self, v: f64) -> ScaleIntegrals {
        let nd = self.deltas.len();
        let m = self.slots.len();
        let n = self.x.len();
        match &self.plan {
            Plan::Product | Plan::Product2 { .. } => {
                let a: Vec<Vec<f64>> = (0..m).map(|j| self.factors(v, j, true)).collect();
                // prefix[j][c] = Σ_{k<c} a_j[k]
                let prefix: Vec<Vec<f64>> = a
                    .iter()
                    .map(|aj| {
                        let mut p = Vec::with_capacity(aj.len() + 1);
                        let mut acc = 0.0;
                        p.push(0.0);
                        for &val in aj {
                            acc += val;
                            p.push(acc);
                        }
                        p
                    })
                    .collect();
                let totals: Vec<f64> = prefix.iter().map(|p| *p.last().expect("nonempty")).collect();
                let full = totals.iter().product();
                let mut far = vec![0.0; nd];
                let mut outer = vec![0.0; nd];
                for (i, &d) in self.deltas.iter().enumerate() {
                    far[i] = (0..m)
                        .map(|j| {
                            let c = self.slots[j].count_below(d);
                            a[j][c..].iter().sum::<f64>()
                        })
                        .product();
                    outer[i] = match &self.plan {
                        Plan::Product2 { inner_counts } => {
                            let c1 = inner_counts[i].len();
                            let partial: f64 = inner_counts[i]
                                .iter()
                                .enumerate()
                                .map(|(k, &c2)| a[0][k] * (totals[1] - prefix[1][c2]))
                                .sum();
                            partial + a[0][c1..].iter().sum::<f64>() * totals[1]
                        }
                        _ => a[0][self.slots[0].count_below(d)..].iter().sum(),
                    };
                }
                ScaleIntegrals { full, outer, far }
            }
            Plan::Tuples(list) => {
                let a: Vec<Vec<f64>> =
                    if self.product { (0..m).map(|j| self.factors(v, j, false)).collect() } else { Vec::new() };
                let mut full = 0.0;
                let mut outer_b = vec![0.0; nd + 1];
                let mut far_b = vec![0.0; nd + 1];
                let mut ys = vec![0.0; m * n];
                for t in 0..list.weight.len() {
                    let idx = &list.idx[t * m..(t + 1) * m];
                    let c = if self.product {
                        let mut c = list.weight[t];
                        for (j, &k) in idx.iter().enumerate() {
                            c *= a[j][k as usize];
                        }
                        c
                    } else {
                        for (j, &k) in idx.iter().enumerate() {
                            let k = k as usize;
                            ys[j * n..(j + 1) * n].copy_from_slice(&self.slots[j].y[k * n..(k + 1) * n]);
                        }
                        list.weight[t] * self.kernel.eval(v, &self.x, &ys)
                    };
                    full += c;
                    outer_b[list.inner_bucket[t] as usize] += c;
                    far_b[list.far_bucket[t] as usize] += c;
                }
                // a tuple lies outside U_{δ_i} iff i < its inner bucket, in V_{δ_i} iff i < its far bucket
                let suffix = |b: &[f64]| {
                    let mut out = vec![0.0; nd];
                    let mut acc = 0.0;
                    for i in (0..nd).rev() {
                        acc += b[i + 1];
                        out[i] = acc;
                    }
                    out
                };
                ScaleIntegrals { full, outer: suffix(&outer_b), far: suffix(&far_b) }
            }
        }
    }

    fn all_scales(&self, grid: &LogGrid) -> Result<Vec<ScaleIntegrals>> {
        let mut out = Vec::with_capacity(grid.len());
        for &v in grid.nodes() {
            let s = self.integrals(v);
            if !s.full.is_finite() || s.outer.iter().chain(&s.far).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { v });
            }
            out.push(s);
        }
        Ok(out)
    }
}

fn evaluation_of(grid: &LogGrid, squares: &[f64]) -> Evaluation {
    let fine = grid.integrate_values(squares).max(0.0).sqrt();
    let coarse = grid.integrate_values_coarse(squares).max(0.0).sqrt();
    Evaluation { value: fine, quadrature_error_estimate: (fine - coarse).abs() }
}

/// Shared validation and preprocessing of the inputs.
pub struct Inputs<'a> {
    kernel: &'a dyn Kernel,
    cube: crate::grid::Cube,
    nonzero: Vec<NonZero>,
}

impl<'a> Inputs<'a> {
    pub fn new(kernel: &'a dyn Kernel, fs: &[&Field]) -> Result<Self> {
        let m = kernel.m();
        if fs.len() != m {
            return Err(Error::domain(format!("kernel takes {m} inputs, got {}", fs.len())));
        }
        if fs[0].n() != kernel.n() {
            return Err(Error::domain("input dimension differs from kernel dimension"));
        }
        if fs.iter().any(|f| !f.same_grid(fs[0])) {
            return Err(Error::domain("all inputs must share one grid"));
        }
        if kernel.n() * m > 4 {
            return Err(Error::domain("integration dimension exceeds 4"));
        }
        Ok(Self { kernel, cube: fs[0].cube().clone(), nonzero: fs.iter().map(|f| NonZero::of(f)).collect() })
    }

    fn engine(&self, x: &[f64], deltas: &[f64]) -> Result<PointEngine<'a>> {
        if !self.cube.contains_point(x) {
            return Err(Error::domain("evaluation point lies outside the grid box"));
        }
        PointEngine::new(self.kernel, &self.nonzero, x, deltas)
    }

    pub fn square_function(&self, x: &[f64], cfg: &SquareFunctionConfig) -> Result<Evaluation> {
        let grid = cfg.log_grid()?;
        let engine = self.engine(x, &[])?;
        let scales = engine.all_scales(&grid)?;
        let squares: Vec<f64> = scales.iter().map(|s| s.full * s.full).collect();
        Ok(evaluation_of(&grid, &squares))
    }

    pub fn truncated(&self, x: &[f64], geom: &TruncationGeometry, cfg: &SquareFunctionConfig) -> Result<Evaluation> {
        if geom.center.as_slice() != x {
            return Err(Error::domain("truncation geometry must be centred at the evaluation point"));
        }
        let grid = cfg.log_grid()?;
        let engine = self.engine(x, &[geom.delta])?;
        let scales = engine.all_scales(&grid)?;
        let squares: Vec<f64> = scales
            .iter()
            .map(|s| {
                let val = match geom.kind {
                    TruncationKind::InnerBallComplement => s.outer[0],
                    TruncationKind::FarField => s.far[0],
                    TruncationKind::Annulus => s.outer[0] - s.far[0],
                };
                val * val
            })
            .collect();
        Ok(evaluation_of(&grid, &squares))
    }

    /// `T`, `T*` and `T**` at one point from a single sweep.
    pub fn all_variants(&self, x: &[f64], cfg: &SquareFunctionConfig) -> Result<Variants> {
        let grid = cfg.log_grid()?;
        let deltas = cfg.deltas.values();
        let engine = self.engine(x, deltas)?;
        let scales = engine.all_scales(&grid)?;
        let full: Vec<f64> = scales.iter().map(|s| s.full * s.full).collect();
        let per_delta: Vec<Vec<f64>> = (0..deltas.len())
            .map(|i| scales.iter().map(|s| s.outer[i].powi(2)).collect())
            .collect();
        let sup_inside: Vec<f64> = (0..scales.len())
            .map(|k| per_delta.iter().fold(0.0_f64, |acc, col| acc.max(col[k])))
            .collect();
        let star = evaluation_of(&grid, &sup_inside);
        let mut starstar = Evaluation { value: 0.0, quadrature_error_estimate: 0.0 };
        let mut best_delta = deltas[0];
        for (i, col) in per_delta.iter().enumerate() {
            let e = evaluation_of(&grid, col);
            if e.value > starstar.value || i == 0 {
                starstar = e;
                best_delta = deltas[i];
            }
        }
        Ok(Variants { t: evaluation_of(&grid, &full), star, starstar, best_delta })
    }
}

/// `T`, `T*` (sup inside the scale integral) and `T**` (sup outside) at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Variants {
    pub t: Evaluation,
    pub star: Evaluation,
    pub starstar: Evaluation,
    /// Radius attaining the `T**` supremum.
    pub best_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaximalVariant {
    Star,
    StarStar,
}

/// `T(f⃗)(x)`.
pub fn square_function(k: &dyn Kernel, fs: &[&Field], x: &[f64], cfg: &SquareFunctionConfig) -> Result<Evaluation> {
    Inputs::new(k, fs)?.square_function(x, cfg)
}

/// `T` with the spatial integral restricted to the truncation region.
pub fn truncated_square_function(
    k: &dyn Kernel,
    fs: &[&Field],
    x: &[f64],
    geom: &TruncationGeometry,
    cfg: &SquareFunctionConfig,
) -> Result<Evaluation> {
    Inputs::new(k, fs)?.truncated(x, geom, cfg)
}

/// `T*` or `T**` over the configured δ-grid.
pub fn maximal_square_function(
    k: &dyn Kernel,
    fs: &[&Field],
    x: &[f64],
    variant: MaximalVariant,
    cfg: &SquareFunctionConfig,
) -> Result<Evaluation> {
    let v = Inputs::new(k, fs)?.all_variants(x, cfg)?;
    Ok(match variant {
        MaximalVariant::Star => v.star,
        MaximalVariant::StarStar => v.starstar,
    })
}

/// `T(f⃗)` at every node of the input grid.
pub fn square_function_field(k: &dyn Kernel, fs: &[&Field], cfg: &SquareFunctionConfig) -> Result<Field> {
    let inputs = Inputs::new(k, fs)?;
    let grid0 = fs[0];
    let values: Result<Vec<f64>> = (0..grid0.len())
        .into_par_iter()
        .map(|i| inputs.square_function(&grid0.node_coords(i), cfg).map(|e| e.value))
        .collect();
    grid0.with_samples(values?)
}

/// `T`, `T*`, `T**` at every node of the input grid.
pub fn variants_field(k: &dyn Kernel, fs: &[&Field], cfg: &SquareFunctionConfig) -> Result<(Field, Field, Field)> {
    let inputs = Inputs::new(k, fs)?;
    let grid0 = fs[0];
    let values: Result<Vec<Variants>> =
        (0..grid0.len()).into_par_iter().map(|i| inputs.all_variants(&grid0.node_coords(i), cfg)).collect();
    let values = values?;
    Ok((
        grid0.with_samples(values.iter().map(|v| v.t.value).collect())?,
        grid0.with_samples(values.iter().map(|v| v.star.value).collect())?,
        grid0.with_samples(values.iter().map(|v| v.starstar.value).collect())?,
    ))
}

/// Fraction of the L¹ mass of `f` lying outside the central half of its box.
pub fn mass_outside_central_half(f: &Field) -> f64 {
    let inner = f.cube().dilate(0.5);
    let total = f.l1_norm();
    if total == 0.0 {
        return 0.0;
    }
    let outside: f64 = (0..f.len())
        .filter(|&i| !inner.contains_point(&f.node_coords(i)))
        .map(|i| f.samples()[i].abs())
        .sum::<f64>()
        * f.node_weight();
    outside / total
}

/// Output of [`apply_approx_identity`].
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub field: Field,
    /// Largest fraction of kernel mass, over source nodes, that falls outside the box.
    pub lost_mass: f64,
    pub warning: Option<String>,
}

/// `A_t f(x) = ∫ a_t(x, y) f(y) dy` sampled on the grid of `f`.
pub fn apply_approx_identity(id: &ApproxIdentity, t: f64, f: &Field) -> Result<Smoothed> {
    if !(t > 0.0) {
        return Err(Error::domain("t must be positive"));
    }
    if id.n() != f.n() {
        return Err(Error::domain("identity dimension differs from field dimension"));
    }
    let n = f.n();
    let h = f.spacing();
    let tau = id.scale(t);
    let reach = crate::kernels::ComposedKernel::DEFAULT_R_CUT * tau;
    let w = f.node_weight();
    let total_mass = id.profile_tail_mass(1e-9 * tau.min(1.0)).min(f64::MAX);
    let res = f.resolution();
    let sources: Vec<(usize, Vec<f64>)> =
        (0..f.len()).filter(|&i| f.samples()[i] != 0.0).map(|i| (i, f.node_coords(i))).collect();

    let mut out = vec![0.0; f.len()];
    let mut lost: f64 = 0.0;
    for (i, y) in &sources {
        let fy = f.samples()[*i];
        let ranges: Vec<(usize, usize)> = (0..n).map(|k| f.cell_range(k, y[k] - reach, y[k] + reach)).collect();
        let mut column = Vec::new();
        let mut x = vec![0.0; n];
        crate::grid::for_each_in_ranges(&ranges, |multi| {
            for k in 0..n {
                x[k] = f.cube().lo(k) + (multi[k] as f64 + 0.5) * h;
            }
            let a = id.kernel(t, &x, y) * w;
            column.push(a);
            out[multi.iter().fold(0, |acc, &m| acc * res + m)] += a * fy;
        });
        let mass = pairwise_sum(&column);
        lost = lost.max(1.0 - mass / total_mass);
    }
    let warning = (tau < h / 2.0)
        .then(|| format!("t^(1/s) = {tau:e} is below half the grid spacing {:e}; result is unresolved", h / 2.0));
    Ok(Smoothed { field: f.with_samples(out)?, lost_mass: lost.max(0.0), warning })
}

/// Writes `x1..xn,operator_id,value,quadrature_error_estimate` rows.
pub fn write_evaluations_csv<W: Write>(
    writer: W,
    n: usize,
    rows: &[(Vec<f64>, String, Evaluation)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=n).map(|k| format!("x{k}")).collect();
    header.extend(["operator_id".into(), "value".into(), "quadrature_error_estimate".into()]);
    w.write_record(&header)?;
    for (x, id, e) in rows {
        let mut rec: Vec<String> = x.iter().map(|c| format!("{c:.16e}")).collect();
        rec.push(id.clone());
        rec.push(format!("{:.16e}", e.value));
        rec.push(format!("{:.16e}", e.quadrature_error_estimate));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
