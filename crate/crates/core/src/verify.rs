//! Inequality harness: generates test inputs for each bound, evaluates both
//! sides, fits the implicit constant and judges its stability when the test
//! set is doubled with harder inputs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::czd::cz_decompose;
use crate::error::{Error, Result};
use crate::grid::{Cube, DyadicTree, Field};
use crate::kernels::{Kernel, KernelSpec};
use crate::maximal::{hl_maximal_field, j_function, sharp_maximal_field, CubeFamilySummary};
use crate::operators::{square_function_field, variants_field, DeltaGrid, SquareFunctionConfig};
use crate::stats::{self, Verdict};
use crate::weights::{power_weight_in_ap, strong_norm, weak_norm, Weight, WeightSpec};

/// Right-hand sides below this are excluded from pointwise ratios.
pub const POINTWISE_FLOOR: f64 = 1e-12;
/// Where the right-hand side is below the floor, the left must be below this.
pub const POINTWISE_LEFT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    EndpointWeakType,
    WeightedStrong,
    WeightedWeak,
    SharpMaximalPointwise,
    FarField,
    Cotlar,
    TstarStrong,
    TstarWeak,
    MarcinkiewiczIntegral,
    JNorm,
    FeffermanStein,
    HlWeightedStrong,
    HlWeightedWeak,
}

impl CheckId {
    pub const ALL: [CheckId; 13] = [
        CheckId::EndpointWeakType,
        CheckId::WeightedStrong,
        CheckId::WeightedWeak,
        CheckId::SharpMaximalPointwise,
        CheckId::FarField,
        CheckId::Cotlar,
        CheckId::TstarStrong,
        CheckId::TstarWeak,
        CheckId::MarcinkiewiczIntegral,
        CheckId::JNorm,
        CheckId::FeffermanStein,
        CheckId::HlWeightedStrong,
        CheckId::HlWeightedWeak,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckId::EndpointWeakType => "endpoint_weak_type",
            CheckId::WeightedStrong => "weighted_strong",
            CheckId::WeightedWeak => "weighted_weak",
            CheckId::SharpMaximalPointwise => "sharp_maximal_pointwise",
            CheckId::FarField => "far_field",
            CheckId::Cotlar => "cotlar",
            CheckId::TstarStrong => "tstar_strong",
            CheckId::TstarWeak => "tstar_weak",
            CheckId::MarcinkiewiczIntegral => "marcinkiewicz_integral",
            CheckId::JNorm => "j_norm",
            CheckId::FeffermanStein => "fefferman_stein",
            CheckId::HlWeightedStrong => "hl_weighted_strong",
            CheckId::HlWeightedWeak => "hl_weighted_weak",
        }
    }

    fn family(self) -> Family {
        match self {
            CheckId::EndpointWeakType => Family::Spikes,
            CheckId::WeightedStrong
            | CheckId::WeightedWeak
            | CheckId::TstarStrong
            | CheckId::TstarWeak
            | CheckId::FeffermanStein
            | CheckId::HlWeightedStrong
            | CheckId::HlWeightedWeak => Family::Weighted,
            CheckId::SharpMaximalPointwise | CheckId::Cotlar => Family::Pointwise,
            CheckId::FarField => Family::Far,
            CheckId::MarcinkiewiczIntegral | CheckId::JNorm => Family::Cubes,
        }
    }

    /// Checks whose inputs are single functions rather than m-tuples.
    pub fn single_input(self) -> bool {
        matches!(
            self,
            CheckId::FeffermanStein
                | CheckId::HlWeightedStrong
                | CheckId::HlWeightedWeak
                | CheckId::MarcinkiewiczIntegral
                | CheckId::JNorm
        )
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown check id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Spikes,
    Weighted,
    Pointwise,
    Far,
    Cubes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub half_width: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn cube(&self) -> Result<Cube> {
        Cube::centered(self.n, self.half_width)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.resolution as f64
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n: 1, half_width: 4.0, resolution: 512 }
    }
}

/// Exponents of a check; unused entries stay `None` / empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    /// Target exponent (`p`); derived from `ps` when those are given.
    pub p: Option<f64>,
    /// Input exponents `p_1, …, p_m`.
    pub ps: Vec<f64>,
    pub delta: Option<f64>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    /// Support radius for the far-field check.
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub id: CheckId,
    pub kernel_label: String,
    pub kernel: KernelSpec,
    pub exponents: Exponents,
    pub weight: Option<WeightSpec>,
    /// Total number of tests; the first half is the base suite.
    pub count: usize,
    pub seed: u64,
    pub grid: GridSpec,
    /// Number of truncation radii for `T*`; 1 means a single radius at `single_delta`.
    pub delta_count: usize,
    pub single_delta: Option<f64>,
    /// Overrides the adapted scale window `[v_min, v_max]`.
    #[serde(default)]
    pub v_range: Option<[f64; 2]>,
    pub stability_tolerance: f64,
    /// Marks an input built to violate one hypothesis; that hypothesis is
    /// not enforced and the check is expected to FAIL.
    pub negative_control: bool,
}

impl CheckSpec {
    /// Defaults for `id` with the smooth bilinear kernel on a one-dimensional grid.
    pub fn new(id: CheckId) -> Self {
        let m = 2usize;
        let mut ex = Exponents::default();
        let mut weight = None;
        let mut count = 8;
        let mut grid = GridSpec::default();
        match id {
            CheckId::EndpointWeakType => ex.ps = vec![1.0; m],
            CheckId::WeightedStrong | CheckId::TstarStrong => {
                ex.ps = vec![4.0; m];
                weight = Some(WeightSpec::Constant { value: 1.0 });
                grid.resolution = 1024;
            }
            CheckId::WeightedWeak | CheckId::TstarWeak => {
                ex.ps = vec![1.0, 2.0];
                weight = Some(WeightSpec::ExpPerturbed { amplitude: 0.5, seed: 1 });
            }
            CheckId::SharpMaximalPointwise => ex.delta = Some(1.0 / (2.0 * m as f64)),
            CheckId::Cotlar => ex.eta = Some(1.0 / (2.0 * m as f64)),
            CheckId::FarField => ex.radius = Some(1.0),
            CheckId::MarcinkiewiczIntegral => {
                ex.epsilon = Some(1.0);
                count = 20;
                grid.resolution = 256;
            }
            CheckId::JNorm => {
                ex.epsilon = Some(1.0);
                ex.p = Some(2.0);
                count = 20;
                grid.resolution = 256;
            }
            CheckId::FeffermanStein => {
                ex.p = Some(2.0);
                ex.delta = Some(1.0 / (2.0 * m as f64));
                weight = Some(WeightSpec::Constant { value: 1.0 });
                count = 30;
                grid.resolution = 256;
            }
            CheckId::HlWeightedStrong | CheckId::HlWeightedWeak => {
                ex.p = Some(2.0);
                weight = Some(WeightSpec::Constant { value: 1.0 });
                count = 30;
                grid.resolution = 256;
            }
        }
        Self {
            id,
            kernel_label: format!("smooth-m{m}-n1"),
            kernel: KernelSpec::Smooth { m, n: 1 },
            exponents: ex,
            weight,
            count,
            seed: 1,
            grid,
            delta_count: SquareFunctionConfig::DEFAULT_DELTA_COUNT,
            single_delta: None,
            v_range: None,
            stability_tolerance: 2.0,
            negative_control: false,
        }
    }

    pub fn m(&self) -> usize {
        self.kernel.m()
    }

    /// `1/p = Σ 1/p_j` when input exponents are given, else the explicit `p`.
    pub fn target_p(&self) -> Option<f64> {
        if self.exponents.ps.is_empty() {
            self.exponents.p
        } else {
            Some(1.0 / self.exponents.ps.iter().map(|p| 1.0 / p).sum::<f64>())
        }
    }

    fn base_count(&self) -> usize {
        self.count / 2
    }
}

fn hypothesis(msg: impl Into<String>) -> Error {
    Error::Hypothesis(msg.into())
}

fn weight_in_ap(w: &WeightSpec, n: usize, p: f64) -> bool {
    match *w {
        WeightSpec::Constant { value } => value > 0.0,
        WeightSpec::ExpPerturbed { .. } => true,
        WeightSpec::Power { a } => power_weight_in_ap(a, n, p),
    }
}

fn weight_in_a_infinity(w: &WeightSpec, n: usize) -> bool {
    match *w {
        WeightSpec::Power { a } => a > -(n as f64),
        _ => true,
    }
}

/// Verifies the hypotheses of the bound behind `spec.id`. A negative control
/// lifts exactly the hypothesis it is built to violate.
pub fn validate_spec(spec: &CheckSpec) -> Result<()> {
    let ex = &spec.exponents;
    let m = spec.m();
    let n = spec.grid.n;
    let neg = spec.negative_control;
    if spec.count < 2 {
        return Err(Error::Usage("a check needs at least two tests".into()));
    }
    if !(spec.stability_tolerance >= 1.0) {
        return Err(Error::Usage("stability tolerance must be at least 1".into()));
    }
    if spec.kernel.n() != n {
        return Err(hypothesis("kernel dimension differs from grid dimension"));
    }
    if n * m > 4 && !spec.id.single_input() {
        return Err(hypothesis("integration dimension exceeds 4"));
    }
    if !spec.grid.resolution.is_power_of_two() || spec.grid.resolution < 16 || !(spec.grid.half_width > 0.0) {
        return Err(hypothesis("grid needs a power-of-two resolution of at least 16 and a positive half-width"));
    }
    let kernel_is_cz = !matches!(spec.kernel, KernelSpec::Broken { .. });
    let needs_kernel = !spec.id.single_input();
    if needs_kernel && !kernel_is_cz && !neg {
        return Err(hypothesis("kernel does not satisfy the C-Z conditions"));
    }
    let weight_needed = matches!(
        spec.id,
        CheckId::WeightedStrong
            | CheckId::WeightedWeak
            | CheckId::TstarStrong
            | CheckId::TstarWeak
            | CheckId::FeffermanStein
            | CheckId::HlWeightedStrong
            | CheckId::HlWeightedWeak
    );
    if weight_needed && spec.weight.is_none() {
        return Err(hypothesis("this check needs a weight"));
    }
    if !weight_needed && spec.weight.is_some() {
        return Err(hypothesis("this check takes no weight"));
    }
    let check_ps = |need_one: bool| -> Result<f64> {
        if ex.ps.len() != m {
            return Err(hypothesis(format!("need {m} input exponents")));
        }
        if ex.ps.iter().any(|p| !(*p >= 1.0) || !p.is_finite()) {
            return Err(hypothesis("input exponents must lie in [1, ∞)"));
        }
        let has_one = ex.ps.contains(&1.0);
        if need_one != has_one {
            return Err(hypothesis(if need_one {
                "the weak-type case needs some p_i = 1"
            } else {
                "the strong-type case needs every p_i > 1"
            }));
        }
        Ok(spec.target_p().expect("exponents present"))
    };
    match spec.id {
        CheckId::EndpointWeakType => {
            if ex.ps.len() != m || ex.ps.iter().any(|&p| p != 1.0) {
                return Err(hypothesis("the endpoint bound has every p_i = 1"));
            }
        }
        CheckId::WeightedStrong | CheckId::TstarStrong => {
            let p = check_ps(false)?;
            if !(p > 1.0) {
                return Err(hypothesis("the strong case is run with p > 1 so that A_p is the standard class"));
            }
            let w = spec.weight.as_ref().expect("checked");
            if !neg && !weight_in_ap(w, n, p) {
                return Err(hypothesis(format!("weight {} is not in A_{p}", w.label())));
            }
        }
        CheckId::WeightedWeak | CheckId::TstarWeak => {
            check_ps(true)?;
            let w = spec.weight.as_ref().expect("checked");
            if !neg && !weight_in_ap(w, n, 1.0) {
                return Err(hypothesis(format!("weight {} is not in A_1", w.label())));
            }
        }
        CheckId::SharpMaximalPointwise => {
            let d = ex.delta.ok_or_else(|| hypothesis("delta is required"))?;
            if !(d > 0.0 && d < 1.0 / m as f64) {
                return Err(hypothesis("delta must lie in (0, 1/m)"));
            }
        }
        CheckId::Cotlar => {
            let e = ex.eta.ok_or_else(|| hypothesis("eta is required"))?;
            if !(e > 0.0 && e < 1.0 / m as f64) {
                return Err(hypothesis("eta must lie in (0, 1/m)"));
            }
        }
        CheckId::FarField => {
            let r = ex.radius.ok_or_else(|| hypothesis("radius is required"))?;
            if !(r > 0.0 && 2.0 * r < spec.grid.half_width && r <= spec.grid.half_width / 2.0) {
                return Err(hypothesis("need 0 < 2R below the grid half-width"));
            }
        }
        CheckId::MarcinkiewiczIntegral => {
            let e = ex.epsilon.ok_or_else(|| hypothesis("epsilon is required"))?;
            if n != 1 {
                return Err(hypothesis("the cube-family integral is evaluated in one dimension"));
            }
            if !(e > 0.0) && !(neg && e == 0.0) {
                return Err(hypothesis("epsilon must be positive"));
            }
        }
        CheckId::JNorm => {
            let e = ex.epsilon.ok_or_else(|| hypothesis("epsilon is required"))?;
            let p = ex.p.ok_or_else(|| hypothesis("p is required"))?;
            if n != 1 {
                return Err(hypothesis("the cube-family norm is evaluated in one dimension"));
            }
            if !(e > 0.0) {
                return Err(hypothesis("epsilon must be positive"));
            }
            let lower = n as f64 / (n as f64 + e);
            if !(p > lower) && !(neg && p > 0.0 && p <= lower) {
                return Err(hypothesis(format!("p must exceed n/(n+ε) = {lower}")));
            }
        }
        CheckId::FeffermanStein => {
            let p = ex.p.ok_or_else(|| hypothesis("p is required"))?;
            let d = ex.delta.ok_or_else(|| hypothesis("delta is required"))?;
            if !(p > 0.0) || !(d > 0.0 && d < 1.0) {
                return Err(hypothesis("need p > 0 and 0 < delta < 1"));
            }
            let w = spec.weight.as_ref().expect("checked");
            if !weight_in_a_infinity(w, n) {
                return Err(hypothesis("weight is not in A_∞"));
            }
        }
        CheckId::HlWeightedStrong | CheckId::HlWeightedWeak => {
            let p = ex.p.ok_or_else(|| hypothesis("p is required"))?;
            let strong = spec.id == CheckId::HlWeightedStrong;
            if (strong && !(p > 1.0)) || !(p >= 1.0) {
                return Err(hypothesis("need p > 1 (strong) or p >= 1 (weak)"));
            }
            let w = spec.weight.as_ref().expect("checked");
            if !neg && !weight_in_ap(w, n, p) {
                return Err(hypothesis(format!("weight {} is not in A_{p}", w.label())));
            }
        }
    }
    if neg && !negative_control_supported(spec) {
        return Err(hypothesis(format!("no negative control is defined for {} with this input", spec.id)));
    }
    Ok(())
}

/// Whether a negative control spec actually violates the hypothesis it lifts.
fn negative_control_supported(spec: &CheckSpec) -> bool {
    let n = spec.grid.n;
    let broken = matches!(spec.kernel, KernelSpec::Broken { .. });
    let bad_weight = |p: f64| spec.weight.as_ref().is_some_and(|w| !weight_in_ap(w, n, p));
    match spec.id {
        CheckId::EndpointWeakType | CheckId::SharpMaximalPointwise | CheckId::FarField => broken,
        CheckId::WeightedStrong | CheckId::TstarStrong => spec.target_p().is_some_and(bad_weight),
        CheckId::WeightedWeak | CheckId::TstarWeak => bad_weight(1.0),
        CheckId::HlWeightedStrong | CheckId::HlWeightedWeak => spec.exponents.p.is_some_and(bad_weight),
        CheckId::MarcinkiewiczIntegral => spec.exponents.epsilon == Some(0.0),
        CheckId::JNorm => match (spec.exponents.p, spec.exponents.epsilon) {
            (Some(p), Some(e)) => p <= n as f64 / (n as f64 + e),
            _ => false,
        },
        CheckId::FeffermanStein => true,
        CheckId::Cotlar => false,
    }
}

/// A basic input shape, rasterized at grid-node centres.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// `exp(−|x−c|²/(2σ²))`, cut off outside the cube of half-width 4σ.
    Gaussian { center: Vec<f64>, sigma: f64 },
    /// Sum of indicators of half-open cubes `[lo, lo + side)`.
    Indicators { corners: Vec<Vec<f64>>, sides: Vec<f64> },
    /// `+1` on `[c−σ, c)`, `−1` on `[c, c+σ)` along the first axis, times the
    /// indicator of `[c−σ, c+σ)` in the others.
    Haar { center: Vec<f64>, sigma: f64 },
    /// `L¹`-normalized indicator of a grid-aligned cube: first cell index and width, in cells.
    Spike { first_cell: Vec<usize>, width: usize },
    /// The constant 1 on the whole box.
    Constant,
}

impl Shape {
    /// Smallest cube containing the support, `None` for [`Shape::Constant`].
    fn support(&self, h: f64, lo: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Shape::Gaussian { center, sigma } => {
                Some((center.iter().map(|c| c - 4.0 * sigma).collect(), center.iter().map(|c| c + 4.0 * sigma).collect()))
            }
            Shape::Haar { center, sigma } => {
                Some((center.iter().map(|c| c - sigma).collect(), center.iter().map(|c| c + sigma).collect()))
            }
            Shape::Indicators { corners, sides } => {
                let n = corners[0].len();
                let a = (0..n).map(|k| corners.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min)).collect();
                let b = (0..n)
                    .map(|k| corners.iter().zip(sides).map(|(c, s)| c[k] + s).fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                Some((a, b))
            }
            Shape::Spike { first_cell, width } => Some((
                first_cell.iter().zip(lo).map(|(&i, l)| l + i as f64 * h).collect(),
                first_cell.iter().zip(lo).map(|(&i, l)| l + (i + width) as f64 * h).collect(),
            )),
            Shape::Constant => None,
        }
    }

    fn value(&self, x: &[f64], h: f64, n: usize) -> f64 {
        match self {
            Shape::Gaussian { center, sigma } => {
                if center.iter().zip(x).any(|(c, xi)| (xi - c).abs() > 4.0 * sigma) {
                    0.0
                } else {
                    (-stats::dist(x, center).powi(2) / (2.0 * sigma * sigma)).exp()
                }
            }
            Shape::Indicators { corners, sides } => corners
                .iter()
                .zip(sides)
                .filter(|(c, s)| c.iter().zip(x).all(|(ck, xk)| *xk >= *ck && *xk < ck + **s))
                .count() as f64,
            Shape::Haar { center, sigma } => {
                if center.iter().zip(x).any(|(c, xi)| *xi < c - sigma || *xi >= c + sigma) {
                    0.0
                } else if x[0] < center[0] {
                    1.0
                } else {
                    -1.0
                }
            }
            Shape::Spike { width, .. } => 1.0 / ((*width as f64) * h).powi(n as i32),
            Shape::Constant => 1.0,
        }
    }

    /// Samples the shape on the grid, refusing shapes that leave `allowed`.
    pub fn rasterize(&self, grid: &GridSpec, allowed: Option<&Cube>) -> Result<Field> {
        let cube = grid.cube()?;
        let h = grid.spacing();
        let lo: Vec<f64> = (0..grid.n).map(|k| cube.lo(k)).collect();
        if let (Some(allowed), Some((a, b))) = (allowed, self.support(h, &lo)) {
            let tol = 1e-9 * h;
            if (0..grid.n).any(|k| a[k] < allowed.lo(k) - tol || b[k] > allowed.hi(k) + tol) {
                return Err(Error::domain("shape exceeds the central half-box"));
            }
        }
        if let Shape::Spike { first_cell, width } = self {
            let mut f = Field::zeros(cube, grid.resolution)?;
            let value = self.value(&[], h, grid.n);
            let ranges: Vec<(usize, usize)> = first_cell.iter().map(|&i| (i, i + width)).collect();
            let mut idx = Vec::new();
            crate::grid::for_each_in_ranges(&ranges, |multi| idx.push(f.flat_index(multi)));
            for i in idx {
                f.samples_mut()[i] = value;
            }
            return Ok(f);
        }
        Field::from_fn(cube, grid.resolution, |x| self.value(x, h, grid.n))
    }
}

#[derive(Debug, Clone)]
pub struct TestCase {
    pub label: String,
    pub hardened: bool,
    pub inputs: Vec<Field>,
    /// Support radius (far-field tests).
    pub radius: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TestSuite {
    pub tests: Vec<TestCase>,
    pub weight: Option<Weight>,
}

fn random_generic<R: Rng>(rng: &mut R, n: usize, center: Vec<f64>, scale: f64) -> (Shape, &'static str) {
    match rng.gen_range(0..3) {
        0 => (Shape::Gaussian { center, sigma: scale / 8.0 }, "gaussian"),
        1 => {
            let pieces = rng.gen_range(1..=3);
            let mut corners = Vec::new();
            let mut sides = Vec::new();
            for _ in 0..pieces {
                let side = scale * rng.gen_range(0.25..1.0);
                let corner: Vec<f64> =
                    center.iter().map(|c| c - scale / 2.0 + rng.gen::<f64>() * (scale - side)).collect();
                corners.push(corner);
                sides.push(side);
            }
            let _ = n;
            (Shape::Indicators { corners, sides }, "indicators")
        }
        _ => (Shape::Haar { center, sigma: scale / 2.0 }, "haar"),
    }
}

fn spike<R: Rng>(rng: &mut R, grid: &GridSpec, width: usize) -> Shape {
    let res = grid.resolution;
    let first_cell = (0..grid.n).map(|_| rng.gen_range(res / 4..=3 * res / 4 - width)).collect();
    Shape::Spike { first_cell, width }
}

/// Deterministic test inputs for `spec`; every shape lies in the central half-box.
pub fn generate_test_suite(spec: &CheckSpec) -> Result<TestSuite> {
    let grid = &spec.grid;
    let n = grid.n;
    let cube = grid.cube()?;
    let half = cube.dilate(0.5);
    let h = grid.spacing();
    let quarter = grid.half_width / 4.0;
    let inputs_per_test = if spec.id.single_input() { 1 } else { spec.m() };
    let base = spec.base_count();
    let res = grid.resolution;
    let mut tests = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let hardened = i >= base;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let mut shapes: Vec<(Shape, String)> = Vec::new();
        let mut radius = None;
        match spec.id.family() {
            Family::Spikes => {
                // co-located spikes of shrinking width, fixed L¹ norm
                let widths: [usize; 2] = [16, 8];
                let hard: [usize; 4] = [4, 2, 1, 1];
                let w = if hardened { hard[(i - base) % 4] } else { widths[i % 2] };
                let w = w.min(res / 8).max(1);
                let s = spike(&mut rng, grid, w);
                for _ in 0..inputs_per_test {
                    shapes.push((s.clone(), format!("spike-w{w}")));
                }
            }
            Family::Weighted => {
                if hardened && spec.negative_control && spec.id == CheckId::FeffermanStein {
                    shapes.push((Shape::Constant, "constant".into()));
                } else if hardened {
                    // wide nonnegative bumps whose distance from the origin is
                    // comparable to their width
                    let s = quarter * rng.gen_range(0.5..1.0);
                    let d = rng.gen_range(s..2.0 * quarter - s);
                    let dir = stats::unit_vector(&mut rng, n);
                    let center: Vec<f64> = dir.iter().map(|u| u * d).collect();
                    let gaussian = rng.gen::<bool>();
                    for _ in 0..inputs_per_test {
                        if gaussian {
                            shapes.push((Shape::Gaussian { center: center.clone(), sigma: s / 4.0 }, "wide-gaussian".into()));
                        } else {
                            let corner = center.iter().map(|c| c - s / 2.0).collect();
                            shapes.push((Shape::Indicators { corners: vec![corner], sides: vec![s] }, "wide-indicator".into()));
                        }
                    }
                } else {
                    let s = quarter * rng.gen_range(1.0 / 32.0..1.0 / 8.0);
                    let d = quarter * rng.gen_range(0.5..1.5);
                    let dir = stats::unit_vector(&mut rng, n);
                    let center: Vec<f64> = dir.iter().map(|u| u * d).collect();
                    for _ in 0..inputs_per_test {
                        let (shape, name) = random_generic(&mut rng, n, center.clone(), s);
                        shapes.push((shape, name.to_string()));
                    }
                }
            }
            Family::Pointwise => {
                // the pointwise ratios peak far from a grid-scale spike, so both
                // halves already contain the narrowest spikes
                if hardened {
                    let w = if (i - base) % 4 == 3 { 2 } else { 1 };
                    if (i - base) % 2 == 1 {
                        for _ in 0..inputs_per_test {
                            let s = spike(&mut rng, grid, w);
                            shapes.push((s, format!("apart-spike-w{w}")));
                        }
                    } else {
                        let s = spike(&mut rng, grid, w);
                        for _ in 0..inputs_per_test {
                            shapes.push((s.clone(), format!("spike-w{w}")));
                        }
                    }
                } else if i % 4 >= 2 {
                    let w = if i % 4 == 2 { 2 } else { 1 };
                    let s = spike(&mut rng, grid, w);
                    for _ in 0..inputs_per_test {
                        shapes.push((s.clone(), format!("spike-w{w}")));
                    }
                } else {
                    let s = quarter * rng.gen_range(0.25..1.0);
                    for _ in 0..inputs_per_test {
                        let center: Vec<f64> =
                            (0..n).map(|_| rng.gen_range(-(2.0 * quarter - s)..(2.0 * quarter - s))).collect();
                        let (shape, name) = random_generic(&mut rng, n, center, 2.0 * s);
                        shapes.push((shape, name.to_string()));
                    }
                }
            }
            Family::Far => {
                let r0 = spec.exponents.radius.unwrap_or(quarter);
                let factors: [f64; 2] = [1.0, 0.5];
                let hard: [f64; 4] = [0.125, 0.0625, 0.03125, 0.03125];
                let r = r0 * if hardened { hard[(i - base) % 4] } else { factors[i % 2] };
                let r = r.max(2.0 * h);
                radius = Some(r);
                for _ in 0..inputs_per_test {
                    // inside the ball: cube of half-width r/√n
                    let a = r / (n as f64).sqrt();
                    let (shape, name) = match rng.gen_range(0..3) {
                        0 => (Shape::Gaussian { center: vec![0.0; n], sigma: a / 4.0 }, "gaussian"),
                        1 => (Shape::Indicators { corners: vec![vec![-a; n]], sides: vec![2.0 * a] }, "indicator"),
                        _ => (Shape::Haar { center: vec![0.0; n], sigma: a }, "haar"),
                    };
                    shapes.push((shape, format!("{name}-r{r}")));
                }
            }
            Family::Cubes => {
                // nonnegative random bumps; decomposed later into cube families
                let bumps = if hardened { rng.gen_range(6..12) } else { rng.gen_range(1..4) };
                let mut corners = Vec::new();
                let mut sides = Vec::new();
                for _ in 0..bumps {
                    let side = quarter * if hardened { rng.gen_range(0.02..0.1) } else { rng.gen_range(0.1..0.5) };
                    corners.push((0..n).map(|_| rng.gen_range(-2.0 * quarter..2.0 * quarter - side)).collect());
                    sides.push(side);
                }
                shapes.push((Shape::Indicators { corners, sides }, format!("bumps-{bumps}")));
            }
        }
        let allowed = if spec.id.family() == Family::Far { None } else { Some(&half) };
        let mut inputs = Vec::with_capacity(shapes.len());
        for (shape, _) in &shapes {
            let f = shape.rasterize(grid, allowed)?;
            if let Some(r) = radius {
                if (0..f.len()).any(|k| f.samples()[k] != 0.0 && stats::norm(&f.node_coords(k)) > r + 1e-12) {
                    return Err(Error::domain("far-field input leaves its support ball"));
                }
            }
            inputs.push(f);
        }
        let label = shapes.iter().map(|s| s.1.as_str()).collect::<Vec<_>>().join("+");
        tests.push(TestCase { label, hardened, inputs, radius });
    }
    let weight = match &spec.weight {
        Some(w) => Some(w.build(&cube, res)?),
        None => None,
    };
    Ok(TestSuite { tests, weight })
}

/// `C` = max ratio over the first half, stability = max over all ÷ `C`.
pub fn fit_constant(ratios: &[f64]) -> Result<(f64, f64)> {
    if ratios.is_empty() {
        return Err(Error::Usage("no ratios to fit".into()));
    }
    if ratios.iter().any(|r| !r.is_finite()) {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let half = ratios.len().div_ceil(2);
    let c = ratios[..half].iter().copied().fold(0.0, f64::max);
    let all = ratios.iter().copied().fold(0.0, f64::max);
    let stability = if c > 0.0 {
        all / c
    } else if all == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok((c, stability))
}

#[derive(Debug, Clone, Serialize)]
pub struct TestOutcome {
    pub index: usize,
    pub label: String,
    pub hardened: bool,
    pub left: f64,
    pub right: f64,
    pub ratio: f64,
    /// Grid point attaining the pointwise ratio.
    pub argmax: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub id: CheckId,
    pub kernel: String,
    pub spec: CheckSpec,
    pub ratios: Vec<f64>,
    pub tests: Vec<TestOutcome>,
    pub constant: f64,
    pub stability: f64,
    pub verdict: Verdict,
    pub argmax: Option<Vec<f64>>,
    pub error: Option<ErrorRecord>,
    /// Nodes where `T** > T*` (cotlar only).
    pub starstar_violations: Option<usize>,
    pub wall_seconds: f64,
}

impl VerificationReport {
    /// `check_id,kernel,verdict,constant,stability,wall_seconds`.
    pub fn csv_line(&self, with_time: bool) -> String {
        // single-input checks involve no kernel; the weight labels the row instead
        let kernel = if self.id.single_input() {
            self.spec.weight.as_ref().map_or_else(|| "none".to_string(), WeightSpec::label)
        } else {
            self.kernel.clone()
        };
        format!(
            "{},{},{},{:.6e},{:.6e},{}",
            self.id,
            kernel,
            self.verdict,
            self.constant,
            self.stability,
            if with_time { format!("{:.3}", self.wall_seconds) } else { "0".into() }
        )
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

pub const SUMMARY_HEADER: &str = "check_id,kernel,verdict,constant,stability,wall_seconds";

fn sf_config(spec: &CheckSpec, f: &Field) -> Result<SquareFunctionConfig> {
    let mut cfg = SquareFunctionConfig::adapted(f);
    if let Some([lo, hi]) = spec.v_range {
        cfg = SquareFunctionConfig::new(lo, hi, cfg.points_per_decade, cfg.deltas)?;
    }
    Ok(match (spec.delta_count, spec.single_delta) {
        (_, Some(d)) => cfg.with_deltas(DeltaGrid::single(d)?),
        (1, None) => cfg.with_deltas(DeltaGrid::single(f.spacing())?),
        (k, None) => cfg.with_deltas(DeltaGrid::spanning(f.spacing(), f.cube().diameter(), k)?),
    })
}

struct Pointwise {
    ratio: f64,
    argmax: Option<Vec<f64>>,
    left: f64,
    right: f64,
}

/// Max of `left/right` over the selected nodes, with the absolute floors.
fn pointwise_ratio(left: &[f64], right: &[f64], grid: &Field, select: impl Fn(usize) -> bool) -> Pointwise {
    let mut best = Pointwise { ratio: 0.0, argmax: None, left: 0.0, right: 0.0 };
    for i in 0..left.len() {
        if !select(i) {
            continue;
        }
        let (l, r) = (left[i], right[i]);
        let ratio = if r < POINTWISE_FLOOR {
            if l.abs() < POINTWISE_LEFT_FLOOR {
                continue;
            }
            f64::INFINITY
        } else {
            l / r
        };
        if ratio.is_nan() || ratio > best.ratio || best.argmax.is_none() {
            best = Pointwise { ratio, argmax: Some(grid.node_coords(i)), left: l, right: r };
            if ratio.is_nan() {
                break;
            }
        }
    }
    best
}

fn product_field(fields: &[Field]) -> Vec<f64> {
    let mut out = vec![1.0; fields[0].len()];
    for f in fields {
        for (o, v) in out.iter_mut().zip(f.samples()) {
            *o *= v;
        }
    }
    out
}

/// `∫_{x ∉ ∪Q*} M_{1/m}(x) dx` for a one-dimensional family, with `Q* = 5Q`.
pub fn marcinkiewicz_integral(fam: &CubeFamilySummary, m: usize, eps: f64) -> Result<f64> {
    if fam.cubes.iter().any(|q| q.n() != 1) {
        return Err(Error::domain("cube-family integral is one-dimensional"));
    }
    let a = eps / m as f64;
    let mut stars: Vec<(f64, f64)> =
        fam.cubes.iter().map(|q| (q.center()[0] - 2.5 * q.side(), q.center()[0] + 2.5 * q.side())).collect();
    stars.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (l, r) in stars {
        match merged.last_mut() {
            Some(last) if l <= last.1 => last.1 = last.1.max(r),
            _ => merged.push((l, r)),
        }
    }
    let mut gaps = Vec::with_capacity(merged.len() + 1);
    let mut prev = f64::NEG_INFINITY;
    for &(l, r) in &merged {
        gaps.push((prev, l));
        prev = r;
    }
    gaps.push((prev, f64::INFINITY));
    // antiderivative of d^{-1-a} in the distance d ≥ 0, as a function of d
    let anti = |d: f64| -> f64 {
        if a > 0.0 {
            -d.powf(-a) / a
        } else {
            d.ln()
        }
    };
    let mut terms = Vec::new();
    for q in &fam.cubes {
        let c = q.center()[0];
        let l = q.side();
        let coef = (l / 0.8).powf(a) * l;
        for &(u, v) in &gaps {
            if v <= u {
                continue;
            }
            // gaps never contain c, so the distance is monotone on each gap
            let (near, far) = if u >= c { (u - c, v - c) } else { (c - v, c - u) };
            terms.push(coef * (anti(far) - anti(near)));
        }
    }
    Ok(crate::grid::pairwise_sum(&terms))
}

/// `‖J_ε‖_{L^p(R)}` for a one-dimensional family: composite Simpson on the
/// hull widened by 8 units, a log-spaced outer shell, and a closed-form bound
/// for the remaining tail.
pub fn j_norm(fam: &CubeFamilySummary, eps: f64, p: f64) -> Result<f64> {
    if fam.cubes.is_empty() {
        return Ok(0.0);
    }
    if fam.cubes.iter().any(|q| q.n() != 1) {
        return Err(Error::domain("cube-family norm is one-dimensional"));
    }
    let lo = fam.cubes.iter().map(|q| q.lo(0)).fold(f64::INFINITY, f64::min) - 8.0;
    let hi = fam.cubes.iter().map(|q| q.hi(0)).fold(f64::NEG_INFINITY, f64::max) + 8.0;
    let min_side = fam.cubes.iter().map(|q| q.side()).fold(f64::INFINITY, f64::min);
    let steps = (((hi - lo) / (min_side / 64.0)).ceil() as usize).max(64).next_multiple_of(2);
    let dx = (hi - lo) / steps as f64;
    let jp = |x: f64| -> Result<f64> { Ok(j_function(fam, &[x], eps)?.powf(p)) };
    let mut inner = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        inner.push(w * jp(lo + k as f64 * dx)?);
    }
    let mut total = crate::grid::pairwise_sum(&inner) * dx / 3.0;
    // outer shell: distance t from the hull, t ∈ [0, 1e6], trapezoid in ln(1 + t)
    let shell = crate::grid::LogGrid::new(1.0, 1e6, 40)?;
    for (side, edge) in [(-1.0, lo), (1.0, hi)] {
        let vals: Vec<f64> = shell
            .nodes()
            .iter()
            .map(|&s| jp(edge + side * (s - 1.0)).map(|v| v * s))
            .collect::<Result<Vec<_>>>()?;
        total += shell.integrate_values(&vals);
    }
    // beyond 1e6 from the hull: J ≤ S / r^{1+ε} with r the distance to the hull
    let s: f64 = fam.cubes.iter().map(|q| q.side().powf(1.0 + eps)).sum();
    let decay = p * (1.0 + eps);
    let r: f64 = 1e6 - 1.0;
    total += if decay > 1.0 { 2.0 * s.powf(p) * r.powf(1.0 - decay) / (decay - 1.0) } else { f64::INFINITY };
    Ok(total.powf(1.0 / p))
}

fn cube_family(f: &Field, rng_seed: u64, hardened: bool) -> Result<CubeFamilySummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let root_avg = f.l1_norm() / f.cube().volume();
    let factor = if hardened { rng.gen_range(8.0..32.0) } else { rng.gen_range(2.0..6.0) };
    let d = cz_decompose(f, root_avg * factor, &DyadicTree::over_field(f))?;
    Ok(CubeFamilySummary::new(d.cubes))
}

struct Evaluated {
    outcome: TestOutcome,
    starstar_violations: usize,
}

fn evaluate_test(
    spec: &CheckSpec,
    kernel: &Arc<dyn Kernel>,
    weight: Option<&Weight>,
    index: usize,
    test: &TestCase,
) -> Result<Evaluated> {
    let ex = &spec.exponents;
    let m = spec.m();
    let refs: Vec<&Field> = test.inputs.iter().collect();
    let f0 = test.inputs[0].clone();
    let mut outcome = TestOutcome {
        index,
        label: test.label.clone(),
        hardened: test.hardened,
        left: 0.0,
        right: 0.0,
        ratio: 0.0,
        argmax: None,
    };
    let mut violations = 0;
    let ratio_of = |l: f64, r: f64| if r > 0.0 { l / r } else if l == 0.0 { 0.0 } else { f64::INFINITY };
    let set = |o: &mut TestOutcome, l: f64, r: f64| {
        o.left = l;
        o.right = r;
        o.ratio = ratio_of(l, r);
    };
    match spec.id {
        CheckId::EndpointWeakType => {
            let t = square_function_field(kernel.as_ref(), &refs, &sf_config(spec, &f0)?)?;
            let left = weak_norm(&t, None, 1.0 / m as f64)?.value;
            let right: f64 = test.inputs.iter().map(Field::l1_norm).product();
            set(&mut outcome, left, right);
        }
        CheckId::WeightedStrong | CheckId::WeightedWeak | CheckId::TstarStrong | CheckId::TstarWeak => {
            let cfg = sf_config(spec, &f0)?;
            let t = if matches!(spec.id, CheckId::TstarStrong | CheckId::TstarWeak) {
                variants_field(kernel.as_ref(), &refs, &cfg)?.1
            } else {
                square_function_field(kernel.as_ref(), &refs, &cfg)?
            };
            let p = spec.target_p().expect("validated");
            let left = if matches!(spec.id, CheckId::WeightedStrong | CheckId::TstarStrong) {
                strong_norm(&t, weight, p)?
            } else {
                weak_norm(&t, weight, p)?.value
            };
            let mut right = 1.0;
            for (f, pj) in test.inputs.iter().zip(&ex.ps) {
                right *= strong_norm(f, weight, *pj)?;
            }
            set(&mut outcome, left, right);
        }
        CheckId::SharpMaximalPointwise => {
            let t = square_function_field(kernel.as_ref(), &refs, &sf_config(spec, &f0)?)?;
            let left = sharp_maximal_field(&t, ex.delta.expect("validated"))?;
            let maxes = test.inputs.iter().map(|f| hl_maximal_field(f, 1.0)).collect::<Result<Vec<_>>>()?;
            let right = product_field(&maxes);
            let pw = pointwise_ratio(left.samples(), &right, &f0, |_| true);
            outcome.left = pw.left;
            outcome.right = pw.right;
            outcome.ratio = pw.ratio;
            outcome.argmax = pw.argmax;
        }
        CheckId::FarField => {
            let t = square_function_field(kernel.as_ref(), &refs, &sf_config(spec, &f0)?)?;
            let maxes = test.inputs.iter().map(|f| hl_maximal_field(f, 1.0)).collect::<Result<Vec<_>>>()?;
            let right = product_field(&maxes);
            let r = test.radius.expect("far-field tests carry a radius");
            let pw = pointwise_ratio(t.samples(), &right, &f0, |i| stats::norm(&f0.node_coords(i)) > 2.0 * r);
            outcome.left = pw.left;
            outcome.right = pw.right;
            outcome.ratio = pw.ratio;
            outcome.argmax = pw.argmax;
        }
        CheckId::Cotlar => {
            let (t, star, starstar) = variants_field(kernel.as_ref(), &refs, &sf_config(spec, &f0)?)?;
            violations = star.samples().iter().zip(starstar.samples()).filter(|(s, ss)| ss > s).count();
            let m_eta = hl_maximal_field(&t, ex.eta.expect("validated"))?;
            let maxes = test.inputs.iter().map(|f| hl_maximal_field(f, 1.0)).collect::<Result<Vec<_>>>()?;
            let prod = product_field(&maxes);
            let right: Vec<f64> = m_eta.samples().iter().zip(&prod).map(|(a, b)| a + b).collect();
            let pw = pointwise_ratio(star.samples(), &right, &f0, |_| true);
            outcome.left = pw.left;
            outcome.right = pw.right;
            outcome.ratio = pw.ratio;
            outcome.argmax = pw.argmax;
        }
        CheckId::MarcinkiewiczIntegral | CheckId::JNorm => {
            let fam = cube_family(&f0, spec.seed ^ ((index as u64 + 1) << 32), test.hardened)?;
            let total: f64 = fam.cubes.iter().map(Cube::volume).sum();
            let eps = ex.epsilon.expect("validated");
            if spec.id == CheckId::MarcinkiewiczIntegral {
                set(&mut outcome, marcinkiewicz_integral(&fam, m, eps)?, total);
            } else {
                let p = ex.p.expect("validated");
                set(&mut outcome, j_norm(&fam, eps, p)?, total.powf(1.0 / p));
            }
            outcome.label = format!("{}-{}cubes", outcome.label, fam.cubes.len());
        }
        CheckId::FeffermanStein => {
            let p = ex.p.expect("validated");
            let d = ex.delta.expect("validated");
            let md = hl_maximal_field(&f0, d)?;
            let sharp = sharp_maximal_field(&f0, d)?;
            let left = strong_norm(&md, weight, p)?.powf(p);
            let right = strong_norm(&sharp, weight, p)?.powf(p);
            set(&mut outcome, left, right);
        }
        CheckId::HlWeightedStrong | CheckId::HlWeightedWeak => {
            let p = ex.p.expect("validated");
            let mf = hl_maximal_field(&f0, 1.0)?;
            let left = if spec.id == CheckId::HlWeightedStrong {
                strong_norm(&mf, weight, p)?
            } else {
                weak_norm(&mf, weight, p)?.value
            };
            set(&mut outcome, left, strong_norm(&f0, weight, p)?);
        }
    }
    Ok(Evaluated { outcome, starstar_violations: violations })
}

/// Runs one check end to end.
pub fn run_check(spec: &CheckSpec) -> Result<VerificationReport> {
    validate_spec(spec)?;
    let start = Instant::now();
    let suite = generate_test_suite(spec)?;
    let kernel = spec.kernel.build(&spec.kernel_label)?;
    let results: Vec<Result<Evaluated>> = suite
        .tests
        .par_iter()
        .enumerate()
        .map(|(i, t)| evaluate_test(spec, &kernel, suite.weight.as_ref(), i, t))
        .collect();
    let mut tests = Vec::with_capacity(results.len());
    let mut error = None;
    let mut violations = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => {
                violations += e.starstar_violations;
                tests.push(e.outcome);
            }
            Err(e) => {
                error = Some(ErrorRecord { index: i, message: e.to_string() });
                break;
            }
        }
    }
    let ratios: Vec<f64> = tests.iter().map(|t| t.ratio).collect();
    let (constant, stability, verdict) = if error.is_some() {
        (f64::NAN, f64::NAN, Verdict::Error)
    } else {
        let (c, s) = fit_constant(&ratios)?;
        let ok = c.is_finite() && s.is_finite() && s <= spec.stability_tolerance && violations == 0;
        (c, s, Verdict::from_bool(ok))
    };
    let argmax = tests
        .iter()
        .filter(|t| t.argmax.is_some())
        .max_by(|a, b| a.ratio.total_cmp(&b.ratio))
        .and_then(|t| t.argmax.clone());
    Ok(VerificationReport {
        id: spec.id,
        kernel: spec.kernel_label.clone(),
        spec: spec.clone(),
        ratios,
        tests,
        constant,
        stability,
        verdict,
        argmax,
        error,
        starstar_violations: (spec.id == CheckId::Cotlar).then_some(violations),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_constant_contract() {
        assert_eq!(fit_constant(&[3.0; 6]).unwrap(), (3.0, 1.0));
        let inter: Vec<f64> = (1..=10).map(f64::from).collect();
        let (c, s) = fit_constant(&inter).unwrap();
        assert_eq!(c, 5.0);
        assert!(s <= 10.0);
        assert!(matches!(fit_constant(&[]), Err(Error::Usage(_))));
        let (c, s) = fit_constant(&[1.0, f64::NAN]).unwrap();
        assert!(!c.is_finite() && !s.is_finite());
    }

    #[test]
    fn check_ids_round_trip() {
        for id in CheckId::ALL {
            assert_eq!(id.as_str().parse::<CheckId>().unwrap(), id);
        }
        assert!("nope".parse::<CheckId>().is_err());
    }

    #[test]
    fn suites_are_deterministic() {
        for id in CheckId::ALL {
            let spec = CheckSpec::new(id);
            let a = generate_test_suite(&spec).unwrap();
            let b = generate_test_suite(&spec).unwrap();
            assert_eq!(a.tests.len(), spec.count);
            for (x, y) in a.tests.iter().zip(&b.tests) {
                assert_eq!(x.label, y.label);
                for (f, g) in x.inputs.iter().zip(&y.inputs) {
                    assert_eq!(f.samples(), g.samples());
                }
            }
        }
    }

    #[test]
    fn inputs_stay_in_central_half_box() {
        for id in CheckId::ALL {
            let suite = generate_test_suite(&CheckSpec::new(id)).unwrap();
            for t in &suite.tests {
                for f in &t.inputs {
                    assert!(crate::operators::mass_outside_central_half(f) == 0.0, "{id} {}", t.label);
                }
            }
        }
    }

    #[test]
    fn spike_family_is_normalized_and_shrinks() {
        let spec = CheckSpec::new(CheckId::EndpointWeakType);
        let suite = generate_test_suite(&spec).unwrap();
        let h = spec.grid.spacing();
        let mut widths = Vec::new();
        for t in &suite.tests {
            for f in &t.inputs {
                assert!((f.l1_norm() - 1.0).abs() < 1e-6);
            }
            let support = t.inputs[0].samples().iter().filter(|v| **v != 0.0).count() as f64 * h;
            widths.push(support);
        }
        let widest = widths.iter().copied().fold(0.0, f64::max);
        let narrowest = widths.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((widest / narrowest - 16.0).abs() < 1e-12);
        assert!(widths[..4].iter().all(|w| *w >= 8.0 * h) && widths[4..].iter().all(|w| *w <= 4.0 * h));
    }

    #[test]
    fn oversized_shape_is_rejected() {
        let grid = GridSpec { n: 1, half_width: 4.0, resolution: 64 };
        let half = grid.cube().unwrap().dilate(0.5);
        let g = Shape::Gaussian { center: vec![1.5], sigma: 0.5 };
        assert!(matches!(g.rasterize(&grid, Some(&half)), Err(Error::Domain(_))));
        let ok = Shape::Gaussian { center: vec![0.0], sigma: 0.25 };
        assert!(ok.rasterize(&grid, Some(&half)).is_ok());
    }

    #[test]
    fn hypotheses_are_enforced() {
        let mut s = CheckSpec::new(CheckId::SharpMaximalPointwise);
        s.exponents.delta = Some(0.5);
        assert!(matches!(validate_spec(&s), Err(Error::Hypothesis(_))));
        let mut s = CheckSpec::new(CheckId::Cotlar);
        s.exponents.eta = Some(0.0);
        assert!(matches!(run_check(&s), Err(Error::Hypothesis(_))));
        let mut s = CheckSpec::new(CheckId::WeightedStrong);
        s.weight = Some(WeightSpec::Power { a: -2.0 });
        assert!(validate_spec(&s).is_err());
        s.negative_control = true;
        assert!(validate_spec(&s).is_ok());
        let mut s = CheckSpec::new(CheckId::EndpointWeakType);
        s.kernel = KernelSpec::Broken { m: 2, n: 1, defect: -0.5 };
        assert!(validate_spec(&s).is_err());
        s.negative_control = true;
        assert!(validate_spec(&s).is_ok());
        let mut s = CheckSpec::new(CheckId::JNorm);
        s.exponents.p = Some(0.5);
        assert!(validate_spec(&s).is_err());
        let mut s = CheckSpec::new(CheckId::Cotlar);
        s.negative_control = true;
        assert!(validate_spec(&s).is_err());
    }

    #[test]
    fn marcinkiewicz_integral_single_cube() {
        // ∫_{|x−c| > 5/2} (1/(0.8 r))^{1/2} / r dx = 2·(1/0.8)^{1/2}·(5/2)^{-1/2}/(1/2)
        let fam = CubeFamilySummary::new(vec![Cube::centered(1, 0.5).unwrap()]);
        let got = marcinkiewicz_integral(&fam, 2, 1.0).unwrap();
        let want = 4.0 * (1.25f64 / 2.5).sqrt();
        assert!((got - want).abs() < 1e-12);
        assert!(marcinkiewicz_integral(&fam, 2, 0.0).unwrap().is_infinite());
    }

    #[test]
    fn j_norm_single_cube() {
        // J = (1/(1+|x|))^{2}: ‖J‖_2² = 2∫_0^∞ (1+x)^{-4} dx = 2/3
        let fam = CubeFamilySummary::new(vec![Cube::centered(1, 0.5).unwrap()]);
        let got = j_norm(&fam, 1.0, 2.0).unwrap();
        assert!((got - (2.0f64 / 3.0).sqrt()).abs() < 1e-6, "{got}");
        assert!(j_norm(&fam, 1.0, 0.5).unwrap().is_infinite());
    }
}
