//! Muckenhoupt weights: built-in families, the `A_p` characteristic over a
//! cube family, and weighted strong and weak (quasi-)norms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{for_each_in_ranges, pairwise_sum, Cube, DyadicTree, Field};
use crate::stats;

/// Number of λ levels used by the weak norm.
pub const WEAK_LAMBDA_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    pub field: Field,
    pub label: String,
    /// Smallest `p` for which the family is known to be in `A_p`, if any.
    pub declared_p: Option<f64>,
    /// Clip radius applied near the origin (power weights).
    pub clip: Option<f64>,
}

/// Serializable description of a built-in weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightSpec {
    Constant { value: f64 },
    Power { a: f64 },
    ExpPerturbed { amplitude: f64, seed: u64 },
}

impl WeightSpec {
    pub fn build(&self, cube: &Cube, resolution: usize) -> Result<Weight> {
        match *self {
            WeightSpec::Constant { value } => Weight::constant(cube, resolution, value),
            WeightSpec::Power { a } => Weight::power(cube, resolution, a),
            WeightSpec::ExpPerturbed { amplitude, seed } => Weight::exp_perturbed(cube, resolution, amplitude, seed),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            WeightSpec::Constant { value } => format!("const-{value}"),
            WeightSpec::Power { a } => format!("power-{a}"),
            WeightSpec::ExpPerturbed { amplitude, seed } => format!("exp-{amplitude}-s{seed}"),
        }
    }
}

/// Whether `|x|^a` is in `A_p` on `Rⁿ`.
pub fn power_weight_in_ap(a: f64, n: usize, p: f64) -> bool {
    let n = n as f64;
    if p == 1.0 {
        -n < a && a <= 0.0
    } else {
        -n < a && a < n * (p - 1.0)
    }
}

impl Weight {
    pub fn from_field(field: Field, label: impl Into<String>) -> Result<Self> {
        if let Some(i) = field.samples().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::domain(format!("weight sample {i} is not positive and finite")));
        }
        Ok(Self { field, label: label.into(), declared_p: None, clip: None })
    }

    pub fn constant(cube: &Cube, resolution: usize, value: f64) -> Result<Self> {
        let field = Field::from_fn(cube.clone(), resolution, |_| value)?;
        Ok(Self { declared_p: Some(1.0), ..Self::from_field(field, format!("const-{value}"))? })
    }

    /// `max(|x|, h)^a` with `h` the grid spacing.
    pub fn power(cube: &Cube, resolution: usize, a: f64) -> Result<Self> {
        let h = cube.side() / resolution as f64;
        let field = Field::from_fn(cube.clone(), resolution, |x| stats::norm(x).max(h).powf(a))?;
        let n = cube.n() as f64;
        let declared_p = if a <= 0.0 && a > -n {
            Some(1.0)
        } else if a > 0.0 {
            // in A_p for every p > 1 + a/n
            Some(1.0 + a / n)
        } else {
            None
        };
        Ok(Self { declared_p, clip: Some(h), ..Self::from_field(field, format!("power-{a}"))? })
    }

    /// `exp(amplitude·s(x))` with `s` a random trigonometric sum normalized to `[-1, 1]`.
    /// Bounded above and below, so it lies in `A_1`.
    pub fn exp_perturbed(cube: &Cube, resolution: usize, amplitude: f64, seed: u64) -> Result<Self> {
        let n = cube.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<(Vec<f64>, f64, f64)> = (0..4)
            .map(|_| {
                let dir = stats::unit_vector(&mut rng, n);
                let freq = rng.gen_range(0.5..3.0) / cube.half_width();
                (dir.into_iter().map(|d| d * freq).collect(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.2..1.0))
            })
            .collect();
        let total: f64 = modes.iter().map(|m| m.2).sum();
        let field = Field::from_fn(cube.clone(), resolution, |x| {
            let s: f64 = modes.iter().map(|(k, phase, c)| c * (k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + phase).cos()).sum();
            (amplitude * s / total).exp()
        })?;
        Ok(Self { declared_p: Some(1.0), ..Self::from_field(field, format!("exp-{amplitude}-s{seed}"))? })
    }

    pub fn samples(&self) -> &[f64] {
        self.field.samples()
    }
}

fn node_values(f: &Field, q: &Cube) -> Result<Vec<f64>> {
    if !f.cube().contains_cube(q) {
        return Err(Error::domain("cube is not inside the grid box"));
    }
    let ranges: Vec<(usize, usize)> = (0..f.n()).map(|k| f.cell_range(k, q.lo(k), q.hi(k))).collect();
    let mut out = Vec::new();
    for_each_in_ranges(&ranges, |multi| out.push(f.samples()[f.flat_index(multi)]));
    Ok(out)
}

/// `sup_Q (avg_Q w)(avg_Q w^{1−p'})^{p−1}` for `p > 1`, `sup_Q (avg_Q w)/min_Q w` for `p = 1`.
/// Averages run over the grid nodes inside each cube; cubes without nodes are skipped.
pub fn ap_constant(w: &Weight, p: f64, family: &[Cube]) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::domain("A_p needs p >= 1"));
    }
    if family.is_empty() {
        return Err(Error::domain("cube family is empty"));
    }
    if w.samples().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::domain("weight has a non-positive sample"));
    }
    let mut best: f64 = 0.0;
    for q in family {
        let vals = node_values(&w.field, q)?;
        if vals.is_empty() {
            continue;
        }
        let k = vals.len() as f64;
        let avg = pairwise_sum(&vals) / k;
        let value = if p == 1.0 {
            avg / vals.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            let dual = 1.0 - p / (p - 1.0);
            let terms: Vec<f64> = vals.iter().map(|v| v.powf(dual)).collect();
            avg * (pairwise_sum(&terms) / k).powf(p - 1.0)
        };
        best = best.max(value);
    }
    Ok(best)
}

/// All dyadic cubes of the grid box down to `depth` generations.
pub fn dyadic_family(cube: &Cube, depth: usize) -> Vec<Cube> {
    let tree = DyadicTree::new(cube.clone(), depth);
    (0..=depth).flat_map(|d| tree.enumerate(d).expect("depth within tree")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApClass {
    #[serde(rename = "A_p")]
    Ap,
    #[serde(rename = "NOT-A_p")]
    NotAp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApTrend {
    pub constants: Vec<f64>,
    pub drift: f64,
    pub class: ApClass,
}

/// Measures the characteristic on the full dyadic family as the grid is
/// refined 2× per step; growth beyond 1.5× per refinement means NOT-A_p.
pub fn ap_trend(spec: &WeightSpec, cube: &Cube, resolutions: &[usize], p: f64) -> Result<ApTrend> {
    if resolutions.len() < 2 {
        return Err(Error::Usage("need at least two resolutions".into()));
    }
    let mut constants = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        let w = spec.build(cube, res)?;
        let depth = res.trailing_zeros() as usize;
        constants.push(ap_constant(&w, p, &dyadic_family(cube, depth))?);
    }
    let drift = constants.windows(2).map(|c| c[1] / c[0]).fold(0.0, f64::max);
    let class = if drift < 1.5 { ApClass::Ap } else { ApClass::NotAp };
    Ok(ApTrend { constants, drift, class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Strong,
    Weak,
}

/// Value of a weak norm together with the upper end of its one-step λ band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakNorm {
    pub value: f64,
    pub upper: f64,
}

fn check_grid(f: &Field, w: Option<&Weight>) -> Result<()> {
    if let Some(w) = w {
        if !w.field.same_grid(f) {
            return Err(Error::domain("weight and function live on different grids"));
        }
    }
    Ok(())
}

/// Strong `L^p(w)` norm or weak `L^{p,∞}(w)` quasi-norm; `w = None` means Lebesgue measure.
pub fn weighted_norm(f: &Field, w: Option<&Weight>, p: f64, kind: NormKind) -> Result<f64> {
    match kind {
        NormKind::Strong => strong_norm(f, w, p),
        NormKind::Weak => Ok(weak_norm(f, w, p)?.value),
    }
}

/// `(Σ |f|^p·w·node weight)^{1/p}`.
pub fn strong_norm(f: &Field, w: Option<&Weight>, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::domain("p must be positive"));
    }
    check_grid(f, w)?;
    let terms: Vec<f64> = match w {
        Some(w) => f.samples().iter().zip(w.samples()).map(|(v, wt)| v.abs().powf(p) * wt).collect(),
        None => f.samples().iter().map(|v| v.abs().powf(p)).collect(),
    };
    Ok((pairwise_sum(&terms) * f.node_weight()).powf(1.0 / p))
}

/// `sup_λ λ·w{|f| ≥ λ}^{1/p}` over a geometric λ-grid spanning the nonzero values of `|f|`.
pub fn weak_norm(f: &Field, w: Option<&Weight>, p: f64) -> Result<WeakNorm> {
    if !(p > 0.0) {
        return Err(Error::domain("p must be positive"));
    }
    check_grid(f, w)?;
    let mut pairs: Vec<(f64, f64)> = f
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (v.abs(), w.map_or(1.0, |w| w.samples()[i])))
        .collect();
    if pairs.is_empty() {
        return Ok(WeakNorm { value: 0.0, upper: 0.0 });
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // cumulative measure of {|f| ≥ pairs[i].0}
    let mut cumulative = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for &(_, wt) in &pairs {
        acc += wt * f.node_weight();
        cumulative.push(acc);
    }
    let hi = pairs[0].0;
    let lo = pairs[pairs.len() - 1].0;
    let lambdas = stats::geometric_points(lo, hi, WEAK_LAMBDA_POINTS);
    let ratio = if WEAK_LAMBDA_POINTS > 1 && hi > lo { (hi / lo).powf(1.0 / (WEAK_LAMBDA_POINTS - 1) as f64) } else { 1.0 };
    let mut best: f64 = 0.0;
    for lam in lambdas {
        let count = pairs.partition_point(|pr| pr.0 >= lam);
        if count > 0 {
            best = best.max(lam * cumulative[count - 1].powf(1.0 / p));
        }
    }
    Ok(WeakNorm { value: best, upper: best * ratio })
}
