//! Kernel families `K_v(x, y⃗)`, approximations to the identity `a_t`, composed
//! kernels `K⁽ⁱ⁾_{t,v}`, and numerical auditors for the size/smoothness
//! conditions and for Assumptions H1–H3.
//!
//! Points are passed as flat slices: `x` has length `n`, `ys` has length
//! `m·n` with `y_j = ys[j·n..(j+1)·n]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LogGrid;
use crate::stats::{self, Verdict};

/// Regularity constants attached to a kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    /// Size/smoothness constant `A` (nominal; the auditors measure it).
    pub a: f64,
    /// Hölder exponent `γ ∈ (0, 1]`.
    pub gamma: f64,
    /// Enlargement factor `B > 1` of the smoothness window.
    pub b: f64,
    /// Declared exponent `ε` of the H-assumptions.
    pub epsilon: f64,
}

impl Default for KernelConstants {
    fn default() -> Self {
        Self { a: 1.0, gamma: 1.0, b: 2.0, epsilon: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Smooth,
    Broken,
    Nonsmooth,
    Custom,
}

/// How the spatial integral of a kernel can be organised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// `K_v(x, y⃗) = ∏_j k_v(x − y_j)`.
    Product,
    /// `K_v(x, y⃗) = G(x, y⃗) ∏_j k_v(x − y_j)` with `G` independent of `v`.
    WeightedProduct,
    /// No usable structure; evaluate pointwise.
    General,
}

pub trait Kernel: Send + Sync {
    fn label(&self) -> &str;
    fn kind(&self) -> KernelKind;
    fn m(&self) -> usize;
    fn n(&self) -> usize;
    fn constants(&self) -> KernelConstants;
    fn eval(&self, v: f64, x: &[f64], ys: &[f64]) -> f64;

    fn structure(&self) -> Structure {
        Structure::General
    }

    /// One-variable factor `k_v(u)` for product-structured kernels.
    fn factor(&self, _v: f64, _u: &[f64]) -> f64 {
        unimplemented!("kernel has no product structure")
    }

    /// `G(x, y⃗)` for weighted products.
    fn tuple_weight(&self, _x: &[f64], _ys: &[f64]) -> f64 {
        1.0
    }

    /// Whether the kernel is declared to satisfy the C–Z conditions.
    fn declared_cz(&self) -> bool {
        !matches!(self.kind(), KernelKind::Broken)
    }
}

/// `v^{-n} ψ(u/v)` with `ψ(u) = (Σ_k u_k) e^{-|u|²}`.
pub fn smooth_factor(v: f64, u: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut q = 0.0;
    for &c in u {
        let w = c / v;
        s += w;
        q += w * w;
    }
    v.powi(-(u.len() as i32)) * s * (-q).exp()
}

fn sum_dist(x: &[f64], ys: &[f64]) -> f64 {
    ys.chunks(x.len()).map(|y| stats::dist(x, y)).sum()
}

fn max_dist(x: &[f64], ys: &[f64]) -> f64 {
    ys.chunks(x.len()).map(|y| stats::dist(x, y)).fold(0.0, f64::max)
}

fn min_dist(x: &[f64], ys: &[f64]) -> f64 {
    ys.chunks(x.len()).map(|y| stats::dist(x, y)).fold(f64::INFINITY, f64::min)
}

fn product_eval(v: f64, x: &[f64], ys: &[f64]) -> f64 {
    let n = x.len();
    let mut u = vec![0.0; n];
    let mut prod = 1.0;
    for y in ys.chunks(n) {
        for k in 0..n {
            u[k] = x[k] - y[k];
        }
        prod *= smooth_factor(v, &u);
    }
    prod
}

/// The built-in smooth product family.
#[derive(Debug, Clone)]
pub struct SmoothKernel {
    m: usize,
    n: usize,
    label: String,
}

impl SmoothKernel {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        check_dims(m, n)?;
        Ok(Self { m, n, label: format!("smooth-m{m}-n{n}") })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(Error::domain("kernel needs m >= 1 and n >= 1"));
    }
    Ok(())
}

impl Kernel for SmoothKernel {
    fn label(&self) -> &str {
        &self.label
    }
    fn kind(&self) -> KernelKind {
        KernelKind::Smooth
    }
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants::default()
    }
    fn eval(&self, v: f64, x: &[f64], ys: &[f64]) -> f64 {
        product_eval(v, x, ys)
    }
    fn structure(&self) -> Structure {
        Structure::Product
    }
    fn factor(&self, v: f64, u: &[f64]) -> f64 {
        smooth_factor(v, u)
    }
}

/// Smooth family multiplied by `(Σ_j |x − y_j|)^defect`, which shifts the
/// size exponent from `−mn` to `−mn + defect`.
#[derive(Debug, Clone)]
pub struct BrokenKernel {
    m: usize,
    n: usize,
    defect: f64,
    label: String,
}

impl BrokenKernel {
    pub const DEFAULT_DEFECT: f64 = 0.5;

    pub fn new(m: usize, n: usize, defect: f64) -> Result<Self> {
        check_dims(m, n)?;
        if defect == 0.0 || !defect.is_finite() {
            return Err(Error::domain("broken kernel needs a finite nonzero defect"));
        }
        Ok(Self { m, n, defect, label: format!("broken-m{m}-n{n}") })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn defect(&self) -> f64 {
        self.defect
    }
}

impl Kernel for BrokenKernel {
    fn label(&self) -> &str {
        &self.label
    }
    fn kind(&self) -> KernelKind {
        KernelKind::Broken
    }
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants::default()
    }
    fn eval(&self, v: f64, x: &[f64], ys: &[f64]) -> f64 {
        self.tuple_weight(x, ys) * product_eval(v, x, ys)
    }
    fn structure(&self) -> Structure {
        Structure::WeightedProduct
    }
    fn factor(&self, v: f64, u: &[f64]) -> f64 {
        smooth_factor(v, u)
    }
    fn tuple_weight(&self, x: &[f64], ys: &[f64]) -> f64 {
        let r = sum_dist(x, ys);
        if r > 0.0 {
            r.powf(self.defect)
        } else {
            0.0
        }
    }
}

type KernelFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

/// Kernel given by a closure.
#[derive(Clone)]
pub struct FnKernel {
    m: usize,
    n: usize,
    label: String,
    f: Arc<KernelFn>,
}

impl FnKernel {
    pub fn new(
        m: usize,
        n: usize,
        label: impl Into<String>,
        f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_dims(m, n)?;
        Ok(Self { m, n, label: label.into(), f: Arc::new(f) })
    }
}

impl Kernel for FnKernel {
    fn label(&self) -> &str {
        &self.label
    }
    fn kind(&self) -> KernelKind {
        KernelKind::Custom
    }
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants::default()
    }
    fn eval(&self, v: f64, x: &[f64], ys: &[f64]) -> f64 {
        (self.f)(v, x, ys)
    }
}

type ProfileFn = dyn Fn(f64) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum Profile {
    /// `h(r) = (4π)^{-n/2} e^{-r²/4}`.
    Heat,
    Custom(Arc<ProfileFn>),
}

/// Kernels `a_t(x, y) = t^{-n/s} h(|x − y| / t^{1/s})`.
#[derive(Clone)]
pub struct ApproxIdentity {
    n: usize,
    s: f64,
    eta: f64,
    profile: Profile,
}

impl ApproxIdentity {
    /// Gaussian heat kernel, `s = 2`.
    pub fn heat(n: usize) -> Self {
        Self { n, s: 2.0, eta: 1.0, profile: Profile::Heat }
    }

    pub fn custom(
        n: usize,
        s: f64,
        eta: f64,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if n == 0 || !(s > 0.0) || !(eta > 0.0) {
            return Err(Error::domain("approximate identity needs n >= 1, s > 0, eta > 0"));
        }
        Ok(Self { n, s, eta, profile: Profile::Custom(Arc::new(h)) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_heat(&self) -> bool {
        matches!(self.profile, Profile::Heat)
    }

    pub fn profile(&self, r: f64) -> f64 {
        match &self.profile {
            Profile::Heat => (4.0 * std::f64::consts::PI).powf(-(self.n as f64) / 2.0) * (-r * r / 4.0).exp(),
            Profile::Custom(h) => h(r),
        }
    }

    /// Length scale `t^{1/s}`.
    pub fn scale(&self, t: f64) -> f64 {
        t.powf(1.0 / self.s)
    }

    pub fn kernel_at_distance(&self, t: f64, r: f64) -> f64 {
        let tau = self.scale(t);
        tau.powi(-(self.n as i32)) * self.profile(r / tau)
    }

    pub fn kernel(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        self.kernel_at_distance(t, stats::dist(x, y))
    }

    /// `∫_{|w| > radius} h(|w|) dw`, by radial quadrature.
    pub fn profile_tail_mass(&self, radius: f64) -> f64 {
        let n = self.n as f64;
        let sphere = 2.0 * std::f64::consts::PI.powf(n / 2.0) / gamma_half(self.n);
        // ∫_R^∞ h(ρ) ρ^{n-1} dρ = ∫ h(ρ) ρ^n dρ/ρ
        let upper = radius.max(1.0) * 1e4;
        crate::grid::log_scale_integral(|rho| self.profile(rho) * rho.powf(n), radius, upper, 400)
            .map(|v| sphere * v)
            .unwrap_or(f64::INFINITY)
    }
}

/// `Γ(n/2)` for small positive integers `n`.
fn gamma_half(n: usize) -> f64 {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut g = if n % 2 == 0 { 1.0 } else { sqrt_pi };
    let mut k = if n % 2 == 0 { 2 } else { 1 };
    while k < n {
        g *= k as f64 / 2.0;
        k += 2;
    }
    g
}

/// The bump `φ(u) = max(0, 1 − |u|)`.
pub fn bump(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

/// Refinement policy for the numerical convolution defining composed kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    pub initial_points: usize,
    pub max_total_points: usize,
    pub rel_tol: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self { initial_points: 64, max_total_points: 1 << 22, rel_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComposedValue {
    pub value: f64,
    /// `max |K_v|` seen on the quadrature nodes times the profile mass
    /// outside the integration cube.
    pub tail_bound: f64,
    pub points_per_axis: usize,
}

/// `K⁽⁰⁾_{t,v}(x, y⃗) = ∫ K_v(z, y⃗) a_t(x, z) dz` (slot 0) or
/// `K⁽ⁱ⁾_{t,v}(x, y⃗) = ∫ K_v(x, …, z, …) a_t(z, y_i) dz` (slot `i ≥ 1`).
#[derive(Clone)]
pub struct ComposedKernel {
    base: Arc<dyn Kernel>,
    identity: ApproxIdentity,
    slot: usize,
    r_cut: f64,
}

impl ComposedKernel {
    pub const DEFAULT_R_CUT: f64 = 12.0;

    pub fn new(base: Arc<dyn Kernel>, identity: ApproxIdentity, slot: usize) -> Result<Self> {
        if identity.n() != base.n() {
            return Err(Error::domain("identity dimension differs from kernel dimension"));
        }
        if slot > base.m() {
            return Err(Error::domain(format!("slot {slot} exceeds m = {}", base.m())));
        }
        Ok(Self { base, identity, slot, r_cut: Self::DEFAULT_R_CUT })
    }

    /// Built-in non-smooth family: smooth product kernel composed with the heat kernel.
    pub fn nonsmooth(m: usize, n: usize) -> Result<Self> {
        Self::new(Arc::new(SmoothKernel::new(m, n)?), ApproxIdentity::heat(n), 0)
    }

    pub fn with_slot(&self, slot: usize) -> Result<Self> {
        Self::new(self.base.clone(), self.identity.clone(), slot)
    }

    pub fn with_r_cut(mut self, r_cut: f64) -> Self {
        self.r_cut = r_cut;
        self
    }

    pub fn base(&self) -> &Arc<dyn Kernel> {
        &self.base
    }

    pub fn identity(&self) -> &ApproxIdentity {
        &self.identity
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn m(&self) -> usize {
        self.base.m()
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn epsilon(&self) -> f64 {
        self.base.constants().epsilon
    }

    pub fn has_closed_form(&self) -> bool {
        self.base.kind() == KernelKind::Smooth && self.identity.is_heat()
    }

    /// Exact value for the smooth family composed with the heat kernel.
    pub fn closed_form(&self, t: f64, v: f64, x: &[f64], ys: &[f64]) -> Option<f64> {
        if !self.has_closed_form() {
            return None;
        }
        let n = self.n();
        let m = self.m();
        if self.slot == 0 {
            return Some(v.powi(-((m * n) as i32)) * gauss_poly_integral(ys, n, x, t, v));
        }
        let i = self.slot - 1;
        let mut u = vec![0.0; n];
        let mut prod = 1.0;
        for (j, y) in ys.chunks(n).enumerate() {
            if j == i {
                continue;
            }
            for k in 0..n {
                u[k] = x[k] - y[k];
            }
            prod *= smooth_factor(v, &u);
        }
        let yi = &ys[i * n..(i + 1) * n];
        Some(prod * -v.powi(-(n as i32)) * gauss_poly_integral(x, n, yi, t, v))
    }

    /// Closed form when available, otherwise the numerical convolution.
    pub fn value(&self, t: f64, v: f64, x: &[f64], ys: &[f64]) -> Result<f64> {
        match self.closed_form(t, v, x, ys) {
            Some(val) => Ok(val),
            None => Ok(eval_composed_kernel(self, t, v, x, ys, &QuadConfig::default())?.value),
        }
    }

    /// The composed kernel at fixed `t`, as a kernel family in its own right.
    pub fn at(&self, t: f64) -> ComposedAt {
        ComposedAt { label: format!("{}-heat-t{t}", self.base.label()), ck: self.clone(), t }
    }
}

/// `∫ ∏_j [ (Σ_k (z_k − c_jk)/v) e^{−|z − c_j|²/v²} ] (4πt)^{-n/2} e^{−|z − x0|²/(4t)} dz`
/// in closed form: complete the square, then take Gaussian moments of the
/// polynomial factor.
fn gauss_poly_integral(centers: &[f64], n: usize, x0: &[f64], t: f64, v: f64) -> f64 {
    let mc = centers.len() / n;
    let inv_v2 = 1.0 / (v * v);
    let inv_4t = 1.0 / (4.0 * t);
    let alpha = mc as f64 * inv_v2 + inv_4t;
    let mut mu = vec![0.0; n];
    for k in 0..n {
        let mut b = x0[k] * inv_4t;
        for c in centers.chunks(n) {
            b += c[k] * inv_v2;
        }
        mu[k] = b / alpha;
    }
    let mut q = 0.0;
    for c in centers.chunks(n) {
        q += (0..n).map(|k| (mu[k] - c[k]).powi(2)).sum::<f64>() * inv_v2;
    }
    q += (0..n).map(|k| (mu[k] - x0[k]).powi(2)).sum::<f64>() * inv_4t;
    let sigma = (n as f64 / (2.0 * alpha)).sqrt();
    // coefficients of ∏_j (a_j + σ Z) as a polynomial in Z
    let mut poly = vec![1.0];
    let mu_sum: f64 = mu.iter().sum();
    for c in centers.chunks(n) {
        let a = (mu_sum - c.iter().sum::<f64>()) / v;
        let s = sigma / v;
        let mut next = vec![0.0; poly.len() + 1];
        for (d, &p) in poly.iter().enumerate() {
            next[d] += a * p;
            next[d + 1] += s * p;
        }
        poly = next;
    }
    let mut expectation = 0.0;
    let mut moment = 1.0; // E[Z^d] for even d
    for (d, &p) in poly.iter().enumerate() {
        if d % 2 == 0 {
            if d > 0 {
                moment *= (d - 1) as f64;
            }
            expectation += p * moment;
        }
    }
    (1.0 / (4.0 * t * alpha)).powf(n as f64 / 2.0) * (-q).exp() * expectation
}

/// Numerical convolution over a cube of half side `R_cut·t^{1/s}`, doubling
/// the node count per axis until the relative change is below `quad.rel_tol`.
pub fn eval_composed_kernel(
    ck: &ComposedKernel,
    t: f64,
    v: f64,
    x: &[f64],
    ys: &[f64],
    quad: &QuadConfig,
) -> Result<ComposedValue> {
    let n = ck.n();
    let m = ck.m();
    if !(t > 0.0 && v > 0.0) {
        return Err(Error::domain("composed kernel needs t > 0 and v > 0"));
    }
    if x.len() != n || ys.len() != m * n {
        return Err(Error::domain("point dimensions do not match the kernel"));
    }
    let tau = ck.identity.scale(t);
    let half = ck.r_cut * tau;
    let center: Vec<f64> = if ck.slot == 0 { x.to_vec() } else { ys[(ck.slot - 1) * n..ck.slot * n].to_vec() };
    let max_per_axis = (quad.max_total_points as f64).powf(1.0 / n as f64).floor() as usize;

    let integrate = |points: usize| -> (f64, f64, f64) {
        let h = 2.0 * half / points as f64;
        let w = h.powi(n as i32);
        let mut z = vec![0.0; n];
        let mut yy = ys.to_vec();
        let mut idx = vec![0usize; n];
        let mut sum = 0.0;
        let mut abs_sum = 0.0;
        let mut kmax: f64 = 0.0;
        let total = points.pow(n as u32);
        for _ in 0..total {
            for k in 0..n {
                z[k] = center[k] - half + (idx[k] as f64 + 0.5) * h;
            }
            let (kv, at) = if ck.slot == 0 {
                (ck.base.eval(v, &z, ys), ck.identity.kernel(t, x, &z))
            } else {
                let i = ck.slot - 1;
                yy[i * n..(i + 1) * n].copy_from_slice(&z);
                (ck.base.eval(v, x, &yy), ck.identity.kernel(t, &z, &center))
            };
            let term = kv * at * w;
            sum += term;
            abs_sum += term.abs();
            kmax = kmax.max(kv.abs());
            for k in (0..n).rev() {
                idx[k] += 1;
                if idx[k] < points {
                    break;
                }
                idx[k] = 0;
            }
        }
        (sum, abs_sum, kmax)
    };

    let tail_mass = ck.identity.profile_tail_mass(ck.r_cut);
    let mut points = quad.initial_points.max(2);
    let (mut prev, mut prev_abs, mut kmax) = integrate(points);
    loop {
        let next_points = points * 2;
        if next_points > max_per_axis {
            return Err(Error::Accuracy(format!(
                "composed kernel quadrature did not converge to {} at {} points per axis",
                quad.rel_tol, points
            )));
        }
        let (cur, cur_abs, cur_max) = integrate(next_points);
        kmax = kmax.max(cur_max);
        let scale = cur_abs.max(prev_abs);
        if scale == 0.0 || (cur - prev).abs() <= quad.rel_tol * scale {
            return Ok(ComposedValue { value: cur, tail_bound: kmax * tail_mass, points_per_axis: next_points });
        }
        prev = cur;
        prev_abs = cur_abs;
        points = next_points;
    }
}

/// A composed kernel at fixed `t`.
#[derive(Clone)]
pub struct ComposedAt {
    label: String,
    ck: ComposedKernel,
    t: f64,
}

impl ComposedAt {
    pub fn t(&self) -> f64 {
        self.t
    }
}

impl Kernel for ComposedAt {
    fn label(&self) -> &str {
        &self.label
    }
    fn kind(&self) -> KernelKind {
        KernelKind::Nonsmooth
    }
    fn m(&self) -> usize {
        self.ck.m()
    }
    fn n(&self) -> usize {
        self.ck.n()
    }
    fn constants(&self) -> KernelConstants {
        KernelConstants { epsilon: 1.0, ..self.ck.base.constants() }
    }
    fn eval(&self, v: f64, x: &[f64], ys: &[f64]) -> f64 {
        self.ck.value(self.t, v, x, ys).unwrap_or(f64::NAN)
    }
    fn declared_cz(&self) -> bool {
        self.ck.base.declared_cz()
    }
}

/// Serializable description of a built-in family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    Smooth { m: usize, n: usize },
    Broken { m: usize, n: usize, defect: f64 },
    Nonsmooth { m: usize, n: usize, t: f64 },
}

impl KernelSpec {
    pub fn m(&self) -> usize {
        match *self {
            KernelSpec::Smooth { m, .. } | KernelSpec::Broken { m, .. } | KernelSpec::Nonsmooth { m, .. } => m,
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            KernelSpec::Smooth { n, .. } | KernelSpec::Broken { n, .. } | KernelSpec::Nonsmooth { n, .. } => n,
        }
    }

    pub fn with_dims(&self, m: usize, n: usize) -> KernelSpec {
        match *self {
            KernelSpec::Smooth { .. } => KernelSpec::Smooth { m, n },
            KernelSpec::Broken { defect, .. } => KernelSpec::Broken { m, n, defect },
            KernelSpec::Nonsmooth { t, .. } => KernelSpec::Nonsmooth { m, n, t },
        }
    }

    pub fn build(&self, label: &str) -> Result<Arc<dyn Kernel>> {
        Ok(match *self {
            KernelSpec::Smooth { m, n } => Arc::new(SmoothKernel::new(m, n)?.with_label(label)),
            KernelSpec::Broken { m, n, defect } => Arc::new(BrokenKernel::new(m, n, defect)?.with_label(label)),
            KernelSpec::Nonsmooth { m, n, t } => {
                if !(t > 0.0) {
                    return Err(Error::domain("nonsmooth family needs t > 0"));
                }
                let mut k = ComposedKernel::nonsmooth(m, n)?.at(t);
                k.label = label.to_string();
                Arc::new(k)
            }
        })
    }

    /// The composed kernel behind a nonsmooth spec (slot 0).
    pub fn composed(&self) -> Result<ComposedKernel> {
        match *self {
            KernelSpec::Nonsmooth { m, n, .. } => ComposedKernel::nonsmooth(m, n),
            KernelSpec::Smooth { m, n } => ComposedKernel::nonsmooth(m, n),
            KernelSpec::Broken { m, n, defect } => {
                ComposedKernel::new(Arc::new(BrokenKernel::new(m, n, defect)?), ApproxIdentity::heat(n), 0)
            }
        }
    }
}

/// Per-decile table and verdict for one audited condition.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub kernel: String,
    pub sample_count: usize,
    pub measured_constant: f64,
    pub fitted_exponent: Option<f64>,
    pub nominal_exponent: Option<f64>,
    pub stability: f64,
    pub verdict: Verdict,
    pub deciles: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub breakdown: Vec<SampleBreakdown>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SampleBreakdown {
    pub index: usize,
    pub t: f64,
    pub left: f64,
    pub phi_term: f64,
    pub t_term: f64,
    pub ratio: f64,
}

/// Sampling plan for the C–Z auditors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CzSampling {
    /// Number of random geometries (point configurations up to scale).
    pub geometries: usize,
    /// Radii per geometry, geometric in `[r_min, r_max]`.
    pub radii: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Perturbation ratios, geometric in `[rho_min, 1]` times `max|x − y_j| / B`.
    pub rho_min: f64,
    pub rhos: usize,
    pub seed: u64,
    pub points_per_decade: usize,
    pub slope_tol: f64,
    pub stability_limit: f64,
}

impl Default for CzSampling {
    fn default() -> Self {
        Self {
            geometries: 24,
            radii: 8,
            r_min: 0.05,
            r_max: 20.0,
            rho_min: 1e-3,
            rhos: 6,
            seed: 7,
            points_per_decade: 16,
            slope_tol: 0.1,
            stability_limit: 2.0,
        }
    }
}

/// Size, x-smoothness and y-smoothness reports.
#[derive(Debug, Clone, Serialize)]
pub struct CzAuditReport {
    pub size: ConditionReport,
    pub smooth_x: ConditionReport,
    pub smooth_y: ConditionReport,
}

impl CzAuditReport {
    pub fn verdict(&self) -> Verdict {
        self.size.verdict.and(self.smooth_x.verdict).and(self.smooth_y.verdict)
    }
}

fn square_integral(
    lo: f64,
    hi: f64,
    ppd: usize,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    let grid = LogGrid::new(lo, hi, ppd)?;
    match grid.integrate(|v| {
        let k = f(v);
        k * k
    }) {
        Ok(s) => Ok(s.sqrt()),
        Err(Error::NonFinite { v }) => Err(Error::Accuracy(format!("non-finite v-integrand at v = {v:e}"))),
        Err(e) => Err(e),
    }
}

/// `(∫ |K_v(x, y⃗)|² dv/v)^{1/2}` on a scale window adapted to the configuration.
pub fn size_quotient(k: &dyn Kernel, x: &[f64], ys: &[f64], points_per_decade: usize) -> Result<f64> {
    let total = sum_dist(x, ys);
    if !(total > 0.0) {
        return Err(Error::domain("kernel evaluated on the diagonal x = y_1 = ... = y_m"));
    }
    let (lo, hi) = cz_window(x, ys);
    square_integral(lo, hi, points_per_decade, |v| k.eval(v, x, ys))
}

fn cz_window(x: &[f64], ys: &[f64]) -> (f64, f64) {
    (max_dist(x, ys) / 40.0, 1e3 * sum_dist(x, ys))
}

/// `(∫ |K_v(a) − K_v(b)|² dv/v)^{1/2}` for two argument sets.
fn difference_quotient(
    k: &dyn Kernel,
    xa: &[f64],
    ya: &[f64],
    xb: &[f64],
    yb: &[f64],
    ppd: usize,
) -> Result<f64> {
    if !(sum_dist(xa, ya) > 0.0) || !(sum_dist(xb, yb) > 0.0) {
        return Err(Error::domain("kernel evaluated on the diagonal x = y_1 = ... = y_m"));
    }
    let (lo_a, hi_a) = cz_window(xa, ya);
    let (lo_b, hi_b) = cz_window(xb, yb);
    square_integral(lo_a.min(lo_b), hi_a.max(hi_b), ppd, |v| k.eval(v, xa, ya) - k.eval(v, xb, yb))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit-scale configuration: `x` and offsets `u_j` with `Σ |u_j| = 1`.
fn random_geometry(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lengths: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = lengths.iter().sum();
    let mut offsets = Vec::with_capacity(m * n);
    for len in lengths {
        let e = stats::unit_vector(rng, n);
        offsets.extend(e.into_iter().map(|c| c * len / total));
    }
    (x, offsets)
}

fn place(x: &[f64], offsets: &[f64], r: f64) -> Vec<f64> {
    let n = x.len();
    offsets.iter().enumerate().map(|(i, o)| x[i % n] + r * o).collect()
}

struct GeometryOutcome {
    size_base: Vec<(f64, f64)>,
    size_const_base: Vec<f64>,
    size_const_ext: Vec<f64>,
    sx_groups: Vec<Vec<(f64, f64)>>,
    sx_const_base: Vec<f64>,
    sx_const_ext: Vec<f64>,
    sy_groups: Vec<Vec<(f64, f64)>>,
    sy_const_base: Vec<f64>,
    sy_const_ext: Vec<f64>,
}

/// Audits the size condition and both smoothness conditions on random
/// configurations. Geometry `g` is drawn from its own RNG stream, so enlarging
/// `geometries` only appends samples.
pub fn audit_cz_conditions(k: &dyn Kernel, cfg: &CzSampling) -> Result<CzAuditReport> {
    let m = k.m();
    let n = k.n();
    let consts = k.constants();
    let mn = (m * n) as f64;
    let gamma = consts.gamma;
    let b = consts.b;
    if cfg.geometries == 0 || cfg.radii < 2 || cfg.rhos < 2 || !(cfg.r_min > 0.0 && cfg.r_max > cfg.r_min) {
        return Err(Error::domain("sampling needs geometries >= 1, radii >= 2, rhos >= 2 and 0 < r_min < r_max"));
    }
    if !(cfg.rho_min > 0.0 && cfg.rho_min < 1.0) {
        return Err(Error::domain("rho_min must lie in (0, 1)"));
    }
    let ext = (cfg.r_max / cfg.r_min).sqrt();
    let base_radii = stats::geometric_points(cfg.r_min, cfg.r_max, cfg.radii);
    let ext_radii = stats::geometric_points(cfg.r_min / ext, cfg.r_max * ext, 2 * cfg.radii);
    let rhos = stats::geometric_points(cfg.rho_min, 1.0, cfg.rhos);
    let ppd = cfg.points_per_decade;

    let outcomes: Vec<Result<GeometryOutcome>> = (0..cfg.geometries)
        .into_par_iter()
        .map(|g| {
            let mut rng = rng_for(cfg.seed, g as u64);
            let (x, offsets) = random_geometry(&mut rng, m, n);
            let dir_x = stats::unit_vector(&mut rng, n);
            let dir_y = stats::unit_vector(&mut rng, n);
            let j_pert = rng.gen_range(0..m);
            let mut out = GeometryOutcome {
                size_base: Vec::new(),
                size_const_base: Vec::new(),
                size_const_ext: Vec::new(),
                sx_groups: Vec::new(),
                sx_const_base: Vec::new(),
                sx_const_ext: Vec::new(),
                sy_groups: Vec::new(),
                sy_const_base: Vec::new(),
                sy_const_ext: Vec::new(),
            };
            for (is_base, radii) in [(true, &base_radii), (false, &ext_radii)] {
                for &r in radii.iter() {
                    let ys = place(&x, &offsets, r);
                    let total = sum_dist(&x, &ys);
                    let s = size_quotient(k, &x, &ys, ppd)?;
                    let c = s * total.powf(mn);
                    if is_base {
                        out.size_base.push((total.ln(), s.ln()));
                        out.size_const_base.push(c);
                    } else {
                        out.size_const_ext.push(c);
                    }
                    let window = max_dist(&x, &ys) / b;
                    let mut gx = Vec::new();
                    let mut gy = Vec::new();
                    for &rho in &rhos {
                        let h = rho * window;
                        let z: Vec<f64> = x.iter().zip(&dir_x).map(|(a, d)| a + h * d).collect();
                        let dx = difference_quotient(k, &z, &ys, &x, &ys, ppd)?;
                        let cx = dx * total.powf(mn + gamma) / h.powf(gamma);
                        let mut yp = ys.clone();
                        for c in 0..n {
                            yp[j_pert * n + c] += h * dir_y[c];
                        }
                        let dy = difference_quotient(k, &x, &ys, &x, &yp, ppd)?;
                        let cy = dy * total.powf(mn + gamma) / h.powf(gamma);
                        if is_base {
                            gx.push((h.ln(), dx.ln()));
                            gy.push((h.ln(), dy.ln()));
                            out.sx_const_base.push(cx);
                            out.sy_const_base.push(cy);
                        } else {
                            out.sx_const_ext.push(cx);
                            out.sy_const_ext.push(cy);
                        }
                    }
                    if is_base {
                        out.sx_groups.push(gx);
                        out.sy_groups.push(gy);
                    }
                }
            }
            Ok(out)
        })
        .collect();

    let mut all = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        all.push(o?);
    }

    let build = |condition: &str,
                 groups: Vec<Vec<(f64, f64)>>,
                 base: Vec<f64>,
                 extended: Vec<f64>,
                 nominal: f64| {
        let slope = stats::fixed_effects_slope(&groups);
        let c_base = stats::max_of(base.iter().copied());
        let c_all = stats::max_of(base.iter().chain(extended.iter()).copied());
        let stability = c_all / c_base;
        let slope_ok = slope.map_or(false, |s| (s - nominal).abs() <= cfg.slope_tol);
        let pass = slope_ok && c_base.is_finite() && stability.is_finite() && stability <= cfg.stability_limit;
        ConditionReport {
            condition: condition.to_string(),
            kernel: k.label().to_string(),
            sample_count: base.len() + extended.len(),
            measured_constant: c_base,
            fitted_exponent: slope,
            nominal_exponent: Some(nominal),
            stability,
            verdict: Verdict::from_bool(pass),
            deciles: stats::decile_table(&base),
            breakdown: Vec::new(),
            notes: vec![format!(
                "radii [{}, {}], extension factor {:.3}, perturbations down to {} of max|x-y|/B",
                cfg.r_min, cfg.r_max, ext, cfg.rho_min
            )],
        }
    };

    let size_groups: Vec<Vec<(f64, f64)>> = all.iter().map(|o| o.size_base.clone()).collect();
    let size = build(
        "size",
        size_groups,
        all.iter().flat_map(|o| o.size_const_base.iter().copied()).collect(),
        all.iter().flat_map(|o| o.size_const_ext.iter().copied()).collect(),
        -mn,
    );
    let smooth_x = build(
        "smooth-x",
        all.iter().flat_map(|o| o.sx_groups.iter().cloned()).collect(),
        all.iter().flat_map(|o| o.sx_const_base.iter().copied()).collect(),
        all.iter().flat_map(|o| o.sx_const_ext.iter().copied()).collect(),
        gamma,
    );
    let smooth_y = build(
        "smooth-y",
        all.iter().flat_map(|o| o.sy_groups.iter().cloned()).collect(),
        all.iter().flat_map(|o| o.sy_const_base.iter().copied()).collect(),
        all.iter().flat_map(|o| o.sy_const_ext.iter().copied()).collect(),
        gamma,
    );
    Ok(CzAuditReport { size, smooth_x, smooth_y })
}

/// Which non-smooth assumption to audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    H1,
    H2Size,
    H2Smooth,
    H3,
}

impl Assumption {
    pub fn id(self) -> &'static str {
        match self {
            Assumption::H1 => "H1",
            Assumption::H2Size => "H2-size",
            Assumption::H2Smooth => "H2-smooth",
            Assumption::H3 => "H3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h1" => Some(Assumption::H1),
            "h2-size" => Some(Assumption::H2Size),
            "h2-smooth" => Some(Assumption::H2Smooth),
            "h3" => Some(Assumption::H3),
            _ => None,
        }
    }
}

/// One sample for the H-assumption auditors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub ys: Vec<f64>,
    /// Second evaluation point, H3 only.
    pub x_prime: Option<Vec<f64>>,
}

/// Samples for one H audit: base set, extension with the separation range
/// doubled, and (H2-smooth) geometries swept over shrinking `t`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HSampleSet {
    pub base: Vec<HSample>,
    pub extension: Vec<HSample>,
    pub sweeps: Vec<Vec<HSample>>,
    pub points_per_decade: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HSampling {
    pub count: usize,
    /// Upper end of `|x − y_j| / t^{1/s}` in the base set; the extension uses twice this.
    pub rho_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub sweep_geometries: usize,
    pub sweep_steps: usize,
    pub seed: u64,
    pub points_per_decade: usize,
}

impl Default for HSampling {
    fn default() -> Self {
        Self {
            count: 200,
            rho_max: 50.0,
            t_min: 1e-3,
            t_max: 1.0,
            sweep_geometries: 8,
            sweep_steps: 6,
            seed: 11,
            points_per_decade: 16,
        }
    }
}

impl HSampleSet {
    /// Admissible samples for `which` drawn from `cfg`.
    pub fn generate(ck: &ComposedKernel, which: Assumption, cfg: &HSampling) -> Result<Self> {
        let m = ck.m();
        let n = ck.n();
        let draw = |index: usize, rho_max: f64, stream_base: u64| -> HSample {
            let mut rng = rng_for(cfg.seed, stream_base + index as u64);
            let t = stats::log_uniform(&mut rng, cfg.t_min, cfg.t_max);
            let tau = ck.identity().scale(t);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // index of the point that must sit at least 2τ away
            let anchor = match which {
                Assumption::H1 => ck.slot().max(1) - 1,
                _ => rng.gen_range(0..m),
            };
            let mut ys = Vec::with_capacity(m * n);
            for j in 0..m {
                let rho = match which {
                    Assumption::H2Size | Assumption::H3 => stats::log_uniform(&mut rng, 2.0, rho_max),
                    _ if j == anchor => stats::log_uniform(&mut rng, 2.0, rho_max),
                    _ => stats::log_uniform(&mut rng, 0.05, rho_max),
                };
                let e = stats::unit_vector(&mut rng, n);
                ys.extend((0..n).map(|k| x[k] + rho * tau * e[k]));
            }
            let x_prime = (which == Assumption::H3).then(|| {
                let q: f64 = if index % 10 == 0 { 0.0 } else { rng.gen_range(0.0..1.0) };
                let e = stats::unit_vector(&mut rng, n);
                (0..n).map(|k| x[k] + 0.5 * q * tau * e[k]).collect()
            });
            HSample { t, x, ys, x_prime }
        };
        let base: Vec<HSample> = (0..cfg.count).map(|i| draw(i, cfg.rho_max, 0)).collect();
        let extension: Vec<HSample> = (0..cfg.count).map(|i| draw(i, 2.0 * cfg.rho_max, 1 << 32)).collect();
        let mut sweeps = Vec::new();
        if which == Assumption::H2Smooth {
            for g in 0..cfg.sweep_geometries {
                let start = draw(g, cfg.rho_max, 1 << 33);
                let t0 = start.t;
                let sweep = (0..cfg.sweep_steps)
                    .map(|k| HSample { t: t0 * 4f64.powi(-(k as i32)), ..start.clone() })
                    .collect();
                sweeps.push(sweep);
            }
        }
        Ok(Self { base, extension, sweeps, points_per_decade: cfg.points_per_decade })
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.extension.len() + self.sweeps.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn iter_all(&self) -> impl Iterator<Item = &HSample> {
        self.base.iter().chain(self.extension.iter()).chain(self.sweeps.iter().flatten())
    }
}

/// Checks the admissibility constraint of `which` for one sample.
pub fn check_admissible(ck: &ComposedKernel, which: Assumption, s: &HSample) -> std::result::Result<(), String> {
    let n = ck.n();
    let m = ck.m();
    if !(s.t > 0.0 && s.t.is_finite()) {
        return Err(format!("t = {} is not positive", s.t));
    }
    if s.x.len() != n || s.ys.len() != m * n {
        return Err("point dimensions do not match the kernel".into());
    }
    let tau = ck.identity().scale(s.t);
    let tol = 1.0 + 1e-12;
    match which {
        Assumption::H1 => {
            let i = ck.slot() - 1;
            let r = stats::dist(&s.x, &s.ys[i * n..(i + 1) * n]);
            if tau > r / 2.0 * tol {
                return Err(format!("t^(1/s) = {tau:e} exceeds |x - y_{}|/2 = {:e}", i + 1, r / 2.0));
            }
        }
        Assumption::H2Size | Assumption::H3 => {
            let r = min_dist(&s.x, &s.ys);
            if 2.0 * tau > r * tol {
                return Err(format!("2 t^(1/s) = {:e} exceeds min |x - y_j| = {r:e}", 2.0 * tau));
            }
        }
        Assumption::H2Smooth => {
            let r = max_dist(&s.x, &s.ys);
            if 2.0 * tau > r * tol {
                return Err(format!("2 t^(1/s) = {:e} exceeds max |x - y_j| = {r:e}", 2.0 * tau));
            }
        }
    }
    if which == Assumption::H3 {
        let xp = s.x_prime.as_ref().ok_or("H3 sample lacks x'")?;
        if xp.len() != n {
            return Err("x' has the wrong dimension".into());
        }
        let d = stats::dist(&s.x, xp);
        if 2.0 * d > tau * tol {
            return Err(format!("2|x - x'| = {:e} exceeds t^(1/s) = {tau:e}", 2.0 * d));
        }
    } else if s.x_prime.is_some() {
        return Err("x' is only meaningful for H3".into());
    }
    Ok(())
}

struct HEval {
    left: f64,
    phi_term: f64,
    t_term: f64,
}

fn h_evaluate(ck: &ComposedKernel, which: Assumption, s: &HSample, ppd: usize) -> Result<HEval> {
    let n = ck.n();
    let m = ck.m();
    let mn = (m * n) as f64;
    let eps = ck.epsilon();
    let tau = ck.identity().scale(s.t);
    let x = &s.x;
    let ys = &s.ys;
    let total = sum_dist(x, ys);
    let lo = max_dist(x, ys).min(tau) / 100.0;
    let hi = 1e3 * (total + tau);
    let base = ck.base();
    let t_term = s.t.powf(eps / ck.identity().s()) / total.powf(mn + eps);
    let yj = |j: usize| &ys[j * n..(j + 1) * n];
    match which {
        Assumption::H1 => {
            let i = ck.slot() - 1;
            let left = square_integral(lo, hi, ppd, |v| {
                base.eval(v, x, ys) - ck.value(s.t, v, x, ys).unwrap_or(f64::NAN)
            })?;
            let phi: f64 = (0..m).filter(|&k| k != i).map(|k| bump(stats::dist(yj(i), yj(k)) / tau)).sum();
            Ok(HEval { left, phi_term: phi / total.powf(mn), t_term })
        }
        Assumption::H2Size => {
            let left = square_integral(lo, hi, ppd, |v| ck.value(s.t, v, x, ys).unwrap_or(f64::NAN))?;
            Ok(HEval { left, phi_term: 1.0 / total.powf(mn), t_term: 0.0 })
        }
        Assumption::H2Smooth => {
            let dists: Vec<f64> = (0..m).map(|k| stats::dist(x, yj(k))).collect();
            let j = (0..m).fold(0, |best, k| if dists[k] > dists[best] { k } else { best });
            let left = square_integral(lo, hi, ppd, |v| {
                base.eval(v, x, ys) - ck.value(s.t, v, x, ys).unwrap_or(f64::NAN)
            })?;
            let phi: f64 = (0..m).filter(|&k| k != j).map(|k| bump(dists[k] / tau)).sum();
            Ok(HEval { left, phi_term: phi / total.powf(mn), t_term })
        }
        Assumption::H3 => {
            let xp = s.x_prime.as_ref().expect("validated");
            let left = square_integral(lo, hi, ppd, |v| {
                ck.value(s.t, v, x, ys).unwrap_or(f64::NAN) - ck.value(s.t, v, xp, ys).unwrap_or(f64::NAN)
            })?;
            Ok(HEval { left, phi_term: 0.0, t_term })
        }
    }
}

/// Audits one of H1, H2 (size), H2 (smoothness), H3 with `A = 1` on the
/// right-hand side, so the reported constant is the measured `A`.
///
/// Every sample is validated before any evaluation; the first inadmissible
/// one aborts the audit with its index.
pub fn audit_nonsmooth_assumption(
    ck: &ComposedKernel,
    which: Assumption,
    samples: &HSampleSet,
) -> Result<ConditionReport> {
    match which {
        Assumption::H1 if ck.slot() == 0 => {
            return Err(Error::domain("H1 audits a y-slot composition (slot >= 1)"));
        }
        Assumption::H2Size | Assumption::H2Smooth | Assumption::H3 if ck.slot() != 0 => {
            return Err(Error::domain("H2/H3 audit the x-slot composition (slot 0)"));
        }
        _ => {}
    }
    if samples.base.is_empty() {
        return Err(Error::domain("no samples"));
    }
    for (index, s) in samples.iter_all().enumerate() {
        check_admissible(ck, which, s).map_err(|reason| Error::Precondition { index, reason })?;
    }
    let ppd = samples.points_per_decade.max(4);
    let all: Vec<&HSample> = samples.iter_all().collect();
    let evals: Vec<Result<HEval>> = all.par_iter().map(|s| h_evaluate(ck, which, s, ppd)).collect();
    let mut breakdown = Vec::with_capacity(all.len());
    for (index, (s, e)) in all.iter().zip(evals).enumerate() {
        let e = e?;
        let right = e.phi_term + e.t_term;
        let ratio = if right > 0.0 {
            e.left / right
        } else if e.left == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        breakdown.push(SampleBreakdown { index, t: s.t, left: e.left, phi_term: e.phi_term, t_term: e.t_term, ratio });
    }
    let nb = samples.base.len();
    let ne = samples.extension.len();
    let c_base = stats::max_of(breakdown[..nb].iter().map(|b| b.ratio));
    let c_all = stats::max_of(breakdown[..nb + ne].iter().map(|b| b.ratio));
    let stability = if c_base > 0.0 { c_all / c_base } else if c_all == 0.0 { 1.0 } else { f64::INFINITY };
    let mut pass = c_base.is_finite() && stability.is_finite() && stability <= 2.0;
    let mut notes = Vec::new();
    let mut fitted = None;
    if which == Assumption::H2Smooth && !samples.sweeps.is_empty() {
        let mut offset = nb + ne;
        let mut groups = Vec::new();
        for sweep in &samples.sweeps {
            let g: Vec<(f64, f64)> = breakdown[offset..offset + sweep.len()]
                .iter()
                .filter(|b| b.left > 0.0)
                .map(|b| (b.t.ln(), b.left.ln()))
                .collect();
            offset += sweep.len();
            groups.push(g);
        }
        fitted = stats::fixed_effects_slope(&groups);
        let slope_ok = fitted.map_or(false, |s| s > 0.0);
        notes.push(format!("left side vs t slope over {} sweeps; must be positive", groups.len()));
        pass &= slope_ok;
    }
    let ratios: Vec<f64> = breakdown[..nb].iter().map(|b| b.ratio).collect();
    let keep_breakdown = matches!(which, Assumption::H1 | Assumption::H2Smooth);
    Ok(ConditionReport {
        condition: which.id().to_string(),
        kernel: format!("{}-heat", ck.base().label()),
        sample_count: breakdown.len(),
        measured_constant: c_base,
        fitted_exponent: fitted,
        nominal_exponent: None,
        stability,
        verdict: Verdict::from_bool(pass),
        deciles: stats::decile_table(&ratios),
        breakdown: if keep_breakdown { breakdown } else { Vec::new() },
        notes,
    })
}

/// Measures `C` in `h(ρ)(1 + ρ)^{n+η′} ≤ C` and checks that `r^{n+η} h(r^s) → 0` as `r → ∞`.
pub fn audit_identity_decay(id: &ApproxIdentity, eta_prime: f64) -> ConditionReport {
    let n = id.n() as f64;
    let measure = |lo: f64, hi: f64, count: usize| -> Vec<f64> {
        stats::geometric_points(lo, hi, count)
            .into_iter()
            .map(|rho| id.profile(rho) * (1.0 + rho).powf(n + eta_prime))
            .collect()
    };
    let base = measure(1e-3, 1e3, 200);
    let ext = measure(1e-6, 1e6, 400);
    let c_base = stats::max_of(base.iter().copied());
    let c_all = c_base.max(stats::max_of(ext.iter().copied()));
    let stability = c_all / c_base;
    let tail: Vec<f64> = stats::geometric_points(1.0, 1e3, 64)
        .into_iter()
        .map(|r| r.powf(n + id.eta()) * id.profile(r.powf(id.s())))
        .collect();
    let peak = stats::max_of(tail.iter().copied());
    let last = *tail.last().expect("nonempty");
    let tail_ok = last <= 1e-6 * peak;
    let pass = c_base.is_finite() && stability <= 2.0 && tail_ok;
    ConditionReport {
        condition: "identity-decay".into(),
        kernel: if id.is_heat() { "heat".into() } else { "custom".into() },
        sample_count: base.len() + ext.len(),
        measured_constant: c_base,
        fitted_exponent: None,
        nominal_exponent: None,
        stability,
        verdict: Verdict::from_bool(pass),
        deciles: stats::decile_table(&base),
        breakdown: Vec::new(),
        notes: vec![format!("r^(n+eta) h(r^s) at r = 1e3: {last:e} (peak {peak:e})")],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_kernel_is_translation_invariant() {
        let k = SmoothKernel::new(2, 1).unwrap();
        let (x, ys) = ([0.25], [1.125, -0.375]);
        for &h in &[0.5, -3.25, 10.0] {
            let xs = [x[0] + h];
            let yss = [ys[0] + h, ys[1] + h];
            for &v in &[0.1, 1.0, 7.0] {
                assert_eq!(k.eval(v, &x, &ys), k.eval(v, &xs, &yss));
            }
        }
    }

    #[test]
    fn heat_identity_mass_is_one() {
        let id = ApproxIdentity::heat(1);
        for &t in &[1e-3, 0.1, 2.0] {
            let tau = id.scale(t);
            let count = 20_000;
            let h = 40.0 * tau / count as f64;
            let x = 0.37;
            let mass: f64 = (0..count)
                .map(|i| id.kernel(t, &[x], &[x - 20.0 * tau + (i as f64 + 0.5) * h]) * h)
                .sum();
            assert!((mass - 1.0).abs() < 1e-6, "t={t} mass={mass}");
        }
    }

    #[test]
    fn heat_identity_mass_in_two_dimensions() {
        let id = ApproxIdentity::heat(2);
        let t = 0.3;
        let tau = id.scale(t);
        let count = 400;
        let h = 30.0 * tau / count as f64;
        let mut mass = 0.0;
        for i in 0..count {
            for j in 0..count {
                let y = [-15.0 * tau + (i as f64 + 0.5) * h, -15.0 * tau + (j as f64 + 0.5) * h];
                mass += id.kernel(t, &[0.0, 0.0], &y) * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn tail_mass_of_heat_profile() {
        // in one dimension ∫_{|w|>R} h = erfc(R/2); for R = 2 this is erfc(1)
        let id = ApproxIdentity::heat(1);
        let erfc1 = 0.157_299_207_050_285_13;
        assert!((id.profile_tail_mass(2.0) - erfc1).abs() < 1e-5);
    }

    #[test]
    fn gamma_half_values() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((gamma_half(1) - sqrt_pi).abs() < 1e-15);
        assert_eq!(gamma_half(2), 1.0);
        assert!((gamma_half(3) - sqrt_pi / 2.0).abs() < 1e-15);
        assert_eq!(gamma_half(4), 1.0);
        assert!((gamma_half(5) - 0.75 * sqrt_pi).abs() < 1e-15);
    }

    #[test]
    fn composed_kernel_reaches_identity_limit() {
        let ck = ComposedKernel::nonsmooth(2, 1).unwrap();
        let base = ck.base().clone();
        let (x, ys) = ([0.2], [0.9, -0.7]);
        for &v in &[0.5, 1.0, 3.0] {
            let k = base.eval(v, &x, &ys);
            let closed = ck.closed_form(1e-8, v, &x, &ys).unwrap();
            let numeric = eval_composed_kernel(&ck, 1e-8, v, &x, &ys, &QuadConfig::default()).unwrap().value;
            assert!((closed - k).abs() <= 0.01 * k.abs(), "{closed} {k}");
            assert!((numeric - k).abs() <= 0.01 * k.abs(), "{numeric} {k}");
        }
    }

    #[test]
    fn composed_zero_kernel_is_zero() {
        let zero = FnKernel::new(1, 1, "zero", |_, _, _| 0.0).unwrap();
        let ck = ComposedKernel::new(Arc::new(zero), ApproxIdentity::heat(1), 0).unwrap();
        for &t in &[1e-4, 0.3, 5.0] {
            let r = eval_composed_kernel(&ck, t, 1.0, &[0.0], &[1.0], &QuadConfig::default()).unwrap();
            assert_eq!(r.value, 0.0);
        }
    }

    /// Independent dense midpoint sum on 4096 nodes.
    fn dense_convolution(ck: &ComposedKernel, t: f64, v: f64, x: f64, ys: &[f64]) -> f64 {
        let id = ApproxIdentity::heat(1);
        let tau = t.sqrt();
        let nodes = 4096;
        let (lo, hi) = if ck.slot() == 0 { (x - 12.0 * tau, x + 12.0 * tau) } else {
            let c = ys[ck.slot() - 1];
            (c - 12.0 * tau, c + 12.0 * tau)
        };
        let h = (hi - lo) / nodes as f64;
        let base = SmoothKernel::new(ys.len(), 1).unwrap();
        (0..nodes)
            .map(|i| {
                let z = lo + (i as f64 + 0.5) * h;
                if ck.slot() == 0 {
                    base.eval(v, &[z], ys) * id.kernel(t, &[x], &[z]) * h
                } else {
                    let mut yy = ys.to_vec();
                    yy[ck.slot() - 1] = z;
                    base.eval(v, &[x], &yy) * id.kernel(t, &[z], &[ys[ck.slot() - 1]]) * h
                }
            })
            .sum()
    }

    #[test]
    fn composed_kernel_matches_dense_convolution() {
        let ck0 = ComposedKernel::nonsmooth(2, 1).unwrap();
        let mut rng = rng_for(3, 0);
        for slot in 0..=2 {
            let ck = ck0.with_slot(slot).unwrap();
            for _ in 0..5 {
                let x = rng.gen_range(-1.0..1.0);
                let ys = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let oracle = dense_convolution(&ck, 0.25, 1.0, x, &ys);
                let closed = ck.closed_form(0.25, 1.0, &[x], &ys).unwrap();
                let numeric = eval_composed_kernel(&ck, 0.25, 1.0, &[x], &ys, &QuadConfig::default()).unwrap().value;
                let scale = oracle.abs().max(1e-12);
                assert!((closed - oracle).abs() <= 1e-3 * scale, "slot {slot}: {closed} vs {oracle}");
                assert!((numeric - oracle).abs() <= 1e-3 * scale, "slot {slot}: {numeric} vs {oracle}");
            }
        }
    }

    #[test]
    fn closed_form_in_two_dimensions_matches_numeric() {
        let ck = ComposedKernel::nonsmooth(1, 2).unwrap();
        let x = [0.1, -0.2];
        let ys = [0.8, 0.4];
        let closed = ck.closed_form(0.05, 0.7, &x, &ys).unwrap();
        let numeric = eval_composed_kernel(&ck, 0.05, 0.7, &x, &ys, &QuadConfig::default()).unwrap().value;
        assert!((closed - numeric).abs() <= 2e-3 * closed.abs(), "{closed} {numeric}");
    }

    #[test]
    fn nonconvergence_is_an_accuracy_error() {
        let ck = ComposedKernel::nonsmooth(1, 1).unwrap();
        let quad = QuadConfig { initial_points: 4, max_total_points: 8, rel_tol: 1e-12 };
        let err = eval_composed_kernel(&ck, 1.0, 0.05, &[0.0], &[0.5], &quad).unwrap_err();
        assert!(matches!(err, Error::Accuracy(_)));
    }

    #[test]
    fn g_function_size_constant_matches_substitution() {
        // m = n = 1: ∫ v^{-2} ψ(r/v)² dv/v = r^{-2} ∫ w³ e^{-2w²} dw = r^{-2}/8
        let k = SmoothKernel::new(1, 1).unwrap();
        for &r in &[0.1, 1.0, 13.0] {
            let s = size_quotient(&k, &[0.0], &[r], 32).unwrap();
            let expect = 1.0 / (r * 8f64.sqrt());
            assert!((s - expect).abs() < 1e-6 * expect, "{s} {expect}");
        }
    }

    #[test]
    fn diagonal_sample_is_a_domain_error() {
        let k = SmoothKernel::new(2, 1).unwrap();
        assert!(matches!(size_quotient(&k, &[0.5], &[0.5, 0.5], 16), Err(Error::Domain(_))));
    }

    #[test]
    fn g_function_audit_exponent() {
        let k = SmoothKernel::new(1, 1).unwrap();
        let r = audit_cz_conditions(&k, &CzSampling { geometries: 6, ..Default::default() }).unwrap();
        let slope = r.size.fitted_exponent.unwrap();
        assert!((slope + 1.0).abs() <= 0.05, "{slope}");
        assert_eq!(r.verdict(), Verdict::Pass);
    }

    #[test]
    fn bilinear_audit_exponent() {
        let k = SmoothKernel::new(2, 1).unwrap();
        let r = audit_cz_conditions(&k, &CzSampling { geometries: 6, ..Default::default() }).unwrap();
        let slope = r.size.fitted_exponent.unwrap();
        assert!((slope + 2.0).abs() <= 0.1, "{slope}");
        assert_eq!(r.size.verdict, Verdict::Pass);
    }

    #[test]
    fn broken_kernel_fails_size_audit() {
        let k = BrokenKernel::new(2, 1, BrokenKernel::DEFAULT_DEFECT).unwrap();
        let r = audit_cz_conditions(&k, &CzSampling { geometries: 6, ..Default::default() }).unwrap();
        assert_eq!(r.size.verdict, Verdict::Fail);
        assert!(r.size.stability > 2.0);
    }

    #[test]
    fn audit_constant_is_monotone_in_sample_size() {
        let k = SmoothKernel::new(2, 1).unwrap();
        let mut last = 0.0;
        for g in [2, 4, 8] {
            let r = audit_cz_conditions(&k, &CzSampling { geometries: g, ..Default::default() }).unwrap();
            assert!(r.size.measured_constant >= last);
            last = r.size.measured_constant;
        }
    }

    #[test]
    fn h3_with_equal_points_has_zero_left_side() {
        let ck = ComposedKernel::nonsmooth(2, 1).unwrap();
        let s = HSample { t: 0.01, x: vec![0.0], ys: vec![1.0, -0.5], x_prime: Some(vec![0.0]) };
        let set = HSampleSet { base: vec![s], points_per_decade: 16, ..Default::default() };
        let r = audit_nonsmooth_assumption(&ck, Assumption::H3, &set).unwrap();
        assert_eq!(r.measured_constant, 0.0);
    }

    #[test]
    fn inadmissible_sample_is_rejected_with_index() {
        let ck = ComposedKernel::nonsmooth(2, 1).unwrap();
        let good = HSample { t: 0.01, x: vec![0.0], ys: vec![1.0, -0.5], x_prime: None };
        let bad = HSample { t: 0.01, x: vec![0.0], ys: vec![0.1, -0.5], x_prime: None };
        let set = HSampleSet { base: vec![good.clone(), good, bad], points_per_decade: 16, ..Default::default() };
        match audit_nonsmooth_assumption(&ck, Assumption::H2Size, &set) {
            Err(Error::Precondition { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn h2_smooth_left_side_vanishes_with_t() {
        let ck = ComposedKernel::nonsmooth(2, 1).unwrap();
        let cfg = HSampling { count: 20, ..Default::default() };
        let set = HSampleSet::generate(&ck, Assumption::H2Smooth, &cfg).unwrap();
        let r = audit_nonsmooth_assumption(&ck, Assumption::H2Smooth, &set).unwrap();
        assert!(r.fitted_exponent.unwrap() > 0.0);
    }

    #[test]
    fn heat_identity_decay_audit_passes() {
        let r = audit_identity_decay(&ApproxIdentity::heat(1), 1.0);
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.measured_constant.is_finite());
    }

    #[test]
    fn slowly_decaying_profile_fails_decay_audit() {
        let id = ApproxIdentity::custom(1, 2.0, 1.0, |r| 1.0 / (1.0 + r)).unwrap();
        let r = audit_identity_decay(&id, 1.0);
        assert_eq!(r.verdict, Verdict::Fail);
    }
}
