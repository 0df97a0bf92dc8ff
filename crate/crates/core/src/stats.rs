//! Small statistics helpers shared by the auditors and the check harness.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Outcome of an audit or a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
    #[serde(rename = "ERROR")]
    Error,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Error => "ERROR",
        }
    }

    pub fn from_bool(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Combination used when several sub-verdicts make one: ERROR dominates FAIL dominates PASS.
    pub fn and(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::Error, _) | (_, Verdict::Error) => Verdict::Error,
            (Verdict::Fail, _) | (_, Verdict::Fail) => Verdict::Fail,
            _ => Verdict::Pass,
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    fixed_effects_slope(&[xs.iter().copied().zip(ys.iter().copied()).collect()])
}

/// Pooled within-group least-squares slope: each group gets its own
/// intercept, all groups share the slope.
pub fn fixed_effects_slope(groups: &[Vec<(f64, f64)>]) -> Option<f64> {
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for g in groups {
        if g.len() < 2 {
            continue;
        }
        let k = g.len() as f64;
        let mx = g.iter().map(|p| p.0).sum::<f64>() / k;
        let my = g.iter().map(|p| p.1).sum::<f64>() / k;
        for &(x, y) in g {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
        }
    }
    if sxx > 0.0 && sxy.is_finite() {
        Some(sxy / sxx)
    } else {
        None
    }
}

/// Minimum, the nine deciles and the maximum (nearest rank).
pub fn decile_table(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return Vec::new();
    }
    v.sort_by(f64::total_cmp);
    (0..=10)
        .map(|d| {
            let pos = (d as f64 / 10.0 * (v.len() - 1) as f64).round() as usize;
            v[pos]
        })
        .collect()
}

/// NaN-propagating maximum.
pub fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for x in values {
        if x.is_nan() {
            return f64::NAN;
        }
        best = best.max(x);
    }
    best
}

/// Standard normal draw (Box–Muller).
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniformly distributed unit vector.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Log-uniform draw in `[lo, hi]`.
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// `count` geometrically spaced points from `lo` to `hi` inclusive.
pub fn geometric_points(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|i| if i + 1 == count { hi } else { lo * (r * i as f64).exp() }).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs: Vec<f64> = (1..10).map(|i| (i as f64).ln()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        assert!((ols_slope(&xs, &ys).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_effects_ignore_offsets() {
        let g1: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 1.5 * i as f64 + 10.0)).collect();
        let g2: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 1.5 * i as f64 - 3.0)).collect();
        assert!((fixed_effects_slope(&[g1, g2]).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn deciles_cover_range() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let d = decile_table(&v);
        assert_eq!(d.len(), 11);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[5], 50.0);
        assert_eq!(d[10], 100.0);
    }

    #[test]
    fn verdict_combination() {
        assert_eq!(Verdict::Pass.and(Verdict::Fail), Verdict::Fail);
        assert_eq!(Verdict::Fail.and(Verdict::Error), Verdict::Error);
        assert_eq!(Verdict::Pass.and(Verdict::Pass), Verdict::Pass);
    }
}
