//! Dyadic Calderón–Zygmund decomposition `f = g + Σ b_k` at a level, with a
//! validator that re-derives every property from the stored pieces.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{for_each_in_ranges, pairwise_sum, write_field_csv, Cube, DyadicTree, Field};

/// One bad atom `b_k = (f − avg_Q f)·χ_Q`, sampled on the cells of `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BadAtom {
    pub cube: Cube,
    pub field: Field,
}

/// Measured constants of the three decomposition properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CzConstants {
    /// `‖g‖_∞ / level`.
    pub c_i: f64,
    /// `max_k ‖b_k‖₁ / (level·|Q_k|)`.
    pub c_ii: f64,
    /// `level·Σ|Q_k| / ‖f‖₁` (0 when nothing is selected).
    pub c_iii: f64,
}

#[derive(Debug, Clone)]
pub struct CZDecomposition {
    pub input: Field,
    pub level: f64,
    pub cubes: Vec<Cube>,
    pub good: Field,
    pub bad: Vec<BadAtom>,
    pub constants: CzConstants,
    /// Side of the tree leaves, in grid cells.
    pub leaf_cells: usize,
    /// Whether the support of `f`, widened by the side of the largest `5√n Q`,
    /// still fits inside the grid box. Diagnostic only.
    pub dilate_margin_ok: bool,
}

/// Cube in cell-index form: corner and side, both in cells.
#[derive(Debug, Clone)]
struct IndexCube {
    corner: Vec<usize>,
    side: usize,
}

impl IndexCube {
    fn ranges(&self) -> Vec<(usize, usize)> {
        self.corner.iter().map(|&a| (a, a + self.side)).collect()
    }

    fn to_cube(&self, f: &Field) -> Cube {
        let lo: Vec<f64> = self.corner.iter().enumerate().map(|(k, &a)| f.grid_line(k, a)).collect();
        Cube::from_corner(&lo, self.side as f64 * f.spacing()).expect("positive side")
    }

    fn children(&self) -> Vec<IndexCube> {
        let half = self.side / 2;
        let n = self.corner.len();
        let mut out = Vec::with_capacity(1 << n);
        for_each_in_ranges(&vec![(0, 2); n], |bits| {
            out.push(IndexCube {
                corner: self.corner.iter().zip(bits).map(|(&a, &b)| a + b * half).collect(),
                side: half,
            })
        });
        out
    }
}

fn cell_sum(f: &Field, q: &IndexCube, map: impl Fn(f64) -> f64) -> f64 {
    let mut terms = Vec::with_capacity(q.side.pow(f.n() as u32));
    for_each_in_ranges(&q.ranges(), |multi| terms.push(map(f.samples()[f.flat_index(multi)])));
    pairwise_sum(&terms)
}

/// Locates a cube of the tree on the grid of `f`. It has to sit on grid lines
/// with a power-of-two number of cells per side.
fn locate(f: &Field, cube: &Cube) -> Result<IndexCube> {
    if cube.n() != f.n() || !f.cube().contains_cube(cube) {
        return Err(Error::domain("root cube is not inside the grid box"));
    }
    let h = f.spacing();
    let to_index = |x: f64| -> Result<usize> {
        let t = x / h;
        if (t - t.round()).abs() > 1e-9 || t.round() < 0.0 {
            return Err(Error::domain("root cube is not aligned with the grid"));
        }
        Ok(t.round() as usize)
    };
    let side = to_index(cube.side())?;
    if side == 0 || !side.is_power_of_two() {
        return Err(Error::domain("root side must be a power-of-two number of cells"));
    }
    let corner = (0..f.n()).map(|k| to_index(cube.lo(k) - f.cube().lo(k))).collect::<Result<Vec<_>>>()?;
    Ok(IndexCube { corner, side })
}

fn inside(q: &IndexCube, multi: &[usize]) -> bool {
    q.corner.iter().zip(multi).all(|(&a, &i)| i >= a && i < a + q.side)
}

/// Dyadic stopping time from the root of `tree`: a cube is selected when the
/// average of `|f|` over it first exceeds `level`.
pub fn cz_decompose(f: &Field, level: f64, tree: &DyadicTree) -> Result<CZDecomposition> {
    if !(level > 0.0 && level.is_finite()) {
        return Err(Error::domain("level must be positive and finite"));
    }
    let root = locate(f, tree.root())?;
    let n = f.n();
    let mut outside = false;
    for i in 0..f.len() {
        if f.samples()[i] != 0.0 && !inside(&root, &f.multi_index(i)) {
            outside = true;
            break;
        }
    }
    if outside {
        return Err(Error::domain("input is not supported in the root cube"));
    }
    let root_cells = (root.side as f64).powi(n as i32);
    let root_avg = cell_sum(f, &root, f64::abs) / root_cells;
    if level <= root_avg {
        return Err(Error::Admissibility { level, average: root_avg });
    }
    let depth = tree.max_depth().min(root.side.trailing_zeros() as usize);
    let leaf_cells = root.side >> depth;

    let mut selected = Vec::new();
    let mut stack = vec![(root, 0usize)];
    while let Some((q, d)) = stack.pop() {
        if d == depth {
            continue;
        }
        // reversed so that the stack pops children in row-major order
        for child in q.children().into_iter().rev() {
            let cells = (child.side as f64).powi(n as i32);
            let avg = cell_sum(f, &child, f64::abs) / cells;
            if avg > level {
                selected.push(child);
            } else {
                stack.push((child, d + 1));
            }
        }
    }

    let mut good = f.samples().to_vec();
    let mut bad = Vec::with_capacity(selected.len());
    for q in &selected {
        let count = q.side.pow(n as u32);
        let avg = cell_sum(f, q, |v| v) / count as f64;
        let mut atom = Vec::with_capacity(count);
        for_each_in_ranges(&q.ranges(), |multi| {
            let idx = f.flat_index(multi);
            atom.push(f.samples()[idx] - avg);
            good[idx] = avg;
        });
        // one correction step for the rounding left in the atom mean
        let residual = pairwise_sum(&atom) / count as f64;
        if residual != 0.0 {
            let mut k = 0;
            for_each_in_ranges(&q.ranges(), |multi| {
                let idx = f.flat_index(multi);
                atom[k] -= residual;
                good[idx] += residual;
                k += 1;
            });
        }
        let cube = q.to_cube(f);
        bad.push(BadAtom { field: Field::new(cube.clone(), q.side, atom)?, cube });
    }
    let good = f.with_samples(good)?;
    let cubes: Vec<Cube> = bad.iter().map(|b| b.cube.clone()).collect();
    let constants = measure_constants(f, level, &good, &bad);
    let dilate_margin_ok = dilate_margin(f, &cubes);
    Ok(CZDecomposition { input: f.clone(), level, cubes, good, bad, constants, leaf_cells, dilate_margin_ok })
}

fn measure_constants(f: &Field, level: f64, good: &Field, bad: &[BadAtom]) -> CzConstants {
    let c_i = good.sup_norm() / level;
    let c_ii = bad.iter().map(|b| b.field.l1_norm() / (level * b.cube.volume())).fold(0.0, f64::max);
    let total: f64 = bad.iter().map(|b| b.cube.volume()).sum();
    let f1 = f.l1_norm();
    let c_iii = if f1 > 0.0 { level * total / f1 } else { 0.0 };
    CzConstants { c_i, c_ii, c_iii }
}

fn dilate_margin(f: &Field, cubes: &[Cube]) -> bool {
    let n = f.n();
    let widest = cubes.iter().map(|q| 5.0 * (n as f64).sqrt() * q.side()).fold(0.0, f64::max);
    if widest == 0.0 {
        return true;
    }
    let h = f.spacing();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for i in 0..f.len() {
        if f.samples()[i] != 0.0 {
            let x = f.node_coords(i);
            for k in 0..n {
                lo[k] = lo[k].min(x[k] - h / 2.0);
                hi[k] = hi[k].max(x[k] + h / 2.0);
            }
        }
    }
    (0..n).all(|k| lo[k] - widest >= f.cube().lo(k) - 1e-12 && hi[k] + widest <= f.cube().hi(k) + 1e-12)
}

/// Outcome of a successful validation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CzdValidation {
    pub properties: Vec<&'static str>,
    pub constants: CzConstants,
    /// Bound used for `‖g‖_∞`: `2ⁿ·level` when the tree reaches single cells.
    pub good_bound: f64,
    /// Largest `‖g‖_p / (‖g‖₁^{1/p}‖g‖_∞^{1−1/p})` over p ∈ {2, 4}.
    pub interpolation_ratio: f64,
}

fn cube_label(q: &Cube) -> String {
    format!("center={:?} side={}", q.center(), q.side())
}

fn violation(property: &str, cube: String) -> Error {
    Error::Validation { property: property.to_string(), cube }
}

/// Recomputes all decomposition properties from `d`.
pub fn czd_validate(d: &CZDecomposition) -> Result<CzdValidation> {
    let f = &d.input;
    let n = f.n();
    let level = d.level;
    let tol = 1e-12;
    if !d.good.same_grid(f) {
        return Err(violation("good-grid", "root".into()));
    }
    let h = f.spacing();
    let mut owner: Vec<Option<usize>> = vec![None; f.len()];
    let mut recon = d.good.samples().to_vec();
    for (k, atom) in d.bad.iter().enumerate() {
        let label = cube_label(&atom.cube);
        if atom.field.cube() != &atom.cube || (atom.field.spacing() - h).abs() > 1e-12 * h {
            return Err(violation("support", label));
        }
        let q = locate(f, &atom.cube).map_err(|_| violation("support", label.clone()))?;
        let mut j = 0;
        let mut clash = false;
        for_each_in_ranges(&q.ranges(), |multi| {
            let idx = f.flat_index(multi);
            if owner[idx].is_some() {
                clash = true;
            }
            owner[idx] = Some(k);
            recon[idx] += atom.field.samples()[j];
            j += 1;
        });
        if clash {
            return Err(violation("disjointness", label));
        }
        let b1: f64 = atom.field.samples().iter().map(|v| v.abs()).sum();
        let mean = pairwise_sum(atom.field.samples());
        if mean.abs() > tol * b1 {
            return Err(violation("zero-mean", label));
        }
        let norm = atom.field.l1_norm();
        if norm > 2.0 * 2f64.powi(n as i32) * level * atom.cube.volume() * (1.0 + tol) {
            return Err(violation("bad-l1-bound", label));
        }
    }
    let scale = f.sup_norm().max(1.0);
    for i in 0..f.len() {
        if (recon[i] - f.samples()[i]).abs() > tol * scale {
            let owner_label = owner[i].map_or_else(|| "outside".to_string(), |k| cube_label(&d.bad[k].cube));
            return Err(violation("reconstruction", owner_label));
        }
    }
    let mut good_bound = 2f64.powi(n as i32) * level;
    if d.leaf_cells > 1 {
        // coarse leaves never look below their own scale
        let off: f64 = (0..f.len()).filter(|&i| owner[i].is_none()).map(|i| f.samples()[i].abs()).fold(0.0, f64::max);
        good_bound = good_bound.max(off);
    }
    if d.good.sup_norm() > good_bound * (1.0 + tol) {
        let i = (0..f.len()).max_by(|&a, &b| d.good.samples()[a].abs().total_cmp(&d.good.samples()[b].abs())).unwrap();
        let label = owner[i].map_or_else(|| "outside".to_string(), |k| cube_label(&d.bad[k].cube));
        return Err(violation("good-sup-bound", label));
    }
    let total: f64 = d.bad.iter().map(|b| b.cube.volume()).sum();
    if total * level > f.l1_norm() * (1.0 + tol) {
        return Err(violation("measure-bound", "all".into()));
    }
    let g1 = d.good.l1_norm();
    let ginf = d.good.sup_norm();
    let mut interpolation_ratio: f64 = 0.0;
    if g1 > 0.0 {
        for p in [2.0, 4.0] {
            let bound = g1.powf(1.0 / p) * ginf.powf(1.0 - 1.0 / p);
            interpolation_ratio = interpolation_ratio.max(d.good.lp_norm(p) / bound);
        }
    }
    if interpolation_ratio > 1.0 + 1e-9 {
        return Err(violation("interpolation", "all".into()));
    }
    Ok(CzdValidation {
        properties: vec![
            "reconstruction",
            "support",
            "disjointness",
            "zero-mean",
            "good-sup-bound",
            "bad-l1-bound",
            "measure-bound",
            "interpolation",
        ],
        constants: measure_constants(f, level, &d.good, &d.bad),
        good_bound,
        interpolation_ratio,
    })
}

#[derive(Debug, Serialize)]
struct CubeRecord {
    center: Vec<f64>,
    side: f64,
    atom_csv: String,
}

#[derive(Debug, Serialize)]
struct DecompositionRecord {
    level: f64,
    constants: CzConstants,
    dilate_margin_ok: bool,
    good_csv: String,
    cubes: Vec<CubeRecord>,
}

/// Writes `<stem>.json`, `<stem>_good.csv` and one `<stem>_bad_<k>.csv` per atom into `dir`.
pub fn write_decomposition(d: &CZDecomposition, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let good_csv = format!("{stem}_good.csv");
    write_field_csv(&d.good, BufWriter::new(File::create(dir.join(&good_csv))?))?;
    let mut cubes = Vec::with_capacity(d.bad.len());
    for (k, atom) in d.bad.iter().enumerate() {
        let atom_csv = format!("{stem}_bad_{k}.csv");
        write_field_csv(&atom.field, BufWriter::new(File::create(dir.join(&atom_csv))?))?;
        cubes.push(CubeRecord { center: atom.cube.center().to_vec(), side: atom.cube.side(), atom_csv });
    }
    let record = DecompositionRecord {
        level: d.level,
        constants: d.constants,
        dilate_margin_ok: d.dilate_margin_ok,
        good_csv,
        cubes,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(format!("{stem}.json")))?), &record)?;
    Ok(())
}

/// `χ_[0,1)` on the root `[0,4)` at level 0.3, 64 cells.
pub fn demo_decomposition() -> Result<CZDecomposition> {
    let root = Cube::from_corner(&[0.0], 4.0)?;
    let f = Field::from_fn(root.clone(), 64, |x| if x[0] < 1.0 { 1.0 } else { 0.0 })?;
    cz_decompose(&f, 0.3, &DyadicTree::over_field(&f))
}

/// Plain-text description of a decomposition.
pub fn describe(d: &CZDecomposition) -> String {
    let mut out = format!("level {}\nselected cubes: {}\n", d.level, d.cubes.len());
    for q in &d.cubes {
        let lo: Vec<f64> = (0..q.n()).map(|k| q.lo(k)).collect();
        out.push_str(&format!("  corner {:?} side {}\n", lo, q.side()));
    }
    out.push_str(&format!(
        "‖g‖_∞ = {}\nΣ|Q| = {}\n‖f‖₁ = {}\nC_i = {}, C_ii = {}, C_iii = {}\n",
        d.good.sup_norm(),
        d.cubes.iter().map(Cube::volume).sum::<f64>(),
        d.input.l1_norm(),
        d.constants.c_i,
        d.constants.c_ii,
        d.constants.c_iii
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example() {
        let d = demo_decomposition().unwrap();
        assert_eq!(d.cubes.len(), 1);
        assert_eq!(d.cubes[0], Cube::from_corner(&[0.0], 2.0).unwrap());
        for i in 0..64 {
            let x = d.input.node_coords(i)[0];
            let g = d.good.samples()[i];
            assert_eq!(g, if x < 2.0 { 0.5 } else { 0.0 });
        }
        let b = &d.bad[0].field;
        for (j, v) in b.samples().iter().enumerate() {
            let x = b.node_coords(j)[0];
            assert_eq!(*v, if x < 1.0 { 0.5 } else { -0.5 });
        }
        assert!(d.good.sup_norm() <= 2.0 * 0.3);
        assert!(2.0 <= d.input.l1_norm() / 0.3);
        czd_validate(&d).unwrap();
    }

    /// Maximal dyadic cubes with average above the level, by scanning every generation.
    fn brute_force(f: &Field, level: f64) -> Vec<Cube> {
        let tree = DyadicTree::over_field(f);
        let mut chosen: Vec<Cube> = Vec::new();
        for depth in 1..=tree.max_depth() {
            for q in tree.enumerate(depth).unwrap() {
                if chosen.iter().any(|c| c.contains_cube(&q)) {
                    continue;
                }
                let avg = crate::grid::integrate_field(&f.map(f64::abs), &q).unwrap() / q.volume();
                if avg > level {
                    chosen.push(q);
                }
            }
        }
        chosen.sort_by(|a, b| a.center().partial_cmp(b.center()).unwrap());
        chosen
    }

    #[test]
    fn agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let samples: Vec<f64> =
                (0..64).map(|_| if rng.gen::<f64>() < 0.2 { rng.gen_range(-3.0..3.0) } else { 0.0 }).collect();
            let f = Field::new(Cube::from_corner(&[0.0], 4.0).unwrap(), 64, samples).unwrap();
            let level = 1.5 * f.l1_norm() / 4.0 + 1e-3;
            let d = cz_decompose(&f, level, &DyadicTree::over_field(&f)).unwrap();
            let mut got = d.cubes.clone();
            got.sort_by(|a, b| a.center().partial_cmp(b.center()).unwrap());
            assert_eq!(got, brute_force(&f, level));
        }
    }

    #[test]
    fn high_level_selects_nothing() {
        let f = Field::from_fn(Cube::from_corner(&[0.0], 4.0).unwrap(), 32, |x| x[0].sin()).unwrap();
        let d = cz_decompose(&f, f.sup_norm(), &DyadicTree::over_field(&f)).unwrap();
        assert!(d.bad.is_empty());
        assert_eq!(d.good, f);
    }

    #[test]
    fn zero_input() {
        let f = Field::zeros(Cube::centered(2, 1.0).unwrap(), 8).unwrap();
        let d = cz_decompose(&f, 1e-6, &DyadicTree::over_field(&f)).unwrap();
        assert!(d.bad.is_empty());
        assert!(d.good.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn admissibility_and_support_errors() {
        let f = Field::from_fn(Cube::from_corner(&[0.0], 4.0).unwrap(), 32, |_| 1.0).unwrap();
        assert!(matches!(cz_decompose(&f, 1.0, &DyadicTree::over_field(&f)), Err(Error::Admissibility { .. })));
        let sub = DyadicTree::new(Cube::from_corner(&[0.0], 2.0).unwrap(), 4);
        assert!(matches!(cz_decompose(&f, 5.0, &sub), Err(Error::Domain(_))));
    }

    #[test]
    fn tampered_atom_fails_zero_mean() {
        let mut d = demo_decomposition().unwrap();
        let mut samples = d.bad[0].field.samples().to_vec();
        samples.iter_mut().for_each(|v| *v += 0.01);
        d.bad[0].field = d.bad[0].field.with_samples(samples).unwrap();
        match czd_validate(&d) {
            Err(Error::Validation { property, .. }) => assert_eq!(property, "zero-mean"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_decomposition_passes_iff_bounded() {
        let f = Field::from_fn(Cube::from_corner(&[0.0], 4.0).unwrap(), 32, |x| if x[0] < 0.5 { 1.0 } else { 0.0 })
            .unwrap();
        let build = |level: f64| CZDecomposition {
            input: f.clone(),
            level,
            cubes: vec![],
            good: f.clone(),
            bad: vec![],
            constants: CzConstants { c_i: 0.0, c_ii: 0.0, c_iii: 0.0 },
            leaf_cells: 1,
            dilate_margin_ok: true,
        };
        assert!(czd_validate(&build(0.5)).is_ok());
        assert!(czd_validate(&build(0.49)).is_err());
    }

    #[test]
    fn coarse_tree_still_validates() {
        let f = Field::from_fn(Cube::from_corner(&[0.0], 4.0).unwrap(), 64, |x| (3.0 * x[0]).sin().max(0.0) * 4.0)
            .unwrap();
        let tree = DyadicTree::new(f.cube().clone(), 3);
        let d = cz_decompose(&f, 2.0, &tree).unwrap();
        assert_eq!(d.leaf_cells, 8);
        czd_validate(&d).unwrap();
    }

    #[test]
    fn json_export() {
        let d = demo_decomposition().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_decomposition(&d, dir.path(), "demo").unwrap();
        let text = std::fs::read_to_string(dir.path().join("demo.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["level"], 0.3);
        assert_eq!(v["cubes"][0]["side"], 2.0);
        assert!(dir.path().join("demo_bad_0.csv").exists());
    }

    fn random_field(n: usize, signed: bool) -> impl Strategy<Value = Field> {
        let res: usize = if n == 1 { 64 } else { 16 };
        let len = res.pow(n as u32);
        (prop::collection::vec(0.0f64..1.0, len), prop::collection::vec(-4.0f64..4.0, len)).prop_map(move |(mask, vals)| {
            let samples = mask
                .iter()
                .zip(&vals)
                .map(|(&m, &v)| if m < 0.3 { if signed { v } else { v.abs() } } else { 0.0 })
                .collect();
            Field::new(Cube::centered(n, 2.0).unwrap(), res, samples).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn random_decompositions_validate(
            f in prop_oneof![random_field(1, false), random_field(1, true), random_field(2, true)],
            factor in 1.01f64..20.0,
        ) {
            let root_avg = f.l1_norm() / f.cube().volume();
            let level = (root_avg * factor).max(1e-3);
            let d = cz_decompose(&f, level, &DyadicTree::over_field(&f)).unwrap();
            let report = czd_validate(&d).unwrap();
            let two_n = 2f64.powi(f.n() as i32);
            prop_assert!(report.constants.c_i <= two_n * (1.0 + 1e-12));
            prop_assert!(report.constants.c_ii <= 2.0 * two_n * (1.0 + 1e-12));
            prop_assert!(report.constants.c_iii <= 1.0 + 1e-12);
            // deterministic
            let again = cz_decompose(&f, level, &DyadicTree::over_field(&f)).unwrap();
            prop_assert_eq!(again.good, d.good);
        }
    }
}
