//! Run configuration and the audit/check runner behind the `sqlab` binary.
//!
//! The configuration is line oriented: `section.key = value`, with `#`
//! starting a comment. `kernel.label`, `audit.kind` and `check.id` each open a
//! new block; the keys that follow fill in that block.
//!
//! ```text
//! grid.resolution = 512
//! run.seed = 3
//!
//! kernel.label = smooth
//! kernel.family = smooth
//! kernel.m = 2
//!
//! check.id = endpoint_weak_type
//! check.kernel = smooth
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{
    audit_cz_conditions, audit_nonsmooth_assumption, Assumption, ConditionReport, CzAuditReport, CzSampling,
    HSampleSet, HSampling, KernelSpec,
};
use crate::stats::{self, Verdict};
use crate::verify::{run_check, CheckId, CheckSpec, VerificationReport, SUMMARY_HEADER};
use crate::weights::WeightSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelEntry {
    pub label: String,
    pub spec: KernelSpec,
    pub v_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditKind {
    /// Size and smoothness conditions of the kernel family.
    Cz,
    /// One assumption on the composition with the heat semigroup.
    Nonsmooth(Assumption),
}

impl AuditKind {
    pub fn as_str(self) -> String {
        match self {
            AuditKind::Cz => "cz".into(),
            AuditKind::Nonsmooth(a) => a.id().to_ascii_lowercase(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        if s == "cz" {
            Some(AuditKind::Cz)
        } else {
            Assumption::parse(s).map(AuditKind::Nonsmooth)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditItem {
    pub kind: AuditKind,
    pub kernel: String,
    /// Random geometries (cz) or samples per set (H assumptions).
    pub samples: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Audit(AuditItem),
    Check(Box<CheckSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kernels: Vec<KernelEntry>,
    /// Audits and checks in declaration order.
    pub items: Vec<Item>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

/// Errors found while parsing, each with its 1-based line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigErrors(pub Vec<(usize, String)>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (line, msg)) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "line {line}: {msg}")?;
        }
        Ok(())
    }
}

impl From<ConfigErrors> for Error {
    fn from(e: ConfigErrors) -> Self {
        Error::Config(e.to_string())
    }
}

const GRID_KEYS: &[&str] = &["n", "half_width", "resolution"];
const RUN_KEYS: &[&str] = &["out", "seed", "jobs"];
const KERNEL_KEYS: &[&str] = &["label", "family", "m", "defect", "t", "v_min", "v_max"];
const AUDIT_KEYS: &[&str] = &["kind", "kernel", "samples", "seed"];
const CHECK_KEYS: &[&str] = &[
    "id",
    "kernel",
    "count",
    "seed",
    "p",
    "ps",
    "delta",
    "eta",
    "epsilon",
    "radius",
    "weight",
    "resolution",
    "half_width",
    "delta_count",
    "single_delta",
    "tolerance",
    "negative_control",
];

/// A block of `key = value` lines opened by its first key.
#[derive(Debug, Default)]
struct Block {
    line: usize,
    entries: Vec<(usize, String, String)>,
}

impl Block {
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()))
    }
}

struct Collector {
    errors: Vec<(usize, String)>,
}

impl Collector {
    fn err(&mut self, line: usize, msg: impl Into<String>) {
        self.errors.push((line, msg.into()));
    }

    fn parse<T: std::str::FromStr>(&mut self, line: usize, key: &str, value: &str) -> Option<T> {
        match value.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.err(line, format!("invalid value `{value}` for `{key}`"));
                None
            }
        }
    }

    fn get<T: std::str::FromStr>(&mut self, block: &Block, section: &str, key: &str) -> Option<T> {
        let (line, value) = block.get(key)?;
        self.parse(line, &format!("{section}.{key}"), value)
    }
}

fn parse_weight(s: &str) -> Option<WeightSpec> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    match parts.as_slice() {
        ["const", v] => Some(WeightSpec::Constant { value: v.parse().ok()? }),
        ["power", a] => Some(WeightSpec::Power { a: a.parse().ok()? }),
        ["exp", amp, seed] => Some(WeightSpec::ExpPerturbed { amplitude: amp.parse().ok()?, seed: seed.parse().ok()? }),
        _ => None,
    }
}

/// Parses and validates a configuration; every problem is reported with its line.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, ConfigErrors> {
    parse_config_with_seed(text, None)
}

/// As [`parse_config`], with `seed` replacing `run.seed` (items that set
/// their own seed keep it).
pub fn parse_config_with_seed(text: &str, seed: Option<u64>) -> std::result::Result<RunConfig, ConfigErrors> {
    let mut c = Collector { errors: Vec::new() };
    let mut grid = Block::default();
    let mut run = Block::default();
    let mut kernels: Vec<Block> = Vec::new();
    // (is_check, block)
    let mut items: Vec<(bool, Block)> = Vec::new();
    let mut last: Option<&str> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            c.err(line, format!("expected `section.key = value`, found `{content}`"));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let Some((section, name)) = key.split_once('.') else {
            c.err(line, format!("key `{key}` has no section"));
            continue;
        };
        if value.is_empty() {
            c.err(line, format!("missing value for `{key}`"));
            continue;
        }
        let allowed = match section {
            "grid" => GRID_KEYS,
            "run" => RUN_KEYS,
            "kernel" => KERNEL_KEYS,
            "audit" => AUDIT_KEYS,
            "check" => CHECK_KEYS,
            _ => {
                c.err(line, format!("unknown section `{section}`"));
                continue;
            }
        };
        if !allowed.contains(&name) {
            c.err(line, format!("unknown key `{key}`"));
            continue;
        }
        let entry = (line, name.to_string(), value.to_string());
        let target = match (section, name) {
            ("grid", _) => &mut grid,
            ("run", _) => &mut run,
            ("kernel", "label") => {
                kernels.push(Block { line, entries: Vec::new() });
                kernels.last_mut().expect("just pushed")
            }
            ("audit", "kind") | ("check", "id") => {
                items.push((section == "check", Block { line, entries: Vec::new() }));
                last = Some(section);
                &mut items.last_mut().expect("just pushed").1
            }
            ("kernel", _) => match kernels.last_mut() {
                Some(b) => b,
                None => {
                    c.err(line, format!("`{key}` appears before any `kernel.label`"));
                    continue;
                }
            },
            _ => match (last, items.last_mut()) {
                (Some(s), Some((_, b))) if s == section => b,
                _ => {
                    let opener = if section == "check" { "check.id" } else { "audit.kind" };
                    c.err(line, format!("`{key}` appears outside a block opened by `{opener}`"));
                    continue;
                }
            },
        };
        if target.get(name).is_some() {
            c.err(line, format!("duplicate key `{key}`"));
            continue;
        }
        target.entries.push(entry);
    }

    let grid_n: usize = c.get(&grid, "grid", "n").unwrap_or(1);
    if grid_n == 0 {
        c.err(grid.get("n").map_or(0, |g| g.0), "grid.n must be at least 1");
    }
    let grid_half: Option<f64> = c.get(&grid, "grid", "half_width");
    let grid_res: Option<usize> = c.get(&grid, "grid", "resolution");
    let file_seed: Option<u64> = c.get(&run, "run", "seed");
    let seed = seed.or(file_seed).unwrap_or(1);
    let jobs: usize = c.get(&run, "run", "jobs").unwrap_or(1);
    if jobs == 0 {
        c.err(run.get("jobs").map_or(0, |g| g.0), "run.jobs must be at least 1");
    }
    let out = PathBuf::from(run.get("out").map_or("sqlab-out", |g| g.1));

    let mut entries: Vec<KernelEntry> = Vec::new();
    let mut labels = HashSet::new();
    for b in &kernels {
        let label = b.get("label").expect("opened by label").1.to_string();
        if !labels.insert(label.clone()) {
            c.err(b.line, format!("duplicate kernel label `{label}`"));
            continue;
        }
        let m: usize = c.get(b, "kernel", "m").unwrap_or(2);
        let m_line = b.get("m").map_or(b.line, |g| g.0);
        if m == 0 {
            c.err(m_line, "kernel.m must be at least 1");
            continue;
        }
        if grid_n * m > 4 {
            c.err(m_line, format!("kernel `{label}`: integration dimension exceeds 4 (n·m = {})", grid_n * m));
            continue;
        }
        let family = b.get("family").map_or("smooth", |g| g.1);
        let family_line = b.get("family").map_or(b.line, |g| g.0);
        let defect: Option<f64> = c.get(b, "kernel", "defect");
        let t: Option<f64> = c.get(b, "kernel", "t");
        let spec = match family {
            "smooth" => KernelSpec::Smooth { m, n: grid_n },
            "broken" => match defect {
                Some(defect) => KernelSpec::Broken { m, n: grid_n, defect },
                None => {
                    c.err(family_line, format!("kernel `{label}`: the broken family needs `kernel.defect`"));
                    continue;
                }
            },
            "nonsmooth" => KernelSpec::Nonsmooth { m, n: grid_n, t: t.unwrap_or(0.1) },
            other => {
                c.err(family_line, format!("unknown kernel family `{other}` (smooth, broken, nonsmooth)"));
                continue;
            }
        };
        if defect.is_some() && family != "broken" {
            c.err(b.get("defect").expect("present").0, "`kernel.defect` applies to the broken family only");
        }
        if t.is_some() && family != "nonsmooth" {
            c.err(b.get("t").expect("present").0, "`kernel.t` applies to the nonsmooth family only");
        }
        let v_min: Option<f64> = c.get(b, "kernel", "v_min");
        let v_max: Option<f64> = c.get(b, "kernel", "v_max");
        let v_range = match (v_min, v_max) {
            (None, None) => None,
            (Some(lo), Some(hi)) if lo > 0.0 && hi > lo && hi.is_finite() => Some([lo, hi]),
            _ => {
                c.err(b.line, format!("kernel `{label}`: need both v_min and v_max with 0 < v_min < v_max"));
                None
            }
        };
        entries.push(KernelEntry { label, spec, v_range });
    }

    let mut parsed_items = Vec::new();
    for (is_check, b) in &items {
        let kernel_ref = b.get("kernel");
        let kernel = match kernel_ref {
            Some((line, label)) => match entries.iter().find(|k| k.label == label) {
                Some(k) => Some(k.clone()),
                None => {
                    if labels.contains(label) {
                        // the kernel block itself was invalid and already reported
                        None
                    } else {
                        c.err(line, format!("unknown kernel label `{label}`"));
                        continue;
                    }
                }
            },
            None => None,
        };
        let item_seed: u64 = c.get(b, if *is_check { "check" } else { "audit" }, "seed").unwrap_or(seed);
        if !is_check {
            let (kind_line, kind_str) = b.get("kind").expect("opened by kind");
            let Some(kind) = AuditKind::parse(kind_str) else {
                c.err(kind_line, format!("unknown audit kind `{kind_str}` (cz, h1, h2-size, h2-smooth, h3)"));
                continue;
            };
            let Some(k) = kernel else {
                if kernel_ref.is_none() {
                    c.err(b.line, "an audit needs `audit.kernel`");
                }
                continue;
            };
            let samples: Option<usize> = c.get(b, "audit", "samples");
            parsed_items.push(Item::Audit(AuditItem { kind, kernel: k.label, samples, seed: item_seed }));
            continue;
        }
        let (id_line, id_str) = b.get("id").expect("opened by id");
        let id: CheckId = match id_str.parse() {
            Ok(id) => id,
            Err(_) => {
                c.err(id_line, format!("unknown check id `{id_str}`"));
                continue;
            }
        };
        let mut spec = CheckSpec::new(id);
        spec.seed = item_seed;
        spec.grid.n = grid_n;
        spec.kernel = spec.kernel.with_dims(spec.m(), grid_n);
        spec.kernel_label = format!("smooth-m{}-n{grid_n}", spec.m());
        if let Some(k) = &kernel {
            spec.kernel = k.spec.clone();
            spec.kernel_label = k.label.clone();
            spec.v_range = k.v_range;
        } else if kernel_ref.is_some() {
            continue;
        }
        if let Some(h) = grid_half {
            spec.grid.half_width = h;
        }
        if let Some(r) = grid_res {
            spec.grid.resolution = r;
        }
        if let Some(r) = c.get(b, "check", "resolution") {
            spec.grid.resolution = r;
        }
        if let Some(h) = c.get(b, "check", "half_width") {
            spec.grid.half_width = h;
        }
        if let Some(v) = c.get(b, "check", "count") {
            spec.count = v;
        }
        if let Some(v) = c.get::<f64>(b, "check", "p") {
            spec.exponents.p = Some(v);
        }
        if let Some((line, v)) = b.get("ps") {
            let ps: std::result::Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match ps {
                Ok(ps) => spec.exponents.ps = ps,
                Err(_) => c.err(line, format!("invalid value `{v}` for `check.ps` (comma-separated numbers)")),
            }
        }
        if let Some(v) = c.get(b, "check", "delta") {
            spec.exponents.delta = Some(v);
        }
        if let Some(v) = c.get(b, "check", "eta") {
            spec.exponents.eta = Some(v);
        }
        if let Some(v) = c.get(b, "check", "epsilon") {
            spec.exponents.epsilon = Some(v);
        }
        if let Some(v) = c.get(b, "check", "radius") {
            spec.exponents.radius = Some(v);
        }
        if let Some((line, v)) = b.get("weight") {
            match parse_weight(v) {
                Some(w) => spec.weight = Some(w),
                None => c.err(line, format!("invalid weight `{v}` (const:<c>, power:<a>, exp:<amplitude>:<seed>)")),
            }
        }
        if let Some(v) = c.get(b, "check", "delta_count") {
            spec.delta_count = v;
        }
        if let Some(v) = c.get(b, "check", "single_delta") {
            spec.single_delta = Some(v);
        }
        if let Some(v) = c.get(b, "check", "tolerance") {
            spec.stability_tolerance = v;
        }
        if let Some(v) = c.get(b, "check", "negative_control") {
            spec.negative_control = v;
        }
        if !id.single_input() && grid_n * spec.m() > 4 {
            c.err(id_line, "integration dimension exceeds 4");
            continue;
        }
        parsed_items.push(Item::Check(Box::new(spec)));
    }

    if c.errors.is_empty() {
        Ok(RunConfig { kernels: entries, items: parsed_items, out, seed, jobs })
    } else {
        c.errors.sort_by_key(|e| e.0);
        Err(ConfigErrors(c.errors))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Audit,
    Check,
    Run,
}

/// One `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub check_id: String,
    pub kernel: String,
    pub verdict: Verdict,
    pub constant: f64,
    pub stability: f64,
    pub wall_seconds: f64,
}

impl SummaryRow {
    fn from_report(r: &VerificationReport) -> Self {
        let line = r.csv_line(false);
        let kernel = line.split(',').nth(1).unwrap_or_default().to_string();
        Self {
            check_id: r.id.to_string(),
            kernel,
            verdict: r.verdict,
            constant: r.constant,
            stability: r.stability,
            wall_seconds: r.wall_seconds,
        }
    }

    /// Wall time is left out (written as 0) so reruns are byte-identical.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6e},{:.6e},0",
            self.check_id, self.kernel, self.verdict, self.constant, self.stability
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<SummaryRow>,
    pub exit_code: i32,
}

/// 0 when every verdict is PASS, 1 if any FAIL, 2 if any ERROR.
pub fn exit_code(verdicts: impl IntoIterator<Item = Verdict>) -> i32 {
    match verdicts.into_iter().fold(Verdict::Pass, Verdict::and) {
        Verdict::Pass => 0,
        Verdict::Fail => 1,
        Verdict::Error => 2,
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum AuditOutput {
    Cz(CzAuditReport),
    Condition(ConditionReport),
}

#[derive(Serialize)]
struct AuditJson {
    kind: String,
    kernel: String,
    seed: u64,
    verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<AuditOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct CheckErrorJson<'a> {
    id: CheckId,
    kernel: &'a str,
    spec: &'a CheckSpec,
    verdict: Verdict,
    error: String,
}

fn run_audit(cfg: &RunConfig, a: &AuditItem) -> (SummaryRow, AuditJson) {
    let start = Instant::now();
    let entry = cfg.kernels.iter().find(|k| k.label == a.kernel).expect("validated label");
    let result: Result<AuditOutput> = match a.kind {
        AuditKind::Cz => entry.spec.build(&entry.label).and_then(|k| {
            let mut s = CzSampling { seed: a.seed, ..CzSampling::default() };
            if let Some(g) = a.samples {
                s.geometries = g;
            }
            audit_cz_conditions(k.as_ref(), &s).map(AuditOutput::Cz)
        }),
        AuditKind::Nonsmooth(which) => entry.spec.composed().and_then(|ck| {
            let ck = if which == Assumption::H1 { ck.with_slot(1)? } else { ck };
            let mut s = HSampling { seed: a.seed, ..HSampling::default() };
            if let Some(count) = a.samples {
                s.count = count;
            }
            let set = HSampleSet::generate(&ck, which, &s)?;
            audit_nonsmooth_assumption(&ck, which, &set).map(AuditOutput::Condition)
        }),
    };
    let (verdict, constant, stability, report, error) = match result {
        Ok(AuditOutput::Cz(r)) => {
            let parts = [&r.size, &r.smooth_x, &r.smooth_y];
            let c = stats::max_of(parts.iter().map(|p| p.measured_constant));
            let s = stats::max_of(parts.iter().map(|p| p.stability));
            (r.verdict(), c, s, Some(AuditOutput::Cz(r)), None)
        }
        Ok(AuditOutput::Condition(r)) => {
            (r.verdict, r.measured_constant, r.stability, Some(AuditOutput::Condition(r)), None)
        }
        Err(e) => (Verdict::Error, f64::NAN, f64::NAN, None, Some(e.to_string())),
    };
    let kind = a.kind.as_str();
    let wall = start.elapsed().as_secs_f64();
    let row = SummaryRow {
        check_id: format!("audit-{kind}"),
        kernel: entry.label.clone(),
        verdict,
        constant,
        stability,
        wall_seconds: wall,
    };
    let kernel = entry.label.clone();
    (row, AuditJson { kind, kernel, seed: a.seed, verdict, report, error, wall_seconds: wall })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Runs the selected items in declaration order, writing one JSON report per
/// item and `summary.csv` under `cfg.out`. `only` restricts the checks to the
/// listed ids (audits are unaffected).
pub fn run_all(cfg: &RunConfig, mode: Mode, only: Option<&[CheckId]>) -> Result<RunOutcome> {
    fs::create_dir_all(&cfg.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {} worker threads: {e}", cfg.jobs)))?;
    let mut rows = Vec::new();
    for (index, item) in cfg.items.iter().enumerate() {
        match item {
            Item::Audit(a) if mode != Mode::Check => {
                let (row, json) = pool.install(|| run_audit(cfg, a));
                let path = cfg.out.join(format!("{:02}-audit-{}-{}.json", index + 1, json.kind, a.kernel));
                write_json(&path, &json)?;
                rows.push(row);
            }
            Item::Check(spec) if mode != Mode::Audit => {
                if only.is_some_and(|ids| !ids.contains(&spec.id)) {
                    continue;
                }
                let path = cfg.out.join(format!("{:02}-{}.json", index + 1, spec.id));
                match pool.install(|| run_check(spec)) {
                    Ok(report) => {
                        write_json(&path, &report)?;
                        rows.push(SummaryRow::from_report(&report));
                    }
                    Err(e) => {
                        let json = CheckErrorJson {
                            id: spec.id,
                            kernel: &spec.kernel_label,
                            spec,
                            verdict: Verdict::Error,
                            error: e.to_string(),
                        };
                        write_json(&path, &json)?;
                        rows.push(SummaryRow {
                            check_id: spec.id.to_string(),
                            kernel: spec.kernel_label.clone(),
                            verdict: Verdict::Error,
                            constant: f64::NAN,
                            stability: f64::NAN,
                            wall_seconds: 0.0,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    let mut w = BufWriter::new(File::create(cfg.out.join("summary.csv"))?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in &rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    let exit_code = exit_code(rows.iter().map(|r| r.verdict));
    Ok(RunOutcome { rows, exit_code })
}
