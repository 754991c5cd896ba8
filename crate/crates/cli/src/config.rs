//! Experiment configuration: a `key = value` grammar with `[section]` headers.
//!
//! ```text
//! # comment
//! experiment = theorem2-trend
//! seed = 7
//!
//! [problem]
//! domain = interval(-1, 1)
//! omega = interval(0.5, 0.8)
//! field = builtin(quadratic_potential)
//! T = 0.1
//! epsilons = [0.2, 0.1, 0.05, 0.025, 0.0125]
//! ```
//!
//! Values are numbers, bare words, double-quoted strings, bracketed lists or
//! calls such as `ball([0, 0], 0.25)`. Regions are `interval(a, b)`,
//! `box([lo..], [hi..])`, `ball([c..], r)` or `union(..)` of those; domains
//! are `interval(a, b)`, `rectangle([x0, y0], [x1, y1])` or `disk([cx, cy], r)`.
//! Fields are `builtin(name)` or `gradient("expression in x1, x2, t")`.
//!
//! Parsing collects every problem it finds, each tagged with its line, and
//! fills documented defaults for keys that are left out.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use vanishcost_core::costlab::Method;
use vanishcost_core::geometry::{Domain, Region, Shape};
use vanishcost_core::velocity::{builtin_field, make_gradient_field, ExprPotential, VelocityField};

/// Which experiment a configuration describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Flushing,
    Solve,
    Cost,
    Sweep,
    Hum,
    Agmon,
    Dissipation,
    Carleman,
    BlowupFit,
    Theorem1Trend,
    Theorem2Trend,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        ExperimentKind::Flushing,
        ExperimentKind::Solve,
        ExperimentKind::Cost,
        ExperimentKind::Sweep,
        ExperimentKind::Hum,
        ExperimentKind::Agmon,
        ExperimentKind::Dissipation,
        ExperimentKind::Carleman,
        ExperimentKind::BlowupFit,
        ExperimentKind::Theorem1Trend,
        ExperimentKind::Theorem2Trend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Flushing => "flushing",
            ExperimentKind::Solve => "solve",
            ExperimentKind::Cost => "cost",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Hum => "hum",
            ExperimentKind::Agmon => "agmon",
            ExperimentKind::Dissipation => "dissipation",
            ExperimentKind::Carleman => "carleman",
            ExperimentKind::BlowupFit => "blowup-fit",
            ExperimentKind::Theorem1Trend => "theorem1-trend",
            ExperimentKind::Theorem2Trend => "theorem2-trend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Sections that must be present for this kind, besides `[problem]`.
    fn required_sections(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Flushing => &["flushing"],
            ExperimentKind::Solve | ExperimentKind::Hum => &["data"],
            ExperimentKind::Agmon => &["data", "agmon"],
            ExperimentKind::Dissipation => &["dissipation"],
            ExperimentKind::Carleman => &["data", "carleman"],
            ExperimentKind::Theorem1Trend => &["flushing", "dissipation", "certificates"],
            ExperimentKind::Theorem2Trend => &["witness"],
            ExperimentKind::Cost | ExperimentKind::Sweep | ExperimentKind::BlowupFit => &[],
        }
    }

    fn needs_omega(self) -> bool {
        !matches!(self, ExperimentKind::Flushing | ExperimentKind::Solve | ExperimentKind::Agmon | ExperimentKind::Dissipation)
    }

    fn needs_horizon(self) -> bool {
        !matches!(self, ExperimentKind::Dissipation)
    }

    fn needs_epsilon(self) -> bool {
        matches!(
            self,
            ExperimentKind::Solve | ExperimentKind::Cost | ExperimentKind::Hum | ExperimentKind::Agmon | ExperimentKind::Carleman
        )
    }

    /// Kinds that fit ln K against 1/ε and therefore need four or more values.
    fn needs_epsilon_list(self) -> bool {
        matches!(
            self,
            ExperimentKind::Sweep | ExperimentKind::BlowupFit | ExperimentKind::Theorem1Trend | ExperimentKind::Theorem2Trend
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One located problem in a configuration file. Line 0 means the problem is
/// about the file as a whole (for example a section that is absent).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Num(f64),
    Word(String),
    Str(String),
    List(Vec<Value>),
    Call(String, Vec<Value>),
}

impl Value {
    fn describe(&self) -> &'static str {
        match self {
            Value::Num(_) => "a number",
            Value::Word(_) => "a word",
            Value::Str(_) => "a string",
            Value::List(_) => "a list",
            Value::Call(..) => "a call",
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), String> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            Some(x) => Err(format!("expected `{}`, found `{}`", c as char, x as char)),
            None => Err(format!("expected `{}` before the end of the line", c as char)),
        }
    }

    fn value(&mut self) -> Result<Value, String> {
        match self.peek() {
            None => Err("missing value".into()),
            Some(b'[') => {
                self.pos += 1;
                Ok(Value::List(self.items(b']')?))
            }
            Some(b'"') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos] != b'"' {
                    self.pos += 1;
                }
                if self.pos == self.src.len() {
                    return Err("unterminated string".into());
                }
                let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                self.pos += 1;
                Ok(Value::Str(s))
            }
            Some(c) if c.is_ascii_digit() || c == b'-' || c == b'+' || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    let sign = c == b'-' || c == b'+';
                    let lead_sign = sign && self.pos == start;
                    let exp_sign = sign && self.pos > start && matches!(self.src[self.pos - 1], b'e' | b'E');
                    if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign || lead_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Value::Num(v)),
                    _ => Err(format!("`{text}` is not a finite number")),
                }
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    if c.is_ascii_alphanumeric() || c == b'_' || c == b'-' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let word = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                if self.peek() == Some(b'(') {
                    self.pos += 1;
                    Ok(Value::Call(word, self.items(b')')?))
                } else {
                    Ok(Value::Word(word))
                }
            }
            Some(c) => Err(format!("unexpected character `{}`", c as char)),
        }
    }

    fn items(&mut self, close: u8) -> Result<Vec<Value>, String> {
        let mut out = Vec::new();
        if self.peek() == Some(close) {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(self.value()?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(c) if c == close => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => return self.expect(close).map(|_| out),
            }
        }
    }
}

/// Parses one value as written on the right of `=`.
pub fn parse_value(text: &str) -> Result<Value, String> {
    let mut lx = Lexer { src: text.as_bytes(), pos: 0 };
    let v = lx.value()?;
    if let Some(c) = lx.peek() {
        return Err(format!("unexpected `{}` after the value", c as char));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Raw document
// ---------------------------------------------------------------------------

const SCHEMA: &[(&str, &[&str])] = &[
    ("", &["experiment", "seed", "out"]),
    ("problem", &["domain", "omega", "field", "T", "epsilon", "epsilons"]),
    ("grid", &["cells", "steps", "theta", "policy_c", "min_cells", "max_cells"]),
    ("cost", &["method", "tol", "delta", "max_iter", "steer_tol", "full_k"]),
    ("flushing", &["target", "T0", "r0", "lattice_space", "lattice_time", "shell"]),
    ("data", &["kind", "center", "radius", "value", "expression"]),
    ("solve", &["equation", "tsv"]),
    ("agmon", &["x0", "r", "t1", "t2", "variant", "c_b", "hj_space", "hj_time", "hj_h"]),
    ("dissipation", &["omega0", "t0", "T0", "epsilons", "cells", "steps", "m", "kappa"]),
    ("carleman", &["omega_prime", "lambda", "s", "s1", "lambda1", "c_t", "eta_samples"]),
    ("certificates", &["flushing"]),
    ("witness", &["x0", "r0"]),
];

fn schema_keys(section: &str) -> Option<&'static [&'static str]> {
    SCHEMA.iter().find(|(s, _)| *s == section).map(|(_, k)| *k)
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn suggestion(word: &str, options: &[&str]) -> String {
    options
        .iter()
        .map(|o| (edit_distance(word, o), *o))
        .filter(|(d, _)| *d <= 2)
        .min()
        .map(|(_, o)| format!(" (did you mean `{o}`?)"))
        .unwrap_or_default()
}

#[derive(Clone, Debug)]
struct Entry {
    value: Value,
    line: usize,
}

#[derive(Clone, Debug, Default)]
struct Section {
    line: usize,
    entries: BTreeMap<String, Entry>,
}

fn read_document(text: &str, errors: &mut Vec<ConfigError>) -> BTreeMap<String, Section> {
    let mut doc: BTreeMap<String, Section> = BTreeMap::new();
    doc.insert(String::new(), Section::default());
    let mut current = String::new();
    let mut skipping = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw).trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                errors.push(ConfigError { line, message: format!("malformed section header `{body}`") });
                skipping = true;
                continue;
            };
            let name = name.trim();
            if schema_keys(name).is_none() || name.is_empty() {
                let names: Vec<&str> = SCHEMA.iter().skip(1).map(|(s, _)| *s).collect();
                errors.push(ConfigError { line, message: format!("unknown section [{name}]{}", suggestion(name, &names)) });
                skipping = true;
                continue;
            }
            if let Some(prev) = doc.get(name) {
                errors.push(ConfigError { line, message: format!("section [{name}] repeats the one at line {}", prev.line) });
                skipping = true;
                continue;
            }
            skipping = false;
            current = name.to_string();
            doc.insert(current.clone(), Section { line, entries: BTreeMap::new() });
            continue;
        }
        if skipping {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            errors.push(ConfigError { line, message: format!("expected `key = value`, found `{body}`") });
            continue;
        };
        let key = key.trim();
        let keys = schema_keys(&current).unwrap_or(&[]);
        if !keys.contains(&key) {
            let place = if current.is_empty() { "at the top level".to_string() } else { format!("in [{current}]") };
            errors.push(ConfigError { line, message: format!("unknown key `{key}` {place}{}", suggestion(key, keys)) });
            continue;
        }
        let value = match parse_value(value.trim()) {
            Ok(v) => v,
            Err(msg) => {
                errors.push(ConfigError { line, message: format!("`{key}`: {msg}") });
                continue;
            }
        };
        let section = doc.get_mut(&current).expect("section was inserted");
        if let Some(prev) = section.entries.get(key) {
            errors.push(ConfigError { line, message: format!("`{key}` is already set at line {}", prev.line) });
            continue;
        }
        section.entries.insert(key.to_string(), Entry { value, line });
    }
    doc
}

/// Drops a `#` comment that is not inside a string.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

// ---------------------------------------------------------------------------
// Typed blocks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum FieldSpec {
    Builtin(String),
    /// Potential f; the field is ∇f.
    Gradient(String),
}

impl FieldSpec {
    pub fn build(&self, dim: usize) -> vanishcost_core::Result<VelocityField> {
        match self {
            FieldSpec::Builtin(name) => builtin_field(name, dim),
            FieldSpec::Gradient(src) => Ok(make_gradient_field(Arc::new(ExprPotential::parse(src, dim)?))),
        }
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Builtin(n) => write!(f, "builtin({n})"),
            FieldSpec::Gradient(s) => write!(f, "gradient(\"{s}\")"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub domain: Domain,
    pub omega: Option<Region>,
    pub field: FieldSpec,
    pub t_end: Option<f64>,
    pub epsilon: Option<f64>,
    pub epsilons: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Cells per axis; one entry is repeated over all axes.
    pub cells: Vec<usize>,
    pub steps: usize,
    pub theta: f64,
    /// Sweep policy N = ceil(c/√ε), clamped to [min_cells, max_cells].
    pub policy_c: f64,
    pub min_cells: usize,
    pub max_cells: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { cells: vec![40], steps: 200, theta: 1.0, policy_c: 18.0, min_cells: 20, max_cells: 400 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub method: Method,
    pub tol: f64,
    pub delta: f64,
    pub max_iter: usize,
    pub steer_tol: f64,
    /// Also compute the full K next to the per-datum ratio in the blow-up trend.
    pub full_k: bool,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig { method: Method::Dense, tol: 1e-12, delta: 1e-12, max_iter: 500, steer_tol: 1e-6, full_k: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlushingConfig {
    pub target: Region,
    pub t0_window: f64,
    pub r0: f64,
    pub lattice_space: usize,
    pub lattice_time: usize,
    /// Ball samples per lattice cell; 0 picks the dimension default.
    pub shell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataKind {
    /// exp(−1/(1−q²)) with q = |x − c|/r, zero for q ≥ 1.
    Bump {
        center: Vec<f64>,
        radius: f64,
    },
    Constant {
        value: f64,
    },
    Expression {
        source: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Optional factor multiplying a bump, an expression in x1.., t = T.
    pub modulation: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Equation {
    Forward,
    Adjoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub equation: Equation,
    pub tsv: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { equation: Equation::Adjoint, tsv: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CbSetting {
    /// sup |∇·𝔅| measured on the domain.
    Auto,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgmonConfig {
    pub x0: Vec<f64>,
    pub r: f64,
    pub t1: f64,
    /// Defaults to T.
    pub t2: Option<f64>,
    /// "A1" or "A2".
    pub variant: String,
    pub c_b: CbSetting,
    pub hj_space: usize,
    pub hj_time: usize,
    pub hj_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissipationConfig {
    pub omega0: Region,
    /// Defaults to T0.
    pub t0: Option<f64>,
    pub t0_window: f64,
    /// Defaults to the problem's list.
    pub epsilons: Vec<f64>,
    pub cells: usize,
    pub steps: usize,
    /// Number of chained windows; None picks ⌊T/T0⌋.
    pub m: Option<usize>,
    /// Interior time fraction κ of the observability window estimate.
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SSetting {
    Threshold,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CtSetting {
    Auto,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarlemanConfig {
    pub omega_prime: Region,
    pub lambda: f64,
    pub s: SSetting,
    pub s1: f64,
    pub lambda1: f64,
    pub c_t: CtSetting,
    pub eta_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CertificateConfig {
    pub flushing: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WitnessConfig {
    pub x0: Vec<f64>,
    pub r0: f64,
}

/// A fully validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub cost: CostConfig,
    pub flushing: Option<FlushingConfig>,
    pub data: Option<DataConfig>,
    pub solve: SolveConfig,
    pub agmon: Option<AgmonConfig>,
    pub dissipation: Option<DissipationConfig>,
    pub carleman: Option<CarlemanConfig>,
    pub certificates: CertificateConfig,
    pub witness: Option<WitnessConfig>,
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.problem.domain.dim()
    }

    /// Cells per axis, with a single entry broadcast.
    pub fn resolution(&self) -> Vec<usize> {
        if self.grid.cells.len() == 1 {
            vec![self.grid.cells[0]; self.dim()]
        } else {
            self.grid.cells.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Typed reading
// ---------------------------------------------------------------------------

/// Typed access to one section. Every failed conversion is recorded and the
/// caller gets `None`, so one pass reports all problems.
struct Reader<'a> {
    name: &'a str,
    section: Option<&'a Section>,
    errors: &'a mut Vec<ConfigError>,
}

impl<'a> Reader<'a> {
    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.section.and_then(|s| s.entries.get(key))
    }

    fn header_line(&self) -> usize {
        self.section.map(|s| s.line).unwrap_or(0)
    }

    fn fail(&mut self, line: usize, key: &str, msg: impl fmt::Display) {
        self.errors.push(ConfigError { line, message: format!("`{key}`: {msg}") });
    }

    fn missing(&mut self, key: &str, why: &str) {
        let place = if self.name.is_empty() { String::new() } else { format!(" in [{}]", self.name) };
        self.errors.push(ConfigError { line: self.header_line(), message: format!("missing key `{key}`{place} ({why})") });
    }

    fn with<T>(&mut self, key: &str, conv: impl FnOnce(&Value) -> Result<T, String>) -> Option<T> {
        let e = self.entry(key)?;
        match conv(&e.value) {
            Ok(v) => Some(v),
            Err(msg) => {
                self.fail(e.line, key, msg);
                None
            }
        }
    }

    fn num(&mut self, key: &str) -> Option<f64> {
        self.with(key, as_num)
    }

    /// A number satisfying `ok`, described by `range` in the error.
    fn num_in(&mut self, key: &str, range: &str, ok: impl Fn(f64) -> bool) -> Option<f64> {
        let line = self.entry(key)?.line;
        let v = self.num(key)?;
        if ok(v) {
            Some(v)
        } else {
            self.fail(line, key, format!("{v} is out of range, expected {range}"));
            None
        }
    }

    fn positive(&mut self, key: &str) -> Option<f64> {
        self.num_in(key, "a value > 0", |v| v > 0.0)
    }

    fn count(&mut self, key: &str, min: usize) -> Option<usize> {
        let line = self.entry(key)?.line;
        let v = self.with(key, as_count)?;
        if v >= min {
            Some(v)
        } else {
            self.fail(line, key, format!("{v} is out of range, expected an integer >= {min}"));
            None
        }
    }

    fn word(&mut self, key: &str, options: &[&str]) -> Option<String> {
        let line = self.entry(key)?.line;
        let w = self.with(key, as_word)?;
        if options.contains(&w.as_str()) {
            Some(w)
        } else {
            self.fail(line, key, format!("`{w}` is not one of {}", options.join(", ")));
            None
        }
    }

    fn boolean(&mut self, key: &str) -> Option<bool> {
        self.word(key, &["true", "false"]).map(|w| w == "true")
    }

    fn point(&mut self, key: &str, dim: usize) -> Option<Vec<f64>> {
        let line = self.entry(key)?.line;
        let p = self.with(key, as_point)?;
        if p.len() == dim {
            Some(p)
        } else {
            self.fail(line, key, format!("expected {dim} coordinate(s), found {}", p.len()));
            None
        }
    }

    fn epsilon_list(&mut self, key: &str) -> Option<Vec<f64>> {
        let line = self.entry(key)?.line;
        let list = self.with(key, as_num_list)?;
        if list.is_empty() {
            self.fail(line, key, "the list is empty");
            return None;
        }
        if let Some(bad) = list.iter().find(|v| !(**v > 0.0)) {
            self.fail(line, key, format!("{bad} is out of range, expected values > 0"));
            return None;
        }
        let mut sorted = list.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            self.fail(line, key, "values must be distinct");
            return None;
        }
        Some(list)
    }

    fn region(&mut self, key: &str, dim: usize) -> Option<Region> {
        let line = self.entry(key)?.line;
        let r = self.with(key, as_region)?;
        if r.dim() == dim {
            Some(r)
        } else {
            self.fail(line, key, format!("region has dimension {}, the domain has {dim}", r.dim()));
            None
        }
    }
}

fn as_num(v: &Value) -> Result<f64, String> {
    match v {
        Value::Num(x) => Ok(*x),
        other => Err(format!("expected a number, found {}", other.describe())),
    }
}

fn as_count(v: &Value) -> Result<usize, String> {
    let x = as_num(v)?;
    if x >= 0.0 && x.fract() == 0.0 && x <= 1e12 {
        Ok(x as usize)
    } else {
        Err(format!("expected a nonnegative integer, found {x}"))
    }
}

fn as_word(v: &Value) -> Result<String, String> {
    match v {
        Value::Word(w) => Ok(w.clone()),
        other => Err(format!("expected a word, found {}", other.describe())),
    }
}

fn as_num_list(v: &Value) -> Result<Vec<f64>, String> {
    match v {
        Value::List(items) => items.iter().map(as_num).collect(),
        other => Err(format!("expected a list of numbers, found {}", other.describe())),
    }
}

/// A number or a list of numbers, both accepted for points.
fn as_point(v: &Value) -> Result<Vec<f64>, String> {
    match v {
        Value::Num(x) => Ok(vec![*x]),
        _ => as_num_list(v),
    }
}

fn call_args<'v>(v: &'v Value, what: &str) -> Result<(&'v str, &'v [Value]), String> {
    match v {
        Value::Call(name, args) => Ok((name.as_str(), args.as_slice())),
        other => Err(format!("expected {what}, found {}", other.describe())),
    }
}

fn arity(name: &str, args: &[Value], n: usize) -> Result<(), String> {
    if args.len() == n {
        Ok(())
    } else {
        Err(format!("`{name}` takes {n} argument(s), found {}", args.len()))
    }
}

fn as_shape(v: &Value) -> Result<Vec<Shape>, String> {
    let (name, args) = call_args(v, "a region such as interval(a, b)")?;
    match name {
        "interval" => {
            arity(name, args, 2)?;
            Ok(vec![Shape::Box { lo: vec![as_num(&args[0])?], hi: vec![as_num(&args[1])?] }])
        }
        "box" => {
            arity(name, args, 2)?;
            Ok(vec![Shape::Box { lo: as_point(&args[0])?, hi: as_point(&args[1])? }])
        }
        "ball" => {
            arity(name, args, 2)?;
            Ok(vec![Shape::Ball { center: as_point(&args[0])?, radius: as_num(&args[1])? }])
        }
        "union" => {
            let mut out = Vec::new();
            for a in args {
                out.extend(as_shape(a)?);
            }
            Ok(out)
        }
        other => Err(format!("unknown region `{other}`; use interval, box, ball or union")),
    }
}

fn as_region(v: &Value) -> Result<Region, String> {
    Region::union(as_shape(v)?).map_err(|e| e.to_string())
}

fn pair(v: &Value) -> Result<[f64; 2], String> {
    let p = as_point(v)?;
    if p.len() == 2 {
        Ok([p[0], p[1]])
    } else {
        Err(format!("expected 2 coordinates, found {}", p.len()))
    }
}

fn as_domain(v: &Value) -> Result<Domain, String> {
    let (name, args) = call_args(v, "a domain such as interval(-1, 1)")?;
    let d = match name {
        "interval" => {
            arity(name, args, 2)?;
            Domain::interval(as_num(&args[0])?, as_num(&args[1])?)
        }
        "rectangle" => {
            arity(name, args, 2)?;
            Domain::rectangle(pair(&args[0])?, pair(&args[1])?)
        }
        "disk" => {
            arity(name, args, 2)?;
            Domain::disk(pair(&args[0])?, as_num(&args[1])?)
        }
        other => return Err(format!("unknown domain `{other}`; use interval, rectangle or disk")),
    };
    d.map_err(|e| e.to_string())
}

fn as_field(v: &Value) -> Result<FieldSpec, String> {
    let (name, args) = call_args(v, "builtin(name) or gradient(\"expression\")")?;
    arity(name, args, 1)?;
    match (name, &args[0]) {
        ("builtin", Value::Word(w)) => Ok(FieldSpec::Builtin(w.clone())),
        ("gradient", Value::Str(s)) => Ok(FieldSpec::Gradient(s.clone())),
        ("gradient", _) => Err("gradient takes a quoted expression, e.g. gradient(\"x1^2/2\")".into()),
        ("builtin", _) => Err("builtin takes a field name, e.g. builtin(quadratic_potential)".into()),
        (other, _) => Err(format!("unknown field form `{other}`; use builtin or gradient")),
    }
}

/// Parses and validates a configuration, returning every located problem on
/// failure.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();
    let doc = read_document(text, &mut errors);
    let cfg = build(&doc, &mut errors);
    match cfg {
        Some(cfg) if errors.is_empty() => Ok(cfg),
        _ => {
            if errors.is_empty() {
                errors.push(ConfigError { line: 0, message: "configuration is incomplete".into() });
            }
            errors.sort_by_key(|e| e.line);
            Err(errors)
        }
    }
}

fn build(doc: &BTreeMap<String, Section>, errors: &mut Vec<ConfigError>) -> Option<ExperimentConfig> {
    let mut top = Reader { name: "", section: doc.get(""), errors };
    let kinds: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.as_str()).collect();
    let experiment = match top.entry("experiment") {
        None => {
            top.missing("experiment", &format!("one of {}", kinds.join(", ")));
            None
        }
        Some(_) => top.word("experiment", &kinds).and_then(|w| ExperimentKind::parse(&w)),
    };
    let seed = match top.entry("seed") {
        Some(_) => top.count("seed", 0).map(|v| v as u64),
        None => Some(0),
    };
    let out = top.with("out", |v| match v {
        Value::Str(s) => Ok(PathBuf::from(s)),
        Value::Word(w) => Ok(PathBuf::from(w)),
        other => Err(format!("expected a path, found {}", other.describe())),
    });

    if doc.get("problem").is_none() {
        errors.push(ConfigError { line: 0, message: "missing section [problem]".into() });
        return None;
    }
    if let Some(kind) = experiment {
        for s in kind.required_sections() {
            if !doc.contains_key(*s) {
                errors.push(ConfigError { line: 0, message: format!("missing section [{s}] required by experiment `{kind}`") });
            }
        }
    }

    let mut p = Reader { name: "problem", section: doc.get("problem"), errors };
    let domain = match p.entry("domain") {
        Some(_) => p.with("domain", as_domain),
        None => {
            p.missing("domain", "e.g. interval(-1, 1)");
            None
        }
    };
    let field = match p.entry("field") {
        Some(_) => p.with("field", as_field),
        None => {
            p.missing("field", "e.g. builtin(quadratic_potential)");
            None
        }
    };
    let dim = domain.as_ref().map(|d| d.dim()).unwrap_or(1);
    let omega = p.region("omega", dim);
    let t_end = p.positive("T");
    let epsilon = p.positive("epsilon");
    let epsilons = p.epsilon_list("epsilons").unwrap_or_default();
    if let Some(kind) = experiment {
        if kind.needs_omega() && p.entry("omega").is_none() {
            p.missing("omega", &format!("the control region is needed by `{kind}`"));
        }
        if kind.needs_horizon() && p.entry("T").is_none() {
            p.missing("T", &format!("the horizon is needed by `{kind}`"));
        }
        if kind.needs_epsilon() && p.entry("epsilon").is_none() {
            p.missing("epsilon", &format!("`{kind}` runs at a single diffusivity"));
        }
        if kind.needs_epsilon_list() {
            match p.entry("epsilons") {
                None => p.missing("epsilons", &format!("`{kind}` sweeps a list of diffusivities")),
                Some(e) if !epsilons.is_empty() && epsilons.len() < 4 => {
                    let line = e.line;
                    p.fail(
                        line,
                        "epsilons",
                        format!("`{kind}` fits ln K against 1/epsilon and needs at least 4 values, found {}", epsilons.len()),
                    );
                }
                _ => {}
            }
        }
    }
    if let (Some(d), Some(f)) = (&domain, &field) {
        if let Err(e) = f.build(d.dim()) {
            let line = doc["problem"].entries["field"].line;
            errors.push(ConfigError { line, message: format!("`field`: {e}") });
        }
    }

    let grid = read_grid(doc, errors, dim);
    let cost = read_cost(doc, errors);
    let flushing = doc.get("flushing").and_then(|s| read_flushing(s, errors, dim, t_end));
    let data = doc.get("data").and_then(|s| read_data(s, errors, dim));
    let solve = read_solve(doc, errors);
    let agmon = doc.get("agmon").and_then(|s| read_agmon(s, errors, dim, t_end));
    let dissipation = doc.get("dissipation").and_then(|s| read_dissipation(s, errors, dim, &epsilons));
    let carleman = doc.get("carleman").and_then(|s| read_carleman(s, errors, dim));
    let certificates = CertificateConfig {
        flushing: doc.get("certificates").and_then(|s| {
            let mut r = Reader { name: "certificates", section: Some(s), errors };
            match r.entry("flushing") {
                None => {
                    r.missing("flushing", "path of a flushing_report.txt");
                    None
                }
                Some(_) => r.with("flushing", |v| match v {
                    Value::Str(s) => Ok(PathBuf::from(s)),
                    other => Err(format!("expected a quoted path, found {}", other.describe())),
                }),
            }
        }),
    };
    let witness = doc.get("witness").and_then(|s| {
        let mut r = Reader { name: "witness", section: Some(s), errors };
        let x0 = r.point("x0", dim);
        let r0 = r.positive("r0");
        if r.entry("x0").is_none() {
            r.missing("x0", "anchor of the witness trajectory");
        }
        if r.entry("r0").is_none() {
            r.missing("r0", "radius of the datum support");
        }
        Some(WitnessConfig { x0: x0?, r0: r0? })
    });

    Some(ExperimentConfig {
        experiment: experiment?,
        seed: seed?,
        out,
        problem: ProblemConfig { domain: domain?, omega, field: field?, t_end, epsilon, epsilons },
        grid,
        cost,
        flushing,
        data,
        solve,
        agmon,
        dissipation,
        carleman,
        certificates,
        witness,
    })
}

fn read_grid(doc: &BTreeMap<String, Section>, errors: &mut Vec<ConfigError>, dim: usize) -> GridConfig {
    let mut g = GridConfig::default();
    let mut r = Reader { name: "grid", section: doc.get("grid"), errors };
    if let Some(e) = r.entry("cells") {
        let line = e.line;
        if let Some(c) = r.with("cells", as_point) {
            let ok = (c.len() == 1 || c.len() == dim) && c.iter().all(|x| *x >= 1.0 && x.fract() == 0.0);
            if ok {
                g.cells = c.iter().map(|x| *x as usize).collect();
            } else {
                r.fail(line, "cells", format!("expected 1 or {dim} integer(s) >= 1"));
            }
        }
    }
    if let Some(v) = r.count("steps", 2) {
        g.steps = v;
    }
    if let Some(v) = r.num_in("theta", "a value in [0, 1]", |v| (0.0..=1.0).contains(&v)) {
        g.theta = v;
    }
    if let Some(v) = r.positive("policy_c") {
        g.policy_c = v;
    }
    if let Some(v) = r.count("min_cells", 1) {
        g.min_cells = v;
    }
    if let Some(v) = r.count("max_cells", 1) {
        g.max_cells = v;
    }
    if g.min_cells > g.max_cells {
        let line = r.entry("max_cells").or(r.entry("min_cells")).map(|e| e.line).unwrap_or(0);
        r.fail(line, "max_cells", format!("max_cells = {} is below min_cells = {}", g.max_cells, g.min_cells));
    }
    g
}

fn read_cost(doc: &BTreeMap<String, Section>, errors: &mut Vec<ConfigError>) -> CostConfig {
    let mut c = CostConfig::default();
    let mut r = Reader { name: "cost", section: doc.get("cost"), errors };
    if let Some(w) = r.word("method", &["dense", "power", "auto"]) {
        c.method = match w.as_str() {
            "dense" => Method::Dense,
            "power" => Method::Power,
            _ => Method::Auto,
        };
    }
    if let Some(v) = r.num_in("tol", "a value in (0, 1)", |v| v > 0.0 && v < 1.0) {
        c.tol = v;
    }
    if let Some(v) = r.num_in("delta", "a value in (0, 1)", |v| v > 0.0 && v < 1.0) {
        c.delta = v;
    }
    if let Some(v) = r.count("max_iter", 1) {
        c.max_iter = v;
    }
    if let Some(v) = r.num_in("steer_tol", "a value in (0, 1)", |v| v > 0.0 && v < 1.0) {
        c.steer_tol = v;
    }
    if let Some(v) = r.boolean("full_k") {
        c.full_k = v;
    }
    c
}

fn read_flushing(s: &Section, errors: &mut Vec<ConfigError>, dim: usize, t_end: Option<f64>) -> Option<FlushingConfig> {
    let mut r = Reader { name: "flushing", section: Some(s), errors };
    for key in ["target", "T0", "r0"] {
        if r.entry(key).is_none() {
            r.missing(key, "needed by the flushing check");
        }
    }
    let target = r.region("target", dim);
    let t0_window = r.positive("T0");
    if let (Some(t0w), Some(t)) = (t0_window, t_end) {
        if t0w >= t {
            let line = r.entry("T0").map(|e| e.line).unwrap_or(0);
            r.fail(line, "T0", format!("{t0w} is out of range, expected 0 < T0 < T = {t}"));
        }
    }
    let r0 = r.positive("r0");
    let lattice_space = r.count("lattice_space", 2).unwrap_or(41);
    let lattice_time = r.count("lattice_time", 1).unwrap_or(9);
    let shell = r.count("shell", 0).unwrap_or(0);
    Some(FlushingConfig { target: target?, t0_window: t0_window?, r0: r0?, lattice_space, lattice_time, shell })
}

fn read_data(s: &Section, errors: &mut Vec<ConfigError>, dim: usize) -> Option<DataConfig> {
    let mut r = Reader { name: "data", section: Some(s), errors };
    let kind = r.word("kind", &["bump", "constant", "expression"]).unwrap_or_else(|| "bump".into());
    let modulation = r.with("expression", |v| match v {
        Value::Str(s) => Ok(s.clone()),
        other => Err(format!("expected a quoted expression, found {}", other.describe())),
    });
    if let Some(src) = &modulation {
        if let Err(e) = vanishcost_core::velocity::parse(src, dim) {
            let line = r.entry("expression").map(|e| e.line).unwrap_or(0);
            r.fail(line, "expression", e);
        }
    }
    let kind = match kind.as_str() {
        "bump" => {
            let center = r.point("center", dim);
            let radius = r.positive("radius");
            if r.entry("center").is_none() {
                r.missing("center", "centre of the bump");
            }
            if r.entry("radius").is_none() {
                r.missing("radius", "radius of the bump");
            }
            DataKind::Bump { center: center?, radius: radius? }
        }
        "constant" => DataKind::Constant { value: r.num("value").unwrap_or(1.0) },
        _ => match modulation.clone() {
            Some(source) => {
                return Some(DataConfig { kind: DataKind::Expression { source }, modulation: None });
            }
            None => {
                r.missing("expression", "kind = expression needs the datum");
                return None;
            }
        },
    };
    Some(DataConfig { kind, modulation })
}

fn read_solve(doc: &BTreeMap<String, Section>, errors: &mut Vec<ConfigError>) -> SolveConfig {
    let mut c = SolveConfig::default();
    let mut r = Reader { name: "solve", section: doc.get("solve"), errors };
    if let Some(w) = r.word("equation", &["forward", "adjoint"]) {
        c.equation = if w == "forward" { Equation::Forward } else { Equation::Adjoint };
    }
    if let Some(b) = r.boolean("tsv") {
        c.tsv = b;
    }
    c
}

fn read_agmon(s: &Section, errors: &mut Vec<ConfigError>, dim: usize, t_end: Option<f64>) -> Option<AgmonConfig> {
    let mut r = Reader { name: "agmon", section: Some(s), errors };
    for key in ["x0", "r"] {
        if r.entry(key).is_none() {
            r.missing(key, "needed to build the weight");
        }
    }
    let x0 = r.point("x0", dim);
    let radius = r.positive("r");
    let t1 = r.num_in("t1", "a value >= 0", |v| v >= 0.0).unwrap_or(0.0);
    let t2 = r.positive("t2");
    let hi = t2.or(t_end);
    if let Some(hi) = hi {
        if t1 >= hi {
            let line = r.entry("t1").map(|e| e.line).unwrap_or(0);
            r.fail(line, "t1", format!("{t1} is out of range, expected t1 < t2 = {hi}"));
        }
    }
    let variant = r.word("variant", &["A1", "A2"]).unwrap_or_else(|| "A2".into());
    let c_b = match r.entry("c_b").map(|e| &e.value) {
        Some(Value::Word(w)) if w == "auto" => CbSetting::Auto,
        Some(_) => CbSetting::Value(r.num_in("c_b", "a value >= 0", |v| v >= 0.0)?),
        None => CbSetting::Auto,
    };
    let hj_space = r.count("hj_space", 3).unwrap_or(199);
    let hj_time = r.count("hj_time", 1).unwrap_or(99);
    let hj_h = r.positive("hj_h").unwrap_or(1e-2);
    Some(AgmonConfig { x0: x0?, r: radius?, t1, t2, variant, c_b, hj_space, hj_time, hj_h })
}

fn read_dissipation(s: &Section, errors: &mut Vec<ConfigError>, dim: usize, fallback: &[f64]) -> Option<DissipationConfig> {
    let mut r = Reader { name: "dissipation", section: Some(s), errors };
    for key in ["omega0", "T0"] {
        if r.entry(key).is_none() {
            r.missing(key, "needed by the dissipation estimate");
        }
    }
    let omega0 = r.region("omega0", dim);
    let t0_window = r.positive("T0");
    let t0 = r.positive("t0");
    if let (Some(t0), Some(w)) = (t0, t0_window) {
        if t0 < w {
            let line = r.entry("t0").map(|e| e.line).unwrap_or(0);
            r.fail(line, "t0", format!("{t0} is out of range, expected t0 >= T0 = {w}"));
        }
    }
    let epsilons = match r.entry("epsilons") {
        Some(_) => r.epsilon_list("epsilons")?,
        None => fallback.to_vec(),
    };
    if epsilons.len() < 3 {
        r.missing("epsilons", "the fit of ln(ratio) against 1/epsilon needs at least 3 values");
    }
    let cells = r.count("cells", 4).unwrap_or(400);
    let steps = r.count("steps", 2).unwrap_or(400);
    let m = r.count("m", 1);
    let kappa = r.num_in("kappa", "a value in (0, 1)", |v| v > 0.0 && v < 1.0).unwrap_or(0.5);
    Some(DissipationConfig { omega0: omega0?, t0, t0_window: t0_window?, epsilons, cells, steps, m, kappa })
}

fn read_carleman(s: &Section, errors: &mut Vec<ConfigError>, dim: usize) -> Option<CarlemanConfig> {
    let mut r = Reader { name: "carleman", section: Some(s), errors };
    if r.entry("omega_prime").is_none() {
        r.missing("omega_prime", "inner region where the weight η peaks");
    }
    let omega_prime = r.region("omega_prime", dim);
    let lambda = r.num_in("lambda", "a value >= 1", |v| v >= 1.0).unwrap_or(2.0);
    let s_set = match r.entry("s").map(|e| &e.value) {
        Some(Value::Word(w)) if w == "threshold" => SSetting::Threshold,
        Some(_) => SSetting::Value(r.num_in("s", "a value >= 1 or `threshold`", |v| v >= 1.0)?),
        None => SSetting::Threshold,
    };
    let s1 = r.positive("s1").unwrap_or(1.0);
    let lambda1 = r.num_in("lambda1", "a value >= 1", |v| v >= 1.0).unwrap_or(1.0);
    let c_t = match r.entry("c_t").map(|e| &e.value) {
        Some(Value::Word(w)) if w == "auto" => CtSetting::Auto,
        Some(_) => CtSetting::Value(r.positive("c_t")?),
        None => CtSetting::Auto,
    };
    let eta_samples = r.count("eta_samples", 11).unwrap_or(2001);
    Some(CarlemanConfig { omega_prime: omega_prime?, lambda, s: s_set, s1, lambda1, c_t, eta_samples })
}

// ---------------------------------------------------------------------------
// Echo
// ---------------------------------------------------------------------------

/// Shortest text that parses back to the same f64.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

fn list(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|v| num(*v)).collect();
    format!("[{}]", items.join(", "))
}

pub fn domain_text(d: &Domain) -> String {
    match d {
        Domain::Interval { lo, hi } => format!("interval({}, {})", num(*lo), num(*hi)),
        Domain::Rectangle { lo, hi } => format!("rectangle({}, {})", list(lo), list(hi)),
        Domain::Disk { center, radius } => format!("disk({}, {})", list(center), num(*radius)),
    }
}

fn shape_text(s: &Shape) -> String {
    match s {
        Shape::Box { lo, hi } if lo.len() == 1 => format!("interval({}, {})", num(lo[0]), num(hi[0])),
        Shape::Box { lo, hi } => format!("box({}, {})", list(lo), list(hi)),
        Shape::Ball { center, radius } => format!("ball({}, {})", list(center), num(*radius)),
    }
}

pub fn region_text(r: &Region) -> String {
    match r.members() {
        [one] => shape_text(one),
        many => format!("union({})", many.iter().map(shape_text).collect::<Vec<_>>().join(", ")),
    }
}

impl ExperimentConfig {
    /// The configuration with every default filled in, in the input grammar.
    /// Parsing the echo gives back an equal configuration.
    pub fn echo(&self) -> String {
        let mut o = String::new();
        let kv = |o: &mut String, k: &str, v: String| {
            o.push_str(k);
            o.push_str(" = ");
            o.push_str(&v);
            o.push('\n');
        };
        kv(&mut o, "experiment", self.experiment.to_string());
        kv(&mut o, "seed", self.seed.to_string());
        if let Some(out) = &self.out {
            kv(&mut o, "out", format!("\"{}\"", out.display()));
        }
        let p = &self.problem;
        o.push_str("\n[problem]\n");
        kv(&mut o, "domain", domain_text(&p.domain));
        if let Some(w) = &p.omega {
            kv(&mut o, "omega", region_text(w));
        }
        kv(&mut o, "field", p.field.to_string());
        if let Some(t) = p.t_end {
            kv(&mut o, "T", num(t));
        }
        if let Some(e) = p.epsilon {
            kv(&mut o, "epsilon", num(e));
        }
        if !p.epsilons.is_empty() {
            kv(&mut o, "epsilons", list(&p.epsilons));
        }
        let g = &self.grid;
        o.push_str("\n[grid]\n");
        let cells: Vec<f64> = g.cells.iter().map(|c| *c as f64).collect();
        kv(&mut o, "cells", if cells.len() == 1 { g.cells[0].to_string() } else { list(&cells) });
        kv(&mut o, "steps", g.steps.to_string());
        kv(&mut o, "theta", num(g.theta));
        kv(&mut o, "policy_c", num(g.policy_c));
        kv(&mut o, "min_cells", g.min_cells.to_string());
        kv(&mut o, "max_cells", g.max_cells.to_string());
        let c = &self.cost;
        o.push_str("\n[cost]\n");
        kv(&mut o, "method", c.method.as_str().to_string());
        kv(&mut o, "tol", num(c.tol));
        kv(&mut o, "delta", num(c.delta));
        kv(&mut o, "max_iter", c.max_iter.to_string());
        kv(&mut o, "steer_tol", num(c.steer_tol));
        kv(&mut o, "full_k", c.full_k.to_string());
        if let Some(f) = &self.flushing {
            o.push_str("\n[flushing]\n");
            kv(&mut o, "target", region_text(&f.target));
            kv(&mut o, "T0", num(f.t0_window));
            kv(&mut o, "r0", num(f.r0));
            kv(&mut o, "lattice_space", f.lattice_space.to_string());
            kv(&mut o, "lattice_time", f.lattice_time.to_string());
            kv(&mut o, "shell", f.shell.to_string());
        }
        if let Some(d) = &self.data {
            o.push_str("\n[data]\n");
            match &d.kind {
                DataKind::Bump { center, radius } => {
                    kv(&mut o, "kind", "bump".into());
                    kv(&mut o, "center", list(center));
                    kv(&mut o, "radius", num(*radius));
                }
                DataKind::Constant { value } => {
                    kv(&mut o, "kind", "constant".into());
                    kv(&mut o, "value", num(*value));
                }
                DataKind::Expression { source } => {
                    kv(&mut o, "kind", "expression".into());
                    kv(&mut o, "expression", format!("\"{source}\""));
                }
            }
            if let Some(m) = &d.modulation {
                kv(&mut o, "expression", format!("\"{m}\""));
            }
        }
        o.push_str("\n[solve]\n");
        kv(&mut o, "equation", if self.solve.equation == Equation::Forward { "forward" } else { "adjoint" }.into());
        kv(&mut o, "tsv", self.solve.tsv.to_string());
        if let Some(a) = &self.agmon {
            o.push_str("\n[agmon]\n");
            kv(&mut o, "x0", list(&a.x0));
            kv(&mut o, "r", num(a.r));
            kv(&mut o, "t1", num(a.t1));
            if let Some(t2) = a.t2 {
                kv(&mut o, "t2", num(t2));
            }
            kv(&mut o, "variant", a.variant.clone());
            kv(
                &mut o,
                "c_b",
                match a.c_b {
                    CbSetting::Auto => "auto".into(),
                    CbSetting::Value(v) => num(v),
                },
            );
            kv(&mut o, "hj_space", a.hj_space.to_string());
            kv(&mut o, "hj_time", a.hj_time.to_string());
            kv(&mut o, "hj_h", num(a.hj_h));
        }
        if let Some(d) = &self.dissipation {
            o.push_str("\n[dissipation]\n");
            kv(&mut o, "omega0", region_text(&d.omega0));
            if let Some(t0) = d.t0 {
                kv(&mut o, "t0", num(t0));
            }
            kv(&mut o, "T0", num(d.t0_window));
            kv(&mut o, "epsilons", list(&d.epsilons));
            kv(&mut o, "cells", d.cells.to_string());
            kv(&mut o, "steps", d.steps.to_string());
            if let Some(m) = d.m {
                kv(&mut o, "m", m.to_string());
            }
            kv(&mut o, "kappa", num(d.kappa));
        }
        if let Some(c) = &self.carleman {
            o.push_str("\n[carleman]\n");
            kv(&mut o, "omega_prime", region_text(&c.omega_prime));
            kv(&mut o, "lambda", num(c.lambda));
            kv(
                &mut o,
                "s",
                match c.s {
                    SSetting::Threshold => "threshold".into(),
                    SSetting::Value(v) => num(v),
                },
            );
            kv(&mut o, "s1", num(c.s1));
            kv(&mut o, "lambda1", num(c.lambda1));
            kv(
                &mut o,
                "c_t",
                match c.c_t {
                    CtSetting::Auto => "auto".into(),
                    CtSetting::Value(v) => num(v),
                },
            );
            kv(&mut o, "eta_samples", c.eta_samples.to_string());
        }
        if let Some(path) = &self.certificates.flushing {
            o.push_str("\n[certificates]\n");
            kv(&mut o, "flushing", format!("\"{}\"", path.display()));
        }
        if let Some(w) = &self.witness {
            o.push_str("\n[witness]\n");
            kv(&mut o, "x0", list(&w.x0));
            kv(&mut o, "r0", num(w.r0));
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_FLUSHING: &str = "\
experiment = flushing

[problem]
domain = disk([0, 0], 1)
field = builtin(quadratic_potential)
T = 4

[flushing]
target = ball([0, 0], 0.25)
T0 = 2
r0 = 0.05
";

    #[test]
    fn minimal_flushing_config_fills_defaults_and_echoes() {
        let cfg = parse_config(MINIMAL_FLUSHING).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Flushing);
        let f = cfg.flushing.as_ref().unwrap();
        assert_eq!((f.lattice_space, f.lattice_time, f.shell), (41, 9, 0));
        assert_eq!(cfg.grid, GridConfig::default());
        let echo = cfg.echo();
        assert!(echo.contains("lattice_space = 41"));
        assert_eq!(parse_config(&echo).unwrap(), cfg);
    }

    #[test]
    fn misspelled_key_names_key_and_line() {
        let text = "experiment = cost\n[problem]\ndomain = interval(-1, 1)\nepsilonn = 0.1\n";
        let errs = parse_config(text).unwrap_err();
        let e = errs.iter().find(|e| e.message.contains("epsilonn")).unwrap();
        assert_eq!(e.line, 4);
        assert!(e.message.contains("did you mean `epsilon`"), "{e}");
    }

    #[test]
    fn negative_epsilon_is_a_range_error() {
        let text = "experiment = cost\n[problem]\ndomain = interval(-1, 1)\nomega = interval(-0.3, 0.3)\n\
                    field = builtin(zero)\nT = 1\nepsilon = -1\n";
        let errs = parse_config(text).unwrap_err();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(errs.iter().any(|e| e.line == 7 && e.message.contains("out of range")));
    }

    #[test]
    fn missing_section_and_type_mismatch_are_reported_together() {
        let text = "experiment = flushing\n[problem]\ndomain = interval(-1, 1)\nfield = builtin(zero)\nT = fast\n";
        let errs = parse_config(text).unwrap_err();
        assert!(errs.iter().any(|e| e.line == 0 && e.message.contains("[flushing]")));
        assert!(errs.iter().any(|e| e.line == 5 && e.message.contains("expected a number")));
    }

    #[test]
    fn short_epsilon_list_is_refused_for_trends() {
        let text = "experiment = theorem2-trend\n[problem]\ndomain = interval(-1, 1)\nomega = interval(0.5, 0.8)\n\
                    field = builtin(quadratic_potential)\nT = 0.1\nepsilons = [0.1]\n[witness]\nx0 = -0.5\nr0 = 0.05\n";
        let errs = parse_config(text).unwrap_err();
        assert!(errs.iter().any(|e| e.line == 7 && e.message.contains("at least 4")), "{errs:?}");
    }

    #[test]
    fn values_parse_nested_calls_and_strings() {
        assert_eq!(
            parse_value("union(ball([0, 0], 0.5), box([1, 1], [2, 3e-1]))").unwrap(),
            Value::Call(
                "union".into(),
                vec![
                    Value::Call("ball".into(), vec![Value::List(vec![Value::Num(0.0), Value::Num(0.0)]), Value::Num(0.5)]),
                    Value::Call(
                        "box".into(),
                        vec![
                            Value::List(vec![Value::Num(1.0), Value::Num(1.0)]),
                            Value::List(vec![Value::Num(2.0), Value::Num(0.3)])
                        ]
                    ),
                ]
            )
        );
        assert_eq!(
            parse_value("gradient(\"x1^2 # not a comment\")").unwrap(),
            Value::Call("gradient".into(), vec![Value::Str("x1^2 # not a comment".into())])
        );
        assert!(parse_value("[1, 2").is_err());
        assert!(parse_value("1 2").is_err());
    }

    #[test]
    fn unknown_field_name_is_located() {
        let text = "experiment = solve\n[problem]\ndomain = interval(-1, 1)\nfield = builtin(swirl)\nT = 1\nepsilon = 0.1\n[data]\nkind = constant\n";
        let errs = parse_config(text).unwrap_err();
        assert!(errs.iter().any(|e| e.line == 4 && e.message.contains("swirl")), "{errs:?}");
    }
}
