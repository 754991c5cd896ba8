//! Certificate files: the flushing report that downstream commands consume,
//! and the inline boundary-sign and witness-trajectory certificates.
//!
//! A flushing certificate is written in the configuration grammar, so the
//! same value parser reads it back:
//!
//! ```text
//! kind = flushing
//! field = builtin(quadratic_potential)
//! domain = interval(-1.0, 1.0)
//! target = interval(-0.25, 0.25)
//! T = 8.0
//! ...
//! cell = entry([x], t0, t_star, a, b, measure)
//! cell = none([x], t0)
//! witness = witness([x], t0, r0, shell)
//! path = [t, x1, ..]
//! ```

use std::fmt::Write as _;
use std::path::Path;

use vanishcost_core::flow::{
    integrate_flow, CellOutcome, CommonEntry, FlowOptions, FlushingReport, LatticeInfo, Verdict, Witness,
};
use vanishcost_core::geometry::{Domain, Region};
use vanishcost_core::io::fmt17;
use vanishcost_core::velocity::{field_norms, Sampling, VelocityField};

use crate::config::{domain_text, num, parse_value, region_text, FieldSpec, Value};
use crate::error::{CliError, CliResult};

/// A flushing report together with the problem it certifies.
#[derive(Clone, Debug, PartialEq)]
pub struct FlushingCertificate {
    pub field: String,
    pub domain: String,
    pub target: String,
    pub report: FlushingReport,
}

fn list(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|v| num(*v)).collect();
    format!("[{}]", items.join(", "))
}

impl FlushingCertificate {
    pub fn new(field: &FieldSpec, domain: &Domain, target: &Region, report: FlushingReport) -> Self {
        FlushingCertificate { field: field.to_string(), domain: domain_text(domain), target: region_text(target), report }
    }

    pub fn to_text(&self) -> String {
        let r = &self.report;
        let mut s = String::from("# flushing certificate; read back by commands that need the flushing condition\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("kind", "flushing".into());
        kv("field", self.field.clone());
        kv("domain", self.domain.clone());
        kv("target", self.target.clone());
        kv("T", num(r.t_end));
        kv("T0", num(r.t0_window));
        kv("r0", num(r.r0));
        kv("verdict", r.verdict.as_str().into());
        kv("lattice_space_points", r.lattice.space_points.to_string());
        kv("lattice_per_axis", r.lattice.per_axis.to_string());
        kv("lattice_time_points", r.lattice.time_points.to_string());
        kv("lattice_shell", r.lattice.shell.to_string());
        kv("lattice_spacing", num(r.lattice.spacing));
        kv("satisfied_cells", r.satisfied_cells.to_string());
        kv("min_window_measure", num(r.min_window_measure));
        for w in &r.warnings {
            kv("warning", format!("\"{}\"", w.replace('"', "'")));
        }
        for c in &r.cells {
            let v = match &c.entry {
                Some(e) => format!(
                    "entry({}, {}, {}, {}, {}, {})",
                    list(&c.x0),
                    num(c.t0),
                    num(e.t_star),
                    num(e.window.0),
                    num(e.window.1),
                    num(e.measure)
                ),
                None => format!("none({}, {})", list(&c.x0), num(c.t0)),
            };
            kv("cell", v);
        }
        for w in &r.witnesses {
            kv("witness", format!("witness({}, {}, {}, {})", list(&w.x0), num(w.t0), num(w.r0), w.shell));
            for (t, x) in &w.path {
                let mut row = vec![*t];
                row.extend_from_slice(x);
                kv("path", list(&row));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut field = None;
        let mut domain = None;
        let mut target = None;
        let mut nums: std::collections::BTreeMap<&str, f64> = Default::default();
        let mut verdict = None;
        let mut warnings = Vec::new();
        let mut cells = Vec::new();
        let mut witnesses: Vec<Witness> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: String| format!("line {}: {m}", idx + 1);
            let (key, rest) = line.split_once('=').ok_or_else(|| at("expected `key = value`".into()))?;
            let key = key.trim();
            let rest = rest.trim();
            match key {
                "kind" if rest == "flushing" => {}
                "kind" => return Err(at(format!("not a flushing certificate (kind = {rest})"))),
                "field" => field = Some(rest.to_string()),
                "domain" => domain = Some(rest.to_string()),
                "target" => target = Some(rest.to_string()),
                "verdict" => {
                    verdict = Some(match rest {
                        "satisfied" => Verdict::Satisfied,
                        "violated" => Verdict::Violated,
                        "inconclusive" => Verdict::Inconclusive,
                        other => return Err(at(format!("unknown verdict `{other}`"))),
                    })
                }
                "warning" => match parse_value(rest).map_err(&at)? {
                    Value::Str(s) => warnings.push(s),
                    _ => return Err(at("warning must be a quoted string".into())),
                },
                "cell" => cells.push(parse_cell(&parse_value(rest).map_err(&at)?).map_err(&at)?),
                "witness" => witnesses.push(parse_witness(&parse_value(rest).map_err(&at)?).map_err(&at)?),
                "path" => {
                    let row = numbers(&parse_value(rest).map_err(&at)?).map_err(&at)?;
                    let w = witnesses.last_mut().ok_or_else(|| at("path before any witness".into()))?;
                    if row.len() != w.x0.len() + 1 {
                        return Err(at("path row has the wrong length".into()));
                    }
                    w.path.push((row[0], row[1..].to_vec()));
                }
                "T"
                | "T0"
                | "r0"
                | "lattice_space_points"
                | "lattice_per_axis"
                | "lattice_time_points"
                | "lattice_shell"
                | "lattice_spacing"
                | "satisfied_cells"
                | "min_window_measure" => {
                    let v: f64 = rest.parse().map_err(|_| at(format!("`{key}` is not a number")))?;
                    let slot = [
                        "T",
                        "T0",
                        "r0",
                        "lattice_space_points",
                        "lattice_per_axis",
                        "lattice_time_points",
                        "lattice_shell",
                        "lattice_spacing",
                        "satisfied_cells",
                        "min_window_measure",
                    ]
                    .into_iter()
                    .find(|k| *k == key)
                    .expect("key is listed");
                    nums.insert(slot, v);
                }
                other => return Err(at(format!("unknown key `{other}`"))),
            }
        }
        let get = |k: &str| nums.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
        let report = FlushingReport {
            verdict: verdict.ok_or("missing `verdict`")?,
            t_end: get("T")?,
            t0_window: get("T0")?,
            r0: get("r0")?,
            lattice: LatticeInfo {
                space_points: get("lattice_space_points")? as usize,
                per_axis: get("lattice_per_axis")? as usize,
                time_points: get("lattice_time_points")? as usize,
                shell: get("lattice_shell")? as usize,
                spacing: get("lattice_spacing")?,
            },
            cells,
            witnesses,
            satisfied_cells: get("satisfied_cells")? as usize,
            min_window_measure: get("min_window_measure")?,
            warnings,
        };
        Ok(FlushingCertificate {
            field: field.ok_or("missing `field`")?,
            domain: domain.ok_or("missing `domain`")?,
            target: target.ok_or("missing `target`")?,
            report,
        })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn numbers(v: &Value) -> Result<Vec<f64>, String> {
    match v {
        Value::List(items) => items
            .iter()
            .map(|i| match i {
                Value::Num(x) => Ok(*x),
                _ => Err("expected numbers".to_string()),
            })
            .collect(),
        Value::Num(x) => Ok(vec![*x]),
        _ => Err("expected a list of numbers".into()),
    }
}

fn scalar(v: &Value) -> Result<f64, String> {
    match v {
        Value::Num(x) => Ok(*x),
        _ => Err("expected a number".into()),
    }
}

fn parse_cell(v: &Value) -> Result<CellOutcome, String> {
    match v {
        Value::Call(name, args) if name == "entry" && args.len() == 6 => Ok(CellOutcome {
            x0: numbers(&args[0])?,
            t0: scalar(&args[1])?,
            entry: Some(CommonEntry {
                t_star: scalar(&args[2])?,
                window: (scalar(&args[3])?, scalar(&args[4])?),
                measure: scalar(&args[5])?,
            }),
        }),
        Value::Call(name, args) if name == "none" && args.len() == 2 => {
            Ok(CellOutcome { x0: numbers(&args[0])?, t0: scalar(&args[1])?, entry: None })
        }
        _ => Err("cell must be entry([x], t0, t_star, a, b, measure) or none([x], t0)".into()),
    }
}

fn parse_witness(v: &Value) -> Result<Witness, String> {
    match v {
        Value::Call(name, args) if name == "witness" && args.len() == 4 => Ok(Witness {
            x0: numbers(&args[0])?,
            t0: scalar(&args[1])?,
            r0: scalar(&args[2])?,
            shell: scalar(&args[3])? as usize,
            path: Vec::new(),
        }),
        _ => Err("witness must be witness([x], t0, r0, shell)".into()),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Loads the flushing certificate at `path` and checks that it is satisfied
/// and was issued for this field, domain, target and (T, T₀, r₀).
pub fn require_flushing(
    path: Option<&Path>,
    producer: &str,
    field: &FieldSpec,
    domain: &Domain,
    target: &Region,
    (t_end, t0_window, r0): (f64, f64, f64),
) -> CliResult<FlushingCertificate> {
    let refuse =
        |reason: String| CliError::Certificate { certificate: "flushing".into(), reason, producer: producer.to_string() };
    let path = path.ok_or_else(|| refuse("no path given; set `flushing` in [certificates]".into()))?;
    let cert = FlushingCertificate::load(path).map_err(refuse)?;
    let r = &cert.report;
    if r.verdict != Verdict::Satisfied {
        return Err(refuse(format!("{} has verdict `{}`", path.display(), r.verdict.as_str())));
    }
    let mut stale = Vec::new();
    if cert.field != field.to_string() {
        stale.push(format!("field {} != {}", cert.field, field));
    }
    if cert.domain != domain_text(domain) {
        stale.push(format!("domain {} != {}", cert.domain, domain_text(domain)));
    }
    if cert.target != region_text(target) {
        stale.push(format!("target {} != {}", cert.target, region_text(target)));
    }
    for (name, have, want) in [("T", r.t_end, t_end), ("T0", r.t0_window, t0_window), ("r0", r.r0, r0)] {
        if !close(have, want) {
            stale.push(format!("{name} = {have} but the configuration has {want}"));
        }
    }
    if stale.is_empty() {
        Ok(cert)
    } else {
        Err(refuse(format!("{} was issued for a different problem: {}", path.display(), stale.join("; "))))
    }
}

/// Inline certificate that ∂ₙf > 0 on the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySign {
    pub min_dn_f: f64,
    pub boundary_samples: usize,
}

impl BoundarySign {
    pub fn to_text(&self, field: &FieldSpec, domain: &Domain) -> String {
        format!(
            "kind=boundary_sign\nfield={field}\ndomain={}\nmin_dn_f={}\nboundary_samples={}\nverdict=positive\n",
            domain_text(domain),
            fmt17(self.min_dn_f),
            self.boundary_samples
        )
    }
}

pub fn boundary_sign(field: &VelocityField, domain: &Domain, t_end: f64) -> CliResult<BoundarySign> {
    let norms = field_norms(field, domain, t_end, &Sampling::default())?;
    let refuse = |reason: String| CliError::Certificate {
        certificate: "boundary_sign".into(),
        reason,
        producer: "a gradient field f with a strictly positive normal derivative on the boundary".into(),
    };
    match norms.min_dn_f {
        None => Err(refuse("the field has no potential f, so the normal derivative of f is undefined".into())),
        Some(m) if m > 0.0 => Ok(BoundarySign { min_dn_f: m, boundary_samples: norms.boundary_samples }),
        Some(m) => Err(refuse(format!(
            "min of the normal derivative of f over {} boundary samples is {m}, not positive",
            norms.boundary_samples
        ))),
    }
}

/// Inline certificate that the backward characteristic from (x₀, T) stays
/// at distance at least 4r₀ from the control region and the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct WitnessCertificate {
    pub x0: Vec<f64>,
    pub r0: f64,
    pub t_end: f64,
    pub min_region_distance: f64,
    pub min_boundary_distance: f64,
    pub samples: usize,
    pub path: Vec<(f64, Vec<f64>)>,
}

impl WitnessCertificate {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "kind=witness\nx0={}\nr0={}\nT={}\nmin_region_distance={}\nmin_boundary_distance={}\nrequired={}\nsamples={}\n",
            list(&self.x0),
            fmt17(self.r0),
            fmt17(self.t_end),
            fmt17(self.min_region_distance),
            fmt17(self.min_boundary_distance),
            fmt17(4.0 * self.r0),
            self.samples
        );
        for (t, x) in &self.path {
            let xs: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
            let _ = writeln!(s, "path={}\t{}", fmt17(*t), xs.join("\t"));
        }
        s
    }
}

pub fn witness_certificate(
    field: &VelocityField,
    domain: &Domain,
    omega: &Region,
    x0: &[f64],
    r0: f64,
    t_end: f64,
) -> CliResult<WitnessCertificate> {
    let refuse = |reason: String| CliError::Certificate {
        certificate: "witness".into(),
        reason,
        producer: "a point x0 in [witness] whose backward trajectory stays 4*r0 away from omega and the boundary".into(),
    };
    let opts = FlowOptions { tol: 1e-10, max_step: 0.01, ..FlowOptions::default() };
    let traj =
        integrate_flow(field, x0, t_end, 0.0, &opts).map_err(|e| refuse(format!("backward trajectory from x0 failed: {e}")))?;
    let mut min_region = f64::INFINITY;
    let mut min_boundary = f64::INFINITY;
    let mut path = Vec::with_capacity(traj.len());
    for i in 0..traj.len() {
        let x = traj.point(i);
        min_region = min_region.min(omega.distance(x)?);
        min_boundary = min_boundary.min(-domain.signed_distance(x));
        path.push((traj.time(i), x.to_vec()));
    }
    let need = 4.0 * r0;
    if min_region < need {
        return Err(refuse(format!("the backward trajectory from x0 comes within {min_region} of omega, below 4*r0 = {need}")));
    }
    if min_boundary < need {
        return Err(refuse(format!(
            "the backward trajectory from x0 comes within {min_boundary} of the boundary, below 4*r0 = {need}"
        )));
    }
    Ok(WitnessCertificate {
        x0: x0.to_vec(),
        r0,
        t_end,
        min_region_distance: min_region,
        min_boundary_distance: min_boundary,
        samples: traj.len(),
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vanishcost_core::flow::{check_flushing, FlushingParams, Lattice};
    use vanishcost_core::velocity::builtin_field;

    fn report() -> (FieldSpec, Domain, Region, FlushingReport) {
        let spec = FieldSpec::Builtin("quadratic_potential".into());
        let field = spec.build(1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let target = Region::interval(-0.25, 0.25).unwrap();
        let params = FlushingParams { t_end: 4.0, t0_window: 2.0, r0: 0.05 };
        let rep = check_flushing(
            &field,
            &domain,
            &target,
            &params,
            &Lattice::new(41, 5),
            &FlowOptions::default(),
            vanishcost_core::Execution::Sequential,
        )
        .unwrap();
        (spec, domain, target, rep)
    }

    #[test]
    fn flushing_certificate_round_trips() {
        let (spec, domain, target, rep) = report();
        assert_eq!(rep.verdict, Verdict::Satisfied);
        let cert = FlushingCertificate::new(&spec, &domain, &target, rep);
        let back = FlushingCertificate::parse(&cert.to_text()).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn stale_certificate_is_refused_with_the_producer() {
        let (spec, domain, target, rep) = report();
        let cert = FlushingCertificate::new(&spec, &domain, &target, rep);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flushing_report.txt");
        std::fs::write(&path, cert.to_text()).unwrap();
        assert!(require_flushing(Some(&path), "p", &spec, &domain, &target, (4.0, 2.0, 0.05)).is_ok());
        let err = require_flushing(Some(&path), "vanishcost flow check-flushing", &spec, &domain, &target, (8.0, 2.0, 0.05))
            .unwrap_err();
        assert!(err.to_string().contains("T = 4"), "{err}");
        assert!(err.to_string().contains("vanishcost flow check-flushing"));
        assert_eq!(err.exit_code(), crate::error::EXIT_CERTIFICATE);
    }

    #[test]
    fn boundary_sign_needs_a_strictly_positive_normal_derivative() {
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let ok = boundary_sign(&field, &Domain::interval(-1.0, 1.0).unwrap(), 1.0).unwrap();
        assert!((ok.min_dn_f - 1.0).abs() <= 1e-12);
        // on (0, 1) the normal derivative of x²/2 vanishes at the left end
        let err = boundary_sign(&field, &Domain::interval(0.0, 1.0).unwrap(), 1.0).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_CERTIFICATE);
    }

    #[test]
    fn witness_entering_omega_is_refused() {
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let omega = Region::interval(0.5, 0.8).unwrap();
        assert!(witness_certificate(&field, &domain, &omega, &[0.9], 0.01, 1.0).is_err());
        let ok = witness_certificate(&field, &domain, &omega, &[-0.5], 0.05, 0.1).unwrap();
        assert!(ok.min_region_distance >= 0.2 && ok.min_boundary_distance >= 0.2);
    }
}
