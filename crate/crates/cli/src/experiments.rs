//! One runner per experiment kind. Each runner reads a validated
//! configuration, writes its artifacts through [`OutDir`] and returns summary
//! lines for the terminal plus per-row flags for the manifest.

use std::fmt::Write as _;
use std::sync::Arc;

use vanishcost_core::analysis::{
    agmon_check, build_eta, build_theta, c_t, carleman_functional, carleman_threshold, carleman_weights, dissipation_fit,
    dissipation_global, dissipation_outside, hj_residual, AgmonVariant, CarlemanQuadrature, CarlemanSetup, DissipationRatio,
    HjLattice, ThetaOptions,
};
use vanishcost_core::costlab::{
    boundedness_report, fit_exponential, fit_log_inverse, hum_control, mean_lower_bound_check, observability_cost,
    observability_window_ratio, sweep, trend_verdict, CostParams, GridPolicy, Instance, ProblemSpec, SweepRow,
};
use vanishcost_core::flow::{check_flushing, FlowOptions, FlushingParams, Lattice};
use vanishcost_core::geometry::{build_grid, Grid, Region};
use vanishcost_core::io::{fmt17, write_field, write_tsv};
use vanishcost_core::pde::{l2_norm, mass, solve_adjoint, solve_annulus, solve_forward, FieldTag, SolverParams, SpaceTimeField};
use vanishcost_core::velocity::{field_norms, Sampling, VelocityField};
use vanishcost_core::Execution;

use crate::artifacts::{cost_csv, fit_text, k_vs_eps_tsv, kv_text, logk_vs_inv_eps_tsv, CostRow, OutDir};
use crate::certificates::{boundary_sign, require_flushing, witness_certificate, FlushingCertificate};
use crate::config::{CbSetting, CtSetting, DataKind, Equation, ExperimentConfig, ExperimentKind, SSetting};
use crate::error::{CliError, CliResult};

/// Which part of the agmon experiment to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgmonStage {
    /// Weight construction and the Hamilton–Jacobi residual only.
    Weight,
    Full,
}

#[derive(Clone, Copy, Debug)]
pub struct RunContext {
    pub exec: Execution,
    pub seed: u64,
    pub agmon_stage: AgmonStage,
}

#[derive(Debug, Default)]
pub struct RunOutcome {
    pub summary: Vec<String>,
    pub row_flags: Vec<(String, String)>,
}

impl RunOutcome {
    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }

    fn flag_rows(&mut self, rows: &[CostRow]) {
        for r in rows {
            if !r.flags.is_empty() {
                self.row_flags.push((format!("epsilon={}", fmt17(r.epsilon)), r.flag_text()));
            }
        }
    }
}

pub fn run(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    match cfg.experiment {
        ExperimentKind::Flushing => run_flushing(cfg, out, ctx),
        ExperimentKind::Solve => run_solve(cfg, out),
        ExperimentKind::Cost => run_cost(cfg, out, ctx),
        ExperimentKind::Sweep | ExperimentKind::BlowupFit => run_sweep(cfg, out, ctx),
        ExperimentKind::Hum => run_hum(cfg, out, ctx),
        ExperimentKind::Agmon => run_agmon(cfg, out, ctx),
        ExperimentKind::Dissipation => run_dissipation(cfg, out),
        ExperimentKind::Carleman => run_carleman(cfg, out, ctx),
        ExperimentKind::Theorem1Trend => run_theorem1(cfg, out, ctx),
        ExperimentKind::Theorem2Trend => run_theorem2(cfg, out, ctx),
    }
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

fn field(cfg: &ExperimentConfig) -> CliResult<VelocityField> {
    Ok(cfg.problem.field.build(cfg.dim())?)
}

fn omega(cfg: &ExperimentConfig) -> CliResult<&Region> {
    cfg.problem.omega.as_ref().ok_or_else(|| CliError::Invalid("`omega` in [problem] is required".into()))
}

fn horizon(cfg: &ExperimentConfig) -> CliResult<f64> {
    cfg.problem.t_end.ok_or_else(|| CliError::Invalid("`T` in [problem] is required".into()))
}

fn epsilon(cfg: &ExperimentConfig) -> CliResult<f64> {
    cfg.problem.epsilon.ok_or_else(|| CliError::Invalid("`epsilon` in [problem] is required".into()))
}

fn solver_params(cfg: &ExperimentConfig, eps: f64, steps: usize) -> SolverParams {
    let mut p = SolverParams::new(eps, steps);
    p.theta = cfg.grid.theta;
    p
}

fn cost_params(cfg: &ExperimentConfig, resolution: &[usize], steps: usize, seed: u64) -> CostParams {
    let mut p = CostParams::new(resolution, steps);
    p.theta = cfg.grid.theta;
    p.delta = cfg.cost.delta;
    p.tol = cfg.cost.tol;
    p.max_iter = cfg.cost.max_iter;
    p.seed = seed;
    p
}

fn problem_spec(cfg: &ExperimentConfig, eps: f64) -> CliResult<ProblemSpec> {
    Ok(ProblemSpec {
        domain: cfg.problem.domain.clone(),
        omega: omega(cfg)?.clone(),
        field: field(cfg)?,
        t_end: horizon(cfg)?,
        epsilon: eps,
    })
}

fn policy(cfg: &ExperimentConfig) -> GridPolicy {
    GridPolicy { c: cfg.grid.policy_c, min_cells: cfg.grid.min_cells, max_cells: cfg.grid.max_cells, steps: cfg.grid.steps }
}

/// exp(−1/(1−q²)) with q = |x − c|/r, and 0 for q ≥ 1.
pub fn bump(x: &[f64], center: &[f64], radius: f64) -> f64 {
    let q2 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (radius * radius);
    if q2 < 1.0 {
        (-1.0 / (1.0 - q2)).exp()
    } else {
        0.0
    }
}

/// Cell-centre samples of the `[data]` datum at time `t`. Refuses a datum
/// that vanishes on every cell.
fn datum(cfg: &ExperimentConfig, grid: &Grid, t: f64) -> CliResult<Vec<f64>> {
    let data = cfg.data.as_ref().ok_or_else(|| CliError::Invalid("this experiment needs a [data] section".into()))?;
    let dim = cfg.dim();
    let modulation = data.modulation.as_deref().map(|s| vanishcost_core::velocity::parse(s, dim)).transpose()?;
    let values: Vec<f64> = match &data.kind {
        DataKind::Bump { center, radius } => (0..grid.cell_count())
            .map(|c| {
                let x = grid.center(c);
                bump(x, center, *radius) * modulation.as_ref().map_or(1.0, |m| m.eval(x, t))
            })
            .collect(),
        DataKind::Constant { value } => vec![*value; grid.cell_count()],
        DataKind::Expression { source } => {
            let e = vanishcost_core::velocity::parse(source, dim)?;
            (0..grid.cell_count()).map(|c| e.eval(grid.center(c), t)).collect()
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Invalid("the datum is not finite on every cell".into()));
    }
    if values.iter().all(|v| *v == 0.0) {
        return Err(CliError::Invalid(format!(
            "the datum vanishes on all {} cells; refine [grid] cells or widen the support",
            grid.cell_count()
        )));
    }
    Ok(values)
}

fn field_bytes(f: &SpaceTimeField) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_field(f, &mut buf)?;
    Ok(buf)
}

fn tsv_bytes(f: &SpaceTimeField) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_tsv(f, &mut buf)?;
    Ok(buf)
}

fn write_cost_tables(out: &mut OutDir, rows: &[CostRow], outcome: &mut RunOutcome) -> CliResult<()> {
    out.write_text("costs.csv", &cost_csv(rows))?;
    out.write_text("k_vs_eps.tsv", &k_vs_eps_tsv(rows))?;
    let (log_tsv, dropped) = logk_vs_inv_eps_tsv(rows);
    out.write_text("logk_vs_inv_eps.tsv", &log_tsv)?;
    if dropped > 0 {
        outcome.line(format!("warning: {dropped} row(s) with K <= 0 or no K left out of logk_vs_inv_eps.tsv"));
    }
    outcome.flag_rows(rows);
    Ok(())
}

// ---------------------------------------------------------------------------
// flushing
// ---------------------------------------------------------------------------

fn run_flushing(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let fl = cfg.flushing.as_ref().ok_or_else(|| CliError::Invalid("[flushing] is required".into()))?;
    let field = field(cfg)?;
    let params = FlushingParams { t_end: horizon(cfg)?, t0_window: fl.t0_window, r0: fl.r0 };
    let mut lattice = Lattice::new(fl.lattice_space, fl.lattice_time);
    lattice.shell = fl.shell;
    let report = check_flushing(&field, &cfg.problem.domain, &fl.target, &params, &lattice, &FlowOptions::default(), ctx.exec)?;
    let mut o = RunOutcome::default();
    o.line(format!(
        "flushing verdict={} cells={}/{} witnesses={} min_window_measure={} spacing={}",
        report.verdict.as_str(),
        report.satisfied_cells,
        report.cells.len(),
        report.witnesses.len(),
        fmt17(report.min_window_measure),
        fmt17(report.lattice.spacing)
    ));
    for w in &report.warnings {
        o.line(format!("warning: {w}"));
    }

    let mut cells = String::from("x\tt0\tt_star\twindow_lo\twindow_hi\tmeasure\n");
    for c in &report.cells {
        let xs: Vec<String> = c.x0.iter().map(|v| fmt17(*v)).collect();
        let _ = match &c.entry {
            Some(e) => writeln!(
                cells,
                "{}\t{}\t{}\t{}\t{}\t{}",
                xs.join(" "),
                fmt17(c.t0),
                fmt17(e.t_star),
                fmt17(e.window.0),
                fmt17(e.window.1),
                fmt17(e.measure)
            ),
            None => writeln!(cells, "{}\t{}\tnone\tnone\tnone\t0", xs.join(" "), fmt17(c.t0)),
        };
    }
    let mut witnesses = String::from("witness\tx0\tt0\tt\tx\n");
    for (i, w) in report.witnesses.iter().enumerate() {
        let x0: Vec<String> = w.x0.iter().map(|v| fmt17(*v)).collect();
        for (t, x) in &w.path {
            let xs: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
            let _ = writeln!(witnesses, "{i}\t{}\t{}\t{}\t{}", x0.join(" "), fmt17(w.t0), fmt17(*t), xs.join(" "));
        }
    }
    out.write_text("cells.tsv", &cells)?;
    out.write_text("witnesses.tsv", &witnesses)?;
    let cert = FlushingCertificate::new(&cfg.problem.field, &cfg.problem.domain, &fl.target, report);
    let path = out.write_text("flushing_report.txt", &cert.to_text())?;
    o.line(format!("certificate written to {}", path.display()));
    Ok(o)
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn run_solve(cfg: &ExperimentConfig, out: &mut OutDir) -> CliResult<RunOutcome> {
    let field = field(cfg)?;
    let t_end = horizon(cfg)?;
    let eps = epsilon(cfg)?;
    let grid = Arc::new(build_grid(&cfg.problem.domain, &cfg.resolution())?);
    let params = solver_params(cfg, eps, cfg.grid.steps);
    let sol = match cfg.solve.equation {
        Equation::Forward => {
            let y0 = datum(cfg, &grid, 0.0)?;
            solve_forward(&grid, &y0, &field, &params, t_end, None)?
        }
        Equation::Adjoint => {
            let phi_t = datum(cfg, &grid, t_end)?;
            solve_adjoint(&grid, &phi_t, &field, &params, t_end)?
        }
    };
    out.write("solution.bin", &field_bytes(&sol)?)?;
    if cfg.solve.tsv {
        out.write("solution.tsv", &tsv_bytes(&sol)?)?;
    }
    let mut o = RunOutcome::default();
    o.line(format!(
        "solve equation={} cells={} steps={} norm(t=0)={} norm(t=T)={} mass(t=0)={} mass(t=T)={}",
        sol.tag().as_str(),
        grid.cell_count(),
        cfg.grid.steps,
        fmt17(l2_norm(&grid, sol.first())),
        fmt17(l2_norm(&grid, sol.last())),
        fmt17(mass(&grid, sol.first())),
        fmt17(mass(&grid, sol.last()))
    ));
    Ok(o)
}

// ---------------------------------------------------------------------------
// cost, sweep, blowup-fit, hum
// ---------------------------------------------------------------------------

fn run_cost(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let eps = epsilon(cfg)?;
    let res = cfg.resolution();
    let inst = Instance::new(&problem_spec(cfg, eps)?, &cost_params(cfg, &res, cfg.grid.steps, ctx.seed))?;
    let est = observability_cost(&inst, cfg.cost.method, ctx.exec)?;
    let row = CostRow::from_estimate(eps, horizon(cfg)?, inst.grid().cell_count(), &est);
    let mut o = RunOutcome::default();
    o.line(format!(
        "K={} method={} iterations={} residual={} K_check={} flags={}",
        fmt17(est.k),
        est.method.as_str(),
        est.iterations,
        fmt17(est.residual),
        fmt17(est.k_check),
        row.flag_text()
    ));
    out.write_text("costs.csv", &cost_csv(std::slice::from_ref(&row)))?;
    o.flag_rows(std::slice::from_ref(&row));
    Ok(o)
}

fn sweep_rows(cfg: &ExperimentConfig, ctx: &RunContext) -> CliResult<(Vec<SweepRow>, Vec<CostRow>)> {
    let template = problem_spec(cfg, cfg.problem.epsilons[0])?;
    let base = cost_params(cfg, &[1], cfg.grid.steps, ctx.seed);
    let rows = sweep(&template, &cfg.problem.epsilons, &[template.t_end], &policy(cfg), &base, cfg.cost.method, ctx.exec)?;
    let table = rows.iter().map(CostRow::from_sweep).collect();
    Ok((rows, table))
}

fn run_sweep(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let (rows, table) = sweep_rows(cfg, ctx)?;
    let mut o = RunOutcome::default();
    for r in &table {
        o.line(format!(
            "epsilon={} N={} K={} flag={}",
            fmt17(r.epsilon),
            r.cells,
            r.k.map(fmt17).unwrap_or("nan".into()),
            r.flag_text()
        ));
    }
    write_cost_tables(out, &table, &mut o)?;
    match fit_exponential(&rows) {
        Ok(fit) => {
            let verdict = trend_verdict(&fit);
            out.write_text("fit.txt", &fit_text(&fit, verdict))?;
            o.line(format!("fit: {}", fit_text(&fit, verdict).trim_end()));
        }
        Err(e) if cfg.experiment == ExperimentKind::Sweep => {
            o.line(format!("warning: no fit ({e})"));
        }
        Err(e) => return Err(e.into()),
    }
    Ok(o)
}

fn run_hum(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let eps = epsilon(cfg)?;
    let res = cfg.resolution();
    let inst = Instance::new(&problem_spec(cfg, eps)?, &cost_params(cfg, &res, cfg.grid.steps, ctx.seed))?;
    let y0 = datum(cfg, inst.grid(), 0.0)?;
    let hum = hum_control(&inst, &y0, cfg.cost.steer_tol, cfg.cost.max_iter)?;
    let t_end = horizon(cfg)?;
    let m = cfg.grid.steps;
    let times: Vec<f64> = (0..=m).map(|k| t_end * k as f64 / m as f64).collect();
    let control = SpaceTimeField::from_parts(inst.grid().clone(), times, hum.control.clone(), FieldTag::State, eps)?;
    out.write("control.bin", &field_bytes(&control)?)?;
    out.write("control.tsv", &tsv_bytes(&control)?)?;
    let text = kv_text(&[
        ("initial_norm", fmt17(hum.initial_norm)),
        ("terminal_norm", fmt17(hum.terminal_norm)),
        ("relative_terminal_norm", fmt17(hum.terminal_norm / hum.initial_norm)),
        ("control_norm", fmt17(hum.control_norm)),
        ("iterations", hum.iterations.to_string()),
        ("steer_tol", fmt17(cfg.cost.steer_tol)),
        ("flags", if hum.flags.is_empty() { "ok".into() } else { hum.flags.join("; ") }),
    ]);
    out.write_text("hum.txt", &text)?;
    let mut o = RunOutcome::default();
    o.line(format!(
        "hum terminal/initial={} control_norm={} iterations={}",
        fmt17(hum.terminal_norm / hum.initial_norm),
        fmt17(hum.control_norm),
        hum.iterations
    ));
    for f in &hum.flags {
        o.row_flags.push(("hum".into(), f.clone()));
    }
    Ok(o)
}

// ---------------------------------------------------------------------------
// analysis: agmon, dissipation, carleman
// ---------------------------------------------------------------------------

fn run_agmon(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let a = cfg.agmon.as_ref().ok_or_else(|| CliError::Invalid("[agmon] is required".into()))?;
    let field = field(cfg)?;
    let t_end = horizon(cfg)?;
    let t2 = a.t2.unwrap_or(t_end);
    if t2 > t_end * (1.0 + 1e-12) {
        return Err(CliError::Invalid(format!("t2 = {t2} exceeds T = {t_end}")));
    }
    let domain = &cfg.problem.domain;
    let opts = ThetaOptions { exec: ctx.exec, ..ThetaOptions::default() };
    let w = build_theta(&field, domain, &a.x0, a.r, (a.t1, t2), &opts)?;
    let hj = hj_residual(&w, &field, domain, &HjLattice { space: a.hj_space, time: a.hj_time, h: a.hj_h }, ctx.exec)?;
    let mut o = RunOutcome::default();
    out.write_text(
        "theta.txt",
        &kv_text(&[
            ("x0", w.x0.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(" ")),
            ("r", fmt17(w.r)),
            ("t1", fmt17(w.t1)),
            ("t2", fmt17(w.t2)),
            ("kappa", fmt17(w.kappa)),
            ("grad_integral", fmt17(w.grad_integral)),
            ("cap", fmt17(w.cap)),
            ("c0", w.c0.map(fmt17).unwrap_or_else(|| "undefined".into())),
            ("c0_samples", w.c0_samples.to_string()),
            ("max_inside", fmt17(w.max_inside)),
            ("inside_samples", w.inside_samples.to_string()),
        ]),
    )?;
    out.write_text(
        "hj.txt",
        &kv_text(&[
            ("min_residual", fmt17(hj.min_residual)),
            ("normalized", fmt17(hj.normalized())),
            ("scale", fmt17(hj.scale)),
            ("evaluated", hj.evaluated.to_string()),
            ("excluded", hj.excluded.to_string()),
            ("lattice", format!("{}x{} h={}", a.hj_space, a.hj_time, fmt17(a.hj_h))),
        ]),
    )?;
    o.line(format!(
        "theta kappa={} c0={} hj_normalized_min={} (excluded {})",
        fmt17(w.kappa),
        w.c0.map(fmt17).unwrap_or_else(|| "undefined".into()),
        fmt17(hj.normalized()),
        hj.excluded
    ));
    if ctx.agmon_stage == AgmonStage::Weight {
        return Ok(o);
    }

    let eps = epsilon(cfg)?;
    let grid = Arc::new(build_grid(domain, &cfg.resolution())?);
    let phi_t = datum(cfg, &grid, t2)?;
    let params = solver_params(cfg, eps, cfg.grid.steps);
    let sol = solve_annulus(&grid, &phi_t, &field, &params, (a.t1, t2), None, None)?;
    let theta = w.values_for(&sol, ctx.exec)?;
    let variant = match a.variant.as_str() {
        "A1" => AgmonVariant::A1,
        _ => AgmonVariant::A2 {
            c_b: match a.c_b {
                CbSetting::Value(v) => v,
                CbSetting::Auto => field_norms(&field, domain, t_end, &Sampling::default())?.c_b,
            },
        },
    };
    let rep = agmon_check(&sol, &theta, variant)?;
    let mut text = kv_text(&[
        ("variant", rep.variant.to_string()),
        ("constant", fmt17(rep.constant)),
        ("epsilon", fmt17(eps)),
        ("rhs", fmt17(rep.rhs)),
        ("worst_margin", fmt17(rep.worst_margin)),
        ("worst_time", fmt17(rep.worst_time)),
        ("max_exponent", fmt17(rep.max_exponent)),
        ("flags", if rep.flags.is_empty() { "ok".into() } else { rep.flags.join("; ") }),
    ]);
    text.push_str("t\tlhs\tmargin\n");
    for ((t, l), m) in rep.times.iter().zip(&rep.lhs).zip(&rep.margins) {
        let _ = writeln!(text, "{}\t{}\t{}", fmt17(*t), fmt17(*l), fmt17(*m));
    }
    out.write_text("agmon.txt", &text)?;
    o.line(format!(
        "agmon variant={} constant={} worst_margin={} at t={} max_exponent={}",
        rep.variant,
        fmt17(rep.constant),
        fmt17(rep.worst_margin),
        fmt17(rep.worst_time),
        fmt17(rep.max_exponent)
    ));
    for f in &rep.flags {
        o.row_flags.push(("agmon".into(), f.clone()));
    }
    Ok(o)
}

struct DissipationRun {
    rows: Vec<DissipationRatio>,
    c0: Option<f64>,
    fit_line: Option<String>,
}

/// Ratio per ε on U = Ω ∖ ω̄₀ plus the fit giving C₀. Writes
/// dissipation.csv, ratio_vs_t.tsv (smallest ε) and dissipation_fit.txt.
fn dissipation_rows(cfg: &ExperimentConfig, out: &mut OutDir, o: &mut RunOutcome) -> CliResult<DissipationRun> {
    let d = cfg.dissipation.as_ref().ok_or_else(|| CliError::Invalid("[dissipation] is required".into()))?;
    let field = field(cfg)?;
    let grid = Arc::new(build_grid(&cfg.problem.domain, &vec![d.cells; cfg.dim()])?);
    let t0 = d.t0.unwrap_or(d.t0_window);
    let g = match &cfg.data {
        Some(_) => datum(cfg, &grid, t0)?,
        None => vec![1.0; grid.cell_count()],
    };
    let mut eps_sorted = d.epsilons.clone();
    eps_sorted.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::new();
    let mut csv = String::from("epsilon,ratio,start_norm,end_norm,flag\n");
    for &eps in &eps_sorted {
        let r = dissipation_outside(&grid, &field, &d.omega0, &g, t0, d.t0_window, &solver_params(cfg, eps, d.steps))?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt17(eps),
            r.ratio.map(fmt17).unwrap_or_else(|| "nan".into()),
            fmt17(r.start_norm),
            fmt17(r.end_norm),
            if r.flags.is_empty() { "ok".into() } else { r.flags.join("; ").replace(',', " ") }
        );
        for f in &r.flags {
            o.row_flags.push((format!("dissipation epsilon={}", fmt17(eps)), f.clone()));
        }
        rows.push(r);
    }
    out.write_text("dissipation.csv", &csv)?;

    // ‖φ(t)‖/‖φ(t₀)‖ across the window at the smallest ε
    let eps_min = *eps_sorted.last().expect("at least three epsilons");
    let params = solver_params(cfg, eps_min, d.steps);
    let sol = solve_annulus(&grid, &g, &field, &params, ((t0 - d.t0_window).max(0.0), t0), None, Some(&d.omega0))?;
    let end = l2_norm(&grid, sol.last());
    let mut tsv = String::from("t\tratio\n");
    for (k, t) in sol.times().iter().enumerate() {
        let v = if end > 0.0 { l2_norm(&grid, sol.slice(k)) / end } else { f64::NAN };
        let _ = writeln!(tsv, "{}\t{}", fmt17(*t), fmt17(v));
    }
    out.write_text("ratio_vs_t.tsv", &tsv)?;

    let (c0, fit_line) = match dissipation_fit(&rows) {
        Ok(f) => {
            let monotone = rows.windows(2).all(|w| match (w[0].ratio, w[1].ratio) {
                (Some(a), Some(b)) => b < a,
                _ => false,
            });
            let text = format!(
                "slope={} intercept={} r2={} c0={} decreasing_in_1/eps={}\n",
                fmt17(f.fit.slope),
                fmt17(f.fit.intercept),
                f.fit.r2.map(fmt17).unwrap_or_else(|| "undefined".into()),
                fmt17(f.c0),
                monotone
            );
            out.write_text("dissipation_fit.txt", &text)?;
            (Some(f.c0), Some(text.trim_end().to_string()))
        }
        Err(e) => {
            o.line(format!("warning: dissipation fit unavailable ({e})"));
            (None, None)
        }
    };
    Ok(DissipationRun { rows, c0, fit_line })
}

fn run_dissipation(cfg: &ExperimentConfig, out: &mut OutDir) -> CliResult<RunOutcome> {
    let mut o = RunOutcome::default();
    let run = dissipation_rows(cfg, out, &mut o)?;
    for r in &run.rows {
        o.line(format!("epsilon={} ratio={}", fmt17(r.epsilon), r.ratio.map(fmt17).unwrap_or_else(|| "nan".into())));
    }
    if let Some(line) = &run.fit_line {
        o.line(format!("fit: {line}"));
    }
    // the global estimate needs the flushing certificate for (T, T0, r0)
    if let (Some(path), Some(c0)) = (cfg.certificates.flushing.as_deref(), run.c0) {
        let d = cfg.dissipation.as_ref().expect("checked above");
        let fl = cfg.flushing.as_ref().ok_or_else(|| CliError::Invalid("the global estimate needs [flushing]".into()))?;
        let t_end = horizon(cfg)?;
        let cert = require_flushing(
            Some(path),
            "vanishcost flow check-flushing --config <flushing config>",
            &cfg.problem.field,
            &cfg.problem.domain,
            &fl.target,
            (t_end, fl.t0_window, fl.r0),
        )?;
        let eps = epsilon(cfg)
            .or_else(|_| d.epsilons.iter().cloned().reduce(f64::min).ok_or_else(|| CliError::Invalid("no epsilon".into())))?;
        let m = d.m.unwrap_or((t_end / fl.t0_window).floor() as usize);
        let g = global_dissipation(cfg, &cert, eps, m, c0)?;
        out.write_text("dissipation_global.txt", &g)?;
        o.line(format!("global estimate written (m={m})"));
    }
    Ok(o)
}

fn global_dissipation(cfg: &ExperimentConfig, cert: &FlushingCertificate, eps: f64, m: usize, c0: f64) -> CliResult<String> {
    let t_end = horizon(cfg)?;
    let grid = Arc::new(build_grid(&cfg.problem.domain, &cfg.resolution())?);
    let phi_t = match &cfg.data {
        Some(_) => datum(cfg, &grid, t_end)?,
        None => vec![1.0; grid.cell_count()],
    };
    let sol = solve_adjoint(&grid, &phi_t, &field(cfg)?, &solver_params(cfg, eps, cfg.grid.steps), t_end)?;
    let chi = grid.region_fractions(omega(cfg)?)?;
    let g = dissipation_global(&sol, &chi, &cert.report, m, c0)?;
    let mut text = kv_text(&[
        ("m", g.m.to_string()),
        ("c0", fmt17(g.c0)),
        ("epsilon", fmt17(g.epsilon)),
        ("initial_sq", fmt17(g.initial_sq)),
        ("observation_sq", fmt17(g.observation_sq)),
        ("admissible_c", g.admissible.map(fmt17).unwrap_or_else(|| "undefined".into())),
    ]);
    text.push_str("t\tc_prime\n");
    for (t, c) in &g.rows {
        let _ = writeln!(text, "{}\t{}", fmt17(*t), fmt17(*c));
    }
    Ok(text)
}

fn run_carleman(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let c = cfg.carleman.as_ref().ok_or_else(|| CliError::Invalid("[carleman] is required".into()))?;
    let field = field(cfg)?;
    let potential =
        field.potential().cloned().ok_or_else(|| CliError::Invalid("the Carleman functional needs a gradient field".into()))?;
    let t_end = horizon(cfg)?;
    let eps = epsilon(cfg)?;
    let domain = &cfg.problem.domain;
    let c_t_value = match c.c_t {
        CtSetting::Value(v) => v,
        CtSetting::Auto => c_t(potential.clone(), domain, t_end, &Sampling::default())?.total,
    };
    let s = match c.s {
        SSetting::Value(v) => v,
        SSetting::Threshold => carleman_threshold(eps, t_end, c_t_value, c.s1),
    };
    let grid = Arc::new(build_grid(domain, &cfg.resolution())?);
    let phi_t = datum(cfg, &grid, t_end)?;
    let sol = solve_adjoint(&grid, &phi_t, &field, &solver_params(cfg, eps, cfg.grid.steps), t_end)?;
    let eta = Arc::new(build_eta(domain, &c.omega_prime, c.eta_samples)?);
    let weights = carleman_weights(eta, c.lambda, s, t_end)?;
    let chi = grid.region_fractions(omega(cfg)?)?;
    let setup = CarlemanSetup {
        potential: potential.as_ref(),
        chi: &chi,
        c_t: c_t_value,
        s1: c.s1,
        lambda1: c.lambda1,
        quadrature: CarlemanQuadrature::for_dim(cfg.dim()),
        exec: ctx.exec,
    };
    let rep = carleman_functional(&sol, &setup, &weights)?;
    let mut pairs: Vec<(&str, String)> = vec![
        ("epsilon", fmt17(eps)),
        ("lambda", fmt17(rep.lambda)),
        ("s", fmt17(rep.s)),
        ("s_threshold", fmt17(rep.s_threshold)),
        ("c_t", fmt17(c_t_value)),
    ];
    for ni in [&rep.lhs_zero_order, &rep.lhs_gradient, &rep.lhs_volume_terms, &rep.lhs_boundary_term, &rep.rhs_localized_term] {
        pairs.push((ni.name, format!("ln={} value={}", fmt17(ni.ln_value), fmt17(ni.value()))));
    }
    pairs.push(("c_min", rep.c_min.map(fmt17).unwrap_or_else(|| "undefined".into())));
    pairs.push(("ln_c_min", rep.ln_c_min.map(fmt17).unwrap_or_else(|| "undefined".into())));
    pairs.push(("degenerate", rep.degenerate.to_string()));
    pairs.push(("monotone_in_s", rep.monotone_in_s.to_string()));
    pairs.push(("flags", if rep.flags.is_empty() { "ok".into() } else { rep.flags.join("; ") }));
    out.write_text("carleman.txt", &kv_text(&pairs))?;
    let mut o = RunOutcome::default();
    o.line(format!(
        "carleman s={} c_min={} degenerate={}",
        fmt17(rep.s),
        rep.c_min.map(fmt17).unwrap_or_else(|| "undefined".into()),
        rep.degenerate
    ));
    for f in &rep.flags {
        o.row_flags.push(("carleman".into(), f.clone()));
    }
    Ok(o)
}

// ---------------------------------------------------------------------------
// Trends
// ---------------------------------------------------------------------------

const FLUSHING_PRODUCER: &str = "vanishcost flow check-flushing --config <flushing config>";

fn run_theorem1(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let fl = cfg.flushing.as_ref().ok_or_else(|| CliError::Invalid("[flushing] is required".into()))?;
    let t_end = horizon(cfg)?;
    let field = field(cfg)?;
    // both certificates are checked before any solve
    let sign = boundary_sign(&field, &cfg.problem.domain, t_end)?;
    let cert = require_flushing(
        cfg.certificates.flushing.as_deref(),
        FLUSHING_PRODUCER,
        &cfg.problem.field,
        &cfg.problem.domain,
        &fl.target,
        (t_end, fl.t0_window, fl.r0),
    )?;
    out.write_text("boundary_sign_certificate.txt", &sign.to_text(&cfg.problem.field, &cfg.problem.domain))?;
    let mut o = RunOutcome::default();
    o.line(format!(
        "certificates: flushing satisfied ({} cells), min normal derivative of f = {}",
        cert.report.satisfied_cells,
        fmt17(sign.min_dn_f)
    ));

    let (rows, table) = sweep_rows(cfg, ctx)?;
    for r in &table {
        o.line(format!(
            "epsilon={} N={} K={} flag={}",
            fmt17(r.epsilon),
            r.cells,
            r.k.map(fmt17).unwrap_or("nan".into()),
            r.flag_text()
        ));
    }
    write_cost_tables(out, &table, &mut o)?;
    let report = boundedness_report(&rows)?;
    out.write_text("fit.txt", &fit_text(&report.fit, report.verdict))?;
    o.line(format!("fit: {} max/min K={}", fit_text(&report.fit, report.verdict).trim_end(), fmt17(report.max_over_min)));

    // chain diagnostics: C₀ from the dissipation ratios, a C₁ surrogate from
    // the window ratio at κT, and the admissibility of m windows
    let d = cfg.dissipation.as_ref().ok_or_else(|| CliError::Invalid("[dissipation] is required".into()))?;
    let diss = dissipation_rows(cfg, out, &mut o)?;
    let kappa_t = d.kappa * t_end;
    let mut window_pts = Vec::new();
    let mut window_tsv = String::from("epsilon\tK_window\n");
    for r in &rows {
        let mut params = cost_params(cfg, &vec![r.cells; cfg.dim()], cfg.grid.steps, ctx.seed);
        params.resolution = vec![r.cells; cfg.dim()];
        let inst = Instance::new(&problem_spec(cfg, r.epsilon)?, &params)?;
        let kw = observability_window_ratio(&inst, kappa_t, cfg.cost.method, ctx.exec)?;
        let _ = writeln!(window_tsv, "{}\t{}", fmt17(r.epsilon), fmt17(kw));
        window_pts.push((r.epsilon, kw));
    }
    out.write_text("k_window_vs_eps.tsv", &window_tsv)?;
    let window_fit = fit_log_inverse(&window_pts)?;
    let c1 = 2.0 * window_fit.slope.max(0.0) / (1.0 + 1.0 / t_end);
    let m = d.m.unwrap_or((t_end / fl.t0_window).floor() as usize);
    let mut chain = vec![
        ("kappa", fmt17(d.kappa)),
        ("window_time", fmt17(kappa_t)),
        ("window_slope", fmt17(window_fit.slope)),
        ("c1_surrogate", fmt17(c1)),
        ("m", m.to_string()),
    ];
    match diss.c0 {
        Some(c0) => {
            let lhs = c1 * (1.0 + 1.0 / t_end);
            let rhs = m as f64 * c0;
            chain.push(("c0", fmt17(c0)));
            chain.push(("lhs_c1_times_1_plus_inv_T", fmt17(lhs)));
            chain.push(("rhs_m_c0", fmt17(rhs)));
            chain.push(("chain_closes", (lhs <= rhs).to_string()));
            o.line(format!("chain: C1(1+1/T)={} m*C0={} closes={} (informational)", fmt17(lhs), fmt17(rhs), lhs <= rhs));
            if let Some(eps_min) = cfg.problem.epsilons.iter().cloned().reduce(f64::min) {
                if m >= 1 && m as f64 * fl.t0_window <= t_end * (1.0 + 1e-12) {
                    let g = global_dissipation(cfg, &cert, eps_min, m, c0)?;
                    out.write_text("dissipation_global.txt", &g)?;
                }
            }
        }
        None => chain.push(("c0", "undefined".into())),
    }
    out.write_text("chain.txt", &kv_text(&chain))?;
    Ok(o)
}

/// Signed and absolute integrals of `f` over the cube [x0 − r, x0 + r]^d by
/// a midpoint rule symmetric about x0, so an odd datum integrates to zero up
/// to rounding.
fn ball_mass(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], r: f64) -> (f64, f64) {
    let d = x0.len();
    let n: usize = if d == 1 { 200 } else { 100 };
    let h = 2.0 * r / n as f64;
    let (mut signed, mut absolute) = (0.0, 0.0);
    let mut x = vec![0.0; d];
    for idx in 0..n.pow(d as u32) {
        let mut rest = idx;
        for k in 0..d {
            x[k] = x0[k] - r + (rest % n) as f64 * h + 0.5 * h;
            rest /= n;
        }
        let v = f(&x);
        signed += v;
        absolute += v.abs();
    }
    let vol = h.powi(d as i32);
    (signed * vol, absolute * vol)
}

fn run_theorem2(cfg: &ExperimentConfig, out: &mut OutDir, ctx: &RunContext) -> CliResult<RunOutcome> {
    let w = cfg.witness.as_ref().ok_or_else(|| CliError::Invalid("[witness] is required".into()))?;
    let t_end = horizon(cfg)?;
    let field = field(cfg)?;
    let wc = witness_certificate(&field, &cfg.problem.domain, omega(cfg)?, &w.x0, w.r0, t_end)?;
    out.write_text("witness_certificate.txt", &wc.to_text())?;
    let mut o = RunOutcome::default();
    o.line(format!(
        "witness certified: distance to omega >= {}, to the boundary >= {} (need {})",
        fmt17(wc.min_region_distance),
        fmt17(wc.min_boundary_distance),
        fmt17(4.0 * w.r0)
    ));

    let pol = policy(cfg);
    let mut eps_sorted = cfg.problem.epsilons.clone();
    eps_sorted.sort_by(|a, b| b.total_cmp(a));
    let modulation = cfg
        .data
        .as_ref()
        .and_then(|d| d.modulation.as_deref())
        .map(|s| vanishcost_core::velocity::parse(s, cfg.dim()))
        .transpose()?;
    let profile = |x: &[f64]| bump(x, &w.x0, w.r0) * modulation.as_ref().map_or(1.0, |m| m.eval(x, t_end));
    let (signed, absolute) = ball_mass(&profile, &w.x0, w.r0);
    if signed.abs() <= 1e-9 * absolute {
        return Err(CliError::Invalid(
            "the datum has zero mass, so the mean lower bound is vacuous; drop the odd modulation".into(),
        ));
    }
    let mut table = Vec::new();
    let mut full = Vec::new();
    let mut bounds = String::from("epsilon\tlhs\trhs\tmargin\tholds\n");
    for &eps in &eps_sorted {
        let cells = pol.cells(eps, cfg.dim());
        let params = cost_params(cfg, &vec![cells; cfg.dim()], pol.steps, ctx.seed);
        let inst = Instance::new(&problem_spec(cfg, eps)?, &params)?;
        let grid = inst.grid();
        let v: Vec<f64> = (0..grid.cell_count()).map(|c| profile(grid.center(c))).collect();
        let l1: f64 = v.iter().map(|x| x.abs()).sum();
        let total: f64 = v.iter().sum();
        if l1 == 0.0 {
            return Err(CliError::Invalid(format!(
                "the bump at x0 with radius r0 misses every cell centre at N = {cells}; raise [grid] min_cells"
            )));
        }
        if total.abs() <= 1e-12 * l1 {
            return Err(CliError::Invalid(
                "the datum has zero mass, so the mean lower bound is vacuous; drop the odd modulation".into(),
            ));
        }
        let ratio = inst.observation_ratio(&v, 0)?;
        let mb = mean_lower_bound_check(&inst, &v)?;
        let _ = writeln!(bounds, "{}\t{}\t{}\t{}\t{}", fmt17(eps), fmt17(mb.lhs), fmt17(mb.rhs), fmt17(mb.margin), mb.holds);
        let mut flags = Vec::new();
        if !mb.holds {
            flags.push("mean-lower-bound-violated".to_string());
        }
        if ratio.is_none() {
            flags.push("undefined: the datum is not observed on omega".to_string());
        }
        table.push(CostRow {
            epsilon: eps,
            t_end,
            cells,
            steps: pol.steps,
            k: ratio,
            method: "ratio".into(),
            iterations: 0,
            residual: 0.0,
            flags,
        });
        if cfg.cost.full_k {
            let est = observability_cost(&inst, cfg.cost.method, ctx.exec)?;
            full.push(CostRow::from_estimate(eps, t_end, cells, &est));
        }
    }
    for r in &table {
        o.line(format!(
            "epsilon={} N={} ratio={} flag={}",
            fmt17(r.epsilon),
            r.cells,
            r.k.map(fmt17).unwrap_or("nan".into()),
            r.flag_text()
        ));
    }
    write_cost_tables(out, &table, &mut o)?;
    out.write_text("mean_bound.tsv", &bounds)?;
    if !full.is_empty() {
        out.write_text("costs_full_k.csv", &cost_csv(&full))?;
        o.flag_rows(&full);
    }
    let pts: Vec<(f64, f64)> = table.iter().filter_map(|r| r.k.filter(|k| *k > 0.0).map(|k| (r.epsilon, k))).collect();
    let fit = fit_log_inverse(&pts)?;
    let verdict = trend_verdict(&fit);
    out.write_text("fit.txt", &fit_text(&fit, verdict))?;
    o.line(format!("fit: {}", fit_text(&fit, verdict).trim_end()));
    Ok(o)
}
