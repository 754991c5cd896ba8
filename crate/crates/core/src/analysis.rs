//! Weighted estimates evaluated on computed solutions: the Agmon weight θ and
//! its Hamilton–Jacobi inequality, the Agmon and dissipation inequalities, the
//! boundary-vanishing function η, the Carleman weights α±/ξ± and the Carleman
//! functional.

use std::sync::Arc;

use crate::costlab::{fit_log_inverse_min, FitResult};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::flow::{ball_samples, default_shell, integrate_flow, FlowOptions, FlushingReport, Verdict};
use crate::geometry::{Domain, Grid, Region, Shape};
use crate::pde::{
    grad_norm_sq, hopf_transform, l2_norm, omega_norm, solve_annulus, trapezoid_weights, SolverParams, SpaceTimeField, EXP_GUARD,
};
use crate::velocity::{field_norms, make_gradient_field, CtBreakdown, CtStatus, Potential, Sampling, VelocityField};

// ---------------------------------------------------------------------------
// Agmon weight
// ---------------------------------------------------------------------------

/// Sampling and integration settings for [`build_theta`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaOptions {
    /// Lattice points per axis over the domain's bounding box for c₀.
    pub space: usize,
    /// Time levels in [t₁, t₂] for c₀ (both ends included).
    pub time: usize,
    /// Lattice points per axis for the sup of ‖∇𝔅‖ over the tube's box.
    pub jacobian_samples: usize,
    pub flow: FlowOptions,
    pub exec: Execution,
}

impl Default for ThetaOptions {
    fn default() -> Self {
        ThetaOptions { space: 41, time: 11, jacobian_samples: 17, flow: FlowOptions::default(), exec: Execution::default() }
    }
}

/// θ(x,t) = ρ(|Φ(t₂,t,x) − x₀|)·g(t) with ρ(q) = min((q−r)₊², r²) and
/// g(t) = 1/(κ(t₂−t) + 1).
#[derive(Clone, Debug)]
pub struct AgmonWeight {
    field: VelocityField,
    flow: FlowOptions,
    pub x0: Vec<f64>,
    pub r: f64,
    pub t1: f64,
    pub t2: f64,
    /// Value at which ρ saturates (r²).
    pub cap: f64,
    pub kappa: f64,
    /// ∫_{t₁}^{t₂} sup‖∇𝔅(·,s)‖ ds, sup over the box bounding the tube D_{2r}.
    pub grad_integral: f64,
    /// min θ/r² over sampled points outside D_{2r}; None when no sample fell
    /// outside.
    pub c0: Option<f64>,
    /// Number of sampled points outside D_{2r}.
    pub c0_samples: usize,
    /// Largest θ over sampled points of D_r.
    pub max_inside: f64,
    /// Number of sampled points inside D_r.
    pub inside_samples: usize,
    /// Sampling lattice used for c₀ (points per axis, time levels).
    pub lattice: (usize, usize),
}

impl AgmonWeight {
    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Φ(t₂, t, x). A trajectory leaving the field's box is reported with the
    /// starting point (x, t).
    pub fn pullback(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if (self.t2 - t).abs() <= 1e-12 * self.t2.abs().max(1.0) {
            return Ok(x.to_vec());
        }
        match integrate_flow(&self.field, x, t, self.t2, &self.flow) {
            Ok(tr) => Ok(tr.end_point().to_vec()),
            Err(Error::OutOfDomain { .. }) => Err(Error::OutOfDomain { time: t, point: x.to_vec() }),
            Err(e) => Err(e),
        }
    }

    /// q = |Φ(t₂,t,x) − x₀|.
    pub fn distance(&self, x: &[f64], t: f64) -> Result<f64> {
        let y = self.pullback(x, t)?;
        Ok(crate::geometry::dist(&y, &self.x0))
    }

    pub fn rho(&self, q: f64) -> f64 {
        let e = (q - self.r).max(0.0);
        (e * e).min(self.cap)
    }

    pub fn g(&self, t: f64) -> f64 {
        1.0 / (self.kappa * (self.t2 - t) + 1.0)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.rho(self.distance(x, t)?) * self.g(t))
    }

    /// Same tube with a different κ. The c₀ measurement is rescaled exactly,
    /// since only g depends on κ and the minimum sits at t₁.
    pub fn with_kappa(&self, kappa: f64) -> AgmonWeight {
        let mut w = self.clone();
        let old = self.kappa * (self.t2 - self.t1) + 1.0;
        let new = kappa * (self.t2 - self.t1) + 1.0;
        w.kappa = kappa;
        w.c0 = self.c0.map(|c| c * old / new);
        w
    }

    /// HJ residual scale r²/(t₂ − t₁).
    pub fn scale(&self) -> f64 {
        self.cap / (self.t2 - self.t1)
    }

    /// θ on the cell centers of `grid` at the given times (time-major), all
    /// inside [t₁, t₂].
    pub fn values_on(&self, grid: &Grid, times: &[f64], exec: Execution) -> Result<Vec<f64>> {
        if grid.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: grid.dim() });
        }
        let span = self.t2 - self.t1;
        if times.iter().any(|&t| t < self.t1 - 1e-12 * span.max(1.0) || t > self.t2 + 1e-12 * span.max(1.0)) {
            return Err(Error::InvalidParameter("times must lie in [t1, t2]".into()));
        }
        let n = grid.cell_count();
        let m = times.len();
        let autonomous = self.field.is_autonomous();
        let cols: Vec<Result<Vec<f64>>> = exec.map_indexed(n, |c| {
            let x = grid.center(c);
            if autonomous {
                // Φ(t₂,t,x) is the time-(t₂−t) map, read off one trajectory.
                let tr = match integrate_flow(&self.field, x, 0.0, span, &self.flow) {
                    Ok(tr) => tr,
                    Err(Error::OutOfDomain { .. }) => return Err(Error::OutOfDomain { time: self.t1, point: x.to_vec() }),
                    Err(e) => return Err(e),
                };
                Ok(times
                    .iter()
                    .map(|&t| {
                        let tau = (self.t2 - t).clamp(0.0, span);
                        let y = tr.at(tau);
                        self.rho(crate::geometry::dist(&y, &self.x0)) * self.g(t)
                    })
                    .collect())
            } else {
                times.iter().map(|&t| self.eval(x, t.clamp(self.t1, self.t2))).collect()
            }
        });
        let mut out = vec![0.0; m * n];
        for (c, col) in cols.into_iter().enumerate() {
            for (k, v) in col?.into_iter().enumerate() {
                out[k * n + c] = v;
            }
        }
        Ok(out)
    }

    /// θ on the grid and time stamps of a computed solution.
    pub fn values_for(&self, phi: &SpaceTimeField, exec: Execution) -> Result<Vec<f64>> {
        self.values_on(phi.grid(), phi.times(), exec)
    }
}

fn lattice_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn tensor_points(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = lo.iter().zip(hi).map(|(&a, &b)| lattice_axis(a, b, n)).collect();
    let total = axes.iter().map(Vec::len).product::<usize>();
    (0..total)
        .map(|mut idx| {
            axes.iter()
                .map(|ax| {
                    let v = ax[idx % ax.len()];
                    idx /= ax.len();
                    v
                })
                .collect()
        })
        .collect()
}

/// Builds θ for the tube D_r(x₀, t₁, t₂) and measures c₀ on a lattice over
/// `domain` × [t₁, t₂].
pub fn build_theta(
    field: &VelocityField,
    domain: &Domain,
    x0: &[f64],
    r: f64,
    window: (f64, f64),
    opts: &ThetaOptions,
) -> Result<AgmonWeight> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
    }
    if domain.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: domain.dim() });
    }
    let (t1, t2) = window;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidParameter(format!("tube radius must be positive, got {r}")));
    }
    if !(t2 > t1) {
        return Err(Error::InvalidParameter(format!("need t1 < t2, got ({t1}, {t2})")));
    }
    if opts.space < 2 || opts.time < 2 || opts.jacobian_samples < 2 {
        return Err(Error::InvalidParameter("theta sampling needs at least 2 points per axis".into()));
    }

    // Box bounding D_{2r}: the backward images of the sphere of radius 2r.
    let mut blo = vec![f64::INFINITY; d];
    let mut bhi = vec![f64::NEG_INFINITY; d];
    for y in ball_samples(x0, 2.0 * r, default_shell(d).max(16)) {
        let tr = integrate_flow(field, &y, t2, t1, &opts.flow)?;
        for i in 0..tr.len() {
            for (k, &v) in tr.point(i).iter().enumerate() {
                blo[k] = blo[k].min(v);
                bhi[k] = bhi[k].max(v);
            }
        }
    }
    let (flo, fhi) = field.bounding_box();
    for k in 0..d {
        let pad = 0.1 * r;
        blo[k] = (blo[k] - pad).max(flo[k]);
        bhi[k] = (bhi[k] + pad).min(fhi[k]);
    }
    let pts = tensor_points(&blo, &bhi, opts.jacobian_samples);
    let times = if field.is_autonomous() { vec![t1] } else { lattice_axis(t1, t2, opts.jacobian_samples) };
    let mut jac = vec![0.0; d * d];
    let sups: Vec<f64> = times
        .iter()
        .map(|&t| {
            pts.iter().fold(0.0f64, |acc, x| {
                field.jacobian(x, t, &mut jac);
                acc.max(crate::geometry::norm2(&jac))
            })
        })
        .collect();
    let grad_integral = if times.len() == 1 {
        sups[0] * (t2 - t1)
    } else {
        trapezoid_weights(&times).iter().zip(&sups).map(|(w, s)| w * s).sum()
    };
    let kappa = 4.0 * (2.0 * grad_integral).exp();

    let mut weight = AgmonWeight {
        field: field.clone(),
        flow: opts.flow,
        x0: x0.to_vec(),
        r,
        t1,
        t2,
        cap: r * r,
        kappa,
        grad_integral,
        c0: None,
        c0_samples: 0,
        max_inside: 0.0,
        inside_samples: 0,
        lattice: (opts.space, opts.time),
    };

    let (lo, hi) = domain.bounding_box();
    let space: Vec<Vec<f64>> =
        tensor_points(&lo, &hi, opts.space).into_iter().filter(|x| domain.contains_closed(x, 1e-12)).collect();
    let tl = lattice_axis(t1, t2, opts.time);
    let w = &weight;
    let per_point: Vec<Result<Vec<(f64, f64)>>> =
        opts.exec.map_indexed(space.len(), |i| tl.iter().map(|&t| Ok((w.distance(&space[i], t)?, t))).collect());
    let mut c0 = f64::INFINITY;
    for col in per_point {
        for (q, t) in col? {
            let theta = weight.rho(q) * weight.g(t);
            if q > 2.0 * r {
                c0 = c0.min(theta / (r * r));
                weight.c0_samples += 1;
            } else if q <= r {
                weight.max_inside = weight.max_inside.max(theta);
                weight.inside_samples += 1;
            }
        }
    }
    if weight.c0_samples > 0 {
        weight.c0 = Some(c0);
    }
    Ok(weight)
}

// ---------------------------------------------------------------------------
// Hamilton–Jacobi residual
// ---------------------------------------------------------------------------

/// Finite-difference lattice for [`hj_residual`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HjLattice {
    /// Interior points per axis of the domain's bounding box.
    pub space: usize,
    /// Time levels, kept `h` away from both ends of the window.
    pub time: usize,
    /// Central-difference step in space and time.
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HjReport {
    pub min_residual: f64,
    /// Lattice point of the minimum.
    pub argmin: Option<(Vec<f64>, f64)>,
    /// Residuals are compared against −tolerance·scale.
    pub scale: f64,
    pub evaluated: usize,
    /// Points whose stencil straddles a kink radius of ρ.
    pub excluded: usize,
}

impl HjReport {
    pub fn normalized(&self) -> f64 {
        self.min_residual / self.scale
    }
}

/// Minimum over the lattice of ∂ₜθ − |∇θ|² + 𝔅·∇θ for the constructed
/// weight, skipping stencils that cross the shells q = r or q = 2r.
pub fn hj_residual(
    weight: &AgmonWeight,
    field: &VelocityField,
    domain: &Domain,
    lattice: &HjLattice,
    exec: Execution,
) -> Result<HjReport> {
    let kinks = [weight.r, 2.0 * weight.r];
    let eval = |x: &[f64], t: f64| -> Result<(f64, f64)> {
        let q = weight.distance(x, t)?;
        Ok((weight.rho(q) * weight.g(t), q))
    };
    hj_residual_with(eval, &kinks, field, domain, (weight.t1, weight.t2), lattice, weight.scale(), exec)
}

/// Generic form of [`hj_residual`]: `eval` returns θ and the tube distance q
/// used to detect stencils crossing one of the `kinks` radii.
#[allow(clippy::too_many_arguments)]
pub fn hj_residual_with<F>(
    eval: F,
    kinks: &[f64],
    field: &VelocityField,
    domain: &Domain,
    window: (f64, f64),
    lattice: &HjLattice,
    scale: f64,
    exec: Execution,
) -> Result<HjReport>
where
    F: Fn(&[f64], f64) -> Result<(f64, f64)> + Sync + Send,
{
    let d = field.dim();
    let h = lattice.h;
    if !(h > 0.0) || lattice.space < 1 || lattice.time < 1 {
        return Err(Error::InvalidParameter("lattice needs h > 0 and at least one point per axis".into()));
    }
    if !(window.1 - window.0 > 2.0 * h) {
        return Err(Error::InvalidParameter("time window shorter than the difference stencil".into()));
    }
    let (lo, hi) = domain.bounding_box();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| (0..lattice.space).map(|i| lo[k] + (hi[k] - lo[k]) * (i + 1) as f64 / (lattice.space + 1) as f64).collect())
        .collect();
    let total = lattice.space.pow(d as u32);
    let space: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            axes.iter()
                .map(|ax| {
                    let v = ax[idx % ax.len()];
                    idx /= ax.len();
                    v
                })
                .collect()
        })
        .filter(|x: &Vec<f64>| domain.contains_closed(x, 0.0))
        .collect();
    let times: Vec<f64> = if lattice.time == 1 {
        vec![0.5 * (window.0 + window.1)]
    } else {
        lattice_axis(window.0 + h, window.1 - h, lattice.time)
    };
    // (min residual, argmin, evaluated, excluded) per space point
    type Partial = (f64, Option<(Vec<f64>, f64)>, usize, usize);
    let parts: Vec<Result<Partial>> = exec.map_indexed(space.len(), |i| {
        let x = &space[i];
        let mut best = f64::INFINITY;
        let mut arg = None;
        let (mut ev, mut ex) = (0, 0);
        let mut xp = x.clone();
        let mut grad = vec![0.0; d];
        let mut b = vec![0.0; d];
        for &t in &times {
            let (_, q0) = eval(x, t)?;
            let (tp, qtp) = eval(x, t + h)?;
            let (tm, qtm) = eval(x, t - h)?;
            let (mut qmin, mut qmax) = (q0.min(qtp).min(qtm), q0.max(qtp).max(qtm));
            for k in 0..d {
                xp[k] = x[k] + h;
                let (vp, qp) = eval(&xp, t)?;
                xp[k] = x[k] - h;
                let (vm, qm) = eval(&xp, t)?;
                xp[k] = x[k];
                grad[k] = (vp - vm) / (2.0 * h);
                qmin = qmin.min(qp).min(qm);
                qmax = qmax.max(qp).max(qm);
            }
            if kinks.iter().any(|&kr| qmin < kr && kr < qmax) {
                ex += 1;
                continue;
            }
            ev += 1;
            field.eval(x, t, &mut b);
            let dt = (tp - tm) / (2.0 * h);
            let g2: f64 = grad.iter().map(|v| v * v).sum();
            let adv: f64 = grad.iter().zip(&b).map(|(g, v)| g * v).sum();
            let res = dt - g2 + adv;
            if res < best {
                best = res;
                arg = Some((x.clone(), t));
            }
        }
        Ok((best, arg, ev, ex))
    });
    let mut report = HjReport { min_residual: f64::INFINITY, argmin: None, scale, evaluated: 0, excluded: 0 };
    for p in parts {
        let (best, arg, ev, ex) = p?;
        report.evaluated += ev;
        report.excluded += ex;
        if best < report.min_residual {
            report.min_residual = best;
            report.argmin = arg;
        }
    }
    if report.evaluated == 0 {
        report.min_residual = 0.0;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Agmon inequalities
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AgmonVariant {
    /// Rate C/ε with the smallest C making the inequality hold on the data.
    A1,
    /// Rate C_𝔅 = sup|∇·𝔅|, valid when 𝔅·n ≥ 0 on Γ.
    A2 { c_b: f64 },
}

impl AgmonVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AgmonVariant::A1 => "A1",
            AgmonVariant::A2 { .. } => "A2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgmonReport {
    pub variant: &'static str,
    /// Fitted C for A1, C_𝔅 for A2.
    pub constant: f64,
    pub times: Vec<f64>,
    /// Left-hand side per slice.
    pub lhs: Vec<f64>,
    /// ‖ψ(t₂)‖².
    pub rhs: f64,
    /// (rhs − lhs)/rhs per slice.
    pub margins: Vec<f64>,
    pub worst_margin: f64,
    pub worst_time: f64,
    /// max θ/ε.
    pub max_exponent: f64,
    pub flags: Vec<String>,
}

struct WeightedNorms {
    times: Vec<f64>,
    mass: Vec<f64>,
    grad: Vec<f64>,
}

impl WeightedNorms {
    /// e^{−rate(t₂−t_k)}‖ψ(t_k)‖² + coef·∫_{t_k}^{t₂} e^{−rate(t₂−s)}‖∇ψ(s)‖² ds.
    fn lhs(&self, rate: f64, coef: f64) -> Vec<f64> {
        let m = self.times.len();
        let t2 = self.times[m - 1];
        let decay = |k: usize| (-rate * (t2 - self.times[k])).exp();
        let mut out = vec![0.0; m];
        let mut acc = 0.0;
        out[m - 1] = self.mass[m - 1];
        for k in (0..m - 1).rev() {
            let dt = self.times[k + 1] - self.times[k];
            acc += 0.5 * dt * (decay(k) * self.grad[k] + decay(k + 1) * self.grad[k + 1]);
            out[k] = decay(k) * self.mass[k] + coef * acc;
        }
        out
    }
}

/// Evaluates both sides of the Agmon inequality for ψ = exp(θ/ε)φ on every
/// slice. `theta` is laid out like `phi`'s values.
pub fn agmon_check(phi: &SpaceTimeField, theta: &[f64], variant: AgmonVariant) -> Result<AgmonReport> {
    if theta.len() != phi.values().len() {
        return Err(Error::DimensionMismatch { expected: phi.values().len(), got: theta.len() });
    }
    let eps = phi.epsilon();
    let max_exponent = theta.iter().fold(0.0f64, |a, &v| a.max(v / eps));
    if max_exponent > EXP_GUARD {
        return Err(Error::Scale { max_exponent });
    }
    if theta.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter("theta must be finite and nonnegative".into()));
    }
    let grid = phi.grid();
    let n = phi.cell_count();
    let m = phi.slice_count();
    let mut norms = WeightedNorms { times: phi.times().to_vec(), mass: Vec::with_capacity(m), grad: Vec::with_capacity(m) };
    let mut psi = vec![0.0; n];
    for k in 0..m {
        let s = phi.slice(k);
        for c in 0..n {
            psi[c] = (theta[k * n + c] / eps).exp() * s[c];
        }
        norms.mass.push(l2_norm(grid, &psi).powi(2));
        norms.grad.push(grad_norm_sq(grid, &psi, phi.mask()));
    }
    let rhs = norms.mass[m - 1];
    let mut flags = Vec::new();
    let (constant, rate, coef) = match variant {
        AgmonVariant::A2 { c_b } => {
            if !(c_b >= 0.0) {
                return Err(Error::InvalidParameter(format!("C_B must be nonnegative, got {c_b}")));
            }
            (c_b, c_b, 2.0 * eps)
        }
        AgmonVariant::A1 => {
            let holds = |c: f64| norms.lhs(c / eps, eps).iter().all(|&l| l <= rhs);
            let c = if holds(0.0) {
                0.0
            } else {
                let mut hi = eps;
                while !holds(hi) && hi < 1e8 {
                    hi *= 2.0;
                }
                if !holds(hi) {
                    flags.push("no-finite-constant".to_string());
                    hi
                } else {
                    let mut lo = 0.0;
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if holds(mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                        if hi - lo <= 1e-14 * hi {
                            break;
                        }
                    }
                    hi
                }
            };
            (c, c / eps, eps)
        }
    };
    let lhs = norms.lhs(rate, coef);
    let margins: Vec<f64> = if rhs > 0.0 {
        lhs.iter().map(|l| (rhs - l) / rhs).collect()
    } else {
        flags.push("zero-data".to_string());
        lhs.iter().map(|&l| if l > 0.0 { f64::NEG_INFINITY } else { 0.0 }).collect()
    };
    let (wk, worst) =
        margins.iter().enumerate().fold((m - 1, f64::INFINITY), |(bk, bv), (k, &v)| if v < bv { (k, v) } else { (bk, bv) });
    Ok(AgmonReport {
        variant: variant.as_str(),
        constant,
        times: norms.times.clone(),
        lhs,
        rhs,
        worst_time: norms.times[wk],
        margins,
        worst_margin: worst,
        max_exponent,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Dissipation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DissipationRatio {
    pub epsilon: f64,
    /// ‖φ(t₀−T₀)‖/‖φ(t₀)‖ on U; None when G vanishes on U.
    pub ratio: Option<f64>,
    pub start_norm: f64,
    pub end_norm: f64,
    pub flags: Vec<String>,
}

/// Solves the annulus system on U = Ω ∖ ω̄₀ backward over [t₀−T₀, t₀] from
/// φ(t₀) = G and returns the norm ratio across the window.
pub fn dissipation_outside(
    grid: &Arc<Grid>,
    field: &VelocityField,
    omega0: &Region,
    g: &[f64],
    t0: f64,
    t0_window: f64,
    params: &SolverParams,
) -> Result<DissipationRatio> {
    if !(t0_window > 0.0) || t0 - t0_window < -1e-12 {
        return Err(Error::InvalidParameter(format!("need 0 < T0 <= t0, got T0 = {t0_window}, t0 = {t0}")));
    }
    let sol = solve_annulus(grid, g, field, params, ((t0 - t0_window).max(0.0), t0), None, Some(omega0))?;
    let start = l2_norm(grid, sol.first());
    let end = l2_norm(grid, sol.last());
    let mut flags = Vec::new();
    let ratio = if end > 0.0 {
        Some(start / end)
    } else {
        flags.push("undefined: G vanishes on U".to_string());
        None
    };
    Ok(DissipationRatio { epsilon: params.epsilon, ratio, start_norm: start, end_norm: end, flags })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissipationFit {
    /// Line through (1/ε, ln ratio).
    pub fit: FitResult,
    /// Rate of the squared-norm estimate: C₀ = −2·slope.
    pub c0: f64,
}

/// Fits ln(ratio) against 1/ε over the defined rows (at least three).
pub fn dissipation_fit(rows: &[DissipationRatio]) -> Result<DissipationFit> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.ratio.map(|q| (r.epsilon, q))).collect();
    let fit = fit_log_inverse_min(&pts, 3)?;
    Ok(DissipationFit { c0: -2.0 * fit.slope, fit })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDissipation {
    pub m: usize,
    pub c0: f64,
    pub epsilon: f64,
    /// ‖φ(0)‖².
    pub initial_sq: f64,
    /// ‖φ‖² on ω × (0, T).
    pub observation_sq: f64,
    /// Smallest admissible C′ at each slice t ≥ mT₀.
    pub rows: Vec<(f64, f64)>,
    /// Smallest C′ valid for every listed t; None when φ vanishes.
    pub admissible: Option<f64>,
}

/// Smallest C′ with ‖φ(0)‖² ≤ C′(exp(−mC₀/ε)‖φ(t)‖² + ‖φ‖²_{L²(ω_T)}) for
/// every slice t ∈ [mT₀, T]. Needs a satisfied flushing certificate for the
/// same T.
pub fn dissipation_global(
    phi: &SpaceTimeField,
    chi: &[f64],
    certificate: &FlushingReport,
    m: usize,
    c0: f64,
) -> Result<GlobalDissipation> {
    if certificate.verdict != Verdict::Satisfied {
        return Err(Error::Precondition(format!(
            "flushing certificate has verdict `{}`; run `flow check-flushing` on (T, T0, r0) until it is satisfied",
            certificate.verdict.as_str()
        )));
    }
    let t_end = phi.t_end();
    if (certificate.t_end - t_end).abs() > 1e-9 * t_end.max(1.0) || phi.t_start().abs() > 1e-12 {
        return Err(Error::Precondition(format!(
            "flushing certificate was issued for T = {}, but the solution spans [{}, {}]",
            certificate.t_end,
            phi.t_start(),
            t_end
        )));
    }
    let t0w = certificate.t0_window;
    if m == 0 || m as f64 * t0w > t_end * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!("need 1 <= m <= T/T0 = {}, got m = {m}", t_end / t0w)));
    }
    if chi.len() != phi.cell_count() {
        return Err(Error::DimensionMismatch { expected: phi.cell_count(), got: chi.len() });
    }
    let eps = phi.epsilon();
    let grid = phi.grid();
    let initial_sq = l2_norm(grid, phi.first()).powi(2);
    let observation_sq = omega_norm(phi, chi).powi(2);
    let damp = (-(m as f64) * c0 / eps).exp();
    let start = m as f64 * t0w - 1e-12 * t_end.max(1.0);
    let mut rows = Vec::new();
    for (k, &t) in phi.times().iter().enumerate() {
        if t < start {
            continue;
        }
        let denom = damp * l2_norm(grid, phi.slice(k)).powi(2) + observation_sq;
        if denom > 0.0 {
            rows.push((t, initial_sq / denom));
        }
    }
    let admissible = if rows.is_empty() { None } else { Some(rows.iter().map(|r| r.1).fold(0.0, f64::max)) };
    Ok(GlobalDissipation { m, c0, epsilon: eps, initial_sq, observation_sq, rows, admissible })
}

// ---------------------------------------------------------------------------
// η and the Carleman weights
// ---------------------------------------------------------------------------

/// η(x) = Πₖ ηₖ(xₖ), each factor a pair of quadratic arcs equal to 0 at the
/// ends of the axis and 1 at the vertex coordinate, which lies in ω′.
#[derive(Clone, Debug, PartialEq)]
pub struct Eta {
    lo: Vec<f64>,
    hi: Vec<f64>,
    vertex: Vec<f64>,
    /// Sampled inf of |∇η| over Ω ∖ ω′ (minus the corner discs in 2-D).
    pub delta: f64,
    /// Sampled sup of η (1 at the vertex).
    pub sup: f64,
    /// Radius of the corner discs left out of the δ sampling on rectangles;
    /// every C¹ function vanishing on two meeting edges has a critical point
    /// at their corner. Zero on intervals.
    pub corner_radius: f64,
    /// Points used for δ.
    pub samples: usize,
}

impl Eta {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn vertex(&self) -> &[f64] {
        &self.vertex
    }

    fn factor(&self, k: usize, x: f64) -> (f64, f64) {
        let (a, b, c) = (self.lo[k], self.hi[k], self.vertex[k]);
        let len = if x <= c { c - a } else { b - c };
        let u = (x - c) / len;
        (1.0 - u * u, -2.0 * u / len)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (0..self.dim()).map(|k| self.factor(k, x[k]).0).product()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let f: Vec<(f64, f64)> = (0..d).map(|k| self.factor(k, x[k])).collect();
        for k in 0..d {
            out[k] = (0..d).map(|j| if j == k { f[j].1 } else { f[j].0 }).product();
        }
    }

    pub fn normal_derivative(&self, x: &[f64], normal: &[f64]) -> f64 {
        let mut g = [0.0; 3];
        let d = self.dim();
        self.gradient(x, &mut g[..d]);
        (0..d).map(|k| g[k] * normal[k]).sum()
    }
}

/// Corner disc radius on rectangles, in sampling cells.
pub const ETA_CORNER_CELLS: f64 = 2.0;

fn eta_vertex(lo: &[f64], hi: &[f64], omega: &Region) -> Vec<f64> {
    let target: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for m in omega.members() {
        let cand: Vec<f64> = match m {
            Shape::Box { lo: bl, hi: bh } => target
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let q = 0.25 * (bh[k] - bl[k]);
                    t.clamp(bl[k] + q, bh[k] - q)
                })
                .collect(),
            Shape::Ball { center, radius } => {
                let dvec: Vec<f64> = target.iter().zip(center).map(|(t, c)| t - c).collect();
                let len = crate::geometry::norm2(&dvec);
                let lim = 0.5 * radius;
                if len <= lim {
                    target.clone()
                } else {
                    center.iter().zip(&dvec).map(|(c, v)| c + v * lim / len).collect()
                }
            }
        };
        let dd = crate::geometry::dist(&cand, &target);
        if best.as_ref().is_none_or(|b| dd < b.0) {
            best = Some((dd, cand));
        }
    }
    best.map(|b| b.1).unwrap_or(target)
}

/// Builds η for `domain` (interval or rectangle) with its vertex in ω′ and
/// certifies δ = inf_{Ω∖ω′}|∇η| > 0 on a lattice of `samples` points per
/// axis.
pub fn build_eta(domain: &Domain, omega_prime: &Region, samples: usize) -> Result<Eta> {
    if matches!(domain, Domain::Disk { .. }) {
        return Err(Error::UnsupportedDomain("eta is built for intervals and rectangles".into()));
    }
    let (lo, hi) = domain.bounding_box();
    let d = lo.len();
    if omega_prime.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: omega_prime.dim() });
    }
    let size = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
    if !omega_prime.is_inside(domain, 1e-12 * size) {
        return Err(Error::InvalidParameter("omega' must be compactly inside the domain".into()));
    }
    if samples < 3 {
        return Err(Error::InvalidParameter("eta needs at least 3 samples per axis".into()));
    }
    let vertex = eta_vertex(&lo, &hi, omega_prime);
    if !omega_prime.contains_open(&vertex) {
        return Err(Error::Construction("no vertex position found inside omega'".into()));
    }
    let h = lo.iter().zip(&hi).map(|(a, b)| (b - a) / (samples - 1) as f64).fold(0.0, f64::max);
    let corner_radius = if d == 1 { 0.0 } else { ETA_CORNER_CELLS * h };
    let mut eta = Eta { lo: lo.clone(), hi: hi.clone(), vertex, delta: f64::INFINITY, sup: 0.0, corner_radius, samples: 0 };
    let mut pts = tensor_points(&lo, &hi, samples);
    if d == 1 {
        for m in omega_prime.members() {
            match m {
                Shape::Box { lo: bl, hi: bh } => {
                    pts.push(vec![bl[0]]);
                    pts.push(vec![bh[0]]);
                }
                Shape::Ball { center, radius } => {
                    pts.push(vec![center[0] - radius]);
                    pts.push(vec![center[0] + radius]);
                }
            }
        }
    }
    let corners = if d == 2 { vec![[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]] } else { Vec::new() };
    let mut g = vec![0.0; d];
    let mut sup = eta.value(&eta.vertex.clone());
    for x in &pts {
        sup = sup.max(eta.value(x));
        if omega_prime.contains_open(x) {
            continue;
        }
        if corners.iter().any(|c| crate::geometry::dist(x, &c[..]) < corner_radius) {
            continue;
        }
        eta.gradient(x, &mut g);
        eta.delta = eta.delta.min(crate::geometry::norm2(&g));
        eta.samples += 1;
    }
    eta.sup = sup;
    if !(eta.delta > 0.0 && eta.delta.is_finite()) {
        return Err(Error::Construction(format!("sampled inf |grad eta| = {} is not positive", eta.delta)));
    }
    Ok(eta)
}

/// α±, ξ± built from η, λ, s and T.
#[derive(Clone, Debug)]
pub struct CarlemanWeights {
    eta: Arc<Eta>,
    pub lambda: f64,
    pub s: f64,
    pub t_end: f64,
}

pub fn carleman_weights(eta: Arc<Eta>, lambda: f64, s: f64, t_end: f64) -> Result<CarlemanWeights> {
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 1, got {lambda}")));
    }
    if !(s >= 1.0 && s.is_finite()) {
        return Err(Error::InvalidParameter(format!("s must be >= 1, got {s}")));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParameter(format!("T must be positive, got {t_end}")));
    }
    Ok(CarlemanWeights { eta, lambda, s, t_end })
}

impl CarlemanWeights {
    pub fn eta(&self) -> &Eta {
        &self.eta
    }

    fn denom(&self, t: f64) -> Option<f64> {
        if t <= 0.0 || t >= self.t_end {
            None
        } else {
            Some(t * (self.t_end - t))
        }
    }

    /// ξ for a given η value; `sign` is +1 or −1. +∞ at t ∈ {0, T}.
    pub fn xi_from(&self, eta: f64, t: f64, sign: f64) -> f64 {
        match self.denom(t) {
            Some(q) => (self.lambda * (4.0 + sign * eta)).exp() / q,
            None => f64::INFINITY,
        }
    }

    /// α for a given η value; `sign` is +1 or −1. +∞ at t ∈ {0, T}.
    pub fn alpha_from(&self, eta: f64, t: f64, sign: f64) -> f64 {
        match self.denom(t) {
            Some(q) => ((6.0 * self.lambda).exp() - (self.lambda * (4.0 + sign * eta)).exp()) / q,
            None => f64::INFINITY,
        }
    }

    pub fn xi_plus(&self, x: &[f64], t: f64) -> f64 {
        self.xi_from(self.eta.value(x), t, 1.0)
    }

    pub fn xi_minus(&self, x: &[f64], t: f64) -> f64 {
        self.xi_from(self.eta.value(x), t, -1.0)
    }

    pub fn alpha_plus(&self, x: &[f64], t: f64) -> f64 {
        self.alpha_from(self.eta.value(x), t, 1.0)
    }

    pub fn alpha_minus(&self, x: &[f64], t: f64) -> f64 {
        self.alpha_from(self.eta.value(x), t, -1.0)
    }
}

/// s₁(T + T²)C_T/ε, the smallest admissible s for threshold constant s₁.
pub fn carleman_threshold(epsilon: f64, t_end: f64, c_t: f64, s1: f64) -> f64 {
    s1 / epsilon * (t_end + t_end * t_end) * c_t
}

// ---------------------------------------------------------------------------
// Carleman functional
// ---------------------------------------------------------------------------

/// Time slices dropped at each end of the Carleman quadrature.
pub const CARLEMAN_GUARD_SLICES: usize = 2;

/// ln e^x underflows below this in double precision.
const LN_UNDERFLOW: f64 = -745.0;

/// Running log-sum-exp.
#[derive(Clone, Copy, Debug)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn add(&mut self, ln: f64) {
        if ln == f64::NEG_INFINITY {
            return;
        }
        if ln <= self.max {
            self.sum += (ln - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - ln).exp() + 1.0;
            self.max = ln;
        }
    }

    fn merge(&mut self, other: LogSum) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if self.max == f64::NEG_INFINITY {
            *self = other;
            return;
        }
        if other.max <= self.max {
            self.sum += other.sum * (other.max - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        }
    }

    fn ln(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// One integral of the Carleman functional, kept as its natural logarithm
/// since the weights underflow double precision for realistic s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NamedIntegral {
    pub name: &'static str,
    /// ln of the integral; −∞ when it vanishes.
    pub ln_value: f64,
}

impl NamedIntegral {
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.ln_value < f64::INFINITY && !self.ln_value.is_nan()
    }
}

/// Sub-cell resolution of the Carleman quadrature. At the threshold s the
/// weights concentrate on a neighbourhood of the vertex of η at t = T/2 that
/// is far narrower than a grid cell, so every cell and time step is
/// integrated with a sub-lattice of midpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarlemanQuadrature {
    /// Midpoints per axis inside each cell.
    pub space_sub: usize,
    /// Midpoints inside each time step.
    pub time_sub: usize,
}

impl CarlemanQuadrature {
    pub fn for_dim(dim: usize) -> Self {
        if dim == 1 {
            CarlemanQuadrature { space_sub: 32, time_sub: 32 }
        } else {
            CarlemanQuadrature { space_sub: 6, time_sub: 16 }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureInfo {
    pub cells: usize,
    pub slices_total: usize,
    /// Time steps integrated (the guard band removed).
    pub intervals_used: usize,
    pub guard_slices: usize,
    pub window: (f64, f64),
    pub space_sub: usize,
    pub time_sub: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalReport {
    /// s³λ⁴∫e^{−2sα₊}ξ₊³|Φ|².
    pub lhs_zero_order: NamedIntegral,
    /// sλ²∫e^{−2sα₊}ξ₊|∇Φ|².
    pub lhs_gradient: NamedIntegral,
    /// Sum of the two volume terms.
    pub lhs_volume_terms: NamedIntegral,
    /// sλ²∫_Γ ∂ₙf|∂ₙη|²(ξ + sξ²)e^{−2sα}|Φ|².
    pub lhs_boundary_term: NamedIntegral,
    /// s³λ⁴∫_{ω_T}e^{−2sα₊}ξ₊³|Φ|².
    pub rhs_localized_term: NamedIntegral,
    /// LHS/RHS; None when the RHS vanishes.
    pub c_min: Option<f64>,
    pub ln_c_min: Option<f64>,
    pub epsilon: f64,
    pub s: f64,
    pub lambda: f64,
    pub s_threshold: f64,
    pub s1: f64,
    pub lambda1: f64,
    pub quadrature: QuadratureInfo,
    /// e^{−2sα} is 0 in double precision at every quadrature point, so the
    /// integrals are only available through their logarithms.
    pub degenerate: bool,
    /// e^{−4sα₊} ≤ e^{−2sα₊} held at every quadrature point.
    pub monotone_in_s: bool,
    pub flags: Vec<String>,
}

/// Inputs of the Carleman functional besides the solution and the weights.
pub struct CarlemanSetup<'a> {
    pub potential: &'a dyn Potential,
    /// Cell fractions of ω.
    pub chi: &'a [f64],
    /// C_T(f).
    pub c_t: f64,
    pub s1: f64,
    pub lambda1: f64,
    pub quadrature: CarlemanQuadrature,
    pub exec: Execution,
}

/// Midpoints of `q` equal parts of [lo, hi] and ln of the part length; a
/// degenerate range gives the single point with measure 1.
fn sub_midpoints(lo: f64, hi: f64, q: usize) -> (Vec<f64>, f64) {
    if hi <= lo {
        return (vec![lo], 0.0);
    }
    let w = (hi - lo) / q as f64;
    ((0..q).map(|i| lo + (i as f64 + 0.5) * w).collect(), w.ln())
}

/// Sub-lattice of a box given per-axis ranges.
fn sub_box(ranges: &[(f64, f64)], q: usize) -> (Vec<Vec<f64>>, f64) {
    let mut pts = vec![Vec::new()];
    let mut ln_measure = 0.0;
    for &(lo, hi) in ranges {
        let (mids, ln_w) = sub_midpoints(lo, hi, q);
        ln_measure += ln_w;
        pts = pts.iter().flat_map(|p| mids.iter().map(move |&m| [p.as_slice(), &[m]].concat())).collect();
    }
    (pts, ln_measure)
}

struct TimeSub {
    /// (fraction of the step, ln t(T−t)) per midpoint, per step.
    points: Vec<Vec<(f64, f64, f64)>>,
    ln_dt: Vec<f64>,
}

/// Hopf-transforms φ and evaluates the terms of the Carleman estimate. Φ is
/// taken piecewise constant in space (cell values) and piecewise linear in
/// time; the weights are integrated on the sub-lattice of
/// [`CarlemanQuadrature`], in log space, over the time steps that remain
/// after dropping [`CARLEMAN_GUARD_SLICES`] slices at each end.
pub fn carleman_functional(
    phi: &SpaceTimeField,
    setup: &CarlemanSetup<'_>,
    weights: &CarlemanWeights,
) -> Result<FunctionalReport> {
    let eps = phi.epsilon();
    let t_end = phi.t_end();
    if phi.t_start().abs() > 1e-12 || (t_end - weights.t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::InvalidParameter("the solution must span [0, T] of the weights".into()));
    }
    if setup.chi.len() != phi.cell_count() {
        return Err(Error::DimensionMismatch { expected: phi.cell_count(), got: setup.chi.len() });
    }
    if weights.eta().dim() != phi.grid().dim() {
        return Err(Error::DimensionMismatch { expected: phi.grid().dim(), got: weights.eta().dim() });
    }
    let quad = setup.quadrature;
    if quad.space_sub == 0 || quad.time_sub == 0 {
        return Err(Error::InvalidParameter("quadrature needs at least one sub-point".into()));
    }
    let s_threshold = carleman_threshold(eps, t_end, setup.c_t, setup.s1);
    if weights.s < s_threshold * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!("s = {} is below the threshold s1(T+T^2)C_T/eps = {s_threshold}", weights.s)));
    }
    if weights.lambda < setup.lambda1 {
        return Err(Error::Precondition(format!("lambda = {} is below lambda1 = {}", weights.lambda, setup.lambda1)));
    }
    let (big_phi, _) = hopf_transform(phi, setup.potential, eps)?;
    let grid = phi.grid();
    let d = grid.dim();
    let n = grid.cell_count();
    let m = phi.slice_count();
    let guard = CARLEMAN_GUARD_SLICES;
    if m < 2 * guard + 2 {
        return Err(Error::InvalidParameter(format!("need at least {} time slices", 2 * guard + 2)));
    }
    let times = phi.times();
    let steps: Vec<usize> = (guard..m - 1 - guard).collect();
    let tsub = TimeSub {
        points: steps
            .iter()
            .map(|&k| {
                let (mids, _) = sub_midpoints(times[k], times[k + 1], quad.time_sub);
                mids.iter().map(|&t| ((t - times[k]) / (times[k + 1] - times[k]), (t * (t_end - t)).ln(), t)).collect()
            })
            .collect(),
        ln_dt: steps.iter().map(|&k| ((times[k + 1] - times[k]) / quad.time_sub as f64).ln()).collect(),
    };
    let (s, lambda) = (weights.s, weights.lambda);
    let e6 = (6.0 * lambda).exp();
    let ln_vol_coef = 3.0 * s.ln() + 4.0 * lambda.ln();
    let ln_grad_coef = s.ln() + 2.0 * lambda.ln();
    let eta = weights.eta();
    let h = grid.spacing();
    let value_at = |c: usize, k: usize, frac: f64| -> f64 {
        let a = big_phi.slice(k)[c];
        let b = big_phi.slice(k + 1)[c];
        a + (b - a) * frac
    };

    // Zero-order term per cell (also feeds the localized RHS).
    struct CellSums {
        zero: LogSum,
        any_above_underflow: bool,
        monotone: bool,
    }
    let cell_sums: Vec<CellSums> = setup.exec.map_indexed(n, |c| {
        let x = grid.center(c);
        let ranges: Vec<(f64, f64)> = (0..d).map(|k| (x[k] - 0.5 * h[k], x[k] + 0.5 * h[k])).collect();
        let (pts, ln_meas) = sub_box(&ranges, quad.space_sub);
        let bvals: Vec<f64> = pts.iter().map(|p| lambda * (4.0 + eta.value(p))).collect();
        let mut out = CellSums { zero: LogSum::new(), any_above_underflow: false, monotone: true };
        for (j, &k) in steps.iter().enumerate() {
            for &(frac, ln_d, _) in &tsub.points[j] {
                let v = value_at(c, k, frac);
                let ln_v2 = if v == 0.0 { f64::NEG_INFINITY } else { 2.0 * v.abs().ln() };
                let dinv = (-ln_d).exp();
                for &lb in &bvals {
                    let alpha = (e6 - lb.exp()) * dinv;
                    let expo = -2.0 * s * alpha;
                    if expo > LN_UNDERFLOW {
                        out.any_above_underflow = true;
                    }
                    if -4.0 * s * alpha > expo {
                        out.monotone = false;
                    }
                    out.zero.add(ln_vol_coef + 3.0 * (lb - ln_d) + expo + ln_v2 + ln_meas + tsub.ln_dt[j]);
                }
            }
        }
        out
    });

    // Gradient term on the dual cell of each interior face.
    let faces = grid.faces();
    let face_sums: Vec<LogSum> = setup.exec.map_indexed(faces.len(), |fi| {
        let f = &faces[fi];
        let ranges: Vec<(f64, f64)> = (0..d)
            .map(|k| {
                if k == f.axis {
                    (f.center[k] - 0.5 * f.dist, f.center[k] + 0.5 * f.dist)
                } else {
                    (f.center[k] - 0.5 * h[k], f.center[k] + 0.5 * h[k])
                }
            })
            .collect();
        let (pts, ln_meas) = sub_box(&ranges, quad.space_sub);
        let bvals: Vec<f64> = pts.iter().map(|p| lambda * (4.0 + eta.value(p))).collect();
        let mut acc = LogSum::new();
        for (j, &k) in steps.iter().enumerate() {
            for &(frac, ln_d, _) in &tsub.points[j] {
                let g = (value_at(f.right, k, frac) - value_at(f.left, k, frac)) / f.dist;
                if g == 0.0 {
                    continue;
                }
                let dinv = (-ln_d).exp();
                for &lb in &bvals {
                    let alpha = (e6 - lb.exp()) * dinv;
                    acc.add(ln_grad_coef + (lb - ln_d) - 2.0 * s * alpha + 2.0 * g.abs().ln() + ln_meas + tsub.ln_dt[j]);
                }
            }
        }
        acc
    });

    // Boundary term over each boundary face.
    let mut boundary = LogSum::new();
    let mut nonpositive_dn = 0usize;
    for f in grid.boundary_faces() {
        let ranges: Vec<(f64, f64)> = (0..d)
            .map(|k| if k == f.axis { (f.center[k], f.center[k]) } else { (f.center[k] - 0.5 * h[k], f.center[k] + 0.5 * h[k]) })
            .collect();
        let (pts, ln_meas) = sub_box(&ranges, quad.space_sub);
        let geo: Vec<(f64, f64)> =
            pts.iter().map(|p| (lambda * (4.0 + eta.value(p)), eta.normal_derivative(p, &f.normal[..d]).powi(2))).collect();
        for (j, &k) in steps.iter().enumerate() {
            for &(frac, ln_d, t) in &tsub.points[j] {
                let v = value_at(f.cell, k, frac);
                if v == 0.0 {
                    continue;
                }
                let dinv = (-ln_d).exp();
                for (p, &(lb, dn_eta_sq)) in pts.iter().zip(&geo) {
                    let dn_f = setup.potential.normal_derivative(p, t, &f.normal[..d]);
                    if dn_f <= 0.0 {
                        nonpositive_dn += 1;
                        continue;
                    }
                    if dn_eta_sq == 0.0 {
                        continue;
                    }
                    let xi = (lb - ln_d).exp();
                    let alpha = (e6 - lb.exp()) * dinv;
                    boundary.add(
                        ln_grad_coef + dn_f.ln() + dn_eta_sq.ln() + (lb - ln_d) + (1.0 + s * xi).ln() - 2.0 * s * alpha
                            + 2.0 * v.abs().ln()
                            + ln_meas
                            + tsub.ln_dt[j],
                    );
                }
            }
        }
    }

    let mut zero = LogSum::new();
    let mut rhs = LogSum::new();
    let mut degenerate = true;
    let mut monotone = true;
    for (c, cs) in cell_sums.iter().enumerate() {
        zero.merge(cs.zero);
        if setup.chi[c] > 0.0 {
            let mut part = cs.zero;
            if part.max > f64::NEG_INFINITY {
                part.max += setup.chi[c].ln();
            }
            rhs.merge(part);
        }
        degenerate &= !cs.any_above_underflow;
        monotone &= cs.monotone;
    }
    let mut grad = LogSum::new();
    for fs in face_sums {
        grad.merge(fs);
    }
    let mut volume = zero;
    volume.merge(grad);
    let mut lhs = volume;
    lhs.merge(boundary);
    let mut flags = Vec::new();
    if degenerate {
        flags.push("degenerate: exp(-2s alpha) underflows at every quadrature point; integrals kept in log space".into());
    }
    if nonpositive_dn > 0 {
        flags.push(format!("boundary: {nonpositive_dn} samples with dn f <= 0 skipped"));
    }
    let ln_c = if rhs.ln() == f64::NEG_INFINITY {
        flags.push("undefined: the solution vanishes on omega_T".into());
        None
    } else {
        Some(lhs.ln() - rhs.ln())
    };
    let named = |name, l: &LogSum| NamedIntegral { name, ln_value: l.ln() };
    Ok(FunctionalReport {
        lhs_zero_order: named("lhs_zero_order", &zero),
        lhs_gradient: named("lhs_gradient", &grad),
        lhs_volume_terms: named("lhs_volume_terms", &volume),
        lhs_boundary_term: named("lhs_boundary_term", &boundary),
        rhs_localized_term: named("rhs_localized_term", &rhs),
        c_min: ln_c.map(f64::exp),
        ln_c_min: ln_c,
        epsilon: eps,
        s,
        lambda,
        s_threshold,
        s1: setup.s1,
        lambda1: setup.lambda1,
        quadrature: QuadratureInfo {
            cells: n,
            slices_total: m,
            intervals_used: steps.len(),
            guard_slices: guard,
            window: (times[guard], times[m - 1 - guard]),
            space_sub: quad.space_sub,
            time_sub: quad.time_sub,
        },
        degenerate,
        monotone_in_s: monotone,
        flags,
    })
}

/// C_T(f) term by term, from sampled sup norms over Ω × [0, T].
pub fn c_t(potential: Arc<dyn Potential>, domain: &Domain, t_end: f64, sampling: &Sampling) -> Result<CtBreakdown> {
    let field = make_gradient_field(potential);
    let norms = field_norms(&field, domain, t_end, sampling)?;
    match norms.c_t {
        CtStatus::Available(b) => Ok(b),
        _ => Err(norms.c_t_total().unwrap_err()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use crate::pde::solve_adjoint;
    use crate::velocity::builtin_field;

    fn zero_theta_weight() -> AgmonWeight {
        let field = builtin_field("zero", 1).unwrap();
        let domain = Domain::interval(-3.0, 3.0).unwrap();
        build_theta(&field, &domain, &[0.0], 1.0, (0.0, 1.0), &ThetaOptions { space: 61, ..Default::default() }).unwrap()
    }

    #[test]
    fn theta_for_zero_field_matches_hand_values() {
        let w = zero_theta_weight();
        assert_eq!(w.kappa, 4.0);
        assert!((w.c0.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(w.max_inside, 0.0);
        assert!(w.inside_samples > 0);
        // g(t₂) = 1, so θ = r² beyond 2r at the anchor time
        assert_eq!(w.eval(&[2.5], 1.0).unwrap(), 1.0);
        assert_eq!(w.eval(&[0.7], 0.3).unwrap(), 0.0);
        assert!((w.eval(&[-2.0], 0.0).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hj_residual_nonnegative_and_canary_negative() {
        let w = zero_theta_weight();
        let field = w.field().clone();
        let domain = Domain::interval(-3.0, 3.0).unwrap();
        let lat = HjLattice { space: 121, time: 21, h: 1e-2 };
        let rep = hj_residual(&w, &field, &domain, &lat, Execution::Sequential).unwrap();
        assert!(rep.normalized() >= -1e-3, "{rep:?}");
        let bad = w.with_kappa(w.kappa / 2.0);
        let rep = hj_residual(&bad, &field, &domain, &lat, Execution::Sequential).unwrap();
        assert!(rep.normalized() < -0.1, "{rep:?}");
    }

    #[test]
    fn hj_residual_of_zero_weight_is_zero() {
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let lat = HjLattice { space: 11, time: 5, h: 1e-2 };
        let rep =
            hj_residual_with(|_, _| Ok((0.0, 0.0)), &[], &field, &domain, (0.0, 1.0), &lat, 1.0, Execution::Sequential).unwrap();
        assert_eq!(rep.min_residual, 0.0);
        assert_eq!(rep.excluded, 0);
    }

    #[test]
    fn agmon_a3_decay_for_outward_field() {
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[80]).unwrap());
        let data: Vec<f64> = (0..80).map(|c| (3.0 * grid.center(c)[0]).sin() + 0.5).collect();
        let sol = solve_adjoint(&grid, &data, &field, &SolverParams::new(0.1, 100), 1.0).unwrap();
        let theta = vec![0.0; sol.values().len()];
        let rep = agmon_check(&sol, &theta, AgmonVariant::A2 { c_b: 1.0 }).unwrap();
        assert!(rep.worst_margin >= -1e-6, "{rep:?}");
        let zero = sol.with_values(vec![0.0; sol.values().len()], sol.tag()).unwrap();
        let rep = agmon_check(&zero, &theta, AgmonVariant::A1).unwrap();
        assert_eq!(rep.rhs, 0.0);
        assert!(rep.lhs.iter().all(|&v| v == 0.0));
        assert_eq!(rep.constant, 0.0);
    }

    #[test]
    fn dissipation_ratio_shrinks_when_epsilon_halves() {
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[400]).unwrap());
        let omega0 = Region::interval(-0.5, 0.5).unwrap();
        let g = vec![1.0; 400];
        let ratio = |eps: f64| {
            let mut p = SolverParams::new(eps, 400);
            p.theta = 1.0;
            dissipation_outside(&grid, &field, &omega0, &g, 2.0, 2.0, &p).unwrap().ratio.unwrap()
        };
        let (a, b) = (ratio(0.025), ratio(0.0125));
        assert!(b < a, "{b} !< {a}");
    }

    #[test]
    fn eta_quadratic_certificate() {
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let omega = Region::interval(-0.1, 0.1).unwrap();
        let eta = build_eta(&domain, &omega, 2001).unwrap();
        assert!((eta.delta - 0.2).abs() < 1e-12, "{}", eta.delta);
        assert_eq!(eta.sup, 1.0);
        assert_eq!(eta.value(&[-1.0]), 0.0);
        assert_eq!(eta.value(&[1.0]), 0.0);
        assert!((eta.value(&[0.3]) - 0.91).abs() < 1e-15);
        let off = Region::interval(0.4, 0.8).unwrap();
        let eta = build_eta(&domain, &off, 2001).unwrap();
        assert!(off.contains_open(eta.vertex()));
        assert!(eta.delta > 0.0);
        assert!(build_eta(&domain, &Region::interval(-1.0, 0.0).unwrap(), 101).is_err());
    }

    #[test]
    fn eta_rectangle_certificate() {
        let domain = Domain::rectangle([0.0, 0.0], [1.0, 1.0]).unwrap();
        let omega = Region::ball(&[0.5, 0.5], 0.1).unwrap();
        let eta = build_eta(&domain, &omega, 129).unwrap();
        assert!(eta.delta > 0.0);
        assert!(eta.corner_radius > 0.0);
        for b in domain.boundary_samples(32) {
            assert!(eta.value(&b.x).abs() <= 1e-12);
        }
        assert!(build_eta(&Domain::disk([0.0, 0.0], 1.0).unwrap(), &omega, 10).is_err());
    }

    #[test]
    fn carleman_weight_spot_values() {
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let eta = Arc::new(build_eta(&domain, &Region::interval(-0.1, 0.1).unwrap(), 101).unwrap());
        let w = carleman_weights(eta, 1.0, 1.0, 2.0).unwrap();
        let e5 = 5f64.exp();
        assert!((w.xi_plus(&[0.0], 1.0) - e5).abs() <= 1e-12 * e5);
        assert!((w.alpha_plus(&[0.0], 1.0) - (6f64.exp() - e5)).abs() <= 1e-12 * e5);
        assert_eq!(w.xi_plus(&[0.0], 0.0), f64::INFINITY);
        assert_eq!(w.alpha_minus(&[0.5], 2.0), f64::INFINITY);
        assert!(carleman_weights(w.eta.clone(), 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn carleman_functional_zero_data_is_undefined() {
        let pot: Arc<dyn Potential> = Arc::new(crate::velocity::QuadraticPotential { dim: 1 });
        let field = make_gradient_field(pot.clone());
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[20]).unwrap());
        let sol = solve_adjoint(&grid, &[0.0; 20], &field, &SolverParams::new(0.25, 20), 1.0).unwrap();
        let eta = Arc::new(build_eta(&domain, &Region::interval(-0.2, 0.2).unwrap(), 101).unwrap());
        let chi = grid.region_fractions(&Region::interval(-0.3, 0.3).unwrap()).unwrap();
        let setup = CarlemanSetup {
            potential: pot.as_ref(),
            chi: &chi,
            c_t: 6.0,
            s1: 1.0,
            lambda1: 1.0,
            quadrature: CarlemanQuadrature::for_dim(1),
            exec: Execution::Sequential,
        };
        let s = carleman_threshold(0.25, 1.0, 6.0, 1.0);
        let w = carleman_weights(eta, 2.0, s, 1.0).unwrap();
        let rep = carleman_functional(&sol, &setup, &w).unwrap();
        assert!(rep.c_min.is_none());
        assert_eq!(rep.lhs_volume_terms.value(), 0.0);
        let low = carleman_weights(w.eta.clone(), 2.0, s * 0.5, 1.0).unwrap();
        assert!(matches!(carleman_functional(&sol, &setup, &low), Err(Error::Precondition(_))));
    }

    #[test]
    fn c_t_of_quadratic_and_zero_potential() {
        let pot: Arc<dyn Potential> = Arc::new(crate::velocity::QuadraticPotential { dim: 1 });
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let b = c_t(pot, &domain, 1.0, &Sampling::default()).unwrap();
        assert!((b.total - 6.0).abs() < 1e-12, "{b:?}");
        let zero: Arc<dyn Potential> = Arc::new(crate::velocity::ConstantPotential { dim: 1, value: 0.0 });
        assert!(matches!(c_t(zero, &domain, 1.0, &Sampling::default()), Err(Error::UndefinedConstant(_))));
    }

    #[test]
    fn log_sum_matches_direct_sum() {
        let mut a = LogSum::new();
        let mut b = LogSum::new();
        for (i, v) in [0.5f64, 2.0, 1e-3, 7.0].iter().enumerate() {
            if i % 2 == 0 {
                a.add(v.ln());
            } else {
                b.add(v.ln());
            }
        }
        a.merge(b);
        assert!((a.ln().exp() - 9.501).abs() < 1e-12);
    }
}
