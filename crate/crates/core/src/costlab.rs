//! Controllability cost as a discrete observability constant.
//!
//! For terminal data v = φ_T the two quadratic forms are
//! A(v) = ‖φ(·,0)‖² and B(v) = ‖φ‖² on ω × (0,T), and K² is the largest
//! eigenvalue of the pencil (A, B). Both forms are applied matrix-free: the
//! adjoint run gives φ, and the forward solver (the exact discrete transpose of
//! the adjoint) maps φ back to the data space. With W the cell volume,
//! A·v = W·y(T) for the uncontrolled state started at φ(0), and
//! B·v = W·y(T) for the state started at 0 and driven by u = φ on ω.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{build_grid, Domain, Grid, Region};
use crate::linalg::{cgls, conjugate_gradient, craig, dot, norm};
use crate::pde::{backward_values, forward_accumulate, forward_final, trapezoid_weights, SolverParams, Stepper};
use crate::velocity::VelocityField;

/// Largest matrix dimension for which the dense method is allowed.
pub const DENSE_LIMIT: usize = 2500;

#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub domain: Domain,
    pub omega: Region,
    pub field: VelocityField,
    pub t_end: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostParams {
    /// Cells per axis; ignored when `single_cell` is set.
    pub resolution: Vec<usize>,
    pub steps: usize,
    /// θ-scheme weight; defaults to 1 (backward Euler). Crank–Nicolson barely
    /// damps the highest grid modes, which then pass as unobservable data and
    /// inflate K.
    pub theta: f64,
    pub residual_tol: f64,
    /// Relative regularization δ of B + δ·tr(B)/n·I.
    pub delta: f64,
    /// Outer tolerance on the relative change of the Rayleigh quotient.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub single_cell: bool,
}

impl CostParams {
    pub fn new(resolution: &[usize], steps: usize) -> Self {
        CostParams {
            resolution: resolution.to_vec(),
            steps,
            theta: 1.0,
            residual_tol: 1e-10,
            delta: 1e-12,
            tol: 1e-12,
            max_iter: 500,
            seed: 0,
            single_cell: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Power,
    Dense,
    /// Dense when the dimension is at most [`DENSE_LIMIT`], power otherwise.
    Auto,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Power => "power",
            Method::Dense => "dense",
            Method::Auto => "auto",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    pub k: f64,
    pub method: Method,
    pub iterations: usize,
    /// Relative change of the Rayleigh quotient at the last iteration (power)
    /// or the relative eigen-residual (dense).
    pub residual: f64,
    pub delta: f64,
    /// K recomputed with 10δ.
    pub k_check: f64,
    pub resolution: Vec<usize>,
    pub steps: usize,
    pub flags: Vec<String>,
    /// Top generalized eigenvector (terminal data), normalized in ℓ².
    pub mode: Vec<f64>,
}

impl CostEstimate {
    pub fn converged(&self) -> bool {
        !self.flags.iter().any(|f| f == "inconclusive")
    }
}

/// A discretized problem, ready for repeated operator applications.
pub struct Instance {
    grid: Arc<Grid>,
    chi: Vec<f64>,
    stepper: Stepper,
    problem: ProblemSpec,
    params: CostParams,
}

impl Instance {
    pub fn new(problem: &ProblemSpec, params: &CostParams) -> Result<Self> {
        if !(problem.t_end > 0.0) {
            return Err(Error::InvalidParameter(format!("T must be positive, got {}", problem.t_end)));
        }
        let grid = if params.single_cell {
            Grid::single_cell(&problem.domain)?
        } else {
            build_grid(&problem.domain, &params.resolution)?
        };
        let grid = Arc::new(grid);
        let chi = grid.region_fractions(&problem.omega)?;
        if chi.iter().all(|c| *c == 0.0) {
            return Err(Error::DegenerateObservation("the observation region does not meet the grid".into()));
        }
        let sp = SolverParams {
            epsilon: problem.epsilon,
            steps: params.steps,
            theta: params.theta,
            residual_tol: params.residual_tol,
        };
        let mut stepper = Stepper::new(&grid, &problem.field, &sp, 0.0, problem.t_end, None)?;
        stepper.precompute()?;
        Ok(Instance { grid, chi, stepper, problem: problem.clone(), params: params.clone() })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn chi(&self) -> &[f64] {
        &self.chi
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn params(&self) -> &CostParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.grid.cell_count()
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            epsilon: self.problem.epsilon,
            steps: self.params.steps,
            theta: self.params.theta,
            residual_tol: self.params.residual_tol,
        }
    }

    /// All adjoint slices for terminal data v, time-major.
    pub fn adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        backward_values(&self.stepper, v, None)
    }

    /// A·v.
    pub fn apply_a(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply_a_at(0, v)
    }

    /// A_k·v, the form ‖φ(·,t_k)‖².
    pub fn apply_a_at(&self, k: usize, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let phi = self.adjoint(v)?;
        let mut y = forward_final(&self.stepper, k, &phi[k * n..(k + 1) * n], None)?;
        let w = self.grid.cell_volume();
        y.iter_mut().for_each(|x| *x *= w);
        Ok(y)
    }

    /// B·v.
    pub fn apply_b(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let phi = self.adjoint(v)?;
        let mut y = forward_final(&self.stepper, 0, &vec![0.0; n], Some((&phi, &self.chi)))?;
        let w = self.grid.cell_volume();
        y.iter_mut().for_each(|x| *x *= w);
        Ok(y)
    }

    /// Observation map D with B = DᵀD: the slices √(w_k·W·χ)·φ_k, time-major.
    pub fn apply_d(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut phi = self.adjoint(v)?;
        let tw = trapezoid_weights(&self.stepper.times());
        let w = self.grid.cell_volume();
        for (k, wk) in tw.iter().enumerate() {
            for i in 0..n {
                phi[k * n + i] *= (wk * w * self.chi[i]).sqrt();
            }
        }
        Ok(phi)
    }

    /// Dᵀ.
    pub fn apply_dt(&self, a: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let tw = trapezoid_weights(&self.stepper.times());
        let w = self.grid.cell_volume();
        let mut s = a.to_vec();
        for (k, wk) in tw.iter().enumerate() {
            for i in 0..n {
                s[k * n + i] *= (wk * w * self.chi[i]).sqrt();
            }
        }
        forward_accumulate(&self.stepper, 0, &s)
    }

    /// C_k = √W·P_k with A_k = C_kᵀC_k.
    pub fn apply_c_at(&self, k: usize, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let phi = self.adjoint(v)?;
        let sw = self.grid.cell_volume().sqrt();
        Ok(phi[k * n..(k + 1) * n].iter().map(|x| sw * x).collect())
    }

    /// C_kᵀ.
    pub fn apply_ct_at(&self, k: usize, y: &[f64]) -> Result<Vec<f64>> {
        let sw = self.grid.cell_volume().sqrt();
        let mut out = forward_final(&self.stepper, k, y, None)?;
        out.iter_mut().for_each(|x| *x *= sw);
        Ok(out)
    }

    /// A(v) and B(v) straight from one adjoint run by quadrature.
    pub fn forms(&self, v: &[f64]) -> Result<(f64, f64)> {
        let n = self.dim();
        let phi = self.adjoint(v)?;
        Ok(self.forms_from(&phi, 0, n))
    }

    fn forms_from(&self, phi: &[f64], k: usize, n: usize) -> (f64, f64) {
        let w = self.grid.cell_volume();
        let a = w * phi[k * n..(k + 1) * n].iter().map(|x| x * x).sum::<f64>();
        let tw = trapezoid_weights(&self.stepper.times());
        let mut b = 0.0;
        for (j, wj) in tw.iter().enumerate() {
            b += wj * w * phi[j * n..(j + 1) * n].iter().zip(&self.chi).map(|(x, c)| c * x * x).sum::<f64>();
        }
        (a, b)
    }

    /// ‖φ(·,t_k)‖ / ‖φ‖_{L²(ω_T)} for the given terminal data.
    pub fn observation_ratio(&self, v: &[f64], k: usize) -> Result<Option<f64>> {
        let n = self.dim();
        let phi = self.adjoint(v)?;
        let (a, b) = self.forms_from(&phi, k, n);
        Ok((b > 0.0).then(|| (a / b).sqrt()))
    }

    /// Slice index closest to time t.
    pub fn slice_index(&self, t: f64) -> Result<usize> {
        let m = self.params.steps;
        if !(0.0..=self.problem.t_end).contains(&t) {
            return Err(Error::InvalidParameter(format!("time {t} outside [0, {}]", self.problem.t_end)));
        }
        Ok(((t / self.problem.t_end * m as f64).round() as usize).min(m))
    }

    /// Dense factor C_k = √W·P_k (so that A_k = CᵀC, with P_k the adjoint
    /// propagator from T to t_k) and dense B, from one adjoint and one forward
    /// run per basis vector.
    pub fn dense_forms(&self, k: usize, exec: Execution) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.dim();
        if n > DENSE_LIMIT {
            return Err(Error::InvalidParameter(format!("dense method limited to dimension {DENSE_LIMIT}, got {n}")));
        }
        let w = self.grid.cell_volume();
        let cols = exec.map_indexed(n, |j| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let phi = self.adjoint(&e)?;
            let b = forward_final(&self.stepper, 0, &vec![0.0; n], Some((&phi, &self.chi)))?;
            Ok((phi[k * n..(k + 1) * n].to_vec(), b))
        });
        let mut c = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        let sw = w.sqrt();
        for (j, col) in cols.into_iter().enumerate() {
            let (cc, cb) = col?;
            for i in 0..n {
                c[(i, j)] = sw * cc[i];
                b[(i, j)] = w * cb[i];
            }
        }
        let b = (&b + b.transpose()) * 0.5;
        Ok((c, b))
    }
}

#[derive(Clone, Debug)]
struct PencilResult {
    lambda: f64,
    lambda_check: f64,
    vector: Vec<f64>,
    iterations: usize,
    residual: f64,
    flags: Vec<String>,
}

/// Top eigenpair of (CᵀC, B + δ·tr(B)/n·I). With LLᵀ the Cholesky factor of
/// the regularized B, K² is the largest squared singular value of CL⁻ᵀ; this
/// avoids forming CᵀC, whose rounding would be amplified by 1/δ.
fn dense_pencil(c: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> Result<PencilResult> {
    let n = b.nrows();
    let solve = |d: f64| -> Result<(f64, DVector<f64>, f64)> {
        let shift = d * b.trace() / n as f64;
        let mut br = b.clone();
        for i in 0..n {
            br[(i, i)] += shift;
        }
        let chol = br
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateObservation("the observation form is indefinite beyond the regularization".into()))?;
        let l = chol.l();
        // X = C L⁻ᵀ, i.e. L Xᵀ = Cᵀ
        let xt = l
            .solve_lower_triangular(&c.transpose())
            .ok_or_else(|| Error::DegenerateObservation("singular Cholesky factor".into()))?;
        let svd = xt.transpose().svd(false, true);
        let vt = svd.v_t.as_ref().expect("requested right singular vectors");
        let (imax, smax) =
            svd.singular_values.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| {
                    if *v > acc.1 {
                        (i, *v)
                    } else {
                        acc
                    }
                },
            );
        let z = vt.row(imax).transpose();
        let x = l
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::DegenerateObservation("singular Cholesky factor".into()))?;
        let lambda = smax * smax;
        let ax = c.transpose() * (c * &x);
        let bx = &br * &x;
        let res = (&ax - &bx * lambda).norm() / ax.norm().max(f64::MIN_POSITIVE);
        Ok((lambda, x, res))
    };
    let (lambda, x, residual) = solve(delta)?;
    let (lambda_check, _, _) = solve(10.0 * delta)?;
    let nx = x.norm();
    Ok(PencilResult { lambda, lambda_check, vector: x.iter().map(|v| v / nx).collect(), iterations: 1, residual, flags: vec![] })
}

/// Matrix-free access to the factors of the pencil (CᵀC, DᵀD + δ'I).
struct Factors<'a> {
    inst: &'a Instance,
    k: usize,
}

impl Factors<'_> {
    fn c(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.inst.apply_c_at(self.k, v)
    }

    fn ct(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.inst.apply_ct_at(self.k, y)
    }

    /// G = [D; √δ' I].
    fn g(&self, v: &[f64], sd: f64) -> Result<Vec<f64>> {
        let mut out = self.inst.apply_d(v)?;
        out.extend(v.iter().map(|x| sd * x));
        Ok(out)
    }

    fn gt(&self, a: &[f64], sd: f64) -> Result<Vec<f64>> {
        let n = self.inst.dim();
        let split = a.len() - n;
        let mut out = self.inst.apply_dt(&a[..split])?;
        for (o, x) in out.iter_mut().zip(&a[split..]) {
            *o += sd * x;
        }
        Ok(out)
    }
}

/// First error raised inside an infallible operator closure.
#[derive(Default)]
struct ErrorSlot(std::cell::RefCell<Option<Error>>);

impl ErrorSlot {
    fn take(&self, r: Result<Vec<f64>>, len: usize) -> Vec<f64> {
        r.unwrap_or_else(|e| {
            self.0.borrow_mut().get_or_insert(e);
            vec![0.0; len]
        })
    }

    fn check(self) -> Result<()> {
        match self.0.into_inner() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Relative inner residual above which a stalled inner solve is flagged.
const INNER_FLAG: f64 = 1e-8;

/// Consecutive sub-√tol quotient changes accepted as the noise floor.
const NOISE_RUN: usize = 10;

/// Power iteration v ← (B + δ')⁻¹A v. With G = [D; √δ' I] the inverse is
/// applied as G⁺G⁺ᵀ, by Craig's method followed by CGLS; both work with
/// the conditioning of G rather than of B = DᵀD.
fn power_pencil(inst: &Instance, k: usize, delta: f64, tol: f64, max_iter: usize, seed: u64) -> Result<PencilResult> {
    let n = inst.dim();
    let rows = (inst.params.steps + 1) * n + n;
    let f = Factors { inst, k };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // tr(B) = ‖D‖_F², exact up to the dense limit and a Hutchinson estimate
    // with Rademacher probes beyond it
    let trace = if n <= DENSE_LIMIT {
        let mut t = 0.0;
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let de = inst.apply_d(&e)?;
            t += dot(&de, &de);
        }
        t
    } else {
        let probes = 8;
        let mut t = 0.0;
        for _ in 0..probes {
            let z: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let dz = inst.apply_d(&z)?;
            t += dot(&dz, &dz);
        }
        t / probes as f64
    };
    if !(trace > 0.0) {
        return Err(Error::DegenerateObservation(format!("estimated trace of the observation form is {trace}")));
    }
    let inner_tol = (0.1 * tol).max(1e-15);
    let inner_iter = 20 * n + 200;
    let mut flags = Vec::new();
    let run = |d: f64, start: Vec<f64>, flags: &mut Vec<String>| -> Result<(f64, Vec<f64>, usize, f64)> {
        let sd = (d * trace / n as f64).sqrt();
        let rayleigh = |v: &[f64]| -> Result<f64> {
            let cv = f.c(v)?;
            let gv = f.g(v, sd)?;
            Ok(dot(&cv, &cv) / dot(&gv, &gv))
        };
        let mut v = start;
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut rho_prev = rayleigh(&v)?;
        let mut x = v.clone();
        let mut change = f64::INFINITY;
        let floor = tol.sqrt();
        let mut quiet = 0;
        for it in 1..=max_iter {
            let b = f.ct(&f.c(&v)?)?;
            let slot = ErrorSlot::default();
            let (z, r1) = craig(|p| slot.take(f.g(p, sd), rows), |q| slot.take(f.gt(q, sd), n), &b, rows, inner_tol, inner_iter);
            let r2 = cgls(|p| slot.take(f.g(p, sd), rows), |q| slot.take(f.gt(q, sd), n), &z, &mut x, inner_tol, inner_iter);
            let gz = slot.take(f.gt(&z, sd), n);
            slot.check()?;
            // the inner tolerance sits near machine precision, so only flag
            // solves that stalled well above it
            let loose = |r: &crate::linalg::CgResult, scale: f64| !r.converged && r.residual > INNER_FLAG * scale;
            if (loose(&r1, norm(&b)) || loose(&r2, norm(&gz))) && !flags.iter().any(|f| f == "inner-solve-stagnation") {
                flags.push("inner-solve-stagnation".into());
            }
            let nx = norm(&x);
            if !(nx > 0.0) {
                return Err(Error::DegenerateObservation("power iterate vanished".into()));
            }
            x.iter_mut().for_each(|t| *t /= nx);
            v.copy_from_slice(&x);
            let rho = rayleigh(&v)?;
            change = ((rho - rho_prev) / rho).abs();
            rho_prev = rho;
            if change < tol {
                return Ok((rho, v, it, change));
            }
            // the inner solves bound how far the quotient can settle; stop
            // once it has wandered below √tol for NOISE_RUN iterations
            quiet = if change < floor { quiet + 1 } else { 0 };
            if quiet >= NOISE_RUN {
                if !flags.iter().any(|f| f == "noise-floor") {
                    flags.push("noise-floor".into());
                }
                return Ok((rho, v, it, change));
            }
        }
        flags.push("inconclusive".into());
        Ok((rho_prev, v, max_iter, change))
    };
    let start: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.5).collect();
    let (lambda, vector, iterations, residual) = run(delta, start, &mut flags)?;
    let (lambda_check, _, _, _) = run(10.0 * delta, vector.clone(), &mut flags)?;
    Ok(PencilResult { lambda, lambda_check, vector, iterations, residual, flags })
}

fn pencil_at(inst: &Instance, k: usize, method: Method, exec: Execution) -> Result<(PencilResult, Method)> {
    let p = &inst.params;
    let method = match method {
        Method::Auto if inst.dim() <= DENSE_LIMIT => Method::Dense,
        Method::Auto => Method::Power,
        m => m,
    };
    let r = match method {
        Method::Dense => {
            let (c, b) = inst.dense_forms(k, exec)?;
            dense_pencil(&c, &b, p.delta)?
        }
        _ => power_pencil(inst, k, p.delta, p.tol, p.max_iter, p.seed)?,
    };
    Ok((r, method))
}

/// Relative K difference between δ and 10δ above which a result is flagged.
pub const REGULARIZATION_FLAG: f64 = 1e-4;

/// K(ε, T, Ω, ω) for the discretized problem.
pub fn observability_cost(inst: &Instance, method: Method, exec: Execution) -> Result<CostEstimate> {
    let (r, method) = pencil_at(inst, 0, method, exec)?;
    if !(r.lambda > 0.0) || !r.lambda.is_finite() {
        return Err(Error::DegenerateObservation(format!("largest pencil eigenvalue is {}", r.lambda)));
    }
    let k = r.lambda.sqrt();
    let k_check = r.lambda_check.max(0.0).sqrt();
    let mut flags = r.flags;
    if ((k - k_check) / k).abs() >= REGULARIZATION_FLAG {
        flags.push("regularization-sensitive".into());
    }
    let courant = crate::pde::advective_courant(&inst.grid, &inst.problem.field, inst.problem.t_end, inst.params.steps);
    if courant > 2.0 {
        flags.push(format!("courant={courant:.3}"));
    }
    Ok(CostEstimate {
        k,
        method,
        iterations: r.iterations,
        residual: r.residual,
        delta: inst.params.delta,
        k_check,
        resolution: inst.grid.resolution().to_vec(),
        steps: inst.params.steps,
        flags,
        mode: r.vector,
    })
}

/// sup over terminal data of ‖φ(·,t)‖ / ‖φ‖_{L²(ω_T)} at the slice nearest t.
pub fn observability_window_ratio(inst: &Instance, t: f64, method: Method, exec: Execution) -> Result<f64> {
    let k = inst.slice_index(t)?;
    let (r, _) = pencil_at(inst, k, method, exec)?;
    Ok(r.lambda.max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumResult {
    /// Control values u = φ·1_ω at every slice (time-major); only ω cells
    /// are nonzero.
    pub control: Vec<f64>,
    /// Terminal data of the optimal adjoint.
    pub phi_t: Vec<f64>,
    pub y_t: Vec<f64>,
    pub terminal_norm: f64,
    pub initial_norm: f64,
    pub control_norm: f64,
    pub iterations: usize,
    pub flags: Vec<String>,
}

/// Minimal-norm control steering y₀ to (nearly) zero, found by conjugate
/// gradients on the dual functional ½B(v) + (y₀, φ(0)).
pub fn hum_control(inst: &Instance, y0: &[f64], steer_tol: f64, max_iter: usize) -> Result<HumResult> {
    let n = inst.dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y0.len() });
    }
    let w = inst.grid.cell_volume();
    let y0_norm = (w * dot(y0, y0)).sqrt();
    let m = inst.params.steps;
    if y0_norm == 0.0 {
        return Ok(HumResult {
            control: vec![0.0; (m + 1) * n],
            phi_t: vec![0.0; n],
            y_t: vec![0.0; n],
            terminal_norm: 0.0,
            initial_norm: 0.0,
            control_norm: 0.0,
            iterations: 0,
            flags: vec![],
        });
    }
    let free = forward_final(&inst.stepper, 0, y0, None)?;
    let rhs: Vec<f64> = free.iter().map(|v| -w * v).collect();
    // ‖y(T)‖ = ‖Bv − r‖₂ / √W
    let abs_tol = 0.5 * steer_tol * y0_norm * w.sqrt();
    let mut v = vec![0.0; n];
    let mut err = None;
    let cg = conjugate_gradient(
        |p, out| match inst.apply_b(p) {
            Ok(y) => out.copy_from_slice(&y),
            Err(e) => {
                err.get_or_insert(e);
                out.iter_mut().for_each(|o| *o = 0.0);
            }
        },
        &rhs,
        &mut v,
        abs_tol,
        max_iter,
    );
    if let Some(e) = err {
        return Err(e);
    }
    let mut flags = Vec::new();
    if cg.stagnated {
        flags.push("cg-stagnation".into());
    }
    let phi = inst.adjoint(&v)?;
    let control: Vec<f64> = phi.iter().enumerate().map(|(i, p)| p * inst.chi[i % n].signum()).collect();
    let y_t = forward_final(&inst.stepper, 0, y0, Some((&phi, &inst.chi)))?;
    let terminal_norm = (w * dot(&y_t, &y_t)).sqrt();
    if terminal_norm > steer_tol * y0_norm {
        flags.push("steering-tolerance-not-reached".into());
    }
    let (_, b) = inst.forms_from(&phi, 0, n);
    Ok(HumResult {
        control,
        phi_t: v,
        y_t,
        terminal_norm,
        initial_norm: y0_norm,
        control_norm: b.sqrt(),
        iterations: cg.iterations,
        flags,
    })
}

/// Largest ratio ‖u‖/‖y₀‖ of the minimal-norm control over all y₀, computed
/// densely from the free forward evolution of each basis vector. B carries
/// the same regularization as [`observability_cost`].
pub fn hum_operator_norm(inst: &Instance, exec: Execution) -> Result<f64> {
    let n = inst.dim();
    let w = inst.grid.cell_volume();
    let (_, b) = inst.dense_forms(0, exec)?;
    let cols = exec.map_indexed(n, |j| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        forward_final(&inst.stepper, 0, &e, None)
    });
    let mut r = DMatrix::zeros(n, n);
    for (j, c) in cols.into_iter().enumerate() {
        let c = c?;
        for i in 0..n {
            r[(i, j)] = w * c[i];
        }
    }
    let mut br = b.clone();
    let shift = inst.params.delta * b.trace() / n as f64;
    for i in 0..n {
        br[(i, i)] += shift;
    }
    let chol = br
        .cholesky()
        .ok_or_else(|| Error::DegenerateObservation("the observation form is indefinite beyond the regularization".into()))?;
    let y = chol.l().solve_lower_triangular(&r).ok_or_else(|| Error::DegenerateObservation("singular Cholesky factor".into()))?;
    let smax = y.singular_values().iter().cloned().fold(0.0, f64::max);
    Ok(smax / w.sqrt())
}

/// Grid policy of a sweep: N = ceil(c/√ε) cells per axis, clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPolicy {
    pub c: f64,
    pub min_cells: usize,
    pub max_cells: usize,
    pub steps: usize,
}

impl GridPolicy {
    pub fn cells(&self, epsilon: f64, dim: usize) -> usize {
        let n = (self.c / epsilon.sqrt()).ceil() as usize;
        let cap = if dim == 1 { self.max_cells } else { ((DENSE_LIMIT as f64).sqrt() as usize).min(self.max_cells) };
        n.clamp(self.min_cells, cap.max(self.min_cells))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub t_end: f64,
    pub cells: usize,
    pub steps: usize,
    pub outcome: std::result::Result<CostEstimate, String>,
}

impl SweepRow {
    pub fn k(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|e| e.k)
    }
}

/// Runs observability_cost for every (ε, T). Rows come back sorted by ε
/// descending, then T ascending; failures are recorded per row.
pub fn sweep(
    template: &ProblemSpec,
    epsilons: &[f64],
    t_ends: &[f64],
    policy: &GridPolicy,
    base: &CostParams,
    method: Method,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if epsilons.is_empty() || t_ends.is_empty() {
        return Err(Error::InvalidParameter("sweep lists must be nonempty".into()));
    }
    if epsilons.iter().chain(t_ends).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("sweep values must be positive".into()));
    }
    let mut cases: Vec<(f64, f64)> = epsilons.iter().flat_map(|&e| t_ends.iter().map(move |&t| (e, t))).collect();
    cases.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)));
    let dim = template.domain.dim();
    let rows = exec.map_indexed(cases.len(), |i| {
        let (epsilon, t_end) = cases[i];
        let cells = policy.cells(epsilon, dim);
        let mut params = base.clone();
        params.resolution = vec![cells; dim];
        params.steps = policy.steps;
        let problem = ProblemSpec { epsilon, t_end, ..template.clone() };
        let outcome = Instance::new(&problem, &params)
            .and_then(|inst| observability_cost(&inst, method, Execution::Sequential))
            .map_err(|e| e.to_string());
        SweepRow { epsilon, t_end, cells, steps: policy.steps, outcome }
    });
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    /// None when log K has no variance.
    pub r2: Option<f64>,
    pub eps_range: (f64, f64),
    pub rows_used: usize,
}

/// Least-squares line through (1/ε, ln y), with at least 4 usable rows.
pub fn fit_log_inverse(points: &[(f64, f64)]) -> Result<FitResult> {
    fit_log_inverse_min(points, 4)
}

/// [`fit_log_inverse`] with a caller-chosen minimum row count (at least 3).
pub fn fit_log_inverse_min(points: &[(f64, f64)], min_rows: usize) -> Result<FitResult> {
    let min_rows = min_rows.max(3);
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).map(|&(e, y)| (1.0 / e, y.ln())).collect();
    if pts.len() < min_rows {
        return Err(Error::Fit(format!("need at least {min_rows} usable rows, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 1e-300) {
        return Err(Error::Fit("all epsilon values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy <= 1e-28 * (1.0 + my * my) {
        None
    } else {
        let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        Some(1.0 - ss_res / syy)
    };
    let eps: Vec<f64> = pts.iter().map(|p| 1.0 / p.0).collect();
    let lo = eps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(FitResult { slope, intercept, r2, eps_range: (lo, hi), rows_used: pts.len() })
}

/// ln K = Ĉ/ε + b over the successful rows, which must share T.
pub fn fit_exponential(rows: &[SweepRow]) -> Result<FitResult> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.k().is_some()).collect();
    if let Some(first) = ok.first() {
        if ok.iter().any(|r| r.t_end != first.t_end) {
            return Err(Error::Fit("rows must share the same T".into()));
        }
    }
    let pts: Vec<(f64, f64)> = ok.iter().map(|r| (r.epsilon, r.k().unwrap())).collect();
    fit_log_inverse(&pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrendVerdict {
    BoundedTrend,
    BlowUpTrend,
    Indeterminate,
}

impl TrendVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            TrendVerdict::BoundedTrend => "bounded-trend",
            TrendVerdict::BlowUpTrend => "blow-up-trend",
            TrendVerdict::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundednessReport {
    pub fit: FitResult,
    pub max_over_min: f64,
    pub verdict: TrendVerdict,
}

pub const SLOPE_THRESHOLD: f64 = 0.01;
pub const R2_THRESHOLD: f64 = 0.98;

pub fn trend_verdict(fit: &FitResult) -> TrendVerdict {
    if fit.slope.abs() <= SLOPE_THRESHOLD {
        TrendVerdict::BoundedTrend
    } else if fit.slope >= SLOPE_THRESHOLD && fit.r2.is_some_and(|r| r >= R2_THRESHOLD) {
        TrendVerdict::BlowUpTrend
    } else {
        TrendVerdict::Indeterminate
    }
}

pub fn boundedness_report(rows: &[SweepRow]) -> Result<BoundednessReport> {
    let fit = fit_exponential(rows)?;
    let ks: Vec<f64> = rows.iter().filter_map(|r| r.k()).collect();
    let max = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ks.iter().cloned().fold(f64::INFINITY, f64::min);
    let verdict = trend_verdict(&fit);
    Ok(BoundednessReport { fit, max_over_min: max / min, verdict })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanBoundReport {
    /// ‖φ(·,0)‖².
    pub lhs: f64,
    /// |∫φ_T|²/|Ω|.
    pub rhs: f64,
    pub margin: f64,
    pub vacuous: bool,
    /// margin ≥ −1e-12·rhs.
    pub holds: bool,
}

/// ‖φ(·,0)‖² ≥ |∫φ_T|²/|Ω|, which follows from mass conservation and
/// Cauchy–Schwarz.
pub fn mean_lower_bound_check(inst: &Instance, phi_t: &[f64]) -> Result<MeanBoundReport> {
    let n = inst.dim();
    if phi_t.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: phi_t.len() });
    }
    let w = inst.grid.cell_volume();
    let vol = w * n as f64;
    let mass = w * phi_t.iter().sum::<f64>();
    let l1 = w * phi_t.iter().map(|v| v.abs()).sum::<f64>();
    let phi = inst.adjoint(phi_t)?;
    let lhs = w * phi[..n].iter().map(|v| v * v).sum::<f64>();
    let rhs = mass * mass / vol;
    let margin = lhs - rhs;
    let vacuous = mass.abs() <= 1e-12 * l1.max(f64::MIN_POSITIVE);
    Ok(MeanBoundReport { lhs, rhs, margin, vacuous, holds: margin >= -1e-12 * rhs.max(lhs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::builtin_field;

    fn heat_problem(t_end: f64, eps: f64) -> ProblemSpec {
        ProblemSpec {
            domain: Domain::interval(-1.0, 1.0).unwrap(),
            omega: Region::interval(-0.3, 0.3).unwrap(),
            field: builtin_field("zero", 1).unwrap(),
            t_end,
            epsilon: eps,
        }
    }

    #[test]
    fn single_cell_cost_is_inverse_sqrt_t() {
        let mut p = heat_problem(4.0, 0.3);
        p.omega = Region::interval(-1.0, 1.0).unwrap();
        p.field = builtin_field("quadratic_potential", 1).unwrap();
        let mut params = CostParams::new(&[1], 8);
        params.single_cell = true;
        let inst = Instance::new(&p, &params).unwrap();
        for m in [Method::Dense, Method::Power] {
            let k = observability_cost(&inst, m, Execution::Sequential).unwrap().k;
            assert!((k - 0.5).abs() < 1e-10, "{m:?}: {k}");
        }
    }

    #[test]
    fn operators_are_symmetric() {
        let p = ProblemSpec { field: builtin_field("quadratic_potential", 1).unwrap(), ..heat_problem(0.5, 0.2) };
        let inst = Instance::new(&p, &CostParams::new(&[12], 10)).unwrap();
        let u: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        for apply in [Instance::apply_a, Instance::apply_b] {
            let (au, av) = (apply(&inst, &u).unwrap(), apply(&inst, &v).unwrap());
            let (x, y) = (dot(&v, &au), dot(&u, &av));
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
        // quadratic forms agree with the quadrature of the adjoint run
        let (a, b) = inst.forms(&u).unwrap();
        assert!((dot(&u, &inst.apply_a(&u).unwrap()) - a).abs() < 1e-12 * a);
        assert!((dot(&u, &inst.apply_b(&u).unwrap()) - b).abs() < 1e-12 * b);
    }

    #[test]
    fn hum_with_zero_data_is_trivial() {
        let inst = Instance::new(&heat_problem(1.0, 0.5), &CostParams::new(&[10], 10)).unwrap();
        let r = hum_control(&inst, &[0.0; 10], 1e-6, 100).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.control.iter().all(|u| *u == 0.0));
    }

    #[test]
    fn fit_recovers_exact_exponential() {
        let rows: Vec<(f64, f64)> = [0.2f64, 0.1, 0.05, 0.025].iter().map(|&e| (e, (0.3 / e).exp())).collect();
        let f = fit_log_inverse(&rows).unwrap();
        assert!((f.slope - 0.3).abs() < 1e-12);
        assert!((f.r2.unwrap() - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [0.2, 0.1, 0.05, 0.025].iter().map(|&e| (e, 2.0)).collect();
        let f = fit_log_inverse(&flat).unwrap();
        assert_eq!(f.slope, 0.0);
        assert!(f.r2.is_none());
        assert_eq!(trend_verdict(&f), TrendVerdict::BoundedTrend);
        assert!(fit_log_inverse(&[(0.1, 1.0); 5]).is_err());
        assert!(fit_log_inverse(&rows[..3]).is_err());
    }

    #[test]
    fn mean_bound_cases() {
        let inst = Instance::new(&heat_problem(0.5, 0.2), &CostParams::new(&[20], 10)).unwrap();
        let c = mean_lower_bound_check(&inst, &[1.5; 20]).unwrap();
        assert!(c.margin.abs() < 1e-12 && c.holds && !c.vacuous);
        let odd: Vec<f64> = (0..20).map(|i| inst.grid().center(i)[0]).collect();
        assert!(mean_lower_bound_check(&inst, &odd).unwrap().vacuous);
    }
}
