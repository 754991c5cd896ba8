//! Finite-volume solvers for the controlled state equation, its adjoint and
//! the annulus problem with a Dirichlet inner boundary.
//!
//! All three share one mass-form generator G(t) built face by face:
//! diffusion `ε·area/dist` plus first-order upwind transport of the adjoint by
//! the velocity −𝔅. Boundary faces carry no flux, so the columns of G sum to
//! zero and the adjoint conserves its discrete mass exactly. The forward
//! operator is Gᵀ, which is the non-conservative upwind discretization of
//! 𝔅·∇y with homogeneous Neumann data. Time stepping is the θ-scheme with the
//! field frozen at each step midpoint, and every step solves a banded system.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Grid, Region};
use crate::linalg::{Banded, Csr};
use crate::velocity::{Potential, VelocityField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    pub epsilon: f64,
    /// Number of time steps M.
    pub steps: usize,
    /// θ-scheme weight (0.5 is Crank–Nicolson).
    pub theta: f64,
    /// Relative residual accepted for each linear solve.
    pub residual_tol: f64,
}

impl SolverParams {
    pub fn new(epsilon: f64, steps: usize) -> Self {
        SolverParams { epsilon, steps, theta: 0.5, residual_tol: 1e-10 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.steps < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 time steps, got {}", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.residual_tol > 0.0 && self.residual_tol <= 1e-6) {
            return Err(Error::InvalidParameter(format!("residual tolerance must lie in (0, 1e-6], got {}", self.residual_tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldTag {
    State,
    Adjoint,
    AnnulusAdjoint,
    Transformed,
}

impl FieldTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldTag::State => "state",
            FieldTag::Adjoint => "adjoint",
            FieldTag::AnnulusAdjoint => "annulus-adjoint",
            FieldTag::Transformed => "transformed",
        }
    }
}

/// Cell values at M+1 increasing time stamps.
#[derive(Clone, Debug)]
pub struct SpaceTimeField {
    grid: Arc<Grid>,
    times: Vec<f64>,
    values: Vec<f64>,
    tag: FieldTag,
    epsilon: f64,
    mask: Option<Arc<Vec<bool>>>,
}

impl SpaceTimeField {
    pub fn from_parts(grid: Arc<Grid>, times: Vec<f64>, values: Vec<f64>, tag: FieldTag, epsilon: f64) -> Result<Self> {
        let n = grid.cell_count();
        if times.len() < 2 || values.len() != times.len() * n {
            return Err(Error::InvalidParameter(format!(
                "expected {} values for {} slices, got {}",
                times.len() * n,
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("time stamps must increase strictly".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite value in space-time field".into()));
        }
        Ok(SpaceTimeField { grid, times, values, tag, epsilon, mask: None })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slice_count(&self) -> usize {
        self.times.len()
    }

    pub fn cell_count(&self) -> usize {
        self.grid.cell_count()
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.cell_count();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn first(&self) -> &[f64] {
        self.slice(0)
    }

    pub fn last(&self) -> &[f64] {
        self.slice(self.slice_count() - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tag(&self) -> FieldTag {
        self.tag
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Cells of Ω₀ for annulus solutions.
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref().map(|m| m.as_slice())
    }

    /// Trapezoid weights of the time stamps.
    pub fn time_weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.times)
    }

    pub fn with_values(&self, values: Vec<f64>, tag: FieldTag) -> Result<Self> {
        let mut out = SpaceTimeField::from_parts(self.grid.clone(), self.times.clone(), values, tag, self.epsilon)?;
        out.mask = self.mask.clone();
        Ok(out)
    }
}

pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let m = times.len();
    let mut w = vec![0.0; m];
    for k in 0..m - 1 {
        let h = times[k + 1] - times[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryCondition {
    /// ∂ₙy = 0 (state equation).
    Neumann,
    /// (ε∇φ + φ𝔅)·n = 0 (adjoint, outer boundary).
    RobinFlux,
    /// φ = 0 on the inner boundary Γ₀.
    Dirichlet,
}

/// Conditions on every boundary piece of a discretization: outer faces in
/// grid order, then the interior faces that separate active and masked cells.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySpec {
    pub outer: Vec<BoundaryCondition>,
    pub interface_faces: Vec<usize>,
}

impl BoundarySpec {
    pub fn for_state(grid: &Grid) -> Self {
        BoundarySpec { outer: vec![BoundaryCondition::Neumann; grid.boundary_faces().len()], interface_faces: vec![] }
    }

    pub fn for_adjoint(grid: &Grid, mask: Option<&[bool]>) -> Self {
        let interface_faces = match mask {
            None => vec![],
            Some(m) => grid.faces().iter().enumerate().filter(|(_, f)| m[f.left] != m[f.right]).map(|(i, _)| i).collect(),
        };
        BoundarySpec { outer: vec![BoundaryCondition::RobinFlux; grid.boundary_faces().len()], interface_faces }
    }
}

/// Mass-form adjoint generator G(t) (see the module docs). Rows and columns of
/// masked cells are left empty; faces between an active and a masked cell get
/// a ghost-reflected Dirichlet condition.
pub fn assemble_generator(grid: &Grid, field: &VelocityField, epsilon: f64, t: f64, mask: Option<&[bool]>) -> Csr {
    let d = grid.dim();
    let n = grid.cell_count();
    let mut trip = Vec::with_capacity(grid.faces().len() * 4);
    let mut b = [0.0; 3];
    for f in grid.faces() {
        let (l, r) = (f.left, f.right);
        let (ml, mr) = mask.map_or((false, false), |m| (m[l], m[r]));
        if ml && mr {
            continue;
        }
        let diff = epsilon * f.area / f.dist;
        field.eval(&f.center[..d], t, &mut b[..d]);
        let vn = -b[f.axis];
        let flux = f.area * vn.abs();
        match (ml, mr) {
            (false, false) => {
                trip.push((l, l, -diff));
                trip.push((l, r, diff));
                trip.push((r, r, -diff));
                trip.push((r, l, diff));
                if vn > 0.0 {
                    trip.push((l, l, -flux));
                    trip.push((r, l, flux));
                } else if vn < 0.0 {
                    trip.push((l, r, flux));
                    trip.push((r, r, -flux));
                }
            }
            (false, true) => {
                trip.push((l, l, -2.0 * diff));
                if vn > 0.0 {
                    trip.push((l, l, -flux));
                }
            }
            (true, false) => {
                trip.push((r, r, -2.0 * diff));
                if vn < 0.0 {
                    trip.push((r, r, -flux));
                }
            }
            (true, true) => unreachable!(),
        }
    }
    Csr::from_triplets(n, trip)
}

#[derive(Clone)]
pub(crate) struct StepOps {
    g: Csr,
    gt: Csr,
    lhs_adj: Banded,
    lhs_fwd: Banded,
}

enum OpsCache {
    None,
    Shared(Box<StepOps>),
    PerStep(Vec<StepOps>),
}

/// θ-scheme stepper shared by the forward and backward solvers. For
/// time-independent fields the factorizations are computed once.
pub(crate) struct Stepper {
    grid: Arc<Grid>,
    field: VelocityField,
    params: SolverParams,
    t_start: f64,
    dt: f64,
    vol: f64,
    mask: Option<Vec<bool>>,
    cache: OpsCache,
}

/// Above this many stored band entries a time-dependent stepper rebuilds its
/// operators on every step instead of keeping all of them.
const PER_STEP_CACHE_LIMIT: usize = 20_000_000;

impl Stepper {
    pub(crate) fn new(
        grid: &Arc<Grid>,
        field: &VelocityField,
        params: &SolverParams,
        t_start: f64,
        t_end: f64,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        params.validate()?;
        if field.dim() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), got: field.dim() });
        }
        if !(t_end > t_start) {
            return Err(Error::InvalidParameter(format!("need t_start < t_end, got [{t_start}, {t_end}]")));
        }
        if let Some(m) = &mask {
            if m.len() != grid.cell_count() {
                return Err(Error::DimensionMismatch { expected: grid.cell_count(), got: m.len() });
            }
        }
        let mut s = Stepper {
            grid: grid.clone(),
            field: field.clone(),
            params: *params,
            t_start,
            dt: (t_end - t_start) / params.steps as f64,
            vol: grid.cell_volume(),
            mask,
            cache: OpsCache::None,
        };
        if field.is_autonomous() {
            s.cache = OpsCache::Shared(Box::new(s.build_ops(t_start)?));
        }
        Ok(s)
    }

    /// Keeps the operators of every step, for steppers that are applied many
    /// times (cost estimation). No-op for time-independent fields.
    pub(crate) fn precompute(&mut self) -> Result<()> {
        if !matches!(self.cache, OpsCache::None) {
            return Ok(());
        }
        let n = self.grid.cell_count();
        let bw = self.grid.resolution()[0].min(n);
        if n * (2 * bw + 1) * 2 * self.params.steps > PER_STEP_CACHE_LIMIT {
            return Ok(());
        }
        let ops = (0..self.params.steps)
            .map(|k| self.build_ops(self.t_start + (k as f64 + 0.5) * self.dt))
            .collect::<Result<Vec<_>>>()?;
        self.cache = OpsCache::PerStep(ops);
        Ok(())
    }

    pub(crate) fn grid(&self) -> &Grid {
        &self.grid
    }

    pub(crate) fn steps(&self) -> usize {
        self.params.steps
    }

    pub(crate) fn times(&self) -> Vec<f64> {
        (0..=self.params.steps).map(|k| self.t_start + self.dt * k as f64).collect()
    }

    fn build_ops(&self, t: f64) -> Result<StepOps> {
        let g = assemble_generator(&self.grid, &self.field, self.params.epsilon, t, self.mask.as_deref());
        let gt = g.transpose();
        let s = -self.params.theta * self.dt;
        let mut lhs_adj = Banded::from_scaled(self.vol, s, &g);
        let mut lhs_fwd = Banded::from_scaled(self.vol, s, &gt);
        if !lhs_adj.factor() || !lhs_fwd.factor() {
            return Err(Error::SolverFailure { step: 0, residual: f64::INFINITY });
        }
        Ok(StepOps { g, gt, lhs_adj, lhs_fwd })
    }

    /// Operators of forward step n, which covers [t_n, t_{n+1}].
    pub(crate) fn ops(&self, n: usize) -> Result<Cow<'_, StepOps>> {
        match &self.cache {
            OpsCache::Shared(o) => Ok(Cow::Borrowed(o.as_ref())),
            OpsCache::PerStep(v) => Ok(Cow::Borrowed(&v[n])),
            OpsCache::None => Ok(Cow::Owned(self.build_ops(self.t_start + (n as f64 + 0.5) * self.dt)?)),
        }
    }

    fn solve_checked(&self, lhs: &Banded, op: &Csr, rhs: &[f64], out: &mut [f64], step: usize) -> Result<()> {
        out.copy_from_slice(rhs);
        lhs.solve(out);
        let s = self.params.theta * self.dt;
        let n = rhs.len();
        let mut tmp = vec![0.0; n];
        let scale = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            return Ok(());
        }
        for attempt in 0..2 {
            op.matvec(out, &mut tmp);
            let mut res = 0.0f64;
            for i in 0..n {
                tmp[i] = rhs[i] - (self.vol * out[i] - s * tmp[i]);
                res = res.max(tmp[i].abs());
            }
            let rel = res / scale;
            if rel <= self.params.residual_tol {
                return Ok(());
            }
            if attempt == 1 || !rel.is_finite() {
                return Err(Error::SolverFailure { step, residual: rel });
            }
            lhs.solve(&mut tmp);
            for i in 0..n {
                out[i] += tmp[i];
            }
        }
        Ok(())
    }

    /// One backward step in reversed time, using the operators of forward
    /// step `n`: (W − θΔtG)φ_new = (W + (1−θ)ΔtG)φ_old − Δt(θS_new + (1−θ)S_old).
    pub(crate) fn adjoint_step(
        &self,
        ops: &StepOps,
        n: usize,
        old: &[f64],
        new: &mut [f64],
        sources: Option<(&[f64], &[f64])>,
    ) -> Result<()> {
        let len = old.len();
        let mut rhs = vec![0.0; len];
        ops.g.matvec(old, &mut rhs);
        let c = (1.0 - self.params.theta) * self.dt;
        for i in 0..len {
            rhs[i] = self.vol * old[i] + c * rhs[i];
        }
        if let Some((s_old, s_new)) = sources {
            for i in 0..len {
                rhs[i] -= self.dt * (self.params.theta * s_new[i] + (1.0 - self.params.theta) * s_old[i]);
            }
        }
        if let Some(m) = &self.mask {
            for i in 0..len {
                if m[i] {
                    rhs[i] = 0.0;
                }
            }
        }
        self.solve_checked(&ops.lhs_adj, &ops.g, &rhs, new, n)
    }

    /// One forward step: (W − θΔtGᵀ)y_new = (W + (1−θ)ΔtGᵀ)y_old.
    pub(crate) fn forward_step(&self, ops: &StepOps, n: usize, old: &[f64], new: &mut [f64]) -> Result<()> {
        let len = old.len();
        let mut rhs = vec![0.0; len];
        ops.gt.matvec(old, &mut rhs);
        let c = (1.0 - self.params.theta) * self.dt;
        for i in 0..len {
            rhs[i] = self.vol * old[i] + c * rhs[i];
        }
        self.solve_checked(&ops.lhs_fwd, &ops.gt, &rhs, new, n)
    }
}

/// Distributed control u on ω: cell values at every time stamp plus the cell
/// volume fractions χ of ω.
#[derive(Clone, Copy, Debug)]
pub struct Control<'a> {
    pub u: &'a SpaceTimeField,
    pub chi: &'a [f64],
}

/// Solves ∂ₜy − εΔy + 𝔅·∇y = u·1_ω with ∂ₙy = 0 on [0, T].
///
/// The control enters as trapezoid-weighted impulses, y⁰ = y₀ + w₀χu₀ and
/// yⁿ⁺¹ = P yⁿ + wₙ₊₁χuₙ₊₁, which makes this solver the exact discrete
/// transpose of [`solve_adjoint`].
pub fn solve_forward(
    grid: &Arc<Grid>,
    y0: &[f64],
    field: &VelocityField,
    params: &SolverParams,
    t_end: f64,
    control: Option<Control<'_>>,
) -> Result<SpaceTimeField> {
    let stepper = Stepper::new(grid, field, params, 0.0, t_end, None)?;
    let values = forward_values(&stepper, y0, control)?;
    SpaceTimeField::from_parts(grid.clone(), stepper.times(), values, FieldTag::State, params.epsilon)
}

pub(crate) fn forward_values(stepper: &Stepper, y0: &[f64], control: Option<Control<'_>>) -> Result<Vec<f64>> {
    let n = stepper.grid().cell_count();
    if y0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y0.len() });
    }
    let m = stepper.steps();
    let times = stepper.times();
    let w = trapezoid_weights(&times);
    if let Some(c) = &control {
        if c.u.slice_count() != m + 1 || c.u.cell_count() != n || c.chi.len() != n {
            return Err(Error::InvalidParameter("control does not match the grid or the time steps".into()));
        }
    }
    let mut values = vec![0.0; (m + 1) * n];
    values[..n].copy_from_slice(y0);
    if let Some(c) = &control {
        let u = c.u.slice(0);
        for i in 0..n {
            values[i] += w[0] * c.chi[i] * u[i];
        }
    }
    let mut next = vec![0.0; n];
    for k in 0..m {
        let ops = stepper.ops(k)?;
        stepper.forward_step(&ops, k, &values[k * n..(k + 1) * n], &mut next)?;
        if let Some(c) = &control {
            let u = c.u.slice(k + 1);
            for i in 0..n {
                next[i] += w[k + 1] * c.chi[i] * u[i];
            }
        }
        values[(k + 1) * n..(k + 2) * n].copy_from_slice(&next);
    }
    Ok(values)
}

/// Final slice of a forward run started at slice `start` from `y`. With
/// `impulses = (u, χ)` the control impulses of [`solve_forward`] are added at
/// every slice from `start` on; `u` holds all M+1 slices.
pub(crate) fn forward_final(stepper: &Stepper, start: usize, y: &[f64], impulses: Option<(&[f64], &[f64])>) -> Result<Vec<f64>> {
    let n = y.len();
    let m = stepper.steps();
    let w = trapezoid_weights(&stepper.times());
    let kick = |k: usize, v: &mut [f64]| {
        if let Some((u, chi)) = impulses {
            let uk = &u[k * n..(k + 1) * n];
            for i in 0..n {
                v[i] += w[k] * chi[i] * uk[i];
            }
        }
    };
    let mut cur = y.to_vec();
    kick(start, &mut cur);
    let mut next = vec![0.0; n];
    for k in start..m {
        let ops = stepper.ops(k)?;
        stepper.forward_step(&ops, k, &cur, &mut next)?;
        kick(k + 1, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Σ_{k ≥ start} P^{M−k} s_k, where P is the forward one-step propagator and
/// `injections` holds all M+1 slices s_k. This is the transpose of reading
/// the adjoint slices from start to M.
pub(crate) fn forward_accumulate(stepper: &Stepper, start: usize, injections: &[f64]) -> Result<Vec<f64>> {
    let m = stepper.steps();
    let n = injections.len() / (m + 1);
    let mut cur = injections[start * n..(start + 1) * n].to_vec();
    let mut next = vec![0.0; n];
    for k in start..m {
        let ops = stepper.ops(k)?;
        stepper.forward_step(&ops, k, &cur, &mut next)?;
        for (x, s) in next.iter_mut().zip(&injections[(k + 1) * n..(k + 2) * n]) {
            *x += s;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Solves the adjoint ∂ₜφ + εΔφ + ∇·(φ𝔅) = 0 with (ε∇φ + φ𝔅)·n = 0 backward
/// from φ(T) = φ_T. Slices are returned in increasing time.
pub fn solve_adjoint(
    grid: &Arc<Grid>,
    phi_t: &[f64],
    field: &VelocityField,
    params: &SolverParams,
    t_end: f64,
) -> Result<SpaceTimeField> {
    backward(grid, phi_t, field, params, (0.0, t_end), None, None)
}

/// Source F = f₀ + ε Σᵢ ∂ₓᵢ fᵢ for the annulus problem. The fᵢ vanish on the
/// boundary of U, so their divergence is taken through interior faces only.
pub struct Source {
    pub f0: Option<SourceFn>,
    pub fi: Vec<SourceFn>,
}

/// A space-time source term g(x, t).
pub type SourceFn = Box<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

impl Source {
    /// Cell integrals of F at time t (mass form).
    pub fn integrate(&self, grid: &Grid, epsilon: f64, t: f64, mask: Option<&[bool]>) -> Vec<f64> {
        let n = grid.cell_count();
        let vol = grid.cell_volume();
        let mut s = vec![0.0; n];
        if let Some(f0) = &self.f0 {
            for (c, v) in s.iter_mut().enumerate() {
                *v = vol * f0(grid.center(c), t);
            }
        }
        for f in grid.faces() {
            let Some(fi) = self.fi.get(f.axis) else { continue };
            if mask.is_some_and(|m| m[f.left] || m[f.right]) {
                continue;
            }
            let face = 0.5 * (fi(grid.center(f.left), t) + fi(grid.center(f.right), t));
            s[f.left] += epsilon * f.area * face;
            s[f.right] -= epsilon * f.area * face;
        }
        if let Some(m) = mask {
            for c in 0..n {
                if m[c] {
                    s[c] = 0.0;
                }
            }
        }
        s
    }

    /// ‖f₀‖² + Σᵢ‖fᵢ‖² over U × (t₁, t₂) on the given time stamps.
    pub fn norm_sq(&self, grid: &Grid, times: &[f64], mask: Option<&[bool]>) -> f64 {
        let w = trapezoid_weights(times);
        let vol = grid.cell_volume();
        let mut total = 0.0;
        for (k, &t) in times.iter().enumerate() {
            for c in 0..grid.cell_count() {
                if mask.is_some_and(|m| m[c]) {
                    continue;
                }
                let x = grid.center(c);
                let mut v = self.f0.as_ref().map_or(0.0, |f| f(x, t).powi(2));
                for fi in &self.fi {
                    v += fi(x, t).powi(2);
                }
                total += w[k] * vol * v;
            }
        }
        total
    }
}

/// Cells whose centers lie in Ω₀, after checking the one-cell separation
/// from Γ.
pub fn annulus_mask(grid: &Grid, inner: &Region) -> Result<Vec<bool>> {
    let h = grid.spacing().iter().fold(0.0f64, |a, &b| a.max(b));
    if !inner.is_inside(grid.domain(), h) {
        return Err(Error::InvalidAnnulus("the inner region must stay one grid cell away from the boundary".into()));
    }
    let mask: Vec<bool> = (0..grid.cell_count()).map(|c| inner.contains_open(grid.center(c))).collect();
    if grid.boundary_faces().iter().any(|f| mask[f.cell]) {
        return Err(Error::InvalidAnnulus("a masked cell touches the outer boundary".into()));
    }
    Ok(mask)
}

/// Backward solve on U = Ω ∖ Ω̄₀ over [t₁, t₂] with φ(t₂) = G, Robin-flux
/// data on Γ and φ = 0 on Γ₀. Without an inner region this is exactly
/// [`solve_adjoint`].
pub fn solve_annulus(
    grid: &Arc<Grid>,
    g: &[f64],
    field: &VelocityField,
    params: &SolverParams,
    span: (f64, f64),
    source: Option<&Source>,
    inner: Option<&Region>,
) -> Result<SpaceTimeField> {
    let mask = inner.map(|r| annulus_mask(grid, r)).transpose()?;
    backward(grid, g, field, params, span, source, mask)
}

fn backward(
    grid: &Arc<Grid>,
    data: &[f64],
    field: &VelocityField,
    params: &SolverParams,
    span: (f64, f64),
    source: Option<&Source>,
    mask: Option<Vec<bool>>,
) -> Result<SpaceTimeField> {
    let n = grid.cell_count();
    if data.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: data.len() });
    }
    let tag = if mask.is_some() { FieldTag::AnnulusAdjoint } else { FieldTag::Adjoint };
    let stepper = Stepper::new(grid, field, params, span.0, span.1, mask)?;
    let values = backward_values(&stepper, data, source)?;
    let mut out = SpaceTimeField::from_parts(grid.clone(), stepper.times(), values, tag, params.epsilon)?;
    out.mask = stepper.mask.clone().map(Arc::new);
    Ok(out)
}

pub(crate) fn backward_values(stepper: &Stepper, data: &[f64], source: Option<&Source>) -> Result<Vec<f64>> {
    let n = data.len();
    let m = stepper.steps();
    let times = stepper.times();
    let mut values = vec![0.0; (m + 1) * n];
    values[m * n..].copy_from_slice(data);
    if let Some(mk) = &stepper.mask {
        for i in 0..n {
            if mk[i] {
                values[m * n + i] = 0.0;
            }
        }
    }
    let mask = stepper.mask.as_deref();
    let src = |k: usize| source.map(|s| s.integrate(stepper.grid(), stepper.params.epsilon, times[k], mask));
    let mut s_old = src(m);
    let mut next = vec![0.0; n];
    for j in (0..m).rev() {
        let ops = stepper.ops(j)?;
        let s_new = src(j);
        let pair = match (&s_old, &s_new) {
            (Some(a), Some(b)) => Some((a.as_slice(), b.as_slice())),
            _ => None,
        };
        stepper.adjoint_step(&ops, m - 1 - j, &values[(j + 1) * n..(j + 2) * n], &mut next, pair)?;
        values[j * n..(j + 1) * n].copy_from_slice(&next);
        s_old = s_new;
    }
    Ok(values)
}

/// max |𝔅|·Δt/h over cell centers at the step midpoints. Above 2 the upwind
/// scheme stays stable but loses accuracy.
pub fn advective_courant(grid: &Grid, field: &VelocityField, t_end: f64, steps: usize) -> f64 {
    let d = grid.dim();
    let dt = t_end / steps as f64;
    let h = grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let times: Vec<f64> = if field.is_autonomous() { vec![0.0] } else { (0..steps).map(|k| (k as f64 + 0.5) * dt).collect() };
    let mut b = [0.0; 3];
    let mut sup = 0.0f64;
    for &t in &times {
        for c in 0..grid.cell_count() {
            field.eval(grid.center(c), t, &mut b[..d]);
            sup = sup.max(b[..d].iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    sup * dt / h
}

/// Σ vᵢ·vol.
pub fn mass(grid: &Grid, slice: &[f64]) -> f64 {
    grid.cell_volume() * slice.iter().sum::<f64>()
}

pub fn l2_norm(grid: &Grid, slice: &[f64]) -> f64 {
    (grid.cell_volume() * slice.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// ‖φ‖ in L²(ω × (t_start, t_end)) with trapezoid weights in time and cell
/// volume fractions `chi` of ω.
pub fn omega_norm(field: &SpaceTimeField, chi: &[f64]) -> f64 {
    let w = field.time_weights();
    let vol = field.grid().cell_volume();
    let mut s = 0.0;
    for (k, wk) in w.iter().enumerate() {
        s += wk * vol * field.slice(k).iter().zip(chi).map(|(v, c)| c * v * v).sum::<f64>();
    }
    s.sqrt()
}

/// Discrete ‖∇v‖² from face differences. Faces next to masked cells use the
/// ghost value −v of the Dirichlet reflection.
pub fn grad_norm_sq(grid: &Grid, slice: &[f64], mask: Option<&[bool]>) -> f64 {
    let mut s = 0.0;
    for f in grid.faces() {
        let (ml, mr) = mask.map_or((false, false), |m| (m[f.left], m[f.right]));
        let (a, b) = match (ml, mr) {
            (false, false) => (slice[f.left], slice[f.right]),
            (false, true) => (slice[f.left], -slice[f.left]),
            (true, false) => (-slice[f.right], slice[f.right]),
            (true, true) => continue,
        };
        let diff = b - a;
        s += f.area * f.dist * (diff / f.dist).powi(2);
    }
    s
}

/// Coefficients of the transformed system for Φ = exp(f/2ε)φ.
#[derive(Clone, Debug)]
pub struct HopfCoefficients {
    /// a_ε(f) = 𝒱(f)/ε − Δf/2 per slice and cell.
    pub a_eps: Vec<f64>,
    /// 𝒱(f) = |∇f|²/4 + ∂ₜf/2 per slice and cell.
    pub v: Vec<f64>,
    /// b(f) = ∂ₙf/2 per slice and boundary face.
    pub b: Vec<f64>,
    /// exp(f(·,T)/2ε)·φ_T.
    pub phi_t: Vec<f64>,
}

/// Largest exponent accepted before exp(·) is considered an overflow risk.
pub const EXP_GUARD: f64 = 700.0;

fn exponent_table(field: &SpaceTimeField, potential: &dyn Potential, epsilon: f64, sign: f64) -> Result<Vec<f64>> {
    let g = field.grid();
    let n = g.cell_count();
    let mut e = Vec::with_capacity(field.values().len());
    let mut max_e = f64::NEG_INFINITY;
    for &t in field.times() {
        for c in 0..n {
            let v = sign * potential.value(g.center(c), t) / (2.0 * epsilon);
            max_e = max_e.max(v);
            e.push(v);
        }
    }
    if max_e > EXP_GUARD {
        return Err(Error::Scale { max_exponent: max_e });
    }
    Ok(e)
}

/// Φ(·,t) = exp(f(·,t)/2ε)·φ(·,t), together with the transformed coefficients.
pub fn hopf_transform(
    phi: &SpaceTimeField,
    potential: &dyn Potential,
    epsilon: f64,
) -> Result<(SpaceTimeField, HopfCoefficients)> {
    let e = exponent_table(phi, potential, epsilon, 1.0)?;
    let values: Vec<f64> = phi.values().iter().zip(&e).map(|(v, x)| v * x.exp()).collect();
    let out = phi.with_values(values, FieldTag::Transformed)?;
    let g = phi.grid();
    let d = g.dim();
    let n = g.cell_count();
    let mut a_eps = Vec::with_capacity(values_len(phi));
    let mut v = Vec::with_capacity(values_len(phi));
    let mut grad = [0.0; 3];
    for &t in phi.times() {
        for c in 0..n {
            let x = g.center(c);
            potential.gradient(x, t, &mut grad[..d]);
            let gg: f64 = grad[..d].iter().map(|q| q * q).sum();
            let vv = 0.25 * gg + 0.5 * potential.dt(x, t);
            v.push(vv);
            a_eps.push(vv / epsilon - 0.5 * potential.laplacian(x, t));
        }
    }
    let mut b = Vec::new();
    for &t in phi.times() {
        for f in g.boundary_faces() {
            b.push(0.5 * potential.normal_derivative(&f.center[..d], t, &f.normal[..d]));
        }
    }
    let phi_t = out.last().to_vec();
    Ok((out, HopfCoefficients { a_eps, v, b, phi_t }))
}

fn values_len(f: &SpaceTimeField) -> usize {
    f.values().len()
}

/// Inverse of [`hopf_transform`]: φ = exp(−f/2ε)Φ.
pub fn inverse_hopf(big_phi: &SpaceTimeField, potential: &dyn Potential, epsilon: f64) -> Result<SpaceTimeField> {
    let e = exponent_table(big_phi, potential, epsilon, -1.0)?;
    let values: Vec<f64> = big_phi.values().iter().zip(&e).map(|(v, x)| v * x.exp()).collect();
    big_phi.with_values(values, FieldTag::Adjoint)
}

/// Largest residual of −∂ₜΦ − εΔΦ + a_εΦ = 0 over interior slices, using
/// central differences in time and the five-point Laplacian with the Robin
/// ghost values εΦ_n + bΦ = 0 on Γ. Relative to max |Φ|·max(1, max |a_ε|).
pub fn s3_residual(big_phi: &SpaceTimeField, coeffs: &HopfCoefficients, epsilon: f64) -> f64 {
    let g = big_phi.grid();
    let n = g.cell_count();
    let m = big_phi.slice_count();
    let times = big_phi.times();
    let vol = g.cell_volume();
    let mut worst = 0.0f64;
    let scale =
        big_phi.values().iter().fold(0.0f64, |a, v| a.max(v.abs())) * coeffs.a_eps.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let nb = g.boundary_faces().len();
    let mut lap = vec![0.0; n];
    for k in 1..m - 1 {
        let s = big_phi.slice(k);
        lap.iter_mut().for_each(|v| *v = 0.0);
        for f in g.faces() {
            let flux = f.area * (s[f.right] - s[f.left]) / f.dist;
            lap[f.left] += flux;
            lap[f.right] -= flux;
        }
        for (i, f) in g.boundary_faces().iter().enumerate() {
            // εΦ_n = −bΦ at the face
            lap[f.cell] += f.area * (-coeffs.b[k * nb + i] * s[f.cell] / epsilon);
        }
        let dt = times[k + 1] - times[k - 1];
        for c in 0..n {
            let phit = (big_phi.slice(k + 1)[c] - big_phi.slice(k - 1)[c]) / dt;
            let r = -phit - epsilon * lap[c] / vol + coeffs.a_eps[k * n + c] * s[c];
            worst = worst.max(r.abs());
        }
    }
    worst / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    /// sup_t ‖φ(t)‖.
    pub sup_norm: f64,
    /// ‖φ‖ in L²(H¹).
    pub h1_norm: f64,
    pub lhs: f64,
    /// ‖F‖ + ‖G‖.
    pub data_norm: f64,
    /// C(ε,𝔅) = ‖𝔅‖²/ε + ε + 1.
    pub c_eps_b: f64,
    /// Smallest C with lhs ≤ C·exp(C(t₂−t₁)C(ε,𝔅))·data_norm.
    pub admissible_c: f64,
}

/// Energy bound check for a backward solution; `source_norm` is ‖F‖ in
/// L²(L²) (0 without source).
pub fn energy_check(sol: &SpaceTimeField, field: &VelocityField, source_norm: f64) -> EnergyReport {
    let g = sol.grid();
    let d = g.dim();
    let eps = sol.epsilon();
    let w = sol.time_weights();
    let mask = sol.mask();
    let mut sup_norm = 0.0f64;
    let mut h1 = 0.0;
    let mut sup_b = 0.0f64;
    let mut b = [0.0; 3];
    for k in 0..sol.slice_count() {
        let s = sol.slice(k);
        let l2 = l2_norm(g, s);
        sup_norm = sup_norm.max(l2);
        h1 += w[k] * (l2 * l2 + grad_norm_sq(g, s, mask));
        for c in 0..g.cell_count() {
            field.eval(g.center(c), sol.times()[k], &mut b[..d]);
            sup_b = sup_b.max(b[..d].iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    let h1_norm = h1.sqrt();
    let lhs = sup_norm + eps.sqrt() * h1_norm;
    let data_norm = source_norm + l2_norm(g, sol.last());
    let c_eps_b = sup_b * sup_b / eps + eps + 1.0;
    let span = sol.t_end() - sol.t_start();
    let admissible_c = if lhs == 0.0 {
        0.0
    } else if data_norm == 0.0 {
        f64::INFINITY
    } else {
        let target = lhs / data_norm;
        let f = |c: f64| c * (c * span * c_eps_b).exp();
        let mut hi = 1.0;
        while f(hi) < target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    EnergyReport { sup_norm, h1_norm, lhs, data_norm, c_eps_b, admissible_c }
}

/// ‖φ(t₁)‖² / (‖f₀‖² + Σᵢ‖fᵢ‖²) for a run with zero terminal data.
pub fn source_estimate_constant(sol: &SpaceTimeField, source: &Source) -> Option<f64> {
    let denom = source.norm_sq(sol.grid(), sol.times(), sol.mask());
    (denom > 0.0).then(|| l2_norm(sol.grid(), sol.first()).powi(2) / denom)
}
