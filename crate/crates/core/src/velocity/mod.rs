//! Velocity fields 𝔅(x, t), gradient potentials f and the sampled norms the
//! theorems are conditioned on.

pub mod expr;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::Domain;

pub use expr::{parse, Expr, Var};

/// Pointwise evaluation of a vector field. `jacobian` writes the row-major
/// matrix J[i][j] = ∂𝔅ᵢ/∂xⱼ.
pub trait FieldEval: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut j = [0.0; 9];
        self.jacobian(x, t, &mut j[..d * d]);
        (0..d).map(|i| j[i * d + i]).sum()
    }
    fn is_autonomous(&self) -> bool;
}

/// A scalar potential f(x, t) with the derivatives the analysis needs.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], t: f64) -> f64;
    fn gradient(&self, x: &[f64], t: f64, out: &mut [f64]);
    /// Row-major Hessian ∇²f.
    fn hessian(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn laplacian(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut h = [0.0; 9];
        self.hessian(x, t, &mut h[..d * d]);
        (0..d).map(|i| h[i * d + i]).sum()
    }
    fn dt(&self, x: &[f64], t: f64) -> f64;
    fn dt_gradient(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn dtt(&self, x: &[f64], t: f64) -> f64;
    fn is_autonomous(&self) -> bool;

    /// ∂ₙf = ∇f·n.
    fn normal_derivative(&self, x: &[f64], t: f64, n: &[f64]) -> f64 {
        let mut g = [0.0; 3];
        let d = self.dim();
        self.gradient(x, t, &mut g[..d]);
        (0..d).map(|k| g[k] * n[k]).sum()
    }
}

/// f = |x|²/2.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticPotential {
    pub dim: usize,
}

impl Potential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64], _t: f64) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
    fn gradient(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&x[..self.dim]);
    }
    fn hessian(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = 1.0;
        }
    }
    fn dt(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn dt_gradient(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dtt(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn is_autonomous(&self) -> bool {
        true
    }
}

/// A constant potential, whose gradient field vanishes.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPotential {
    pub dim: usize,
    pub value: f64,
}

impl Potential for ConstantPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64], _t: f64) -> f64 {
        self.value
    }
    fn gradient(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hessian(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dt(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn dt_gradient(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dtt(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn is_autonomous(&self) -> bool {
        true
    }
}

/// A potential given by an expression, with symbolically derived derivatives.
#[derive(Clone, Debug)]
pub struct ExprPotential {
    dim: usize,
    source: String,
    f: Expr,
    grad: Vec<Expr>,
    hess: Vec<Expr>,
    ft: Expr,
    grad_t: Vec<Expr>,
    ftt: Expr,
    autonomous: bool,
}

impl ExprPotential {
    pub fn parse(src: &str, dim: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!("dimension {dim} not in 1..=3")));
        }
        let f = parse(src, dim)?;
        let grad: Vec<Expr> = (0..dim).map(|i| f.diff(Var::X(i))).collect();
        let hess = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| grad[i].diff(Var::X(j))).collect();
        let ft = f.diff(Var::T);
        let grad_t = grad.iter().map(|g| g.diff(Var::T)).collect();
        let ftt = ft.diff(Var::T);
        let autonomous = !f.depends_on(Var::T);
        Ok(ExprPotential { dim, source: src.to_string(), f, grad, hess, ft, grad_t, ftt, autonomous })
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl Potential for ExprPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64], t: f64) -> f64 {
        self.f.eval(x, t)
    }
    fn gradient(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.grad) {
            *o = g.eval(x, t);
        }
    }
    fn hessian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for (o, h) in out.iter_mut().zip(&self.hess) {
            *o = h.eval(x, t);
        }
    }
    fn dt(&self, x: &[f64], t: f64) -> f64 {
        self.ft.eval(x, t)
    }
    fn dt_gradient(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.grad_t) {
            *o = g.eval(x, t);
        }
    }
    fn dtt(&self, x: &[f64], t: f64) -> f64 {
        self.ftt.eval(x, t)
    }
    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
}

struct GradientEval(Arc<dyn Potential>);

impl FieldEval for GradientEval {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.0.gradient(x, t, out)
    }
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.0.hessian(x, t, out)
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.0.laplacian(x, t)
    }
    fn is_autonomous(&self) -> bool {
        self.0.is_autonomous()
    }
}

/// 𝔅(x, y) = (y, −x).
struct SkewRotation;

impl FieldEval for SkewRotation {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -x[0];
    }
    fn jacobian(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
    }
    fn divergence(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn is_autonomous(&self) -> bool {
        true
    }
}

/// 𝔅(x, y) = (−x + y + x(x² + y²), −x − y + y(x² + y²)).
struct LyapunovLimitCycle;

impl FieldEval for LyapunovLimitCycle {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, p: &[f64], _t: f64, out: &mut [f64]) {
        let (x, y) = (p[0], p[1]);
        let r2 = x * x + y * y;
        out[0] = -x + y + x * r2;
        out[1] = -x - y + y * r2;
    }
    fn jacobian(&self, p: &[f64], _t: f64, out: &mut [f64]) {
        let (x, y) = (p[0], p[1]);
        let r2 = x * x + y * y;
        out[0] = -1.0 + r2 + 2.0 * x * x;
        out[1] = 1.0 + 2.0 * x * y;
        out[2] = -1.0 + 2.0 * x * y;
        out[3] = -1.0 + r2 + 2.0 * y * y;
    }
    fn is_autonomous(&self) -> bool {
        true
    }
}

struct Reversed(Arc<dyn FieldEval>);

impl FieldEval for Reversed {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.0.eval(x, t, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.0.jacobian(x, t, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        -self.0.divergence(x, t)
    }
    fn is_autonomous(&self) -> bool {
        self.0.is_autonomous()
    }
}

/// Half-width of the default bounding box [-4, 4]ᵈ.
pub const DEFAULT_BOX: f64 = 4.0;

pub const BUILTIN_NAMES: [&str; 4] = ["quadratic_potential", "skew_rotation", "lyapunov_limit_cycle", "zero"];

/// A velocity field with its bounding box and optional potential handle.
#[derive(Clone)]
pub struct VelocityField {
    name: String,
    eval: Arc<dyn FieldEval>,
    potential: Option<Arc<dyn Potential>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    t_max: f64,
}

impl fmt::Debug for VelocityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocityField")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("gradient", &self.potential.is_some())
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("t_max", &self.t_max)
            .finish()
    }
}

/// The field ∇f, keeping the potential for the Hopf transform and C_T(f).
pub fn make_gradient_field(potential: Arc<dyn Potential>) -> VelocityField {
    let d = potential.dim();
    VelocityField {
        name: "gradient".into(),
        eval: Arc::new(GradientEval(potential.clone())),
        potential: Some(potential),
        lo: vec![-DEFAULT_BOX; d],
        hi: vec![DEFAULT_BOX; d],
        t_max: f64::INFINITY,
    }
}

pub fn builtin_field(name: &str, dim: usize) -> Result<VelocityField> {
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidParameter(format!("dimension {dim} not in 1..=3")));
    }
    let need_2d = |f: VelocityField| {
        if dim == 2 {
            Ok(f)
        } else {
            Err(Error::DimensionMismatch { expected: 2, got: dim })
        }
    };
    let field = match name {
        "quadratic_potential" => make_gradient_field(Arc::new(QuadraticPotential { dim })),
        "zero" => make_gradient_field(Arc::new(ConstantPotential { dim, value: 0.0 })),
        "skew_rotation" => need_2d(VelocityField::from_eval("skew_rotation", Arc::new(SkewRotation)))?,
        "lyapunov_limit_cycle" => need_2d(VelocityField::from_eval("lyapunov_limit_cycle", Arc::new(LyapunovLimitCycle)))?,
        other => return Err(Error::UnknownField(other.to_string())),
    };
    Ok(field.named(name))
}

impl VelocityField {
    pub fn from_eval(name: &str, eval: Arc<dyn FieldEval>) -> Self {
        let d = eval.dim();
        VelocityField {
            name: name.into(),
            eval,
            potential: None,
            lo: vec![-DEFAULT_BOX; d],
            hi: vec![DEFAULT_BOX; d],
            t_max: f64::INFINITY,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_bounding_box(mut self, lo: &[f64], hi: &[f64]) -> Result<Self> {
        let d = self.dim();
        if lo.len() != d || hi.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: lo.len() });
        }
        if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParameter("bounding box needs lower < upper".into()));
        }
        self.lo = lo.to_vec();
        self.hi = hi.to_vec();
        Ok(self)
    }

    pub fn with_time_limit(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    /// The field −𝔅, which has the reverse characteristics.
    pub fn reversed(&self) -> Self {
        VelocityField {
            name: format!("reversed({})", self.name),
            eval: Arc::new(Reversed(self.eval.clone())),
            potential: None,
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            t_max: self.t_max,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.eval.dim()
    }

    pub fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.eval.eval(x, t, out)
    }

    pub fn value(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval(x, t, &mut out);
        out
    }

    pub fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.eval.jacobian(x, t, out)
    }

    pub fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.eval.divergence(x, t)
    }

    pub fn potential(&self) -> Option<&Arc<dyn Potential>> {
        self.potential.as_ref()
    }

    pub fn is_autonomous(&self) -> bool {
        self.eval.is_autonomous()
    }

    pub fn bounding_box(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn in_bounds(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }
}

/// Sampling density for sup/inf estimates. The tensor lattice uses
/// `2^level + 1` points per axis (nested across levels) and is augmented by
/// the first `halton` points of a Halton sequence, so raising either knob
/// only adds samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub level: u32,
    pub halton: usize,
    pub boundary: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { level: 5, halton: 256, boundary: crate::geometry::DEFAULT_BOUNDARY_SAMPLES }
    }
}

pub const CT_TERM_NAMES: [&str; 10] = [
    "one",
    "grad_f",
    "hess_f",
    "grad_dt_f^(2/3)",
    "grad_f^(2/3)",
    "dtt_f^(1/3)",
    "lap_f^(2/3)",
    "dt_f^(1/2)",
    "dt_dn_f_boundary",
    "inv_dn_f_boundary",
];

/// The ten terms of C_T(f) and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct CtBreakdown {
    pub terms: [f64; 10],
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CtStatus {
    Available(CtBreakdown),
    /// ∂ₙf ≤ 0 somewhere on Γ; `partial` omits the inverse term.
    Unavailable {
        min_dn_f: f64,
        partial: CtBreakdown,
    },
    NoPotential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldNorms {
    pub sup_b: f64,
    /// Sup of the Frobenius norm of ∇𝔅 (an upper bound for the operator norm).
    pub sup_grad_b: f64,
    /// C_𝔅 = sup |∇·𝔅|.
    pub c_b: f64,
    pub min_b_dot_n: f64,
    pub min_dn_f: Option<f64>,
    pub c_t: CtStatus,
    pub interior_samples: usize,
    pub boundary_samples: usize,
    pub flags: Vec<String>,
}

impl FieldNorms {
    pub fn c_t_total(&self) -> Result<f64> {
        match &self.c_t {
            CtStatus::Available(b) => Ok(b.total),
            CtStatus::Unavailable { min_dn_f, .. } => {
                Err(Error::UndefinedConstant(format!("min of the normal derivative of f on the boundary is {min_dn_f}")))
            }
            CtStatus::NoPotential => Err(Error::MissingPotential),
        }
    }
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const HALTON_BASES: [usize; 4] = [2, 3, 5, 7];

fn interior_samples(domain: &Domain, t_end: f64, autonomous: bool, s: &Sampling) -> Vec<(Vec<f64>, f64)> {
    let (lo, hi) = domain.bounding_box();
    let d = lo.len();
    let m = (1usize << s.level) + 1;
    let times: Vec<f64> =
        if autonomous || t_end <= 0.0 { vec![0.0] } else { (0..m).map(|k| t_end * k as f64 / (m - 1) as f64).collect() };
    let mut out = Vec::new();
    let total = m.pow(d as u32);
    for idx in 0..total {
        let mut r = idx;
        let x: Vec<f64> = (0..d)
            .map(|k| {
                let i = r % m;
                r /= m;
                lo[k] + (hi[k] - lo[k]) * i as f64 / (m - 1) as f64
            })
            .collect();
        if domain.contains_closed(&x, 1e-12) {
            for &t in &times {
                out.push((x.clone(), t));
            }
        }
    }
    for i in 1..=s.halton {
        let x: Vec<f64> = (0..d).map(|k| lo[k] + (hi[k] - lo[k]) * radical_inverse(i, HALTON_BASES[k])).collect();
        let t = if autonomous { 0.0 } else { t_end * radical_inverse(i, HALTON_BASES[d]) };
        if domain.contains_closed(&x, 1e-12) {
            out.push((x, t));
        }
    }
    out
}

/// Sampled sup/inf estimates of the quantities the theorems condition on.
pub fn field_norms(field: &VelocityField, domain: &Domain, t_end: f64, sampling: &Sampling) -> Result<FieldNorms> {
    let d = field.dim();
    if domain.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: domain.dim() });
    }
    let autonomous = field.is_autonomous();
    let pts = interior_samples(domain, t_end, autonomous, sampling);
    let mut b = vec![0.0; d];
    let mut j = vec![0.0; d * d];
    let (mut sup_b, mut sup_j, mut c_b) = (0.0f64, 0.0f64, 0.0f64);
    let pot = field.potential();
    // sup |∇²f|, |∇∂ₜf|, |∂ₜ²f|, |Δf|, |∂ₜf|
    let mut pot_sups = [0.0f64; 5];
    let mut g = vec![0.0; d];
    for (x, t) in &pts {
        field.eval(x, *t, &mut b);
        sup_b = sup_b.max(crate::geometry::norm2(&b));
        field.jacobian(x, *t, &mut j);
        let fro = crate::geometry::norm2(&j);
        sup_j = sup_j.max(fro);
        c_b = c_b.max(field.divergence(x, *t).abs());
        if let Some(p) = pot {
            pot_sups[0] = pot_sups[0].max(fro);
            p.dt_gradient(x, *t, &mut g);
            pot_sups[1] = pot_sups[1].max(crate::geometry::norm2(&g));
            pot_sups[2] = pot_sups[2].max(p.dtt(x, *t).abs());
            pot_sups[3] = pot_sups[3].max(p.laplacian(x, *t).abs());
            pot_sups[4] = pot_sups[4].max(p.dt(x, *t).abs());
        }
    }
    let bpts = domain.boundary_samples(sampling.boundary);
    let m = (1usize << sampling.level) + 1;
    let times: Vec<f64> =
        if autonomous || t_end <= 0.0 { vec![0.0] } else { (0..m).map(|k| t_end * k as f64 / (m - 1) as f64).collect() };
    let mut min_bn = f64::INFINITY;
    let mut min_dn = f64::INFINITY;
    let mut sup_dtdn = 0.0f64;
    let mut boundary_count = 0;
    for bp in &bpts {
        for &t in &times {
            boundary_count += 1;
            field.eval(&bp.x, t, &mut b);
            let bn: f64 = (0..d).map(|k| b[k] * bp.normal[k]).sum();
            min_bn = min_bn.min(bn);
            if let Some(p) = pot {
                min_dn = min_dn.min(p.normal_derivative(&bp.x, t, &bp.normal));
                p.dt_gradient(&bp.x, t, &mut g);
                let v: f64 = (0..d).map(|k| g[k] * bp.normal[k]).sum();
                sup_dtdn = sup_dtdn.max(v.abs());
            }
        }
    }
    let mut flags = Vec::new();
    let (min_dn_f, c_t) = match pot {
        None => (None, CtStatus::NoPotential),
        Some(_) => {
            let mut terms = [
                1.0,
                sup_b,
                pot_sups[0],
                pot_sups[1].powf(2.0 / 3.0),
                sup_b.powf(2.0 / 3.0),
                pot_sups[2].powf(1.0 / 3.0),
                pot_sups[3].powf(2.0 / 3.0),
                pot_sups[4].sqrt(),
                sup_dtdn,
                0.0,
            ];
            if min_dn > 0.0 {
                terms[9] = 1.0 / min_dn;
                let total = terms.iter().sum();
                (Some(min_dn), CtStatus::Available(CtBreakdown { terms, total }))
            } else {
                flags.push(format!("min normal derivative of f is {min_dn}: C_T(f) unavailable"));
                let total = terms.iter().sum();
                (Some(min_dn), CtStatus::Unavailable { min_dn_f: min_dn, partial: CtBreakdown { terms, total } })
            }
        }
    };
    if min_bn < 0.0 {
        flags.push(format!("B.n takes the negative value {min_bn} on the boundary"));
    }
    Ok(FieldNorms {
        sup_b,
        sup_grad_b: sup_j,
        c_b,
        min_b_dot_n: min_bn,
        min_dn_f,
        c_t,
        interior_samples: pts.len(),
        boundary_samples: boundary_count,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_values() {
        let s = builtin_field("skew_rotation", 2).unwrap();
        assert_eq!(s.value(&[1.0, 0.0], 0.0), vec![0.0, -1.0]);
        let l = builtin_field("lyapunov_limit_cycle", 2).unwrap();
        assert_eq!(l.value(&[0.0, 0.0], 0.0), vec![0.0, 0.0]);
        let z = builtin_field("zero", 3).unwrap();
        assert_eq!(z.value(&[0.3, -1.0, 2.0], 1.0), vec![0.0; 3]);
        let q = builtin_field("quadratic_potential", 2).unwrap();
        assert_eq!(q.value(&[0.3, -1.0], 0.0), vec![0.3, -1.0]);
        assert_eq!(q.divergence(&[0.3, -1.0], 0.0), 2.0);
        assert!(matches!(builtin_field("vortex", 2), Err(Error::UnknownField(_))));
        assert!(matches!(builtin_field("skew_rotation", 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lyapunov_jacobian_matches_differences() {
        let l = builtin_field("lyapunov_limit_cycle", 2).unwrap();
        let x = [0.3, -0.7];
        let mut j = [0.0; 4];
        l.jacobian(&x, 0.0, &mut j);
        let h = 1e-6;
        for c in 0..2 {
            let mut p = x;
            let mut m = x;
            p[c] += h;
            m[c] -= h;
            let (fp, fm) = (l.value(&p, 0.0), l.value(&m, 0.0));
            for r in 0..2 {
                assert!((j[r * 2 + c] - (fp[r] - fm[r]) / (2.0 * h)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn one_dim_quadratic_norms() {
        let f = make_gradient_field(Arc::new(ExprPotential::parse("x1^2/2", 1).unwrap()));
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let n = field_norms(&f, &dom, 1.0, &Sampling::default()).unwrap();
        assert_eq!(n.sup_b, 1.0);
        assert_eq!(n.c_b, 1.0);
        assert_eq!(n.min_dn_f, Some(1.0));
        match n.c_t {
            CtStatus::Available(b) => {
                assert_eq!(b.terms, [1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
                assert_eq!(b.total, 6.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_field_marks_ct_unavailable() {
        let z = builtin_field("zero", 1).unwrap();
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let n = field_norms(&z, &dom, 1.0, &Sampling::default()).unwrap();
        assert_eq!((n.sup_b, n.sup_grad_b, n.c_b), (0.0, 0.0, 0.0));
        match &n.c_t {
            CtStatus::Unavailable { partial, .. } => assert_eq!(partial.total, 1.0),
            other => panic!("{other:?}"),
        }
        assert!(n.c_t_total().is_err());
        assert!(!n.flags.is_empty());
    }

    #[test]
    fn skew_rotation_is_divergence_free() {
        let s = builtin_field("skew_rotation", 2).unwrap();
        let dom = Domain::disk([0.0, 0.0], 1.0).unwrap();
        let n = field_norms(&s, &dom, 1.0, &Sampling::default()).unwrap();
        assert_eq!(n.c_b, 0.0);
        assert!(matches!(n.c_t, CtStatus::NoPotential));
        assert!(n.min_b_dot_n.abs() < 1e-15);
    }

    #[test]
    fn time_dependent_expression_terms() {
        // f = t x1^2 / 2 on (-1, 1), T = 1: grad_t f = x1, dt f = x1^2/2
        let p = ExprPotential::parse("t*x1^2/2", 1).unwrap();
        assert!(!p.is_autonomous());
        let f = make_gradient_field(Arc::new(p));
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let n = field_norms(&f, &dom, 1.0, &Sampling::default()).unwrap();
        match n.c_t {
            CtStatus::Unavailable { partial, min_dn_f } => {
                assert_eq!(min_dn_f, 0.0);
                assert_eq!(partial.terms[3], 1.0);
                assert!((partial.terms[7] - 0.5f64.sqrt()).abs() < 1e-15);
                assert_eq!(partial.terms[8], 1.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
