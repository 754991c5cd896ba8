//! Characteristics Φ(t, t₀, x₀) of the velocity field, trajectory tubes and the
//! flushing condition.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{dist, Domain, Region, DEFAULT_BOUNDARY_SAMPLES};
use crate::velocity::VelocityField;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    /// Absolute and relative local error target.
    pub tol: f64,
    /// Upper bound on |h|, which also bounds the spacing of stored samples.
    pub max_step: f64,
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { tol: 1e-9, max_step: 0.05, initial_step: 1e-3, max_steps: 2_000_000 }
    }
}

/// Accepted steps of an adaptive integration with Hermite dense output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    points: Vec<f64>,
    derivs: Vec<f64>,
    pub steps: usize,
    pub rejected: usize,
    /// Largest accepted scaled error estimate (≤ 1 means within tolerance).
    pub max_error: f64,
    /// Time at which the trajectory left the field's bounding box, if it did.
    pub exit_time: Option<f64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn anchor(&self) -> (&[f64], f64) {
        (self.point(0), self.times[0])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn end_point(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    /// +1 for forward, −1 for backward integration.
    pub fn direction(&self) -> f64 {
        if self.end_time() >= self.times[0] {
            1.0
        } else {
            -1.0
        }
    }

    /// Covered time range as an ascending pair.
    pub fn span(&self) -> (f64, f64) {
        let (a, b) = (self.times[0], self.end_time());
        (a.min(b), a.max(b))
    }

    /// Cubic Hermite interpolation between accepted steps. Times outside the
    /// covered range are clamped.
    pub fn at_into(&self, t: f64, out: &mut [f64]) {
        let d = self.dim;
        let n = self.len();
        if n == 1 {
            out.copy_from_slice(self.point(0));
            return;
        }
        let dir = self.direction();
        let key = t * dir;
        // index of the first stored time whose key is >= t
        let mut lo = 0;
        let mut hi = n - 1;
        if key <= self.times[0] * dir {
            out.copy_from_slice(self.point(0));
            return;
        }
        if key >= self.times[n - 1] * dir {
            out.copy_from_slice(self.point(n - 1));
            return;
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.times[mid] * dir <= key {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (ta, tb) = (self.times[lo], self.times[hi]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        for k in 0..d {
            out[k] = h00 * self.points[lo * d + k]
                + h10 * h * self.derivs[lo * d + k]
                + h01 * self.points[hi * d + k]
                + h11 * h * self.derivs[hi * d + k];
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.at_into(t, &mut out);
        out
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// Integrates the characteristic ODE from (x₀, t₀) to t₁ (either direction)
/// with Dormand–Prince 5(4). Leaving the bounding box is an error.
pub fn integrate_flow(field: &VelocityField, x0: &[f64], t0: f64, t1: f64, opts: &FlowOptions) -> Result<Trajectory> {
    let traj = integrate_partial(field, x0, t0, t1, opts)?;
    match traj.exit_time {
        Some(time) => Err(Error::OutOfDomain { time, point: traj.end_point().to_vec() }),
        None => Ok(traj),
    }
}

/// Like [`integrate_flow`] but returns the trajectory up to the exit time
/// instead of failing.
pub fn integrate_partial(field: &VelocityField, x0: &[f64], t0: f64, t1: f64, opts: &FlowOptions) -> Result<Trajectory> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
    }
    if !(opts.tol > 0.0) || !(opts.max_step > 0.0) {
        return Err(Error::InvalidParameter("flow tolerance and max step must be positive".into()));
    }
    let mut k = [[0.0f64; 3]; 7];
    let mut y = [0.0f64; 3];
    y[..d].copy_from_slice(x0);
    field.eval(&y[..d], t0, &mut k[0][..d]);
    let mut traj = Trajectory {
        dim: d,
        times: vec![t0],
        points: x0.to_vec(),
        derivs: k[0][..d].to_vec(),
        steps: 0,
        rejected: 0,
        max_error: 0.0,
        exit_time: None,
    };
    if !field.in_bounds(x0) {
        traj.exit_time = Some(t0);
        return Ok(traj);
    }
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(traj);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut h = opts.initial_step.min(opts.max_step).min(span.abs()) * dir;
    let mut ytmp = [0.0f64; 3];
    let mut ynew = [0.0f64; 3];
    while (t1 - t) * dir > 0.0 {
        if traj.steps + traj.rejected >= opts.max_steps {
            return Err(Error::InvalidParameter(format!("flow integration exceeded {} steps", opts.max_steps)));
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        for s in 1..7 {
            for i in 0..d {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * A[s][j] * kj[i];
                }
                ytmp[i] = acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            field.eval(&ytmp[..d], t + C[s] * h, &mut tail[0][..d]);
        }
        // the 7th stage is evaluated at the 5th-order solution
        ynew[..d].copy_from_slice(&ytmp[..d]);
        let mut err = 0.0f64;
        for i in 0..d {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let sc = opts.tol + opts.tol * y[i].abs().max(ynew[i].abs());
            err = err.max((h * e).abs() / sc);
        }
        if !err.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite field value near t = {t}")));
        }
        if err <= 1.0 {
            let t_new = if (t1 - (t + h)) * dir <= 0.0 { t1 } else { t + h };
            traj.steps += 1;
            traj.max_error = traj.max_error.max(err);
            traj.times.push(t_new);
            traj.points.extend_from_slice(&ynew[..d]);
            traj.derivs.extend_from_slice(&k[6][..d]);
            if !field.in_bounds(&ynew[..d]) {
                let exit = locate_exit(field, &traj);
                truncate_at(&mut traj, exit, field);
                traj.exit_time = Some(exit);
                return Ok(traj);
            }
            t = t_new;
            y = ynew;
            k[0] = k[6];
        } else {
            traj.rejected += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h.abs() * factor).min(opts.max_step) * dir;
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(Error::InvalidParameter(format!("step size underflow at t = {t}")));
        }
    }
    Ok(traj)
}

fn locate_exit(field: &VelocityField, traj: &Trajectory) -> f64 {
    let n = traj.len();
    let (mut a, mut b) = (traj.time(n - 2), traj.time(n - 1));
    let mut p = vec![0.0; traj.dim];
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        traj.at_into(m, &mut p);
        if field.in_bounds(&p) {
            a = m;
        } else {
            b = m;
        }
    }
    b
}

fn truncate_at(traj: &mut Trajectory, t: f64, field: &VelocityField) {
    let d = traj.dim;
    let p = traj.at(t);
    let n = traj.len();
    traj.times[n - 1] = t;
    traj.points[(n - 1) * d..].copy_from_slice(&p);
    let mut f = vec![0.0; d];
    field.eval(&p, t, &mut f);
    traj.derivs[(n - 1) * d..].copy_from_slice(&f);
}

/// Φ(t₁, t₀, x₀).
pub fn flow_map(field: &VelocityField, x0: &[f64], t0: f64, t1: f64, opts: &FlowOptions) -> Result<Vec<f64>> {
    Ok(integrate_flow(field, x0, t0, t1, opts)?.end_point().to_vec())
}

/// Number of Hermite sub-samples per accepted step when scanning for region
/// entry.
const SCAN_SUBDIVISIONS: usize = 4;
const ENTRY_TIME_TOL: f64 = 1e-9;

/// Scan times from `start` towards `end` (both inside the trajectory span).
fn scan_times(traj: &Trajectory, start: f64, end: f64) -> Vec<f64> {
    let dir = if end >= start { 1.0 } else { -1.0 };
    let mut nodes: Vec<f64> =
        traj.times().iter().copied().filter(|&t| (t - start) * dir > 0.0 && (end - t) * dir > 0.0).collect();
    if dir < 0.0 {
        nodes.sort_by(|a, b| b.partial_cmp(a).unwrap());
    } else {
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let mut knots = Vec::with_capacity(nodes.len() + 2);
    knots.push(start);
    knots.extend(nodes);
    knots.push(end);
    let mut out = Vec::with_capacity(knots.len() * SCAN_SUBDIVISIONS);
    for w in knots.windows(2) {
        for s in 0..SCAN_SUBDIVISIONS {
            out.push(w[0] + (w[1] - w[0]) * s as f64 / SCAN_SUBDIVISIONS as f64);
        }
    }
    out.push(end);
    out
}

fn bisect_sign(traj: &Trajectory, region: &Region, mut outside: f64, mut inside: f64) -> f64 {
    let mut p = vec![0.0; traj.dim()];
    while (inside - outside).abs() > ENTRY_TIME_TOL {
        let m = 0.5 * (inside + outside);
        traj.at_into(m, &mut p);
        if region.contains_open(&p) {
            inside = m;
        } else {
            outside = m;
        }
    }
    inside
}

fn clip_window(traj: &Trajectory, window: (f64, f64)) -> Option<(f64, f64)> {
    let (a, b) = (window.0.min(window.1), window.0.max(window.1));
    let (s0, s1) = traj.span();
    let (a, b) = (a.max(s0), b.min(s1));
    (a <= b).then_some((a, b))
}

/// First time, scanning in the trajectory's direction from the window start,
/// at which the trajectory lies in the open region. For a backward trajectory
/// the window start is its upper end.
pub fn entry_time(traj: &Trajectory, region: &Region, window: (f64, f64)) -> Result<Option<f64>> {
    if region.dim() != traj.dim() {
        return Err(Error::DimensionMismatch { expected: traj.dim(), got: region.dim() });
    }
    let Some((a, b)) = clip_window(traj, window) else { return Ok(None) };
    let (start, end) = if traj.direction() > 0.0 { (a, b) } else { (b, a) };
    let mut p = vec![0.0; traj.dim()];
    let mut prev = start;
    for t in scan_times(traj, start, end) {
        traj.at_into(t, &mut p);
        if region.contains_open(&p) {
            if t == start {
                return Ok(Some(start));
            }
            return Ok(Some(bisect_sign(traj, region, prev, t)));
        }
        prev = t;
    }
    Ok(None)
}

/// Open time intervals (ascending) on which the trajectory is inside the open
/// region, restricted to the window.
pub fn region_intervals(traj: &Trajectory, region: &Region, window: (f64, f64)) -> Vec<(f64, f64)> {
    let Some((a, b)) = clip_window(traj, window) else { return Vec::new() };
    let ts = scan_times(traj, a, b);
    let mut p = vec![0.0; traj.dim()];
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    let mut prev = a;
    for &t in &ts {
        traj.at_into(t, &mut p);
        let inside = region.contains_open(&p);
        match (open, inside) {
            (None, true) => open = Some(if t == a { a } else { bisect_sign(traj, region, prev, t) }),
            (Some(s), false) => {
                out.push((s, bisect_sign(traj, region, t, prev)));
                open = None;
            }
            _ => {}
        }
        prev = t;
    }
    if let Some(s) = open {
        out.push((s, b));
    }
    out.retain(|(s, e)| e > s);
    out
}

/// Intersection of two ascending lists of open intervals. Touching endpoints
/// do not count as overlap.
pub fn intersect_intervals(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Center plus a boundary shell of B̄(x₀, r): 2 shell points in 1-D, `shell`
/// points on the circle in 2-D and a Fibonacci sphere in 3-D.
pub fn ball_samples(x0: &[f64], r: f64, shell: usize) -> Vec<Vec<f64>> {
    let d = x0.len();
    let mut out = vec![x0.to_vec()];
    match d {
        1 => {
            out.push(vec![x0[0] - r]);
            out.push(vec![x0[0] + r]);
        }
        2 => {
            for k in 0..shell {
                let a = 2.0 * std::f64::consts::PI * k as f64 / shell as f64;
                out.push(vec![x0[0] + r * a.cos(), x0[1] + r * a.sin()]);
            }
        }
        _ => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for k in 0..shell {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / shell as f64;
                let rho = (1.0 - z * z).sqrt();
                let a = golden * k as f64;
                out.push(vec![x0[0] + r * rho * a.cos(), x0[1] + r * rho * a.sin(), x0[2] + r * z]);
            }
        }
    }
    out
}

pub fn default_shell(dim: usize) -> usize {
    match dim {
        1 => 2,
        2 => 16,
        _ => 64,
    }
}

/// Sampling lattice for the flushing check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    /// Points per axis over the bounding box of Ω (restricted to Ω̄).
    pub space: usize,
    /// Points over [T₀, T].
    pub time: usize,
    /// Shell points per ball; 0 selects the per-dimension default.
    pub shell: usize,
    /// Extra boundary points for disks.
    pub boundary: usize,
}

impl Lattice {
    pub fn new(space: usize, time: usize) -> Self {
        Lattice { space, time, shell: 0, boundary: DEFAULT_BOUNDARY_SAMPLES }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticePoint {
    pub x: Vec<f64>,
    pub on_boundary: bool,
}

/// Lattice points of Ω̄ with the maximal axis spacing.
pub fn lattice_points(domain: &Domain, n: usize, boundary: usize) -> Result<(Vec<LatticePoint>, f64)> {
    if n < 2 {
        return Err(Error::InvalidParameter("the space lattice needs at least 2 points per axis".into()));
    }
    let (lo, hi) = domain.bounding_box();
    let d = lo.len();
    let spacing = (0..d).map(|k| (hi[k] - lo[k]) / (n - 1) as f64).fold(0.0, f64::max);
    let mut out = Vec::new();
    let total = n.pow(d as u32);
    for idx in 0..total {
        let mut r = idx;
        let x: Vec<f64> = (0..d)
            .map(|k| {
                let i = r % n;
                r /= n;
                if i == n - 1 {
                    hi[k]
                } else {
                    lo[k] + (hi[k] - lo[k]) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let sd = domain.signed_distance(&x);
        if sd <= 1e-12 {
            out.push(LatticePoint { on_boundary: sd.abs() <= 1e-12, x });
        }
    }
    if let Domain::Disk { .. } = domain {
        for p in domain.boundary_samples(boundary) {
            out.push(LatticePoint { x: p.x, on_boundary: true });
        }
    }
    Ok((out, spacing))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Satisfied => "satisfied",
            Verdict::Violated => "violated",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

/// A common time window found for one lattice cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonEntry {
    /// A time strictly inside the latest common window.
    pub t_star: f64,
    pub window: (f64, f64),
    /// Total measure of all common windows.
    pub measure: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub entry: Option<CommonEntry>,
}

/// A lattice cell whose ball never sits inside O as a whole.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub r0: f64,
    pub shell: usize,
    /// Center trajectory samples (t, x).
    pub path: Vec<(f64, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeInfo {
    pub space_points: usize,
    pub per_axis: usize,
    pub time_points: usize,
    pub shell: usize,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlushingReport {
    pub verdict: Verdict,
    pub t_end: f64,
    pub t0_window: f64,
    pub r0: f64,
    pub lattice: LatticeInfo,
    pub cells: Vec<CellOutcome>,
    pub witnesses: Vec<Witness>,
    pub satisfied_cells: usize,
    pub min_window_measure: f64,
    pub warnings: Vec<String>,
}

/// Parameters (T, T₀, r₀) of one flushing check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlushingParams {
    pub t_end: f64,
    pub t0_window: f64,
    pub r0: f64,
}

const MAX_WITNESSES: usize = 32;

fn common_entry(
    field: &VelocityField,
    region: &Region,
    x0: &[f64],
    t0: f64,
    params: &FlushingParams,
    shell: usize,
    opts: &FlowOptions,
) -> Result<Option<CommonEntry>> {
    let window = (t0 - params.t0_window, t0);
    let mut common: Option<Vec<(f64, f64)>> = None;
    for x in ball_samples(x0, params.r0, shell) {
        let traj = integrate_partial(field, &x, t0, t0 - params.t0_window, opts)?;
        let iv = region_intervals(&traj, region, window);
        // the window is open, so drop the endpoints themselves
        let iv: Vec<(f64, f64)> =
            iv.into_iter().map(|(a, b)| (a.max(window.0), b.min(window.1))).filter(|(a, b)| b > a).collect();
        let next = match common {
            None => iv,
            Some(c) => intersect_intervals(&c, &iv),
        };
        if next.is_empty() {
            return Ok(None);
        }
        common = Some(next);
    }
    let c = common.unwrap_or_default();
    let last = *c.last().unwrap();
    Ok(Some(CommonEntry { t_star: 0.5 * (last.0 + last.1), window: last, measure: c.iter().map(|(a, b)| b - a).sum() }))
}

fn witness_path(field: &VelocityField, x0: &[f64], t0: f64, t0_window: f64, opts: &FlowOptions) -> Vec<(f64, Vec<f64>)> {
    match integrate_partial(field, x0, t0, t0 - t0_window, opts) {
        Ok(tr) => (0..tr.len()).map(|i| (tr.time(i), tr.point(i).to_vec())).collect(),
        Err(_) => vec![(t0, x0.to_vec())],
    }
}

/// Lattice check of the flushing condition for the target set `region`.
pub fn check_flushing(
    field: &VelocityField,
    domain: &Domain,
    region: &Region,
    params: &FlushingParams,
    lattice: &Lattice,
    opts: &FlowOptions,
    exec: Execution,
) -> Result<FlushingReport> {
    let d = field.dim();
    if domain.dim() != d || region.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: domain.dim().max(region.dim()) });
    }
    if !(params.t0_window > 0.0 && params.t0_window < params.t_end) {
        return Err(Error::InvalidParameter(format!("need 0 < T0 < T, got T0 = {}, T = {}", params.t0_window, params.t_end)));
    }
    if !(params.r0 > 0.0) {
        return Err(Error::InvalidParameter(format!("r0 must be positive, got {}", params.r0)));
    }
    if lattice.time == 0 {
        return Err(Error::InvalidParameter("the time lattice needs at least one point".into()));
    }
    let shell = if lattice.shell == 0 { default_shell(d) } else { lattice.shell };
    let (points, spacing) = lattice_points(domain, lattice.space, lattice.boundary)?;
    let times: Vec<f64> = if lattice.time == 1 {
        vec![params.t_end]
    } else {
        (0..lattice.time)
            .map(|k| params.t0_window + (params.t_end - params.t0_window) * k as f64 / (lattice.time - 1) as f64)
            .collect()
    };
    let nt = times.len();
    let results = exec.map_indexed(points.len() * nt, |idx| {
        let (p, k) = (idx / nt, idx % nt);
        common_entry(field, region, &points[p].x, times[k], params, shell, opts)
    });
    let mut cells = Vec::with_capacity(results.len());
    let mut witnesses = Vec::new();
    let mut failures = 0usize;
    let mut min_measure = f64::INFINITY;
    for (idx, r) in results.into_iter().enumerate() {
        let (p, k) = (idx / nt, idx % nt);
        let entry = r?;
        match &entry {
            Some(e) => min_measure = min_measure.min(e.measure),
            None => {
                failures += 1;
                if witnesses.len() < MAX_WITNESSES {
                    witnesses.push(Witness {
                        x0: points[p].x.clone(),
                        t0: times[k],
                        r0: params.r0,
                        shell,
                        path: witness_path(field, &points[p].x, times[k], params.t0_window, opts),
                    });
                }
            }
        }
        cells.push(CellOutcome { x0: points[p].x.clone(), t0: times[k], entry });
    }
    let mut warnings = Vec::new();
    let coarse = spacing > params.r0 * (1.0 + 1e-9);
    if coarse {
        warnings.push(format!("lattice spacing {spacing} exceeds r0 = {}; a satisfied verdict cannot be issued", params.r0));
    }
    let verdict = if failures > 0 {
        Verdict::Violated
    } else if coarse {
        Verdict::Inconclusive
    } else {
        Verdict::Satisfied
    };
    Ok(FlushingReport {
        verdict,
        t_end: params.t_end,
        t0_window: params.t0_window,
        r0: params.r0,
        lattice: LatticeInfo { space_points: points.len(), per_axis: lattice.space, time_points: nt, shell, spacing },
        satisfied_cells: cells.len() - failures,
        cells,
        witnesses,
        min_window_measure: if min_measure.is_finite() { min_measure } else { 0.0 },
        warnings,
    })
}

/// Re-integrates a witness and returns true when it still has no common time
/// inside the target set.
pub fn verify_witness(
    field: &VelocityField,
    region: &Region,
    witness: &Witness,
    t0_window: f64,
    opts: &FlowOptions,
) -> Result<bool> {
    let params = FlushingParams { t_end: witness.t0, t0_window, r0: witness.r0 };
    Ok(common_entry(field, region, &witness.x0, witness.t0, &params, witness.shell, opts)?.is_none())
}

/// Per-point data of the autonomous characterization.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEntry {
    pub x0: Vec<f64>,
    pub on_boundary: bool,
    /// Backward time needed to enter O, if it happens before the cap.
    pub entry: Option<f64>,
    /// Largest verified radius whose ball sits inside O at the evaluation time.
    pub radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AutonomousOutcome {
    Certified { t0_window: f64, r0: f64, max_entry: f64 },
    Refuted { witnesses: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutonomousReport {
    pub outcome: AutonomousOutcome,
    pub points: Vec<PointEntry>,
    pub horizon_cap: f64,
}

const SAFETY_FACTOR: f64 = 1.1;

/// For a time-independent field: backward entry times over a lattice of Ω̄,
/// T₀ = 1.1 × the largest entry time and r₀ = the smallest verified ball
/// radius. A point that never enters before `horizon_cap` refutes.
pub fn autonomous_flushing_params(
    field: &VelocityField,
    domain: &Domain,
    region: &Region,
    horizon_cap: f64,
    lattice: &Lattice,
    opts: &FlowOptions,
    exec: Execution,
) -> Result<AutonomousReport> {
    if !field.is_autonomous() {
        return Err(Error::Precondition("the autonomous characterization needs a time-independent field".into()));
    }
    if !(horizon_cap > 0.0) {
        return Err(Error::InvalidParameter("horizon cap must be positive".into()));
    }
    let d = field.dim();
    let shell = if lattice.shell == 0 { default_shell(d) } else { lattice.shell };
    let (points, _) = lattice_points(domain, lattice.space, lattice.boundary)?;
    let (blo, bhi) = domain.bounding_box();
    let r_hi = (0..d).map(|k| bhi[k] - blo[k]).fold(0.0, f64::max);

    let entries: Vec<Result<(Option<f64>, Option<Trajectory>)>> = exec.map_indexed(points.len(), |i| {
        let traj = integrate_partial(field, &points[i].x, 0.0, -horizon_cap, opts)?;
        let e = entry_time(&traj, region, (-horizon_cap, 0.0))?;
        Ok((e.map(|t| -t), Some(traj)))
    });
    let mut entry_list = Vec::with_capacity(points.len());
    let mut trajs = Vec::with_capacity(points.len());
    for e in entries {
        let (a, b) = e?;
        entry_list.push(a);
        trajs.push(b);
    }
    let max_entry = entry_list.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let t0_window = (SAFETY_FACTOR * max_entry).max(opts.max_step);

    let radii: Vec<Result<Option<f64>>> = exec.map_indexed(points.len(), |i| {
        let Some(_) = entry_list[i] else { return Ok(None) };
        let traj = trajs[i].as_ref().unwrap();
        let iv = region_intervals(traj, region, (-t0_window, 0.0));
        let Some(&(a, b)) = iv.last() else { return Ok(None) };
        // evaluation time with the largest clearance inside the first window
        let mut best = (f64::NEG_INFINITY, 0.5 * (a + b));
        for s in 1..32 {
            let t = a + (b - a) * s as f64 / 32.0;
            let c = -region.signed_distance(&traj.at(t));
            if c > best.0 {
                best = (c, t);
            }
        }
        let te = best.1;
        let ok = |r: f64| -> Result<bool> {
            for x in ball_samples(&points[i].x, r, shell).into_iter().skip(1) {
                let tr = integrate_partial(field, &x, 0.0, te, opts)?;
                if tr.exit_time.is_some() || !region.contains_open(tr.end_point()) {
                    return Ok(false);
                }
            }
            Ok(true)
        };
        if ok(r_hi)? {
            return Ok(Some(r_hi));
        }
        let (mut lo, mut hi) = (0.0, r_hi);
        for _ in 0..24 {
            let m = 0.5 * (lo + hi);
            if ok(m)? {
                lo = m;
            } else {
                hi = m;
            }
        }
        Ok(Some(lo))
    });
    let mut out_points = Vec::with_capacity(points.len());
    for (i, r) in radii.into_iter().enumerate() {
        out_points.push(PointEntry {
            x0: points[i].x.clone(),
            on_boundary: points[i].on_boundary,
            entry: entry_list[i],
            radius: r?,
        });
    }
    let witnesses: Vec<Vec<f64>> = out_points.iter().filter(|p| p.entry.is_none()).map(|p| p.x0.clone()).collect();
    let outcome = if witnesses.is_empty() {
        let r0 = out_points.iter().filter_map(|p| p.radius).fold(f64::INFINITY, f64::min);
        AutonomousOutcome::Certified { t0_window, r0, max_entry }
    } else {
        AutonomousOutcome::Refuted { witnesses }
    };
    Ok(AutonomousReport { outcome, points: out_points, horizon_cap })
}

/// Query for the tube D_r(x₀, t₁, t₂).
#[derive(Clone, Debug, PartialEq)]
pub struct TubeQuery {
    pub x0: Vec<f64>,
    pub r: f64,
    pub t1: f64,
    pub t2: f64,
}

/// (x, t) ∈ D_r ⇔ |Φ(t₂, t, x) − x₀| ≤ r, with slack 10 × tolerance.
pub fn tube_membership(query: &TubeQuery, field: &VelocityField, x: &[f64], t: f64, opts: &FlowOptions) -> Result<bool> {
    if t < query.t1 || t > query.t2 {
        return Err(Error::InvalidParameter(format!("t = {t} outside [{}, {}]", query.t1, query.t2)));
    }
    let y = flow_map(field, x, t, query.t2, opts)?;
    Ok(dist(&y, &query.x0) <= query.r + 10.0 * opts.tol)
}

/// A pair of anchors (x₀, t₀) and (y₀, s₀).
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPair {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub y0: Vec<f64>,
    pub s0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GronwallReport {
    /// min over pairs and sampled t of RHS − LHS.
    pub worst_margin: f64,
    pub worst_pair: usize,
    pub worst_time: f64,
    pub evaluations: usize,
}

fn trajectory_on(field: &VelocityField, x0: &[f64], t0: f64, t_end: f64, opts: &FlowOptions) -> Result<(Trajectory, Trajectory)> {
    Ok((integrate_flow(field, x0, t0, 0.0, opts)?, integrate_flow(field, x0, t0, t_end, opts)?))
}

fn eval_on(pair: &(Trajectory, Trajectory), t0: f64, t: f64) -> Vec<f64> {
    if t <= t0 {
        pair.0.at(t)
    } else {
        pair.1.at(t)
    }
}

/// Checks |Φ(t,t₀,x₀) − Φ(t,s₀,y₀)| ≤ exp(L T)(B |t₀ − s₀| + |x₀ − y₀|) on
/// `samples` times in [0, T], with B = sup|𝔅| and L = sup|∇𝔅| supplied by the
/// caller (measured over the region the trajectories visit).
pub fn check_gronwall(
    field: &VelocityField,
    pairs: &[AnchorPair],
    t_end: f64,
    sup_b: f64,
    sup_grad_b: f64,
    samples: usize,
    opts: &FlowOptions,
) -> Result<GronwallReport> {
    let samples = samples.max(2);
    let mut rep = GronwallReport { worst_margin: f64::INFINITY, worst_pair: 0, worst_time: 0.0, evaluations: 0 };
    for (i, p) in pairs.iter().enumerate() {
        let a = trajectory_on(field, &p.x0, p.t0, t_end, opts)?;
        let b = trajectory_on(field, &p.y0, p.s0, t_end, opts)?;
        let rhs = (sup_grad_b * t_end).exp() * (sup_b * (p.t0 - p.s0).abs() + dist(&p.x0, &p.y0));
        for k in 0..samples {
            let t = t_end * k as f64 / (samples - 1) as f64;
            let lhs = dist(&eval_on(&a, p.t0, t), &eval_on(&b, p.s0, t));
            let m = rhs - lhs;
            rep.evaluations += 1;
            if m < rep.worst_margin {
                rep.worst_margin = m;
                rep.worst_pair = i;
                rep.worst_time = t;
            }
        }
    }
    if pairs.is_empty() {
        rep.worst_margin = 0.0;
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkStability {
    pub base: Verdict,
    /// Largest margin for which the shrunk target still passes with r₀/2.
    pub largest_margin: Option<f64>,
    pub tested: Vec<(f64, Verdict)>,
}

/// Bisection for the largest margin m such that the check passes for
/// shrink(O, m) with radius r₀/2, given that it passes for O with r₀.
#[allow(clippy::too_many_arguments)]
pub fn shrink_stability(
    field: &VelocityField,
    domain: &Domain,
    region: &Region,
    params: &FlushingParams,
    lattice: &Lattice,
    opts: &FlowOptions,
    exec: Execution,
    iterations: usize,
) -> Result<ShrinkStability> {
    let base = check_flushing(field, domain, region, params, lattice, opts, exec)?.verdict;
    let mut tested = Vec::new();
    if base != Verdict::Satisfied {
        return Ok(ShrinkStability { base, largest_margin: None, tested });
    }
    let half = FlushingParams { r0: 0.5 * params.r0, ..*params };
    let (mut lo, mut hi) = (0.0, region.inradius());
    for _ in 0..iterations {
        let m = 0.5 * (lo + hi);
        let v = match region.shrink(m) {
            Ok(shrunk) => check_flushing(field, domain, &shrunk, &half, lattice, opts, exec)?.verdict,
            Err(Error::EmptyShrink { .. }) => Verdict::Violated,
            Err(e) => return Err(e),
        };
        tested.push((m, v));
        if v == Verdict::Satisfied {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(ShrinkStability { base, largest_margin: (lo > 0.0).then_some(lo), tested })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::builtin_field;

    fn tight() -> FlowOptions {
        FlowOptions { tol: 1e-12, ..FlowOptions::default() }
    }

    #[test]
    fn radial_backward_map_is_exponential() {
        let f = builtin_field("quadratic_potential", 2).unwrap();
        let x0 = [0.6, -0.3];
        let tr = integrate_flow(&f, &x0, 0.0, -2.0, &tight()).unwrap();
        for tau in [0.25, 1.0, 1.7, 2.0] {
            let p = tr.at(-tau);
            for k in 0..2 {
                assert!((p[k] - (-tau).exp() * x0[k]).abs() < 1e-8);
            }
        }
        assert_eq!(tr.anchor(), (&x0[..], 0.0));
        for w in tr.times().windows(2) {
            assert!((w[0] - w[1]).abs() <= 0.05 + 1e-15);
        }
    }

    #[test]
    fn zero_field_is_stationary() {
        let f = builtin_field("zero", 2).unwrap();
        let p = flow_map(&f, &[0.3, 0.4], 1.0, -3.0, &FlowOptions::default()).unwrap();
        assert_eq!(p, vec![0.3, 0.4]);
    }

    #[test]
    fn leaving_the_box_reports_exit_time() {
        let f = builtin_field("quadratic_potential", 1).unwrap();
        // x e^t reaches 4 at t = ln 4
        match integrate_flow(&f, &[1.0], 0.0, 3.0, &tight()) {
            Err(Error::OutOfDomain { time, .. }) => assert!((time - 4f64.ln()).abs() < 1e-6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn entry_time_examples() {
        let f = builtin_field("quadratic_potential", 1).unwrap();
        let w = Region::interval(-0.25, 0.25).unwrap();
        let tr = integrate_flow(&f, &[1.0], 2.0, 0.0, &tight()).unwrap();
        let e = entry_time(&tr, &w, (0.0, 2.0)).unwrap().unwrap();
        assert!((e - (2.0 - 4f64.ln())).abs() < 1e-7, "{e}");
        let tr = integrate_flow(&f, &[0.1], 2.0, 0.0, &tight()).unwrap();
        assert_eq!(entry_time(&tr, &w, (0.0, 2.0)).unwrap(), Some(2.0));
        let s = builtin_field("skew_rotation", 2).unwrap();
        let tr = integrate_flow(&s, &[0.9, 0.0], 0.0, -10.0, &FlowOptions::default()).unwrap();
        let b = Region::ball(&[0.0, 0.0], 0.25).unwrap();
        assert_eq!(entry_time(&tr, &b, (-10.0, 0.0)).unwrap(), None);
    }

    #[test]
    fn interval_intersection_rules() {
        let a = [(0.0, 1.0), (2.0, 3.0)];
        let b = [(0.5, 2.5)];
        assert_eq!(intersect_intervals(&a, &b), vec![(0.5, 1.0), (2.0, 2.5)]);
        assert!(intersect_intervals(&[(0.0, 1.0)], &[(1.0, 2.0)]).is_empty());
    }

    #[test]
    fn tube_examples() {
        let z = builtin_field("zero", 2).unwrap();
        let q = TubeQuery { x0: vec![0.0, 0.0], r: 0.5, t1: 0.0, t2: 1.0 };
        let o = FlowOptions::default();
        assert!(tube_membership(&q, &z, &[0.3, 0.3], 0.2, &o).unwrap());
        assert!(!tube_membership(&q, &z, &[0.4, 0.4], 0.2, &o).unwrap());
        let q0 = TubeQuery { r: 0.0, ..q.clone() };
        assert!(tube_membership(&q0, &z, &[0.0, 0.0], 1.0, &o).unwrap());
        let f = builtin_field("quadratic_potential", 1).unwrap();
        let q = TubeQuery { x0: vec![0.0], r: 0.25, t1: 0.0, t2: 2.0 };
        assert!(!tube_membership(&q, &f, &[0.3], 1.0, &o).unwrap());
    }

    #[test]
    fn gronwall_closed_form_margin() {
        let f = builtin_field("quadratic_potential", 1).unwrap();
        let pairs = [AnchorPair { x0: vec![0.1], t0: 0.0, y0: vec![0.2], s0: 0.0 }];
        let r = check_gronwall(&f, &pairs, 1.0, 1.0, 1.0, 11, &tight()).unwrap();
        assert!(r.worst_margin.abs() < 1e-9);
        assert_eq!(r.worst_time, 1.0);
        let z = builtin_field("zero", 1).unwrap();
        let r = check_gronwall(&z, &pairs, 1.0, 0.0, 0.0, 11, &tight()).unwrap();
        assert!(r.worst_margin.abs() < 1e-15);
    }

    #[test]
    fn one_dim_flushing_with_superset_target() {
        let f = builtin_field("quadratic_potential", 1).unwrap();
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let big = Region::interval(-2.0, 2.0).unwrap();
        let p = FlushingParams { t_end: 2.0, t0_window: 1.0, r0: 0.1 };
        let rep =
            check_flushing(&f, &dom, &big, &p, &Lattice::new(21, 3), &FlowOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(rep.verdict, Verdict::Satisfied);
        for c in &rep.cells {
            let e = c.entry.as_ref().unwrap();
            assert!(e.t_star > c.t0 - 1.0 && e.t_star < c.t0);
            assert_eq!(e.window.1, c.t0);
        }
    }

    #[test]
    fn coarse_lattice_is_inconclusive() {
        let f = builtin_field("quadratic_potential", 1).unwrap();
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let big = Region::interval(-2.0, 2.0).unwrap();
        let p = FlushingParams { t_end: 2.0, t0_window: 1.0, r0: 0.01 };
        let rep =
            check_flushing(&f, &dom, &big, &p, &Lattice::new(5, 2), &FlowOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(rep.verdict, Verdict::Inconclusive);
        assert!(!rep.warnings.is_empty());
    }
}
