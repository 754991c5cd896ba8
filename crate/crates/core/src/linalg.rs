//! Sparse and banded kernels used by the finite-volume solvers, plus a plain
//! conjugate-gradient routine.

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    /// Builds from (row, col, value) triplets; duplicates are summed in input
    /// order, so assembly is deterministic.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Csr {
        t.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { n, row_ptr, col, val }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.val[k] * x[self.col[k]];
            }
            y[i] = s;
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut t = Vec::with_capacity(self.val.len());
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                t.push((self.col[k], i, self.val[k]));
            }
        }
        Csr::from_triplets(self.n, t)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col[k], self.val[k])))
    }

    /// Column sums, used to check discrete conservation.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for (_, c, v) in self.entries() {
            s[c] += v;
        }
        s
    }

    pub fn bandwidth(&self) -> usize {
        self.entries().map(|(i, j, _)| i.abs_diff(j)).max().unwrap_or(0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for (i, j, v) in self.entries() {
            d[i * self.n + j] += v;
        }
        d
    }
}

/// Square banded matrix with equal lower and upper bandwidth, factored in
/// place by LU without pivoting. Only used on diagonally dominant systems.
#[derive(Clone, Debug, PartialEq)]
pub struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
    factored: bool,
}

impl Banded {
    pub fn zeros(n: usize, bw: usize) -> Banded {
        Banded { n, bw, data: vec![0.0; n * (2 * bw + 1)], factored: false }
    }

    /// a·I·diag + b·M for a sparse M.
    pub fn from_scaled(diag: f64, scale: f64, m: &Csr) -> Banded {
        let mut b = Banded::zeros(m.n(), m.bandwidth());
        for i in 0..m.n() {
            *b.get_mut(i, i) += diag;
        }
        for (i, j, v) in m.entries() {
            *b.get_mut(i, j) += scale * v;
        }
        b
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Doolittle LU without pivoting. Returns false on a zero pivot.
    pub fn factor(&mut self) -> bool {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let p = self.data[self.idx(k, k)];
            if p == 0.0 || !p.is_finite() {
                return false;
            }
            let iend = (k + bw + 1).min(n);
            for i in k + 1..iend {
                let ik = self.idx(i, k);
                let l = self.data[ik] / p;
                if l == 0.0 {
                    continue;
                }
                self.data[ik] = l;
                for j in k + 1..iend {
                    let kj = self.idx(k, j);
                    let ij = self.idx(i, j);
                    self.data[ij] -= l * self.data[kj];
                }
            }
        }
        self.factored = true;
        true
    }

    /// Solves in place after [`Banded::factor`].
    pub fn solve(&self, x: &mut [f64]) {
        debug_assert!(self.factored);
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.data[self.idx(i, k)] * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.data[self.idx(i, k)] * x[k];
            }
            x[i] = s / self.data[self.idx(i, i)];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub iterations: usize,
    /// Final ‖b − A x‖₂.
    pub residual: f64,
    pub converged: bool,
    pub stagnated: bool,
}

/// Conjugate gradients for a symmetric positive semi-definite operator.
/// Stops when ‖r‖₂ ≤ `abs_tol` or after `max_iter` iterations; `x` holds the
/// initial guess on entry.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], x: &mut [f64], abs_tol: f64, max_iter: usize) -> CgResult
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    let mut best = rr.sqrt();
    let mut since_best = 0;
    for it in 0..max_iter {
        if rr.sqrt() <= abs_tol {
            return CgResult { iterations: it, residual: rr.sqrt(), converged: true, stagnated: false };
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return CgResult { iterations: it, residual: rr.sqrt(), converged: false, stagnated: true };
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        if rr.sqrt() < 0.999 * best {
            best = rr.sqrt();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 50 + n {
                return CgResult { iterations: it + 1, residual: rr.sqrt(), converged: false, stagnated: true };
            }
        }
    }
    let res = rr.sqrt();
    CgResult { iterations: max_iter, residual: res, converged: res <= abs_tol, stagnated: false }
}

/// CGLS for min ‖Gx − w‖₂ (conjugate gradients on GᵀGx = Gᵀw without
/// forming GᵀG). Stops when ‖Gᵀr‖ ≤ `rel_tol`·‖Gᵀw‖; `x` holds the initial
/// guess on entry.
pub fn cgls<FG, FT>(mut apply_g: FG, mut apply_gt: FT, w: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> CgResult
where
    FG: FnMut(&[f64]) -> Vec<f64>,
    FT: FnMut(&[f64]) -> Vec<f64>,
{
    let gx = apply_g(x);
    let mut r: Vec<f64> = w.iter().zip(&gx).map(|(a, b)| a - b).collect();
    let target = rel_tol * norm(&apply_gt(w));
    let mut s = apply_gt(&r);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut best = gamma.sqrt();
    let mut since_best = 0;
    for it in 0..max_iter {
        if gamma.sqrt() <= target {
            return CgResult { iterations: it, residual: gamma.sqrt(), converged: true, stagnated: false };
        }
        let q = apply_g(&p);
        let qq = dot(&q, &q);
        if !(qq > 0.0) {
            return CgResult { iterations: it, residual: gamma.sqrt(), converged: false, stagnated: true };
        }
        let alpha = gamma / qq;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = apply_gt(&r);
        let gamma_new = dot(&s, &s);
        let beta = gamma_new / gamma;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
        gamma = gamma_new;
        if gamma.sqrt() < 0.999 * best {
            best = gamma.sqrt();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 50 + x.len() {
                return CgResult { iterations: it + 1, residual: gamma.sqrt(), converged: false, stagnated: true };
            }
        }
    }
    CgResult { iterations: max_iter, residual: gamma.sqrt(), converged: gamma.sqrt() <= target, stagnated: false }
}

/// Craig's method: the minimum-norm solution z = Gy of Gᵀz = u. Stops when
/// ‖u − Gᵀz‖ ≤ `rel_tol`·‖u‖.
pub fn craig<FG, FT>(
    mut apply_g: FG,
    mut apply_gt: FT,
    u: &[f64],
    rows: usize,
    rel_tol: f64,
    max_iter: usize,
) -> (Vec<f64>, CgResult)
where
    FG: FnMut(&[f64]) -> Vec<f64>,
    FT: FnMut(&[f64]) -> Vec<f64>,
{
    let mut z = vec![0.0; rows];
    let mut r = u.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = rel_tol * rr.sqrt();
    let mut best = rr.sqrt();
    let mut since_best = 0;
    for it in 0..max_iter {
        if rr.sqrt() <= target {
            return (z, CgResult { iterations: it, residual: rr.sqrt(), converged: true, stagnated: false });
        }
        let q = apply_g(&p);
        let qq = dot(&q, &q);
        if !(qq > 0.0) {
            return (z, CgResult { iterations: it, residual: rr.sqrt(), converged: false, stagnated: true });
        }
        let alpha = rr / qq;
        for (zi, qi) in z.iter_mut().zip(&q) {
            *zi += alpha * qi;
        }
        let gq = apply_gt(&q);
        for (ri, gi) in r.iter_mut().zip(&gq) {
            *ri -= alpha * gi;
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
        if rr.sqrt() < 0.999 * best {
            best = rr.sqrt();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 50 + u.len() {
                return (z, CgResult { iterations: it + 1, residual: rr.sqrt(), converged: false, stagnated: true });
            }
        }
    }
    let res = rr.sqrt();
    (z, CgResult { iterations: max_iter, residual: res, converged: res <= target, stagnated: false })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> Csr {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.5));
            }
        }
        Csr::from_triplets(n, t)
    }

    #[test]
    fn banded_lu_solves_tridiagonal() {
        let m = tridiag(7);
        let mut b = Banded::from_scaled(0.0, 1.0, &m);
        assert!(b.factor());
        let xs: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let mut rhs = vec![0.0; 7];
        m.matvec(&xs, &mut rhs);
        b.solve(&mut rhs);
        for (a, e) in rhs.iter().zip(&xs) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicates_are_summed_and_transpose_works() {
        let m = Csr::from_triplets(2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)]);
        assert_eq!(m.to_dense(), vec![0.0, 3.0, -1.0, 0.0]);
        assert_eq!(m.transpose().to_dense(), vec![0.0, -1.0, 3.0, 0.0]);
        assert_eq!(m.column_sums(), vec![-1.0, 3.0]);
    }

    #[test]
    fn least_squares_solvers_match_normal_equations() {
        // G is 5×3 with full column rank
        let g = [[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 3.0, 1.0], [2.0, 0.0, 0.0]];
        let ap = |x: &[f64]| g.iter().map(|row| dot(row, x)).collect::<Vec<f64>>();
        let at = |y: &[f64]| (0..3).map(|j| (0..5).map(|i| g[i][j] * y[i]).sum()).collect::<Vec<f64>>();
        let w = [1.0, -2.0, 0.5, 3.0, 1.5];
        let mut x = vec![0.0; 3];
        assert!(cgls(ap, at, &w, &mut x, 1e-14, 50).converged);
        // normal equations residual
        let res = at(&ap(&x).iter().zip(&w).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(norm(&res) < 1e-12);
        let u = [1.0, 2.0, -1.0];
        let (z, r) = craig(ap, at, &u, 5, 1e-14, 50);
        assert!(r.converged);
        let back = at(&z);
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_converges_on_spd() {
        let n = 20;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        let m = Csr::from_triplets(n, t);
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut x = vec![0.0; n];
        let r = conjugate_gradient(|v, out| m.matvec(v, out), &b, &mut x, 1e-10, 100);
        assert!(r.converged, "{r:?}");
        let mut mx = vec![0.0; n];
        m.matvec(&x, &mut mx);
        for (a, e) in mx.iter().zip(&b) {
            assert!((a - e).abs() < 1e-9);
        }
    }
}
