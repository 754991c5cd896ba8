//! Domains, control regions and uniform finite-volume grids.

use crate::error::{Error, Result};

/// Default number of boundary samples per face (rectangle) or per circle (disk).
pub const DEFAULT_BOUNDARY_SAMPLES: usize = 64;

/// The spatial domain Ω.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    Interval { lo: f64, hi: f64 },
    Rectangle { lo: [f64; 2], hi: [f64; 2] },
    Disk { center: [f64; 2], radius: f64 },
}

/// A boundary sample with its outward unit normal.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPoint {
    pub x: Vec<f64>,
    pub normal: Vec<f64>,
}

impl Domain {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        check_bounds(&[lo], &[hi])?;
        Ok(Domain::Interval { lo, hi })
    }

    pub fn rectangle(lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        check_bounds(&lo, &hi)?;
        Ok(Domain::Rectangle { lo, hi })
    }

    pub fn disk(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!("disk radius must be positive, got {radius}")));
        }
        Ok(Domain::Disk { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            _ => 2,
        }
    }

    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Interval { lo, hi } => (vec![*lo], vec![*hi]),
            Domain::Rectangle { lo, hi } => (lo.to_vec(), hi.to_vec()),
            Domain::Disk { center, radius } => {
                (vec![center[0] - radius, center[1] - radius], vec![center[0] + radius, center[1] + radius])
            }
        }
    }

    /// Lebesgue measure |Ω|.
    pub fn volume(&self) -> f64 {
        match self {
            Domain::Interval { lo, hi } => hi - lo,
            Domain::Rectangle { lo, hi } => (hi[0] - lo[0]) * (hi[1] - lo[1]),
            Domain::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    /// Signed distance to Γ, negative inside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Interval { lo, hi } => box_signed_distance(&[*lo], &[*hi], x),
            Domain::Rectangle { lo, hi } => box_signed_distance(lo, hi, x),
            Domain::Disk { center, radius } => norm2(&[x[0] - center[0], x[1] - center[1]]) - radius,
        }
    }

    pub fn contains_closed(&self, x: &[f64], tol: f64) -> bool {
        self.signed_distance(x) <= tol
    }

    /// Boundary samples with outward normals. Intervals always yield their two
    /// endpoints; rectangles yield `n` face-midpoint samples per side (corners are
    /// skipped because the normal is undefined there); disks yield `n` equispaced
    /// points on the circle.
    pub fn boundary_samples(&self, n: usize) -> Vec<BoundaryPoint> {
        let n = n.max(1);
        match self {
            Domain::Interval { lo, hi } => {
                vec![BoundaryPoint { x: vec![*lo], normal: vec![-1.0] }, BoundaryPoint { x: vec![*hi], normal: vec![1.0] }]
            }
            Domain::Rectangle { lo, hi } => {
                let mut out = Vec::with_capacity(4 * n);
                for k in 0..n {
                    let s = (k as f64 + 0.5) / n as f64;
                    let x = lo[0] + s * (hi[0] - lo[0]);
                    let y = lo[1] + s * (hi[1] - lo[1]);
                    out.push(BoundaryPoint { x: vec![lo[0], y], normal: vec![-1.0, 0.0] });
                    out.push(BoundaryPoint { x: vec![hi[0], y], normal: vec![1.0, 0.0] });
                    out.push(BoundaryPoint { x: vec![x, lo[1]], normal: vec![0.0, -1.0] });
                    out.push(BoundaryPoint { x: vec![x, hi[1]], normal: vec![0.0, 1.0] });
                }
                out
            }
            Domain::Disk { center, radius } => (0..n)
                .map(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    let (s, c) = a.sin_cos();
                    BoundaryPoint { x: vec![center[0] + radius * c, center[1] + radius * s], normal: vec![c, s] }
                })
                .collect(),
        }
    }

    /// The open domain viewed as a region, used when O = Ω.
    pub fn as_region(&self) -> Region {
        let shape = match self {
            Domain::Interval { lo, hi } => Shape::Box { lo: vec![*lo], hi: vec![*hi] },
            Domain::Rectangle { lo, hi } => Shape::Box { lo: lo.to_vec(), hi: hi.to_vec() },
            Domain::Disk { center, radius } => Shape::Ball { center: center.to_vec(), radius: *radius },
        };
        Region { dim: self.dim(), members: vec![shape] }
    }
}

/// One member of a region.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Shape {
    fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Shape::Box { lo, hi } => {
                let mut s = 0.0;
                for k in 0..x.len() {
                    let d = (lo[k] - x[k]).max(x[k] - hi[k]).max(0.0);
                    s += d * d;
                }
                s.sqrt()
            }
            Shape::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
        }
    }

    fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Shape::Box { lo, hi } => box_signed_distance(lo, hi, x),
            Shape::Ball { center, radius } => dist(x, center) - radius,
        }
    }

    fn inradius(&self) -> f64 {
        match self {
            Shape::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).fold(f64::INFINITY, f64::min),
            Shape::Ball { radius, .. } => *radius,
        }
    }

    fn measure(&self) -> f64 {
        match self {
            Shape::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).product(),
            Shape::Ball { radius, center } => match center.len() {
                1 => 2.0 * radius,
                2 => std::f64::consts::PI * radius * radius,
                _ => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            },
        }
    }

    fn shrink(&self, m: f64) -> Option<Shape> {
        match self {
            Shape::Box { lo, hi } => {
                if lo.iter().zip(hi).any(|(a, b)| b - a <= 2.0 * m) {
                    return None;
                }
                Some(Shape::Box { lo: lo.iter().map(|a| a + m).collect(), hi: hi.iter().map(|b| b - m).collect() })
            }
            Shape::Ball { center, radius } => (*radius > m).then(|| Shape::Ball { center: center.clone(), radius: radius - m }),
        }
    }

    /// Axis-aligned box equivalent, available for boxes and 1-D balls.
    fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Shape::Box { lo, hi } => Some((lo.clone(), hi.clone())),
            Shape::Ball { center, radius } if center.len() == 1 => Some((vec![center[0] - radius], vec![center[0] + radius])),
            Shape::Ball { .. } => None,
        }
    }
}

/// A finite union of open boxes and balls (ω, ω₀, O, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    dim: usize,
    members: Vec<Shape>,
}

impl Region {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::from_shape(Shape::Box { lo: vec![lo], hi: vec![hi] })
    }

    pub fn boxed(lo: &[f64], hi: &[f64]) -> Result<Self> {
        Self::from_shape(Shape::Box { lo: lo.to_vec(), hi: hi.to_vec() })
    }

    pub fn ball(center: &[f64], radius: f64) -> Result<Self> {
        Self::from_shape(Shape::Ball { center: center.to_vec(), radius })
    }

    pub fn from_shape(shape: Shape) -> Result<Self> {
        Self::union(vec![shape])
    }

    pub fn union(members: Vec<Shape>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidParameter("a region needs at least one member".into()))?;
        let dim = match first {
            Shape::Box { lo, .. } => lo.len(),
            Shape::Ball { center, .. } => center.len(),
        };
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!("unsupported region dimension {dim}")));
        }
        for m in &members {
            match m {
                Shape::Box { lo, hi } => {
                    if lo.len() != dim || hi.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: lo.len().max(hi.len()) });
                    }
                    check_bounds(lo, hi)?;
                }
                Shape::Ball { center, radius } => {
                    if center.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: center.len() });
                    }
                    if !(*radius > 0.0) || !radius.is_finite() {
                        return Err(Error::InvalidParameter(format!("ball radius must be positive, got {radius}")));
                    }
                }
            }
        }
        Ok(Region { dim, members })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> &[Shape] {
        &self.members
    }

    /// Euclidean distance to the closure; zero exactly on the closure.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.distance_unchecked(x))
    }

    pub fn distance_unchecked(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.distance(x)).fold(f64::INFINITY, f64::min)
    }

    /// Signed distance surrogate: exact outside the region, negative inside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.signed_distance(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains_open(&self, x: &[f64]) -> bool {
        self.signed_distance(x) < 0.0
    }

    pub fn contains_closed(&self, x: &[f64]) -> bool {
        self.distance_unchecked(x) == 0.0
    }

    /// Largest inradius over the members.
    pub fn inradius(&self) -> f64 {
        self.members.iter().map(Shape::inradius).fold(0.0, f64::max)
    }

    /// Sum of member measures (exact for disjoint members).
    pub fn measure(&self) -> f64 {
        self.members.iter().map(Shape::measure).sum()
    }

    /// Member-wise inward offset by `margin`. Members that collapse are dropped.
    pub fn shrink(&self, margin: f64) -> Result<Region> {
        if !(margin > 0.0) {
            return Err(Error::InvalidParameter(format!("shrink margin must be positive, got {margin}")));
        }
        let members: Vec<Shape> = self.members.iter().filter_map(|m| m.shrink(margin)).collect();
        if members.is_empty() {
            return Err(Error::EmptyShrink { margin, inradius: self.inradius() });
        }
        Ok(Region { dim: self.dim, members })
    }

    /// True when the closure of every member lies inside the open domain with
    /// at least `gap` clearance.
    pub fn is_inside(&self, domain: &Domain, gap: f64) -> bool {
        if domain.dim() != self.dim {
            return false;
        }
        self.members.iter().all(|m| match m {
            Shape::Box { lo, hi } => corners(lo, hi).iter().all(|c| domain.signed_distance(c) <= -gap),
            Shape::Ball { center, radius } => domain.signed_distance(center) <= -(radius + gap),
        })
    }

    /// Fraction of the box [lo, hi] covered by the region. Exact when every
    /// member is box-like and members are pairwise disjoint; otherwise a
    /// midpoint sub-sampling with 32 points per axis.
    pub fn cell_fraction(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let boxes: Option<Vec<_>> = self.members.iter().map(Shape::as_box).collect();
        if let Some(boxes) = boxes {
            if pairwise_disjoint(&boxes) {
                let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
                let covered: f64 = boxes
                    .iter()
                    .map(|(blo, bhi)| (0..lo.len()).map(|k| (hi[k].min(bhi[k]) - lo[k].max(blo[k])).max(0.0)).product::<f64>())
                    .sum();
                return (covered / vol).clamp(0.0, 1.0);
            }
        }
        let s = 32usize;
        let d = lo.len();
        let total = s.pow(d as u32);
        let mut x = vec![0.0; d];
        let mut inside = 0usize;
        for idx in 0..total {
            let mut r = idx;
            for k in 0..d {
                let i = r % s;
                r /= s;
                x[k] = lo[k] + (i as f64 + 0.5) / s as f64 * (hi[k] - lo[k]);
            }
            if self.contains_open(&x) {
                inside += 1;
            }
        }
        inside as f64 / total as f64
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }
}

/// An interior face between two cells, oriented from `left` to `right`
/// along `axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub left: usize,
    pub right: usize,
    pub axis: usize,
    pub area: f64,
    /// Distance between the two cell centers.
    pub dist: f64,
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub axis: usize,
    pub area: f64,
    pub normal: [f64; 2],
    pub center: [f64; 2],
}

/// Uniform tensor-product cell grid on an interval or rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    n: Vec<usize>,
    lo: Vec<f64>,
    h: Vec<f64>,
    volume: f64,
    centers: Vec<f64>,
    faces: Vec<Face>,
    boundary: Vec<BoundaryFace>,
    domain: Domain,
}

pub fn build_grid(domain: &Domain, resolution: &[usize]) -> Result<Grid> {
    let (lo, hi) = match domain {
        Domain::Disk { .. } => return Err(Error::UnsupportedDomain("disk domains are only supported by the flow module".into())),
        _ => domain.bounding_box(),
    };
    let dim = domain.dim();
    if resolution.len() != dim {
        return Err(Error::InvalidResolution(format!("expected {dim} per-axis counts, got {}", resolution.len())));
    }
    if let Some(r) = resolution.iter().find(|&&r| r < 2) {
        return Err(Error::InvalidResolution(format!("need at least 2 cells per axis, got {r}")));
    }
    Ok(Grid::tensor(domain.clone(), &lo, &hi, resolution))
}

impl Grid {
    /// A grid with one cell covering the whole domain. It has no interior
    /// faces, so every flux vanishes.
    pub fn single_cell(domain: &Domain) -> Result<Grid> {
        if matches!(domain, Domain::Disk { .. }) {
            return Err(Error::UnsupportedDomain("disk".into()));
        }
        let (lo, hi) = domain.bounding_box();
        Ok(Grid::tensor(domain.clone(), &lo, &hi, &vec![1; domain.dim()]))
    }

    fn tensor(domain: Domain, lo: &[f64], hi: &[f64], n: &[usize]) -> Grid {
        let dim = lo.len();
        let h: Vec<f64> = (0..dim).map(|k| (hi[k] - lo[k]) / n[k] as f64).collect();
        let ny = if dim == 2 { n[1] } else { 1 };
        let nx = n[0];
        let volume: f64 = h.iter().product();
        let mut centers = Vec::with_capacity(nx * ny * dim);
        for j in 0..ny {
            for i in 0..nx {
                centers.push(lo[0] + (i as f64 + 0.5) * h[0]);
                if dim == 2 {
                    centers.push(lo[1] + (j as f64 + 0.5) * h[1]);
                }
            }
        }
        let area_x = if dim == 2 { h[1] } else { 1.0 };
        let area_y = h[0];
        let yc = |j: usize| if dim == 2 { lo[1] + (j as f64 + 0.5) * h[1] } else { 0.0 };
        let mut faces = Vec::new();
        for j in 0..ny {
            for i in 0..nx.saturating_sub(1) {
                faces.push(Face {
                    left: i + nx * j,
                    right: i + 1 + nx * j,
                    axis: 0,
                    area: area_x,
                    dist: h[0],
                    center: [lo[0] + (i + 1) as f64 * h[0], yc(j)],
                });
            }
        }
        if dim == 2 {
            for j in 0..ny - 1 {
                for i in 0..nx {
                    faces.push(Face {
                        left: i + nx * j,
                        right: i + nx * (j + 1),
                        axis: 1,
                        area: area_y,
                        dist: h[1],
                        center: [lo[0] + (i as f64 + 0.5) * h[0], lo[1] + (j + 1) as f64 * h[1]],
                    });
                }
            }
        }
        let mut boundary = Vec::new();
        for j in 0..ny {
            boundary.push(BoundaryFace { cell: nx * j, axis: 0, area: area_x, normal: [-1.0, 0.0], center: [lo[0], yc(j)] });
            boundary.push(BoundaryFace {
                cell: nx - 1 + nx * j,
                axis: 0,
                area: area_x,
                normal: [1.0, 0.0],
                center: [hi[0], yc(j)],
            });
        }
        if dim == 2 {
            for i in 0..nx {
                let xc = lo[0] + (i as f64 + 0.5) * h[0];
                boundary.push(BoundaryFace { cell: i, axis: 1, area: area_y, normal: [0.0, -1.0], center: [xc, lo[1]] });
                boundary.push(BoundaryFace {
                    cell: i + nx * (ny - 1),
                    axis: 1,
                    area: area_y,
                    normal: [0.0, 1.0],
                    center: [xc, hi[1]],
                });
            }
        }
        Grid { dim, n: n.to_vec(), lo: lo.to_vec(), h, volume, centers, faces, boundary, domain }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn resolution(&self) -> &[usize] {
        &self.n
    }

    pub fn cell_count(&self) -> usize {
        self.n.iter().product()
    }

    /// Uniform cell volume.
    pub fn cell_volume(&self) -> f64 {
        self.volume
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cell_bounds(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let x = self.center(c);
        let lo = (0..self.dim).map(|k| x[k] - 0.5 * self.h[k]).collect();
        let hi = (0..self.dim).map(|k| x[k] + 0.5 * self.h[k]).collect();
        (lo, hi)
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary
    }

    /// Volume fraction of every cell lying inside `region`.
    pub fn region_fractions(&self, region: &Region) -> Result<Vec<f64>> {
        if region.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: region.dim() });
        }
        Ok((0..self.cell_count())
            .map(|c| {
                let (lo, hi) = self.cell_bounds(c);
                region.cell_fraction(&lo, &hi)
            })
            .collect())
    }
}

fn check_bounds(lo: &[f64], hi: &[f64]) -> Result<()> {
    if lo.len() != hi.len() {
        return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
    }
    for (a, b) in lo.iter().zip(hi) {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidParameter(format!("need lower < upper, got [{a}, {b}]")));
        }
    }
    Ok(())
}

fn box_signed_distance(lo: &[f64], hi: &[f64], x: &[f64]) -> f64 {
    let mut outside = 0.0;
    let mut inside = f64::NEG_INFINITY;
    for k in 0..x.len() {
        let d = (lo[k] - x[k]).max(x[k] - hi[k]);
        if d > 0.0 {
            outside += d * d;
        }
        inside = inside.max(d);
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside
    }
}

fn corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let d = lo.len();
    (0..1usize << d).map(|mask| (0..d).map(|k| if mask >> k & 1 == 1 { hi[k] } else { lo[k] }).collect()).collect()
}

fn pairwise_disjoint(boxes: &[(Vec<f64>, Vec<f64>)]) -> bool {
    for a in 0..boxes.len() {
        for b in a + 1..boxes.len() {
            let overlap = (0..boxes[a].0.len()).all(|k| boxes[a].0[k].max(boxes[b].0[k]) < boxes[a].1[k].min(boxes[b].1[k]));
            if overlap {
                return false;
            }
        }
    }
    true
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_grid_centers_and_faces() {
        let g = build_grid(&Domain::interval(-1.0, 1.0).unwrap(), &[4]).unwrap();
        let c: Vec<f64> = (0..4).map(|i| g.center(i)[0]).collect();
        assert_eq!(c, vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(g.cell_volume(), 0.5);
        let b = g.boundary_faces();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].normal[0], -1.0);
        assert_eq!(b[1].normal[0], 1.0);
        assert_eq!(g.faces().len(), 3);
    }

    #[test]
    fn rectangle_grid_volumes() {
        let g = build_grid(&Domain::rectangle([0.0, 0.0], [1.0, 1.0]).unwrap(), &[2, 2]).unwrap();
        assert_eq!(g.cell_count(), 4);
        assert_eq!(g.cell_volume(), 0.25);
        assert_eq!(g.boundary_faces().len(), 8);
        assert_eq!(g.faces().len(), 4);
    }

    #[test]
    fn grid_rejects_disk_and_coarse_resolution() {
        let disk = Domain::disk([0.0, 0.0], 1.0).unwrap();
        assert!(matches!(build_grid(&disk, &[4, 4]), Err(Error::UnsupportedDomain(_))));
        let iv = Domain::interval(0.0, 1.0).unwrap();
        assert!(matches!(build_grid(&iv, &[1]), Err(Error::InvalidResolution(_))));
    }

    #[test]
    fn every_boundary_face_has_one_cell() {
        let g = build_grid(&Domain::rectangle([0.0, -1.0], [2.0, 1.0]).unwrap(), &[5, 3]).unwrap();
        let mut count = vec![0usize; g.cell_count()];
        for f in g.boundary_faces() {
            count[f.cell] += 1;
        }
        // corner cells own two faces, edge cells one, none in the middle
        assert_eq!(count.iter().sum::<usize>(), 2 * (5 + 3));
        assert_eq!(count[1 + 5], 0);
    }

    #[test]
    fn region_distance_examples() {
        let w = Region::interval(-0.2, 0.2).unwrap();
        assert!((w.distance(&[0.5]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(w.distance(&[0.1]).unwrap(), 0.0);
        let b = Region::ball(&[0.0, 0.0], 0.25).unwrap();
        assert!((b.distance(&[1.0, 0.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(b.distance(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn shrink_examples() {
        let w = Region::interval(-0.3, 0.3).unwrap();
        let s = w.shrink(0.1).unwrap();
        assert_eq!(s.members()[0], Shape::Box { lo: vec![-0.3 + 0.1], hi: vec![0.3 - 0.1] });
        let b = Region::ball(&[0.0, 0.0], 0.25).unwrap().shrink(0.05).unwrap();
        match &b.members()[0] {
            Shape::Ball { radius, .. } => assert!((radius - 0.2).abs() < 1e-15),
            _ => unreachable!(),
        }
        assert!(matches!(w.shrink(0.3), Err(Error::EmptyShrink { .. })));
    }

    #[test]
    fn cell_fractions_exact_for_boxes() {
        let g = build_grid(&Domain::interval(-1.0, 1.0).unwrap(), &[10]).unwrap();
        let f = g.region_fractions(&Region::interval(-0.3, 0.3).unwrap()).unwrap();
        let covered: f64 = f.iter().sum::<f64>() * g.cell_volume();
        assert!((covered - 0.6).abs() < 1e-14);
        assert!((f[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disk_boundary_normals_are_unit() {
        let d = Domain::disk([0.5, -0.5], 2.0).unwrap();
        for p in d.boundary_samples(DEFAULT_BOUNDARY_SAMPLES) {
            assert!((norm2(&p.normal) - 1.0).abs() < 1e-14);
            assert!(d.signed_distance(&p.x).abs() < 1e-12);
        }
    }
}
