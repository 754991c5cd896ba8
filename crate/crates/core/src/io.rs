//! Serialization of space-time fields.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic  b"VCST"            4 bytes
//! dims   u32
//! N      u64 per axis
//! M      u64                 number of time steps (M+1 slices)
//! t0     f64                 first time stamp
//! T      f64                 last time stamp
//! eps    f64
//! lo, hi f64 per axis        domain box
//! tag    u8                  0 state, 1 adjoint, 2 annulus, 3 transformed
//! values f64 × (M+1)·ΠN      time-major, cells in grid order
//! ```
//!
//! Time stamps are not stored; they are rebuilt as t0 + k·(T − t0)/M, the
//! formula the solvers use. Values round-trip bit for bit. Stamps can differ
//! in the last ulp when T − t0 is not exactly M·Δt. The annulus mask is not
//! serialized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{build_grid, Domain, Grid};
use crate::pde::{FieldTag, SpaceTimeField};

const MAGIC: &[u8; 4] = b"VCST";

fn tag_code(tag: FieldTag) -> u8 {
    match tag {
        FieldTag::State => 0,
        FieldTag::Adjoint => 1,
        FieldTag::AnnulusAdjoint => 2,
        FieldTag::Transformed => 3,
    }
}

fn tag_from(code: u8) -> Result<FieldTag> {
    Ok(match code {
        0 => FieldTag::State,
        1 => FieldTag::Adjoint,
        2 => FieldTag::AnnulusAdjoint,
        3 => FieldTag::Transformed,
        c => return Err(Error::Io(format!("unknown field tag {c}"))),
    })
}

pub fn write_field<W: Write>(field: &SpaceTimeField, mut w: W) -> Result<()> {
    let grid = field.grid();
    let (lo, hi) = grid.domain().bounding_box();
    w.write_all(MAGIC)?;
    w.write_all(&(grid.dim() as u32).to_le_bytes())?;
    for &n in grid.resolution() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    w.write_all(&((field.slice_count() - 1) as u64).to_le_bytes())?;
    for v in [field.t_start(), field.t_end(), field.epsilon()] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in lo.iter().chain(&hi) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[tag_code(field.tag())])?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_field<R: Read>(mut r: R) -> Result<SpaceTimeField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Io("not a space-time field file (bad magic)".into()));
    }
    let dim = read_u32(&mut r)? as usize;
    if !(1..=2).contains(&dim) {
        return Err(Error::Io(format!("unsupported dimension {dim}")));
    }
    let mut n = Vec::with_capacity(dim);
    for _ in 0..dim {
        n.push(read_u64(&mut r)? as usize);
    }
    let m = read_u64(&mut r)? as usize;
    let t0 = read_f64(&mut r)?;
    let t1 = read_f64(&mut r)?;
    let eps = read_f64(&mut r)?;
    let mut bounds = [0.0; 4];
    for b in bounds.iter_mut().take(2 * dim) {
        *b = read_f64(&mut r)?;
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let tag = tag_from(tag[0])?;
    let domain = if dim == 1 {
        Domain::interval(bounds[0], bounds[1])?
    } else {
        Domain::rectangle([bounds[0], bounds[1]], [bounds[2], bounds[3]])?
    };
    let grid = if n.iter().all(|&k| k == 1) { Grid::single_cell(&domain)? } else { build_grid(&domain, &n)? };
    let cells = grid.cell_count();
    let total = cells.checked_mul(m + 1).ok_or_else(|| Error::Io("header sizes overflow".into()))?;
    let mut values = Vec::with_capacity(total);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let dt = (t1 - t0) / m as f64;
    let times: Vec<f64> = (0..=m).map(|k| t0 + dt * k as f64).collect();
    SpaceTimeField::from_parts(Arc::new(grid), times, values, tag, eps)
}

pub fn save_field(field: &SpaceTimeField, path: &Path) -> Result<()> {
    write_field(field, BufWriter::new(File::create(path)?))
}

pub fn load_field(path: &Path) -> Result<SpaceTimeField> {
    read_field(BufReader::new(File::open(path)?))
}

/// Fixed 17-significant-digit rendering used by every text artifact.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per (time, cell): `t  x1 .. xd  value`, tab separated, with a
/// header line.
pub fn write_tsv<W: Write>(field: &SpaceTimeField, mut w: W) -> Result<()> {
    let grid = field.grid();
    let mut head = String::from("t");
    for k in 1..=grid.dim() {
        head.push_str(&format!("\tx{k}"));
    }
    head.push_str("\tvalue\n");
    w.write_all(head.as_bytes())?;
    let mut line = String::new();
    for (k, &t) in field.times().iter().enumerate() {
        for (c, v) in field.slice(k).iter().enumerate() {
            line.clear();
            line.push_str(&fmt17(t));
            for x in grid.center(c) {
                line.push('\t');
                line.push_str(&fmt17(*x));
            }
            line.push('\t');
            line.push_str(&fmt17(*v));
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{solve_adjoint, SolverParams};
    use crate::velocity::builtin_field;

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let domain = Domain::rectangle([0.0, -1.0], [2.0, 1.0]).unwrap();
        let grid = Arc::new(build_grid(&domain, &[5, 3]).unwrap());
        let field = builtin_field("quadratic_potential", 2).unwrap();
        let data: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let sol = solve_adjoint(&grid, &data, &field, &SolverParams::new(0.3, 7), 0.9).unwrap();
        let mut bytes = Vec::new();
        write_field(&sol, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 16 + 8 + 24 + 32 + 1 + 8 * 15 * 8);
        let back = read_field(bytes.as_slice()).unwrap();
        assert_eq!(back.values(), sol.values());
        assert_eq!(back.times(), sol.times());
        assert_eq!(back.grid().resolution(), &[5, 3]);
        assert_eq!(back.tag(), FieldTag::Adjoint);
        assert_eq!(back.epsilon(), 0.3);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        assert!(read_field(&b"XXXX\x01\x00\x00\x00"[..]).is_err());
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[4]).unwrap());
        let sol = SpaceTimeField::from_parts(grid, vec![0.0, 1.0], vec![1.0; 8], FieldTag::State, 0.1).unwrap();
        let mut bytes = Vec::new();
        write_field(&sol, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_field(bytes.as_slice()), Err(Error::Io(_))));
    }

    #[test]
    fn tsv_rows_and_format() {
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[2]).unwrap());
        let sol = SpaceTimeField::from_parts(grid, vec![0.0, 0.5], vec![1.0, 2.0, 3.0, 0.1], FieldTag::State, 0.1).unwrap();
        let mut out = Vec::new();
        write_tsv(&sol, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t\tx1\tvalue");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "5.0000000000000000e-1\t5.0000000000000000e-1\t1.0000000000000001e-1");
    }
}
