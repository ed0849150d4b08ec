//! Field files.
//!
//! Binary layout, all little-endian: the 4-byte magic `SF2D`, then
//! `origin_x: f64, origin_y: f64, spacing: f64, nx: u64, ny: u64`, then
//! `nx * ny` values as `f64` in row-major order (row index `j`).
//!
//! CSV layout: a first line `origin_x,origin_y,spacing,nx,ny`, a second line
//! with those numbers, then one line per grid row `j` with `nx` values.

use std::io::{BufRead, Read, Write};

use super::grid::{Grid2D, ScalarField2D};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SF2D";

pub fn write_binary(f: &ScalarField2D, mut w: impl Write) -> Result<()> {
    let g = f.grid;
    w.write_all(MAGIC)?;
    for v in [g.origin[0], g.origin[1], g.spacing] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(g.nx as u64).to_le_bytes())?;
    w.write_all(&(g.ny as u64).to_le_bytes())?;
    for v in &f.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(mut r: impl Read) -> Result<ScalarField2D> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("not a field file".into()));
    }
    let mut b8 = [0u8; 8];
    let mut f64s = [0.0; 3];
    for v in f64s.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    r.read_exact(&mut b8)?;
    let nx = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let ny = u64::from_le_bytes(b8) as usize;
    let grid = Grid2D::new([f64s[0], f64s[1]], f64s[2], nx, ny)?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    ScalarField2D::new(grid, values)
}

pub fn write_csv(f: &ScalarField2D, mut w: impl Write) -> Result<()> {
    let g = f.grid;
    writeln!(w, "origin_x,origin_y,spacing,nx,ny")?;
    writeln!(w, "{:e},{:e},{:e},{},{}", g.origin[0], g.origin[1], g.spacing, g.nx, g.ny)?;
    for row in f.values.chunks(g.nx) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv(r: impl BufRead) -> Result<ScalarField2D> {
    let bad = |m: &str| Error::InvalidInput(format!("field csv: {m}"));
    let mut lines = r.lines();
    lines.next().ok_or_else(|| bad("missing header"))??;
    let meta = lines.next().ok_or_else(|| bad("missing metadata"))??;
    let parts: Vec<&str> = meta.split(',').collect();
    if parts.len() != 5 {
        return Err(bad("metadata needs 5 entries"));
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("bad number"));
    let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad integer"));
    let grid = Grid2D::new([num(parts[0])?, num(parts[1])?], num(parts[2])?, int(parts[3])?, int(parts[4])?)?;
    let mut values = Vec::with_capacity(grid.len());
    for line in lines {
        for s in line?.split(',') {
            values.push(num(s)?);
        }
    }
    ScalarField2D::new(grid, values)
}
