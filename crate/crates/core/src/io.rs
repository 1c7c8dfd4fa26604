//! Binary field files, CSV exports and PGM previews.
//!
//! `HSF1` layout (little endian): magic, `u32 nx`, `u32 ny`, `f64 h`, then
//! `nx·ny` `f64` values in row-major order.
//!
//! `HSS1` extends it for symbol samples: magic, `u32 nx`, `u32 ny`, `f64 h`,
//! `u32 n_dir`, `u32 rows`, `u32 cols`, `i32 order`, then `(re, im)` pairs
//! ordered by node, direction, row, column.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridSpec, ScalarField};

pub const FIELD_MAGIC: &[u8; 4] = b"HSF1";
pub const SYMBOL_MAGIC: &[u8; 4] = b"HSS1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("file describes a {nx}x{ny} grid with h = {h}, expected {enx}x{eny} with h = {eh}")]
    GridMismatch { nx: u32, ny: u32, h: f64, enx: usize, eny: usize, eh: f64 },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], spec: &GridSpec) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&(spec.nx as u32).to_le_bytes())?;
    w.write_all(&(spec.ny as u32).to_le_bytes())?;
    w.write_all(&spec.h.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_field(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FIELD_MAGIC, field.spec())?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `HSF1` file and checks it against `spec`.
pub fn read_field(path: &Path, spec: GridSpec) -> Result<ScalarField, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let nx = read_u32(&mut r)?;
    let ny = read_u32(&mut r)?;
    let h = read_f64(&mut r)?;
    if nx as usize != spec.nx || ny as usize != spec.ny || (h - spec.h).abs() > 1e-15 {
        return Err(IoError::GridMismatch { nx, ny, h, enx: spec.nx, eny: spec.ny, eh: spec.h });
    }
    let values = (0..spec.len()).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
    Ok(ScalarField::from_values(spec, values)?)
}

/// Raw `HSS1` writer; `values` holds `(re, im)` in the documented order.
pub(crate) fn write_symbol_raw(
    path: &Path,
    spec: &GridSpec,
    n_dir: usize,
    rows: usize,
    cols: usize,
    order: i32,
    values: impl Iterator<Item = (f64, f64)>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, SYMBOL_MAGIC, spec)?;
    for n in [n_dir, rows, cols] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&order.to_le_bytes())?;
    for (re, im) in values {
        w.write_all(&re.to_le_bytes())?;
        w.write_all(&im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Header of an `HSS1` file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolHeader {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub n_dir: usize,
    pub rows: usize,
    pub cols: usize,
    pub order: i32,
}

/// Reads an `HSS1` file into its header and `(re, im)` samples.
pub fn read_symbol_raw(path: &Path) -> Result<(SymbolHeader, Vec<(f64, f64)>), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SYMBOL_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let nx = read_u32(&mut r)? as usize;
    let ny = read_u32(&mut r)? as usize;
    let h = read_f64(&mut r)?;
    let n_dir = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut ob = [0u8; 4];
    r.read_exact(&mut ob)?;
    let order = i32::from_le_bytes(ob);
    let count = nx * ny * n_dir * rows * cols;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push((read_f64(&mut r)?, read_f64(&mut r)?));
    }
    Ok((SymbolHeader { nx, ny, h, n_dir, rows, cols, order }, values))
}

/// One `x,y,value` row per node.
pub fn write_csv(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,value")?;
    let spec = field.spec();
    for (k, v) in field.values().iter().enumerate() {
        let (i, j) = spec.ij(k);
        let (x, y) = spec.coord(i, j);
        writeln!(w, "{x},{y},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Linear min-max scaling used for a preview image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreviewScale {
    pub min: f64,
    pub max: f64,
}

/// 8-bit grayscale PGM, row `j = ny-1` at the top.
pub fn write_pgm(path: &Path, field: &ScalarField) -> Result<PreviewScale, IoError> {
    let spec = field.spec();
    let (min, max) = (field.min(), field.max());
    let span = if max > min { max - min } else { 1.0 };
    let mut pixels = Vec::with_capacity(spec.len());
    for row in (0..spec.ny).rev() {
        for i in 0..spec.nx {
            let t = (field.at(i, row) - min) / span;
            pixels.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let encoder = PnmEncoder::new(BufWriter::new(File::create(path)?))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder.write_image(&pixels, spec.nx as u32, spec.ny as u32, ExtendedColorType::L8)?;
    Ok(PreviewScale { min, max })
}

/// Writes `contents` through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip_and_header() {
        let s = GridSpec::square(32).unwrap();
        let f = ScalarField::from_fn(s, |x, y| x * 3.0 - y.sin());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hsf");
        write_field(&path, &f).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"HSF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 32);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 * 1024);
        assert_eq!(read_field(&path, s).unwrap(), f);
        let other = GridSpec::square(40).unwrap();
        assert!(matches!(read_field(&path, other), Err(IoError::GridMismatch { .. })));
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hsf");
        fs::write(&path, b"NOPE00000000000000000").unwrap();
        let s = GridSpec::square(32).unwrap();
        assert!(matches!(read_field(&path, s), Err(IoError::BadMagic(_))));
    }

    #[test]
    fn csv_and_pgm() {
        let s = GridSpec::square(32).unwrap();
        let f = ScalarField::from_fn(s, |x, _| x);
        let dir = tempfile::tempdir().unwrap();
        write_csv(&dir.path().join("f.csv"), &f).unwrap();
        let text = fs::read_to_string(dir.path().join("f.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + s.len());
        assert_eq!(text.lines().nth(2).unwrap(), format!("{},0,{}", s.h, s.h));
        let scale = write_pgm(&dir.path().join("f.pgm"), &f).unwrap();
        assert_eq!(scale, PreviewScale { min: 0.0, max: 1.0 });
        let bytes = fs::read(dir.path().join("f.pgm")).unwrap();
        assert_eq!(&bytes[..2], b"P5");
    }
}
