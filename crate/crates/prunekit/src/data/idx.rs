//! IDX file format: big-endian magic, big-endian 32-bit extents, raw
//! unsigned pixel/label bytes. Byte-exact on write and read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::IdxFormat { path: path.display().to_string(), reason: reason.into() }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated header"))?;
    Ok(u32::from_be_bytes(buf))
}

/// Raw image payload: `(bytes, count, rows, cols)`.
pub fn read_images_raw(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(
            path,
            format!("bad image magic {magic:#010x}, want {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&mut r, path)? as usize;
    let rows = read_u32_be(&mut r, path)? as usize;
    let cols = read_u32_be(&mut r, path)? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    r.read_exact(&mut bytes).map_err(|_| format_err(path, "truncated pixel data"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", rest.len())));
    }
    Ok((bytes, n, rows, cols))
}

pub fn read_labels_raw(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(
            path,
            format!("bad label magic {magic:#010x}, want {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&mut r, path)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|_| format_err(path, "truncated label data"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(bytes)
}

pub fn write_images_raw(
    path: &Path,
    bytes: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    assert_eq!(bytes.len(), n * rows * cols, "image payload size");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    w.write_all(&(n as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_labels_raw(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}
