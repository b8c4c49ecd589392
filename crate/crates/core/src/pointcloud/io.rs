//! CSV and packed-binary cloud files.
//!
//! CSV: header `w_x,w_y,w_z,intensity`, one point per line. Values are
//! written with the shortest representation that parses back to the same
//! `f64`, so CSV round-trips are exact.
//!
//! Packed binary: magic `APC1`, little-endian `u64` point count, then four
//! little-endian `f32` per point. Coordinates are rounded to `f32` on write;
//! clouds whose values are already `f32`-representable round-trip bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "w_x,w_y,w_z,intensity";
pub const BINARY_MAGIC: &[u8; 4] = b"APC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Csv,
    PackedBinary,
}

impl CloudFormat {
    /// `.csv` is CSV, anything else is packed binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CloudFormat::Csv,
            _ => CloudFormat::PackedBinary,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(CloudFormat::Csv),
            "bin" | "binary" | "packed-binary" => Ok(CloudFormat::PackedBinary),
            other => Err(Error::Config(format!("unknown cloud format `{other}`"))),
        }
    }
}

pub fn load_pointcloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let file = File::open(path)?;
    match format {
        CloudFormat::Csv => read_csv(BufReader::new(file)),
        CloudFormat::PackedBinary => read_binary(BufReader::new(file)),
    }
}

pub fn save_pointcloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        CloudFormat::Csv => write_csv(cloud, &mut out)?,
        CloudFormat::PackedBinary => write_binary(cloud, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(cloud: &PointCloud, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for p in cloud {
        writeln!(out, "{},{},{},{}", p.w_x, p.w_y, p.w_z, p.intensity)?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.starts_with("w_x") {
            if trimmed.replace(' ', "") != CSV_HEADER {
                return Err(Error::parse_line(line_no, format!("unexpected header `{trimmed}`")));
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse_line(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let mut vals = [0.0f64; 4];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| Error::parse_line(line_no, format!("`{field}`: {e}")))?;
        }
        let p = Point::new(vals[0], vals[1], vals[2], vals[3]);
        p.validate().map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
        points.push(p);
    }
    Ok(PointCloud::from_trusted(points))
}

pub fn write_binary<W: Write>(cloud: &PointCloud, mut out: W) -> Result<()> {
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&(cloud.len() as u64).to_le_bytes())?;
    for p in cloud {
        for v in [p.w_x, p.w_y, p.w_z, p.intensity] {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<PointCloud> {
    let mut header = [0u8; 12];
    let mut filled = 0;
    while filled < header.len() {
        let n = input.read(&mut header[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    if filled == 0 {
        return Ok(PointCloud::empty());
    }
    if filled < 4 || &header[..4] != BINARY_MAGIC {
        return Err(Error::parse_offset(0, "missing APC1 magic"));
    }
    if filled < 12 {
        return Err(Error::parse_offset(filled as u64, "truncated point count"));
    }
    let count = u64::from_le_bytes(header[4..12].try_into().expect("8 bytes"));
    let mut points = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut record = [0u8; 16];
    for i in 0..count {
        let offset = 12 + 16 * i;
        input
            .read_exact(&mut record)
            .map_err(|_| Error::parse_offset(offset, format!("truncated record {i} of {count}")))?;
        let f = |k: usize| f32::from_le_bytes(record[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let p = Point::new(f(0), f(1), f(2), f(3));
        p.validate().map_err(|e| Error::Validation(format!("record {i} at byte offset {offset}: {e}")))?;
        points.push(p);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::parse_offset(12 + 16 * count, "trailing bytes after last record"));
    }
    Ok(PointCloud::from_trusted(points))
}
