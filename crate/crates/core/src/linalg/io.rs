//! Matrix fixture files.
//!
//! Binary layout (little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `LRMX`               |
//! | 4      | 1    | version, always 1          |
//! | 5      | 1    | dtype: 0 = f64, 1 = f32    |
//! | 6      | 4    | rows (u32)                 |
//! | 10     | 4    | cols (u32)                 |
//! | 14     | ..   | row-major payload          |
//!
//! Small fixtures may instead be headerless CSV, one matrix row per line.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{LinalgError, Matrix, Precision, Result};

pub const MAGIC: &[u8; 4] = b"LRMX";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 14;

pub fn encode_fixture(m: &Matrix, dtype: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * dtype.bytes_per_element());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match dtype {
        Precision::F64 => 0,
        Precision::F32 => 1,
    });
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        match dtype {
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
        }
    }
    out
}

pub fn decode_fixture(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(LinalgError::Format(format!("fixture truncated: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(LinalgError::Format("bad magic, expected LRMX".into()));
    }
    if bytes[4] != VERSION {
        return Err(LinalgError::Format(format!("unsupported fixture version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => Precision::F64,
        1 => Precision::F32,
        other => return Err(LinalgError::Format(format!("unknown dtype tag {other}"))),
    };
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let width = dtype.bytes_per_element();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != rows * cols * width {
        return Err(LinalgError::Format(format!(
            "payload is {} bytes, expected {} for {rows}x{cols} {}",
            payload.len(),
            rows * cols * width,
            dtype.as_str()
        )));
    }
    let data = payload
        .chunks_exact(width)
        .map(|c| match dtype {
            Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn parse_csv(text: &str) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LinalgError::Format(format!("csv line {}: {e}", line + 1)))?;
        if cols.is_some_and(|c| c != record.len()) {
            return Err(LinalgError::Format(format!(
                "csv line {}: expected {} fields, found {}",
                line + 1,
                cols.unwrap(),
                record.len()
            )));
        }
        cols = Some(record.len());
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| LinalgError::Format(format!("csv line {}: not a number: {field:?}", line + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Loads a fixture, sniffing the LRMX magic and falling back to CSV.
pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LinalgError::Io(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(MAGIC) {
        decode_fixture(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| LinalgError::Format(format!("{}: neither LRMX nor UTF-8 CSV", path.display())))?;
        parse_csv(&text)
    }
}

pub fn save_matrix(path: &Path, m: &Matrix, dtype: Precision) -> Result<()> {
    fs::write(path, encode_fixture(m, dtype)).map_err(|e| LinalgError::Io(format!("{}: {e}", path.display())))
}
