//! Step logs and complex-matrix files.
//!
//! Step logs are CSV with header `t,dW,dy,n,x,p,M,e_f`, or a little-endian
//! binary stream: the magic `QNDSTEP1`, a `u64` record count, then eight
//! `f64` per record in the CSV column order.
//!
//! Matrices are CSV with one matrix row per line as `re,im` pairs, or binary:
//! the magic `QNDCMAT1`, `u64` rows and cols, then row-major `re, im` pairs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{CMatrix, DensityMatrix};
use crate::sme::StepRecord;

pub const STEP_LOG_HEADER: &str = "t,dW,dy,n,x,p,M,e_f";
const STEP_MAGIC: &[u8; 8] = b"QNDSTEP1";
const MATRIX_MAGIC: &[u8; 8] = b"QNDCMAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogFormat {
    #[default]
    Csv,
    Binary,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "binary" | "bin" => Ok(Self::Binary),
            other => Err(Error::Parse(format!("unknown log format {other:?} (csv or binary)"))),
        }
    }
}

fn step_fields(r: &StepRecord) -> [f64; 8] {
    [r.t, r.dw, r.dy, r.exp_n, r.exp_x, r.exp_p, r.m_t, r.e_f]
}

fn step_from_fields(f: [f64; 8]) -> StepRecord {
    StepRecord {
        t: f[0],
        dw: f[1],
        dy: f[2],
        exp_n: f[3],
        exp_x: f[4],
        exp_p: f[5],
        m_t: f[6],
        e_f: f[7],
    }
}

pub fn write_step_log<W: Write>(records: &[StepRecord], format: LogFormat, mut out: W) -> Result<()> {
    match format {
        LogFormat::Csv => {
            writeln!(out, "{STEP_LOG_HEADER}")?;
            for r in records {
                let f = step_fields(r);
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]
                )?;
            }
        }
        LogFormat::Binary => {
            out.write_all(STEP_MAGIC)?;
            out.write_all(&(records.len() as u64).to_le_bytes())?;
            for r in records {
                for v in step_fields(r) {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads either format, detected from the leading bytes.
pub fn read_step_log<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut reader = BufReader::new(input);
    if reader.fill_buf()?.starts_with(STEP_MAGIC) {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        let count = read_u64(&mut reader)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let mut f = [0.0; 8];
            for v in &mut f {
                *v = read_f64(&mut reader)?;
            }
            records.push(step_from_fields(f));
        }
        return Ok(records);
    }
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != STEP_LOG_HEADER {
        return Err(Error::Parse(format!("unexpected step-log header {header:?}")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values = parse_floats(&line, i + 2)?;
        let f: [f64; 8] = values
            .try_into()
            .map_err(|v: Vec<f64>| Error::Parse(format!("line {}: expected 8 fields, got {}", i + 2, v.len())))?;
        records.push(step_from_fields(f));
    }
    Ok(records)
}

pub fn save_step_log(records: &[StepRecord], format: LogFormat, path: &Path) -> Result<()> {
    write_step_log(records, format, BufWriter::new(File::create(path)?))
}

pub fn load_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    read_step_log(File::open(path)?)
}

pub fn write_matrix<W: Write>(m: &CMatrix, format: LogFormat, mut out: W) -> Result<()> {
    match format {
        LogFormat::Csv => {
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols())
                    .map(|j| format!("{},{}", m[(i, j)].re, m[(i, j)].im))
                    .collect();
                writeln!(out, "{}", row.join(","))?;
            }
        }
        LogFormat::Binary => {
            out.write_all(MATRIX_MAGIC)?;
            out.write_all(&(m.nrows() as u64).to_le_bytes())?;
            out.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.write_all(&m[(i, j)].re.to_le_bytes())?;
                    out.write_all(&m[(i, j)].im.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads either matrix format, detected from the leading bytes.
pub fn read_matrix<R: Read>(input: R) -> Result<CMatrix> {
    let mut reader = BufReader::new(input);
    if reader.fill_buf()?.starts_with(MATRIX_MAGIC) {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        let rows = read_u64(&mut reader)? as usize;
        let cols = read_u64(&mut reader)? as usize;
        if rows.saturating_mul(cols) > 1 << 26 {
            return Err(Error::Parse(format!("matrix of {rows}x{cols} is implausibly large")));
        }
        let mut m = CMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let re = read_f64(&mut reader)?;
                let im = read_f64(&mut reader)?;
                m[(i, j)] = Complex64::new(re, im);
            }
        }
        return Ok(m);
    }
    let mut rows: Vec<Vec<Complex64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let values = parse_floats(&line, i + 1)?;
        if values.len() % 2 != 0 {
            return Err(Error::Parse(format!("line {}: odd number of values", i + 1)));
        }
        rows.push(values.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect());
    }
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(Error::Parse(format!(
            "row {} has {} entries, expected {cols}",
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(CMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn save_density_matrix(rho: &DensityMatrix, format: LogFormat, path: &Path) -> Result<()> {
    write_matrix(rho.matrix(), format, BufWriter::new(File::create(path)?))
}

/// Loads and validates a density matrix from either format.
pub fn load_density_matrix(path: &Path) -> Result<DensityMatrix> {
    DensityMatrix::from_matrix(read_matrix(File::open(path)?)?)
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {lineno}: {:?}: {e}", s.trim())))
        })
        .collect()
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
