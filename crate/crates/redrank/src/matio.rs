//! Binary and CSV serialization of matrices and indicator series.
//!
//! Binary layout: magic "RRCM", version u32, dim u32, approach u32, all
//! little-endian, followed by dim*dim f64 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::spectral::SymmetricMatrix;

pub const MAGIC: &[u8; 4] = b"RRCM";
pub const VERSION: u32 = 1;
/// Approach tag for matrices outside the covariance/correlation pair.
pub const APPROACH_NONE: u32 = 2;

/// Incremental row-major writer for large matrices.
pub struct BinMatrixWriter {
    out: BufWriter<File>,
    dim: usize,
    rows_written: usize,
}

impl BinMatrixWriter {
    pub fn create(path: &Path, dim: usize, approach_tag: u32) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(dim as u32)?;
        out.write_u32::<LittleEndian>(approach_tag)?;
        Ok(BinMatrixWriter {
            out,
            dim,
            rows_written: 0,
        })
    }

    pub fn write_row(&mut self, row: &[f64]) -> Result<()> {
        debug_assert_eq!(row.len(), self.dim);
        for &v in row {
            self.out.write_f64::<LittleEndian>(v)?;
        }
        self.rows_written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.rows_written != self.dim {
            return Err(Error::Format(format!(
                "wrote {} of {} rows",
                self.rows_written, self.dim
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Write a full row-major matrix in the binary format.
pub fn write_matrix_bin(path: &Path, values: &[f64], dim: usize, approach_tag: u32) -> Result<()> {
    let mut w = BinMatrixWriter::create(path, dim, approach_tag)?;
    for row in values.chunks(dim) {
        w.write_row(row)?;
    }
    w.finish()
}

pub fn write_symmetric_bin(path: &Path, m: &SymmetricMatrix, approach_tag: u32) -> Result<()> {
    let dim = m.dim();
    let mut w = BinMatrixWriter::create(path, dim, approach_tag)?;
    let mut row = vec![0.0; dim];
    for i in 0..dim {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = m.get(i, j);
        }
        w.write_row(&row)?;
    }
    w.finish()
}

/// Read a binary matrix; returns (row-major values, dim, approach tag).
pub fn read_matrix_bin(path: &Path) -> Result<(Vec<f64>, usize, u32)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let approach = r.read_u32::<LittleEndian>()?;
    let mut values = vec![0.0; dim * dim];
    for v in values.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    // Trailing bytes are a format error.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after matrix payload".into()));
    }
    Ok((values, dim, approach))
}

/// CSV export with tickers as header row and leading column.
pub fn write_matrix_csv(
    path: &Path,
    values: &[f64],
    dim: usize,
    labels: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let labels: Vec<String> = match labels {
        Some(l) => l.to_vec(),
        None => (0..dim).map(|i| i.to_string()).collect(),
    };
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for i in 0..dim {
        let mut rec = vec![labels[i].clone()];
        rec.extend(values[i * dim..(i + 1) * dim].iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Series CSV: timestamp,value[,count]; missing values serialize as an
/// empty field.
pub fn write_series_csv(
    path: &Path,
    timestamps: &[NaiveDate],
    values: &[Option<f64>],
    counts: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match counts {
        Some(_) => w.write_record(["timestamp", "value", "count"])?,
        None => w.write_record(["timestamp", "value"])?,
    }
    for (i, (ts, v)) in timestamps.iter().zip(values).enumerate() {
        let val = v.map(|x| format!("{x}")).unwrap_or_default();
        match counts {
            Some(c) => w.write_record([ts.to_string(), val, c[i].to_string()])?,
            None => w.write_record([ts.to_string(), val])?,
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Approach;

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let values = vec![1.0, 0.25, 0.25, 1.0];
        write_matrix_bin(&path, &values, 2, Approach::Covariance.tag()).unwrap();
        let (read, dim, tag) = read_matrix_bin(&path).unwrap();
        assert_eq!(read, values);
        assert_eq!(dim, 2);
        assert_eq!(tag, 0);
    }

    #[test]
    fn header_layout_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix_bin(&path, &[1.0], 1, APPROACH_NONE).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 8);
        assert_eq!(&bytes[0..4], b"RRCM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(matches!(read_matrix_bin(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix_bin(&path, &[1.0, 2.0, 3.0, 4.0], 2, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_matrix_bin(&path).is_err());
    }

    #[test]
    fn series_csv_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let dates = vec![
            NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
        ];
        write_series_csv(&path, &dates, &[Some(0.5), None], Some(&[3, 0])).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "timestamp,value,count\n2020-01-01,0.5,3\n2020-01-02,,0\n"
        );
    }
}
