//! Generic 2-D table file used for confidence tables, token tables and
//! solver assignments.
//!
//! Layout (little endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `CSTB`                   |
//! | 4      | 2    | version (1)                    |
//! | 6      | 1    | dtype: 0 = i16, 1 = f32, 2 = u32 |
//! | 7      | 1    | reserved (0)                   |
//! | 8      | 4    | rows                           |
//! | 12     | 4    | cols                           |
//! | 16     | ...  | row-major payload              |

use std::io::Write;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CSTB";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TableData {
    I16(Vec<i16>),
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TableData {
    fn len(&self) -> usize {
        match self {
            TableData::I16(v) => v.len(),
            TableData::F32(v) => v.len(),
            TableData::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: TableData,
}

impl Table {
    pub fn new(rows: usize, cols: usize, data: TableData) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} table",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let (tag, width) = match &self.data {
            TableData::I16(_) => (0u8, 2),
            TableData::F32(_) => (1, 4),
            TableData::U32(_) => (2, 4),
        };
        let mut out = Vec::with_capacity(16 + self.data.len() * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(tag);
        out.push(0);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        match &self.data {
            TableData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TableData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TableData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing table magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = &bytes[16..];
        let count = rows * cols;
        let width = if bytes[6] == 0 { 2 } else { 4 };
        if payload.len() != count * width {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                count * width
            )));
        }
        let data = match bytes[6] {
            0 => TableData::I16(
                payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
            ),
            1 => TableData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            2 => TableData::U32(
                payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        Table::new(rows, cols, data)
    }

    /// Inspection export: one line per row, comma separated.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        for r in 0..self.rows {
            let range = r * self.cols..(r + 1) * self.cols;
            let cells: Vec<String> = match &self.data {
                TableData::I16(v) => v[range].iter().map(|x| x.to_string()).collect(),
                TableData::F32(v) => v[range].iter().map(|x| x.to_string()).collect(),
                TableData::U32(v) => v[range].iter().map(|x| x.to_string()).collect(),
            };
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}
