//! `PKR1` raster-stack files: named 2D `f32` fields stored back to back.
//!
//! ```text
//! "PKR1" | u32 field count
//! per field: u16 name length | name utf-8 | u32 rows | u32 cols | rows·cols × f32
//! ```
//!
//! Everything is little-endian and row-major. Values are computed in `f64`
//! and narrowed to `f32` only here.

use ndarray::Array2;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PKR1";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("corrupt raster stack at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterField {
    pub name: String,
    pub data: Array2<f32>,
}

impl RasterField {
    pub fn from_f64(name: impl Into<String>, data: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            data: data.mapv(|v| v as f32),
        }
    }
}

pub fn encode_raster_stack(fields: &[RasterField]) -> Vec<u8> {
    let payload: usize = fields.iter().map(|f| 10 + f.name.len() + 4 * f.data.len()).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in fields {
        out.extend_from_slice(&(f.name.len() as u16).to_le_bytes());
        out.extend_from_slice(f.name.as_bytes());
        let (rows, cols) = f.data.dim();
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in f.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_raster_stack(bytes: &[u8]) -> Result<Vec<RasterField>, RasterError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], RasterError> {
        let start = pos;
        let end = start.checked_add(n).filter(|e| *e <= bytes.len()).ok_or(RasterError::Corrupt {
            offset: start,
            reason: "unexpected end of data".into(),
        })?;
        pos = end;
        Ok(&bytes[start..end])
    };
    if take(4)? != MAGIC {
        return Err(RasterError::Corrupt { offset: 0, reason: "bad magic".into() });
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut fields = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name_bytes = take(len)?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| RasterError::Corrupt {
            offset: 0,
            reason: "field name is not utf-8".into(),
        })?;
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or(RasterError::Corrupt {
            offset: 0,
            reason: "field too large".into(),
        })?;
        let raw = take(n)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        fields.push(RasterField { name, data });
    }
    if pos != bytes.len() {
        return Err(RasterError::Corrupt { offset: pos, reason: "trailing bytes".into() });
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let fields = vec![
            RasterField::from_f64("ray", &Array2::from_shape_fn((2, 3), |(r, c)| r as f64 - c as f64 * 0.5)),
            RasterField { name: "empty".into(), data: Array2::zeros((0, 4)) },
        ];
        let bytes = encode_raster_stack(&fields);
        assert_eq!(&bytes[..4], b"PKR1");
        assert_eq!(decode_raster_stack(&bytes).unwrap(), fields);
        assert!(decode_raster_stack(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_raster_stack(b"PKR0\0\0\0\0").is_err());
    }
}
