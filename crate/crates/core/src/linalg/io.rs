//! Binary matrix format: a one-line JSON header followed by little-endian
//! `f32` values in row-major order.
//!
//! ```text
//! {"rows":3,"cols":4,"dtype":"f32"}\n<48 bytes>
//! ```

use std::io::{BufRead, Write};

use serde::Deserialize;

use super::Matrix;
use crate::error::{GemsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
}

pub fn write_matrix<W: Write>(mut w: W, m: &Matrix) -> Result<()> {
    writeln!(w, "{{\"rows\":{},\"cols\":{},\"dtype\":\"f32\"}}", m.rows(), m.cols())?;
    let mut buf = Vec::with_capacity(m.len() * 4);
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: BufRead>(mut r: R) -> Result<Matrix> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(GemsError::Format("missing matrix header".into()));
    }
    let header: MatrixHeader = serde_json::from_str(line.trim_end_matches('\n'))
        .map_err(|e| GemsError::Format(format!("bad matrix header {line:?}: {e}")))?;
    let count = header.rows * header.cols;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| GemsError::Format(format!("truncated matrix body ({count} values): {e}")))?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = Matrix::from_vec_unchecked(header.rows, header.cols, data);
    m.check_finite("read_matrix")?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn header_layout_is_exact() {
        let m = Matrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let mut out = Vec::new();
        write_matrix(&mut out, &m).unwrap();
        let header = b"{\"rows\":1,\"cols\":2,\"dtype\":\"f32\"}\n";
        assert_eq!(&out[..header.len()], header);
        assert_eq!(&out[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(out.len(), header.len() + 8);
    }

    #[test]
    fn rejects_bad_headers_and_short_bodies() {
        assert!(read_matrix(Cursor::new(b"{\"rows\":1}\n".to_vec())).is_err());
        assert!(read_matrix(Cursor::new(b"{\"rows\":1,\"cols\":1,\"dtype\":\"f64\"}\n".to_vec())).is_err());
        assert!(read_matrix(Cursor::new(b"{\"rows\":1,\"cols\":2,\"dtype\":\"f32\"}\n\0\0\0\0".to_vec())).is_err());
    }

    proptest! {
        #[test]
        fn write_read_write_is_byte_stable(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1e3..1e3));
            let mut a = Vec::new();
            write_matrix(&mut a, &m).unwrap();
            let back = read_matrix(Cursor::new(a.clone())).unwrap();
            let mut b = Vec::new();
            write_matrix(&mut b, &back).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
