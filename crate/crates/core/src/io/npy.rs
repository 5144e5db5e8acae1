use std::path::Path;

use npyz::{DType, NpyFile, Order};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Converts a 2-D little-endian `f4`/`f8` C-order `.npy` array into an
/// embedding set.
pub fn import_npy_bytes(bytes: &[u8], path: &Path, model_id: &str, corpus_hash: &str) -> Result<EmbeddingSet> {
    let npy = NpyFile::new(bytes).map_err(|e| corrupt(path, format!("bad npy header: {e}")))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 {
        return Err(corrupt(path, format!("expected a 2-D array, got shape {shape:?}")));
    }
    if npy.order() != Order::C {
        return Err(corrupt(path, "Fortran-order arrays are not supported"));
    }
    let (n, d) = (shape[0] as usize, shape[1] as usize);
    let descr = match npy.dtype() {
        DType::Plain(t) => t.to_string(),
        other => return Err(corrupt(path, format!("unsupported dtype {}", other.descr()))),
    };
    let values: Vec<f64> = match descr.as_str() {
        "<f4" => npy
            .into_vec::<f32>()
            .map_err(|e| corrupt(path, e.to_string()))?
            .into_iter()
            .map(f64::from)
            .collect(),
        "<f8" => npy.into_vec::<f64>().map_err(|e| corrupt(path, e.to_string()))?,
        other => return Err(corrupt(path, format!("unsupported dtype {other}; expected <f4 or <f8"))),
    };
    if values.len() != n * d {
        return Err(corrupt(path, format!("expected {} values, got {}", n * d, values.len())));
    }
    let bad_rows: Vec<usize> = (0..n).filter(|&i| values[i * d..(i + 1) * d].iter().any(|x| !x.is_finite())).collect();
    if !bad_rows.is_empty() {
        return Err(Error::NonFiniteData {
            path: path.to_path_buf(),
            rows: bad_rows,
        });
    }
    Ok(EmbeddingSet::new(model_id, corpus_hash, Matrix::from_vec(n, d, values)))
}

pub fn import_npy(path: &Path, model_id: &str, corpus_hash: &str) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    import_npy_bytes(&bytes, path, model_id, corpus_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled v1.0 file.
    fn npy(descr: &str, fortran: bool, shape: &str, payload: &[u8]) -> Vec<u8> {
        let mut header = format!("{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape}, }}", if fortran { "True" } else { "False" });
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn imports_f4_and_f8() {
        let vals = [1.0f32, 2.5, -3.0, 0.25, 8.0, -1.5];
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let set = import_npy_bytes(&npy("<f4", false, "(2, 3)", &payload), Path::new("x"), "m", "h").unwrap();
        assert_eq!((set.n(), set.d()), (2, 3));
        assert_eq!(set.data.get(1, 0), 0.25);

        let payload: Vec<u8> = [0.1f64, 0.2].iter().flat_map(|v| v.to_le_bytes()).collect();
        let set = import_npy_bytes(&npy("<f8", false, "(1, 2)", &payload), Path::new("x"), "m", "h").unwrap();
        assert_eq!(set.data.row(0), &[0.1, 0.2]);
    }

    #[test]
    fn rejects_unsupported_layouts() {
        let payload = vec![0u8; 16];
        for bytes in [
            npy("<f4", true, "(2, 2)", &payload),
            npy("<f4", false, "(4,)", &payload),
            npy("<i4", false, "(2, 2)", &payload),
            b"garbage".to_vec(),
            npy("<f4", false, "(2, 2)", &payload[..12]),
        ] {
            assert!(matches!(
                import_npy_bytes(&bytes, Path::new("x"), "m", "h"),
                Err(Error::CorruptFile { .. })
            ));
        }
    }
}
