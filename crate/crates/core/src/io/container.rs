use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Leading bytes of an embedding container.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"FSEMBED\0";
pub const EMBEDDING_SCHEMA_VERSION: u32 = 1;

/// JSON header preceding the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingHeader {
    pub schema_version: u32,
    pub model_id: String,
    pub n: u64,
    pub d: u64,
    pub dtype: String,
    pub row_major: bool,
    pub corpus_hash: String,
}

impl EmbeddingHeader {
    pub fn payload_bytes(&self) -> Option<u64> {
        self.n.checked_mul(self.d)?.checked_mul(4)
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Layout: magic, `u32` header length (LE), header JSON, then `n·d` LE `f32`
/// values in row-major order. Values are narrowed to `f32`.
pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let header = EmbeddingHeader {
        schema_version: EMBEDDING_SCHEMA_VERSION,
        model_id: set.model_id.clone(),
        n: set.n() as u64,
        d: set.d() as u64,
        dtype: "f32".into(),
        row_major: true,
        corpus_hash: set.corpus_hash.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * set.n() * set.d());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &x in set.data.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

/// Parses a container; `path` is used only in error messages.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingSet> {
    if bytes.len() < 12 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(corrupt(path, "not an embedding container (bad magic bytes)"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| corrupt(path, format!("header of {header_len} bytes is truncated")))?;
    let header: EmbeddingHeader =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.schema_version != EMBEDDING_SCHEMA_VERSION {
        return Err(corrupt(path, format!("unsupported schema version {}", header.schema_version)));
    }
    if header.dtype != "f32" || !header.row_major {
        return Err(corrupt(path, format!("unsupported layout: dtype {} row_major {}", header.dtype, header.row_major)));
    }
    let payload = &bytes[12 + header_len..];
    let expected = header.payload_bytes().ok_or_else(|| corrupt(path, "shape overflows"))?;
    if payload.len() as u64 != expected {
        return Err(corrupt(
            path,
            format!("payload length mismatch: expected {expected} bytes, got {}", payload.len()),
        ));
    }
    let (n, d) = (header.n as usize, header.d as usize);
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let bad_rows: Vec<usize> = (0..n).filter(|&i| values[i * d..(i + 1) * d].iter().any(|x| !x.is_finite())).collect();
    if !bad_rows.is_empty() {
        return Err(Error::NonFiniteData {
            path: path.to_path_buf(),
            rows: bad_rows,
        });
    }
    Ok(EmbeddingSet::new(header.model_id, header.corpus_hash, Matrix::from_vec(n, d, values)))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Reads every container of a pool and checks row alignment.
pub fn read_pool(paths: &[impl AsRef<Path>]) -> Result<Vec<EmbeddingSet>> {
    let pool = paths.iter().map(|p| read_embeddings(p.as_ref())).collect::<Result<Vec<_>>>()?;
    crate::data::check_pool_alignment(&pool)?;
    Ok(pool)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    super::write_atomic(path, &encode_embeddings(set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> EmbeddingSet {
        EmbeddingSet::new(
            "m",
            "c0ffee",
            Matrix::from_rows(&[vec![1.5, -2.0, 0.1f32 as f64], vec![3.0, 1e-7f32 as f64, -0.0]]),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode_embeddings(&set());
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 12 - header_len, 24);
        let back = decode_embeddings(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.model_id, "m");
        assert_eq!(back.corpus_hash, "c0ffee");
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&set().data));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let bytes = encode_embeddings(&set());
        let err = decode_embeddings(&bytes[..bytes.len() - 4], Path::new("x")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::CorruptFile { .. }));
        assert!(msg.contains("expected 24") && msg.contains("got 20"), "{msg}");
    }

    #[test]
    fn non_finite_rows_are_reported() {
        let mut s = set();
        s.data.set(1, 2, f64::NAN);
        let err = decode_embeddings(&encode_embeddings(&s), Path::new("x")).unwrap_err();
        match err {
            Error::NonFiniteData { rows, .. } => assert_eq!(rows, vec![1]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_magic_and_header_are_corrupt() {
        assert!(matches!(decode_embeddings(b"nope", Path::new("x")), Err(Error::CorruptFile { .. })));
        let mut bytes = encode_embeddings(&set());
        bytes[13] = b'#';
        assert!(matches!(decode_embeddings(&bytes, Path::new("x")), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn large_file_shape() {
        let s = EmbeddingSet::new("mini", "h", Matrix::zeros(1465, 384));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.emb");
        write_embeddings(&path, &s).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!((back.n(), back.d()), (1465, 384));
    }

    #[test]
    fn pool_with_mixed_corpora_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.emb");
        let b = dir.path().join("b.emb");
        write_embeddings(&a, &EmbeddingSet::new("a", "h1", Matrix::zeros(3, 2))).unwrap();
        write_embeddings(&b, &EmbeddingSet::new("b", "h2", Matrix::zeros(3, 2))).unwrap();
        assert!(matches!(read_pool(&[a, b]), Err(Error::Alignment(_))));
    }
}
