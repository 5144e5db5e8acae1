//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FLSF" | u16 version | u32 header_len | header JSON
//!        | u32 tensor_count | { u32 name_len | name | u32 rows | u32 cols | f32 × rows·cols }*
//! ```
//!
//! Parameters are stored as 32-bit floats. A model whose parameters were
//! rounded with [`FlowModel::round_to_f32`] survives a round trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Standardizer;
use super::model::{build_flow, clone_to_conditional, FlowConfig, FlowModel};
use crate::error::{Error, Result};
use crate::numcore::seeded_rng;

pub const MAGIC: &[u8; 4] = b"FLSF";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    d: usize,
    #[serde(rename = "L")]
    blocks: usize,
    #[serde(rename = "K")]
    bins: usize,
    r: Option<usize>,
    seed: u64,
    config: FlowConfig,
    standardizer: Standardizer,
    permutations: Vec<Vec<usize>>,
    actnorm_initialized: Vec<bool>,
    source_dim: Option<usize>,
    source_standardizer: Option<Standardizer>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(
                self.path,
                format!("unexpected end of data at byte {} (needed {n} more)", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl FlowModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            d: self.dim,
            blocks: self.blocks.len(),
            bins: self.config.bins,
            r: self.conditioner.as_ref().map(|c| c.rank),
            seed: self.seed,
            config: self.config.clone(),
            standardizer: self.standardizer.clone(),
            permutations: self.blocks.iter().map(|b| b.permutation.perm.clone()).collect(),
            actnorm_initialized: self.blocks.iter().map(|b| b.actnorm.initialized).collect(),
            source_dim: self.conditioner.as_ref().map(|c| c.source_dim),
            source_standardizer: self.conditioner.as_ref().map(|c| c.source_standardizer.clone()),
        };
        let header = serde_json::to_vec(&header).expect("model header serializes");
        let params = self.params();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.rows as u32).to_le_bytes());
            out.extend_from_slice(&(p.cols as u32).to_le_bytes());
            for &v in &p.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a container; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<FlowModel> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(corrupt(path, "bad magic bytes"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: ModelHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        if header.permutations.len() != header.config.blocks || header.actnorm_initialized.len() != header.config.blocks {
            return Err(corrupt(path, "header block count is inconsistent"));
        }
        let mut model = build_flow(header.d, &header.config, &seeded_rng(0))?;
        if let Some(source_dim) = header.source_dim {
            let rank = header.r.ok_or_else(|| corrupt(path, "conditional model without rank"))?;
            model = clone_to_conditional(&model, source_dim, rank, &seeded_rng(0))?;
            if let (Some(c), Some(s)) = (model.conditioner.as_mut(), header.source_standardizer) {
                c.source_standardizer = s;
            }
        }
        model.seed = header.seed;
        if header.standardizer.dim() != header.d {
            return Err(corrupt(path, "standardizer dimension does not match d"));
        }
        model.standardizer = header.standardizer;
        for ((block, perm), init) in model
            .blocks
            .iter_mut()
            .zip(header.permutations)
            .zip(header.actnorm_initialized)
        {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..header.d).collect::<Vec<_>>() {
                return Err(corrupt(path, "stored permutation is not a bijection"));
            }
            block.permutation.perm = perm;
            block.actnorm.initialized = init;
        }

        let count = r.u32()? as usize;
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(corrupt(
                path,
                format!("expected {} tensors, found {count}", params.len()),
            ));
        }
        for p in params.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt(path, "tensor name is not UTF-8"))?;
            if name != p.name {
                return Err(corrupt(path, format!("expected tensor {}, found {name}", p.name)));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows != p.rows || cols != p.cols {
                return Err(corrupt(
                    path,
                    format!("tensor {name} has shape {rows}x{cols}, expected {}x{}", p.rows, p.cols),
                ));
            }
            let raw = r.take(4 * rows * cols)?;
            for (v, chunk) in p.values.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FlowModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FlowModel::from_bytes(&bytes, path)
    }
}
