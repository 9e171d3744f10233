//! Global encoder: token + position + segment embeddings through a stack of
//! self-attention blocks and a final layer norm.
//!
//! Precomputed encoder outputs can also be exchanged as embedding-matrix
//! files (`COOLEMB1`), so features from an external language model can be
//! replayed through the rest of the network.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::graph::Var;
use crate::nn::{Embedding, EncoderBlock, LayerNorm};
use crate::params::{ParameterStore, Session};
use crate::tensor::{invalid, Result, Tensor};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"COOLEMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEncoder {
    pub tokens: Embedding,
    pub positions: Embedding,
    pub segments: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl GlobalEncoder {
    pub fn new(store: &mut ParameterStore, prefix: &str, dims: EncoderDims, seed: u64) -> Result<Self> {
        let blocks = (0..dims.blocks)
            .map(|n| {
                let mut b = EncoderBlock::new(
                    store,
                    &format!("{prefix}.block{n}"),
                    dims.hidden,
                    dims.heads,
                    dims.ffn,
                    seed,
                )?;
                b.dropout = dims.dropout;
                Ok(b)
            })
            .collect::<Result<_>>()?;
        Ok(GlobalEncoder {
            tokens: Embedding::new(store, &format!("{prefix}.tokens"), dims.vocab, dims.hidden, seed),
            positions: Embedding::new(store, &format!("{prefix}.positions"), dims.max_len, dims.hidden, seed),
            segments: Embedding::new(store, &format!("{prefix}.segments"), 2, dims.hidden, seed),
            blocks,
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), dims.hidden),
        })
    }

    pub fn hidden(&self) -> usize {
        self.tokens.dim
    }

    pub fn max_len(&self) -> usize {
        self.positions.vocab
    }

    /// Sum of token, position and segment embeddings: `[L×H]`.
    pub fn embed(&self, s: &mut Session, ids: &[usize], segments: &[usize]) -> Result<Var> {
        let len = ids.len();
        if len == 0 || len > self.max_len() {
            return Err(invalid(
                "encode_sequence",
                format!("sequence length {len} outside 1..={}", self.max_len()),
            ));
        }
        if segments.len() != len {
            return Err(invalid("encode_sequence", "segment ids do not match token ids"));
        }
        if let Some(&bad) = segments.iter().find(|&&sg| sg > 1) {
            return Err(invalid("encode_sequence", format!("segment id {bad} not in {{0,1}}")));
        }
        let positions: Vec<usize> = (0..len).collect();
        let tok = self.tokens.forward(s, ids)?;
        let pos = self.positions.forward(s, &positions)?;
        let seg = self.segments.forward(s, segments)?;
        let x = s.graph.add(tok, pos)?;
        s.graph.add(x, seg)
    }

    /// Blocks and final norm over already-embedded input.
    pub fn encode_embedded(&self, s: &mut Session, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self
            .blocks
            .iter()
            .try_fold(x, |h, block| block.forward(s, h, mask))?;
        self.final_norm.forward(s, h)
    }

    /// `h_g = Global([q;p])`: `[L×H]`.
    pub fn encode_sequence(
        &self,
        s: &mut Session,
        ids: &[usize],
        segments: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        if mask.len() != ids.len() {
            return Err(invalid("encode_sequence", "mask does not match token ids"));
        }
        let x = self.embed(s, ids, segments)?;
        self.encode_embedded(s, x, mask)
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingFileError {
    #[error("embedding file: {0}")]
    Io(#[from] io::Error),
    #[error("embedding file: bad magic, expected COOLEMB1")]
    BadMagic,
    #[error("embedding file: truncated header")]
    TruncatedHeader,
    #[error("embedding file: header declares {rows}x{cols} ({expected} bytes of data) but found {found} bytes")]
    SizeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding file: zero-sized matrix {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("embedding file: expected shape {expected:?}, file holds {found:?}")]
    UnexpectedShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Serialises an `[L×H]` matrix: magic, `L` and `H` as `u32` LE, then the
/// values as row-major `f64` LE.
pub fn encode_embeddings(matrix: &Tensor) -> Result<Vec<u8>> {
    if matrix.rank() != 2 {
        return Err(invalid("export_embeddings", format!("expected a matrix, got {:?}", matrix.shape())));
    }
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let mut out = Vec::with_capacity(16 + 8 * matrix.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Tensor, EmbeddingFileError> {
    if bytes.len() < 8 {
        return Err(EmbeddingFileError::TruncatedHeader);
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(EmbeddingFileError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(EmbeddingFileError::TruncatedHeader);
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(EmbeddingFileError::Empty { rows, cols });
    }
    let payload = &bytes[16..];
    let expected = rows * cols * 8;
    if payload.len() != expected {
        return Err(EmbeddingFileError::SizeMismatch {
            rows,
            cols,
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new([rows, cols], data).expect("sizes checked"))
}

pub fn export_embeddings(path: impl AsRef<Path>, matrix: &Tensor) -> Result<(), EmbeddingFileError> {
    let bytes = encode_embeddings(matrix).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a stored `h_g`. When `expected` is given the file must hold exactly
/// that `(L, H)`.
pub fn import_embeddings(
    path: impl AsRef<Path>,
    expected: Option<(usize, usize)>,
) -> Result<Tensor, EmbeddingFileError> {
    let t = decode_embeddings(&fs::read(path)?)?;
    let found = (t.shape()[0], t.shape()[1]);
    match expected {
        Some(e) if e != found => Err(EmbeddingFileError::UnexpectedShape { expected: e, found }),
        _ => Ok(t),
    }
}
