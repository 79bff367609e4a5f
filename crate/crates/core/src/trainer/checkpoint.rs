//! Checkpoint file.
//!
//! ```text
//! magic        8 bytes  "BCPTCKPT"
//! version      u32 LE   (1)
//! header_len   u32 LE
//! header       UTF-8 JSON: {"config": TrainConfig, "feature_dim", "n_base",
//!              "iteration", "epoch", "rng_digest"}
//! rng          32-byte seed, u64 LE stream, u128 LE word position
//! n_blocks     u32 LE
//! blocks       name_len u16 LE, name UTF-8, rows u32 LE, cols u32 LE,
//!              rows·cols f64 LE in column-major order
//! ```
//!
//! Blocks, in order: `embedder.{l}.weight`, `embedder.{l}.bias` for every
//! layer, the matching `velocity.{l}.*` blocks, `projections`,
//! `projections.velocity`, `clusters`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedderParams, Layer, TrainConfig, TrainState};
use crate::cluster::ClusterBank;
use crate::error::{Error, Result};
use crate::losses::ProjectionBank;
use crate::seed::Rng;
use crate::{Mat, Vector};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BCPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub n_base: usize,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    feature_dim: usize,
    n_base: usize,
    iteration: u64,
    epoch: u64,
    rng_digest: String,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn rng_bytes(rng: &Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn push_block(out: &mut Vec<u8>, name: &str, m: &Mat) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn vec_as_mat(v: &Vector) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

impl Checkpoint {
    /// Hex SHA-256 of the sampler state.
    pub fn rng_digest(&self) -> String {
        hex::encode(Sha256::digest(rng_bytes(&self.state.rng)))
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.encode()?)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let header = Header {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            n_base: self.n_base,
            iteration: s.iteration,
            epoch: s.epoch,
            rng_digest: self.rng_digest(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&rng_bytes(&s.rng));

        let mut blocks: Vec<(String, Mat)> = Vec::new();
        for (prefix, p) in [("embedder", &s.params), ("velocity", &s.velocity)] {
            for (l, layer) in p.layers().iter().enumerate() {
                blocks.push((format!("{prefix}.{l}.weight"), layer.weight.clone()));
                blocks.push((format!("{prefix}.{l}.bias"), vec_as_mat(&layer.bias)));
            }
        }
        blocks.push(("projections".into(), s.projections.weights().clone()));
        blocks.push(("projections.velocity".into(), s.projection_velocity.clone()));
        blocks.push(("clusters".into(), s.clusters.centers().clone()));

        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, m) in &blocks {
            push_block(&mut out, name, m);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(e.to_string()))?;

        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            blocks.push((name, Mat::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }

        let mut it = blocks.into_iter();
        let mut next = |expected: &str| -> Result<Mat> {
            match it.next() {
                Some((name, m)) if name == expected => Ok(m),
                Some((name, _)) => Err(bad(format!("expected block {expected}, found {name}"))),
                None => Err(bad(format!("missing block {expected}"))),
            }
        };
        let n_layers = if header.config.hidden_dim == 0 { 1 } else { 2 };
        let mut read_params = |prefix: &str| -> Result<EmbedderParams> {
            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let weight = next(&format!("{prefix}.{l}.weight"))?;
                let bias = next(&format!("{prefix}.{l}.bias"))?;
                layers.push(Layer {
                    weight,
                    bias: Vector::from_column_slice(bias.as_slice()),
                });
            }
            EmbedderParams::new(layers)
        };
        let params = read_params("embedder")?;
        let velocity = read_params("velocity")?;
        let projections = ProjectionBank::new(next("projections")?)?;
        let projection_velocity = next("projections.velocity")?;
        let clusters = ClusterBank::new(next("clusters")?, header.config.mu)?;

        let ck = Checkpoint {
            config: header.config,
            feature_dim: header.feature_dim,
            n_base: header.n_base,
            state: TrainState {
                params,
                velocity,
                projections,
                projection_velocity,
                clusters,
                iteration: header.iteration,
                epoch: header.epoch,
                rng,
            },
        };
        if ck.rng_digest() != header.rng_digest {
            return Err(bad("sampler state does not match its digest"));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
