//! Binary fold container.
//!
//! ```text
//! magic        8 bytes  "BCPTFOLD"
//! version      u32 LE   (1)
//! header_len   u32 LE
//! header       UTF-8 JSON: config, seed, class id sets, scene counts, dims
//! scenes       n_train training scenes, then n_eval evaluation scenes; each:
//!   features     F·H·W f64 LE, plane by plane (channel, then row, then column)
//!   train_labels H·W i32 LE, row-major; -1 = background, else base class id
//!   true_labels  H·W i32 LE, row-major; -1 = actual background, else class id
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Fold, Scene, SceneConfig, TrueLabel};
use crate::cluster::PixelLabel;
use crate::error::{Error, Result};
use crate::Mat;

pub const FOLD_MAGIC: &[u8; 8] = b"BCPTFOLD";
pub const FOLD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: SceneConfig,
    seed: u64,
    base_class_ids: Vec<usize>,
    novel_class_ids: Vec<usize>,
    n_train: usize,
    n_eval: usize,
    height: usize,
    width: usize,
    feature_dim: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "fold container",
        reason: reason.into(),
    }
}

pub fn encode_fold(fold: &Fold) -> Result<Vec<u8>> {
    let header = Header {
        config: fold.config.clone(),
        seed: fold.seed,
        base_class_ids: fold.base_class_ids.clone(),
        novel_class_ids: fold.novel_class_ids.clone(),
        n_train: fold.train_scenes.len(),
        n_eval: fold.eval_scenes.len(),
        height: fold.config.height,
        width: fold.config.width,
        feature_dim: fold.config.feature_dim,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(FOLD_MAGIC);
    out.extend_from_slice(&FOLD_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for scene in fold.train_scenes.iter().chain(&fold.eval_scenes) {
        if scene.features.nrows() != header.feature_dim || scene.pixels() != header.height * header.width {
            return Err(Error::structural("scene dimensions differ from the fold config"));
        }
        for f in 0..scene.features.nrows() {
            for p in 0..scene.pixels() {
                out.extend_from_slice(&scene.features[(f, p)].to_le_bytes());
            }
        }
        for label in &scene.train_labels {
            let v: i32 = match label {
                PixelLabel::Background => -1,
                PixelLabel::Base(c) => *c as i32,
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
        for label in &scene.true_labels {
            let v: i32 = match label {
                TrueLabel::Background => -1,
                TrueLabel::Class(c) => *c as i32,
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_fold(bytes: &[u8]) -> Result<Fold> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != FOLD_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != FOLD_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(e.to_string()))?;
    let n = header.height * header.width;
    let mut scenes = Vec::with_capacity(header.n_train + header.n_eval);
    for _ in 0..header.n_train + header.n_eval {
        let mut features = Mat::zeros(header.feature_dim, n);
        for f in 0..header.feature_dim {
            for p in 0..n {
                features[(f, p)] = r.f64()?;
            }
        }
        let mut train_labels = Vec::with_capacity(n);
        for _ in 0..n {
            train_labels.push(match r.i32()? {
                -1 => PixelLabel::Background,
                c if c >= 0 => PixelLabel::Base(c as usize),
                c => return Err(bad(format!("bad training label {c}"))),
            });
        }
        let mut true_labels = Vec::with_capacity(n);
        for _ in 0..n {
            true_labels.push(match r.i32()? {
                -1 => TrueLabel::Background,
                c if c >= 0 => TrueLabel::Class(c as usize),
                c => return Err(bad(format!("bad true label {c}"))),
            });
        }
        scenes.push(Scene {
            height: header.height,
            width: header.width,
            features,
            train_labels,
            true_labels,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let eval_scenes = scenes.split_off(header.n_train);
    Ok(Fold {
        config: header.config,
        seed: header.seed,
        train_scenes: scenes,
        eval_scenes,
        base_class_ids: header.base_class_ids,
        novel_class_ids: header.novel_class_ids,
    })
}

pub fn write_fold(fold: &Fold, path: &Path) -> Result<()> {
    let bytes = encode_fold(fold)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fold(path: &Path) -> Result<Fold> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fold(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_fold;

    #[test]
    fn round_trip() {
        let cfg = SceneConfig {
            height: 6,
            width: 5,
            ..SceneConfig::default()
        };
        let fold = make_fold(&cfg, 2, 2, 3).unwrap();
        let bytes = encode_fold(&fold).unwrap();
        assert_eq!(&bytes[..8], FOLD_MAGIC);
        assert_eq!(decode_fold(&bytes).unwrap(), fold);
    }

    #[test]
    fn rejects_truncated_and_corrupt() {
        let cfg = SceneConfig {
            height: 4,
            width: 4,
            ..SceneConfig::default()
        };
        let bytes = encode_fold(&make_fold(&cfg, 1, 1, 0).unwrap()).unwrap();
        assert!(decode_fold(&bytes[..bytes.len() - 3]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(decode_fold(&corrupt).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_fold(&extra).is_err());
    }
}
