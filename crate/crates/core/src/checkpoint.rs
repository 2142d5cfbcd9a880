//! Checkpoint directories.
//!
//! Layout: `manifest` (JSON: format version, model config, language tags,
//! array order, blob checksums, optimizer/Fisher metadata), `params.bin`
//! (little-endian f32, arrays concatenated row-major in manifest order),
//! optional `opt.bin` (first moments, then second moments) and
//! `fisher.bin` (Fisher diagonals, then the anchor snapshot), plus the two
//! vocabulary files `src.vocab` / `tgt.vocab`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Lang;
use crate::error::{Error, Result};
use crate::model::{FisherDiag, ModelConfig, ModelState};
use crate::optim::{OptimizerState, Schedule};
use crate::tensor::{Matrix, Real};
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn hex64(h: u64) -> String {
    format!("{h:016x}")
}

/// FNV-1a over the f32 little-endian serialization of all parameters.
pub fn param_checksum<T: Real>(model: &ModelState<T>) -> String {
    hex64(fnv1a64(&arrays_to_bytes(model.params())))
}

fn arrays_to_bytes<T: Real>(arrays: &[Matrix<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in arrays {
        out.extend_from_slice(&a.to_f32_bytes());
    }
    out
}

fn arrays_from_bytes(shapes: &[(usize, usize)], bytes: &[u8], file: &str) -> Result<Vec<Matrix<f32>>> {
    let total: usize = shapes.iter().map(|&(r, c)| r * c * 4).sum();
    if bytes.len() != total {
        return Err(Error::CorruptCheckpoint(format!(
            "{file}: expected {total} bytes, found {}",
            bytes.len()
        )));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for &(r, c) in shapes {
        let n = r * c * 4;
        let m = Matrix::from_f32_bytes(r, c, &bytes[offset..offset + n])
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{file}: bad array")))?;
        out.push(m);
        offset += n;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    step: u64,
    schedule: Schedule,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct FisherMeta {
    sample_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    src_lang: String,
    tgt_lang: String,
    arrays: Vec<ArrayMeta>,
    checksums: BTreeMap<String, String>,
    opt: Option<OptMeta>,
    fisher: Option<FisherMeta>,
}

/// Everything a checkpoint directory holds, reloaded at f32.
pub struct CheckpointContents {
    pub model: ModelState<f32>,
    pub opt: Option<OptimizerState<f32>>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub fisher: Option<FisherDiag<f32>>,
}

/// Writes a checkpoint directory; parameters (and moments/Fisher) are cast
/// to f32 on the way out. Deterministic: identical inputs produce byte
/// identical directories.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &ModelState<T>,
    opt: Option<&OptimizerState<T>>,
    vocabs: (&Vocabulary, &Vocabulary),
    fisher: Option<&FisherDiag<T>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();

    let params_bytes = arrays_to_bytes(model.params());
    checksums.insert("params.bin".to_string(), hex64(fnv1a64(&params_bytes)));
    fs::write(dir.join("params.bin"), &params_bytes)?;

    let opt_meta = if let Some(opt) = opt {
        let (m, v) = opt.moments();
        let mut bytes = arrays_to_bytes(m);
        bytes.extend_from_slice(&arrays_to_bytes(v));
        checksums.insert("opt.bin".to_string(), hex64(fnv1a64(&bytes)));
        fs::write(dir.join("opt.bin"), &bytes)?;
        Some(OptMeta {
            step: opt.step(),
            schedule: opt.schedule,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
        })
    } else {
        None
    };

    let fisher_meta = if let Some(f) = fisher {
        let mut bytes = arrays_to_bytes(&f.diag);
        bytes.extend_from_slice(&arrays_to_bytes(&f.anchor));
        checksums.insert("fisher.bin".to_string(), hex64(fnv1a64(&bytes)));
        fs::write(dir.join("fisher.bin"), &bytes)?;
        Some(FisherMeta { sample_count: f.sample_count })
    } else {
        None
    };

    vocabs.0.save(&dir.join("src.vocab"))?;
    vocabs.1.save(&dir.join("tgt.vocab"))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        src_lang: vocabs.0.lang().to_string(),
        tgt_lang: vocabs.1.lang().to_string(),
        arrays: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| ArrayMeta { name: name.clone(), rows: p.rows(), cols: p.cols() })
            .collect(),
        checksums,
        opt: opt_meta,
        fisher: fisher_meta,
    };
    fs::write(dir.join("manifest"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_checked(dir: &Path, manifest: &Manifest, file: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(file))?;
    let expected = manifest
        .checksums
        .get(file)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("manifest lists no checksum for {file}")))?;
    if hex64(fnv1a64(&bytes)) != *expected {
        return Err(Error::ChecksumMismatch { file: file.to_string() });
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointContents> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let shapes: Vec<(usize, usize)> = manifest.arrays.iter().map(|a| (a.rows, a.cols)).collect();

    let params = arrays_from_bytes(&shapes, &read_checked(dir, &manifest, "params.bin")?, "params.bin")?;
    let mut model: ModelState<f32> = ModelState::init(manifest.config.clone())?;
    if model.params().len() != params.len() {
        return Err(Error::CorruptCheckpoint("array count mismatch with config".into()));
    }
    for ((dst, src), meta) in model.params_mut().iter_mut().zip(params).zip(&manifest.arrays) {
        if dst.shape() != src.shape() {
            return Err(Error::CorruptCheckpoint(format!("array {} shape mismatch", meta.name)));
        }
        *dst = src;
    }

    let src_vocab = Vocabulary::load(&dir.join("src.vocab"), Lang::new(manifest.src_lang.clone())?)?;
    let tgt_vocab = Vocabulary::load(&dir.join("tgt.vocab"), Lang::new(manifest.tgt_lang.clone())?)?;

    let opt = if let Some(meta) = &manifest.opt {
        let bytes = read_checked(dir, &manifest, "opt.bin")?;
        let mut both_shapes = shapes.clone();
        both_shapes.extend_from_slice(&shapes);
        let mut arrays = arrays_from_bytes(&both_shapes, &bytes, "opt.bin")?;
        let v = arrays.split_off(shapes.len());
        let mut opt = OptimizerState::new(&model, meta.schedule);
        opt.beta1 = meta.beta1;
        opt.beta2 = meta.beta2;
        opt.eps = meta.eps;
        opt.restore(arrays, v, meta.step)?;
        Some(opt)
    } else {
        None
    };

    let fisher = if let Some(meta) = &manifest.fisher {
        let bytes = read_checked(dir, &manifest, "fisher.bin")?;
        let mut both_shapes = shapes.clone();
        both_shapes.extend_from_slice(&shapes);
        let mut arrays = arrays_from_bytes(&both_shapes, &bytes, "fisher.bin")?;
        let anchor = arrays.split_off(shapes.len());
        Some(FisherDiag { diag: arrays, anchor, sample_count: meta.sample_count })
    } else {
        None
    };

    Ok(CheckpointContents { model, opt, src_vocab, tgt_vocab, fisher })
}
