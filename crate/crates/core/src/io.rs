//! Versioned little-endian binary files for corpora and checkpoints.
//!
//! Corpus layout:
//!
//! ```text
//! "BACLCORP" u32 version
//! u64 spec_len, spec JSON bytes
//! u8 split, u64 n, u32 m, u32 l, u32 d
//! per sample: u64 id, i64 sibling_of (-1 = none), u32 mask_len, u32 mask[..],
//!             f64 x[m·d], f64 y[l·d]
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "BACLCKPT" u32 version
//! u64 header_len, header JSON bytes
//! u32 tensor_count, per tensor: u32 rank, u64 dims[rank], f64 data[..]
//! ```
//!
//! The tensor list is the five encoder tensors, the four policy tensors,
//! then the optimizer's first and second moments (absent for SGD).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use bacl_numerics::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bns::PolicyParams;
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::synthdata::{Corpus, CorpusSpec, Sample, Split};
use crate::trainer::config::OptimizerConfig;
use crate::trainer::optim::Optimizer;
use crate::trainer::Model;

const CORPUS_MAGIC: &[u8; 8] = b"BACLCORP";
const CHECKPOINT_MAGIC: &[u8; 8] = b"BACLCKPT";
const VERSION: u32 = 1;

fn fmt_err(kind: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        kind,
        detail: detail.into(),
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
    for &d in t.shape() {
        out.write_u64::<LittleEndian>(d as u64).unwrap();
    }
    for &v in t.data() {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn get_tensor(cur: &mut Cursor<&[u8]>, kind: &'static str) -> Result<Tensor> {
    let e = |_| fmt_err(kind, "truncated tensor");
    let rank = cur.read_u32::<LittleEndian>().map_err(e)? as usize;
    if rank > 8 {
        return Err(fmt_err(kind, format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.read_u64::<LittleEndian>().map_err(e)? as usize);
    }
    let n: usize = shape.iter().product();
    let remaining = cur.get_ref().len() as u64 - cur.position();
    if (n as u64) * 8 > remaining {
        return Err(fmt_err(kind, "truncated tensor data"));
    }
    let mut data = vec![0.0; n];
    cur.read_f64_into::<LittleEndian>(&mut data).map_err(e)?;
    Tensor::new(shape, data).map_err(|err| fmt_err(kind, err.to_string()))
}

fn check_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 8], kind: &'static str) -> Result<()> {
    let mut m = [0u8; 8];
    cur.read_exact(&mut m).map_err(|_| fmt_err(kind, "file too short"))?;
    if &m != magic {
        return Err(fmt_err(kind, "bad magic"));
    }
    let v = cur.read_u32::<LittleEndian>().map_err(|_| fmt_err(kind, "missing version"))?;
    if v != VERSION {
        return Err(fmt_err(kind, format!("unsupported version {v}")));
    }
    Ok(())
}

fn get_json<T: for<'de> Deserialize<'de>>(cur: &mut Cursor<&[u8]>, kind: &'static str) -> Result<T> {
    let len = cur.read_u64::<LittleEndian>().map_err(|_| fmt_err(kind, "missing header"))? as usize;
    let remaining = cur.get_ref().len() as u64 - cur.position();
    if len as u64 > remaining {
        return Err(fmt_err(kind, "truncated header"));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(|_| fmt_err(kind, "truncated header"))?;
    serde_json::from_slice(&buf).map_err(|e| fmt_err(kind, e.to_string()))
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    out.write_u64::<LittleEndian>(bytes.len() as u64).unwrap();
    out.extend_from_slice(&bytes);
    Ok(())
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    put_json(&mut out, &corpus.spec)?;
    let s = &corpus.spec;
    out.write_u8(corpus.split.code()).unwrap();
    out.write_u64::<LittleEndian>(corpus.len() as u64).unwrap();
    out.write_u32::<LittleEndian>(s.m_tokens as u32).unwrap();
    out.write_u32::<LittleEndian>(s.l_tokens as u32).unwrap();
    out.write_u32::<LittleEndian>(s.d_latent as u32).unwrap();
    for sample in &corpus.samples {
        out.write_u64::<LittleEndian>(sample.id as u64).unwrap();
        out.write_i64::<LittleEndian>(sample.sibling_of.map_or(-1, |v| v as i64)).unwrap();
        out.write_u32::<LittleEndian>(sample.mismatch_mask.len() as u32).unwrap();
        for &p in &sample.mismatch_mask {
            out.write_u32::<LittleEndian>(p as u32).unwrap();
        }
        for &v in sample.x_tokens.data().iter().chain(sample.y_tokens.data()) {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    Ok(out)
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Corpus> {
    const K: &str = "corpus";
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, CORPUS_MAGIC, K)?;
    let spec: CorpusSpec = get_json(&mut cur, K)?;
    let e = |_| fmt_err(K, "truncated body");
    let split = Split::from_code(cur.read_u8().map_err(e)?).ok_or(fmt_err(K, "unknown split"))?;
    let n = cur.read_u64::<LittleEndian>().map_err(e)? as usize;
    let m = cur.read_u32::<LittleEndian>().map_err(e)? as usize;
    let l = cur.read_u32::<LittleEndian>().map_err(e)? as usize;
    let d = cur.read_u32::<LittleEndian>().map_err(e)? as usize;
    if m != spec.m_tokens || l != spec.l_tokens || d != spec.d_latent {
        return Err(fmt_err(K, "dimensions disagree with the embedded spec"));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = cur.read_u64::<LittleEndian>().map_err(e)? as usize;
        let sib = cur.read_i64::<LittleEndian>().map_err(e)?;
        let mask_len = cur.read_u32::<LittleEndian>().map_err(e)? as usize;
        if mask_len > l {
            return Err(fmt_err(K, "mask longer than token count"));
        }
        let mut mask = Vec::with_capacity(mask_len);
        for _ in 0..mask_len {
            mask.push(cur.read_u32::<LittleEndian>().map_err(e)? as usize);
        }
        let mut x = vec![0.0; m * d];
        cur.read_f64_into::<LittleEndian>(&mut x).map_err(e)?;
        let mut y = vec![0.0; l * d];
        cur.read_f64_into::<LittleEndian>(&mut y).map_err(e)?;
        samples.push(Sample {
            id,
            x_tokens: Tensor::new(vec![m, d], x).map_err(|err| fmt_err(K, err.to_string()))?,
            y_tokens: Tensor::new(vec![l, d], y).map_err(|err| fmt_err(K, err.to_string()))?,
            mismatch_mask: mask,
            sibling_of: (sib >= 0).then_some(sib as usize),
        });
    }
    if cur.position() as usize != bytes.len() {
        return Err(fmt_err(K, "trailing bytes"));
    }
    if samples.iter().enumerate().any(|(i, s)| s.id != i) {
        return Err(fmt_err(K, "sample ids are not 0..n in order"));
    }
    Ok(Corpus { spec, split, samples })
}

/// Writes the corpus and a `<path>.json` sidecar holding its spec.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, &corpus_to_bytes(corpus)?)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let mut json = serde_json::to_vec_pretty(&corpus.spec)?;
    json.push(b'\n');
    write_atomic(Path::new(&sidecar), &json)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    corpus_from_bytes(&read_bytes(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    epoch: usize,
    dims: EncoderDims,
    optimizer: OptimizerConfig,
    lr: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: Model,
    pub optimizer: Optimizer,
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    put_json(
        &mut out,
        &CheckpointHeader {
            epoch: ckpt.epoch,
            dims: ckpt.model.encoder.dims,
            optimizer: ckpt.optimizer.config,
            lr: ckpt.optimizer.lr,
            step: ckpt.optimizer.step,
        },
    )?;
    let tensors: Vec<&Tensor> = ckpt
        .model
        .tensors()
        .into_iter()
        .chain(ckpt.optimizer.first.iter())
        .chain(ckpt.optimizer.second.iter())
        .collect();
    out.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for t in tensors {
        put_tensor(&mut out, t);
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    const K: &str = "checkpoint";
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, CHECKPOINT_MAGIC, K)?;
    let header: CheckpointHeader = get_json(&mut cur, K)?;
    let count = cur.read_u32::<LittleEndian>().map_err(|_| fmt_err(K, "missing tensor count"))? as usize;
    let moments = match header.optimizer {
        OptimizerConfig::Sgd => 0,
        OptimizerConfig::Adamw { .. } => 18,
    };
    if count != 9 + moments {
        return Err(fmt_err(K, format!("expected {} tensors, found {count}", 9 + moments)));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(get_tensor(&mut cur, K)?);
    }
    if cur.position() as usize != bytes.len() {
        return Err(fmt_err(K, "trailing bytes"));
    }
    let second = tensors.split_off(9 + moments / 2);
    let first = tensors.split_off(9);
    let policy: [Tensor; 4] = tensors.split_off(5).try_into().expect("four policy tensors");
    let enc: [Tensor; 5] = tensors.try_into().expect("five encoder tensors");
    let encoder = EncoderParams::from_tensors(header.dims, enc)?;
    let policy = PolicyParams::from_tensors(policy)?;
    if policy.input_dim() != 3 * header.dims.d_embed {
        return Err(fmt_err(K, "policy input width does not match d_embed"));
    }
    let model = Model { encoder, policy };
    let mut optimizer = Optimizer::new(header.optimizer, header.lr, &[]);
    optimizer.step = header.step;
    optimizer.first = first;
    optimizer.second = second;
    Ok(Checkpoint {
        epoch: header.epoch,
        model,
        optimizer,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&read_bytes(path)?)
}
