//! Checkpoints: every parameter tensor by name, the optimizer moments,
//! the vocabulary, the iteration counter and the config digest, in one
//! little-endian binary file. Loading rebuilds the model from the config
//! and overwrites its parameters, so a load followed by a forward pass
//! reproduces the pre-save forward bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{path_str, push_u32, Reader};
use crate::model::Model;
use crate::optim::{AdamW, MomentSlot};
use crate::responder::Vocab;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_str(r: &mut Reader, path: &Path) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| Error::format(path_str(path), "non-utf8 string"))
}

fn read_f64s(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.f64()?);
    }
    Ok(out)
}

/// Serializes the model (plus optimizer state when given) to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    opt: Option<&AdamW>,
    iteration: u64,
    config_digest: &str,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_str(&mut buf, config_digest);
    buf.extend_from_slice(&iteration.to_le_bytes());

    let symbols = model.responder.vocab.symbols().to_vec();
    push_u32(&mut buf, symbols.len() as u32);
    for s in &symbols {
        push_str(&mut buf, s);
    }

    let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.for_each_param(&mut |p| {
        params.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
    });
    let mut seen = std::collections::BTreeSet::new();
    for (name, _, _) in &params {
        if !seen.insert(name.clone()) {
            return Err(Error::InvalidArgument {
                op: "save_checkpoint",
                msg: format!("duplicate parameter name {name}"),
            });
        }
    }
    push_u32(&mut buf, params.len() as u32);
    for (name, shape, data) in &params {
        push_str(&mut buf, name);
        push_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            push_u32(&mut buf, d as u32);
        }
        push_f64s(&mut buf, data);
    }

    match opt {
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&(opt.iter as u64).to_le_bytes());
            push_u32(&mut buf, opt.slots.len() as u32);
            for (name, slot) in &opt.slots {
                push_str(&mut buf, name);
                push_u32(&mut buf, slot.m.len() as u32);
                push_f64s(&mut buf, slot.m.data());
                push_f64s(&mut buf, slot.v.data());
            }
        }
        None => buf.push(0),
    }

    fs::write(path, buf).map_err(|e| Error::io(path_str(path), e))
}

/// Loads a checkpoint written by [`save_checkpoint`]. The config must
/// digest to the value stored in the file; the rebuilt model's parameter
/// set must match the stored one exactly.
pub fn load_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(Model, Option<AdamW>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = Reader::new(&bytes, path);

    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path_str(path), "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path_str(path),
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let digest = read_str(&mut r, path)?;
    if digest != cfg.digest() {
        return Err(Error::format(
            path_str(path),
            format!(
                "checkpoint was written with a different config (digest {}…, config digests to {}…)",
                &digest[..digest.len().min(12)],
                &cfg.digest()[..12]
            ),
        ));
    }
    let iteration = r.u64()?;

    let n_sym = r.u32()? as usize;
    let mut symbols = Vec::with_capacity(n_sym);
    for _ in 0..n_sym {
        symbols.push(read_str(&mut r, path)?);
    }

    let n_params = r.u32()? as usize;
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_params {
        let name = read_str(&mut r, path)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = read_f64s(&mut r, len)?;
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::format(path_str(path), format!("parameter {name}: {e}")))?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::format(
                path_str(path),
                format!("duplicate parameter {name}"),
            ));
        }
    }

    let opt = match r.take(1)?[0] {
        0 => None,
        1 => {
            let iter = r.u64()? as usize;
            let n_slots = r.u32()? as usize;
            let mut slots = BTreeMap::new();
            for _ in 0..n_slots {
                let name = read_str(&mut r, path)?;
                let len = r.u32()? as usize;
                let shape = stored
                    .get(&name)
                    .map(|t| t.shape().to_vec())
                    .ok_or_else(|| {
                        Error::format(
                            path_str(path),
                            format!("optimizer slot {name} has no matching parameter"),
                        )
                    })?;
                if shape.iter().product::<usize>() != len {
                    return Err(Error::format(
                        path_str(path),
                        format!("optimizer slot {name} length {len} does not match its parameter"),
                    ));
                }
                let m = read_f64s(&mut r, len)?;
                let v = read_f64s(&mut r, len)?;
                let mk = |d: Vec<f64>| {
                    Tensor::new(shape.clone(), d).map_err(|e| {
                        Error::format(path_str(path), format!("slot {name}: {e}"))
                    })
                };
                let slot = MomentSlot {
                    m: mk(m)?,
                    v: mk(v)?,
                };
                slots.insert(name, slot);
            }
            let mut adamw = AdamW::new(cfg.optimizer);
            adamw.iter = iter;
            adamw.slots = slots;
            Some(adamw)
        }
        other => {
            return Err(Error::format(
                path_str(path),
                format!("bad optimizer flag {other}"),
            ))
        }
    };
    r.finish()?;

    let mut model = Model::new(cfg, &mut ChaCha12Rng::seed_from_u64(0))?;
    if symbols != model.responder.vocab.symbols() {
        return Err(Error::format(
            path_str(path),
            "stored vocabulary does not match the config",
        ));
    }
    model.responder.vocab = Vocab::from_symbols(symbols)?;

    let mut missing: Vec<String> = Vec::new();
    let mut err: Option<Error> = None;
    model.for_each_param(&mut |p| {
        if err.is_some() {
            return;
        }
        match stored.remove(&p.name) {
            Some(t) => {
                if t.shape() != p.value.shape() {
                    err = Some(Error::format(
                        path_str(path),
                        format!(
                            "parameter {} has shape {:?}, expected {:?}",
                            p.name,
                            t.shape(),
                            p.value.shape()
                        ),
                    ));
                } else {
                    p.value = t;
                }
            }
            None => missing.push(p.name.clone()),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::format(
            path_str(path),
            format!("missing parameters: {}", missing.join(", ")),
        ));
    }
    if !stored.is_empty() {
        let extra: Vec<String> = stored.keys().cloned().collect();
        return Err(Error::format(
            path_str(path),
            format!("unknown parameters: {}", extra.join(", ")),
        ));
    }

    Ok((model, opt, iteration))
}
