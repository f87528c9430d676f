//! Binary checkpoint: little-endian, `f64` payloads regardless of the
//! training precision.
//!
//! ```text
//! magic "ASCK" | version u32 | config (u32 len + TOML) | mim order (u32 len + utf8)
//! epoch u64 | rng seed [u8; 32] | rng stream u64 | rng word pos u128 | adam step u64
//! tensor count u32 | per tensor: name, ndim u32, dims u32.., values, adam m, adam v
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::Reader;
use crate::tensor::Tensor;

use super::{AdamW, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Argument order of the interaction module, recorded so that a model is
/// never evaluated with the roles swapped.
pub const MIM_ARGUMENT_ORDER: &str = "robust,fragile";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_values<S: Scalar>(buf: &mut Vec<u8>, vals: &[S]) {
    for v in vals {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

fn get_values<S: Scalar>(r: &mut Reader<'_>, n: usize) -> Result<Vec<S>> {
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("tensor too large".into()))?)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

pub fn encode_checkpoint<S: Scalar>(trainer: &Trainer<S>) -> Result<Vec<u8>> {
    let mut cfg = trainer.config.clone();
    cfg.model.modalities = Some(trainer.model.config.modalities.clone());
    cfg.model.classes = Some(trainer.model.config.classes);

    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &cfg.to_toml_string()?)?;
    put_str(&mut buf, MIM_ARGUMENT_ORDER)?;
    buf.extend_from_slice(&(trainer.epoch as u64).to_le_bytes());
    let rng = trainer.shuffle_rng();
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    buf.extend_from_slice(&trainer.optim.step.to_le_bytes());
    let store = &trainer.model.store;
    put_u32(&mut buf, store.len())?;
    for (i, (name, t)) in store.iter().enumerate() {
        put_str(&mut buf, name)?;
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        put_values(&mut buf, t.data());
        put_values(&mut buf, &trainer.optim.m[i]);
        put_values(&mut buf, &trainer.optim.v[i]);
    }
    Ok(buf)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Trainer<S>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config = TrainConfig::from_toml_str(&r.string()?)?;
    let order = r.string()?;
    if order != MIM_ARGUMENT_ORDER {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint interaction order {order:?}, expected {MIM_ARGUMENT_ORDER:?}"
        )));
    }
    let epoch = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let step = r.u64()?;

    let modalities = config
        .model
        .modalities
        .clone()
        .ok_or_else(|| Error::Malformed("checkpoint config lacks modalities".into()))?;
    let classes = config
        .model
        .classes
        .ok_or_else(|| Error::Malformed("checkpoint config lacks classes".into()))?;
    let mut model = Model::<S>::new(config.resolve_model(&modalities, classes)?, config.seed)?;
    let mut optim = AdamW::new(&config.optim, &model.store);
    optim.step = step;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {count} tensors, model has {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = r.string()?;
        if name != model.store.name(id) {
            return Err(Error::ConfigMismatch(format!(
                "tensor {i} is {name:?}, model expects {:?}",
                model.store.name(id)
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.store.get(id).shape() {
            return Err(Error::ConfigMismatch(format!(
                "tensor {name:?} has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let values = get_values::<S>(&mut r, n)?;
        model.store.set(id, Tensor::new(&shape, values)?)?;
        optim.m[i] = get_values(&mut r, n)?;
        optim.v[i] = get_values(&mut r, n)?;
    }
    r.finish()?;

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(Trainer::from_parts(config, model, optim, epoch, rng))
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, trainer: &Trainer<S>) -> Result<()> {
    fs::write(path, encode_checkpoint(trainer)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Trainer<S>> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    Ok(load_checkpoint::<S>(path)?.model)
}
