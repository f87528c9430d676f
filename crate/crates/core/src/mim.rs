//! Cross-rectification of a (robust, fragile) feature pair.
//!
//! Channel step: both maps are summarized by global average and max pooling,
//! an MLP over the concatenated summaries yields one sigmoid gate per channel
//! and map, and each map receives the other map scaled by its gate. Spatial
//! step: a pointwise mix of the concatenated maps yields one sigmoid gate per
//! pixel and map, applied the same way. A pointwise linear fusion of the two
//! rectified maps produces the interaction feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{PoolKind, Tape, Var};

/// Parameters of one pyramid level.
#[derive(Clone, Debug)]
pub struct MimParams {
    pub channels: usize,
    pub ch_w1: ParamId,
    pub ch_b1: ParamId,
    pub ch_w2: ParamId,
    pub ch_b2: ParamId,
    pub sp_w: ParamId,
    pub sp_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl MimParams {
    pub fn init<S: Scalar, R: Rng>(prefix: &str, c: usize, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        let (c2, c4) = (2 * c, 4 * c);
        Ok(Self {
            channels: c,
            ch_w1: store.uniform(&format!("{prefix}.channel.fc1.weight"), &[c2, c4], c4, rng)?,
            ch_b1: store.constant(&format!("{prefix}.channel.fc1.bias"), &[c2], 0.0)?,
            ch_w2: store.uniform(&format!("{prefix}.channel.fc2.weight"), &[c2, c2], c2, rng)?,
            ch_b2: store.constant(&format!("{prefix}.channel.fc2.bias"), &[c2], 0.0)?,
            sp_w: store.uniform(&format!("{prefix}.spatial.weight"), &[2, c2], c2, rng)?,
            sp_b: store.constant(&format!("{prefix}.spatial.bias"), &[2], 0.0)?,
            fuse_w: store.uniform(&format!("{prefix}.fuse.weight"), &[c, c2], c2, rng)?,
            fuse_b: store.constant(&format!("{prefix}.fuse.bias"), &[c], 0.0)?,
        })
    }
}

/// Result of the channel step: rectified maps and both gate vectors.
#[derive(Clone, Copy, Debug)]
pub struct ChannelRectified {
    pub a: Var,
    pub b: Var,
    pub gate_a: Var,
    pub gate_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialRectified {
    pub a: Var,
    pub b: Var,
    pub gate_a: Var,
    pub gate_b: Var,
}

fn check_pair<S: Scalar>(tape: &Tape<S>, op: &'static str, a: Var, b: Var, c: usize) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 3 || sa[0] != c {
        return Err(Error::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    Ok(())
}

pub fn rectify_channel<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    p: &MimParams,
    fa: Var,
    fb: Var,
) -> Result<ChannelRectified> {
    check_pair(tape, "rectify_channel", fa, fb, p.channels)?;
    let c = p.channels;
    let mut summary = Vec::with_capacity(4);
    for f in [fa, fb] {
        summary.push(tape.pool_global(f, PoolKind::Avg)?);
        summary.push(tape.pool_global(f, PoolKind::Max)?);
    }
    let z = tape.concat(&summary)?;
    let z = tape.reshape(z, &[4 * c, 1, 1])?;
    let hdn = tape.conv1x1(z, bound.var(p.ch_w1), Some(bound.var(p.ch_b1)))?;
    let hdn = tape.gelu(hdn)?;
    let logits = tape.conv1x1(hdn, bound.var(p.ch_w2), Some(bound.var(p.ch_b2)))?;
    let gates = tape.sigmoid(logits)?;
    let gate_a = tape.slice(gates, 0, c)?;
    let gate_b = tape.slice(gates, c, c)?;
    let b_into_a = tape.scale_channels(fb, gate_b)?;
    let a_into_b = tape.scale_channels(fa, gate_a)?;
    let a = tape.add(fa, b_into_a)?;
    let b = tape.add(fb, a_into_b)?;
    Ok(ChannelRectified { a, b, gate_a, gate_b })
}

pub fn rectify_spatial<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    p: &MimParams,
    fa: Var,
    fb: Var,
) -> Result<SpatialRectified> {
    check_pair(tape, "rectify_spatial", fa, fb, p.channels)?;
    let both = tape.concat(&[fa, fb])?;
    let logits = tape.conv1x1(both, bound.var(p.sp_w), Some(bound.var(p.sp_b)))?;
    let maps = tape.sigmoid(logits)?;
    let gate_a = tape.slice(maps, 0, 1)?;
    let gate_b = tape.slice(maps, 1, 1)?;
    let b_into_a = tape.scale_spatial(fb, gate_b)?;
    let a_into_b = tape.scale_spatial(fa, gate_a)?;
    let a = tape.add(fa, b_into_a)?;
    let b = tape.add(fb, a_into_b)?;
    Ok(SpatialRectified { a, b, gate_a, gate_b })
}

pub fn fuse<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, p: &MimParams, fa: Var, fb: Var) -> Result<Var> {
    check_pair(tape, "mim_fuse", fa, fb, p.channels)?;
    let both = tape.concat(&[fa, fb])?;
    tape.conv1x1(both, bound.var(p.fuse_w), Some(bound.var(p.fuse_b)))
}

/// Full interaction: channel rectification, spatial rectification, fusion.
/// `robust` and `fragile` are passed in that order.
pub fn interact<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, p: &MimParams, robust: Var, fragile: Var) -> Result<Var> {
    let ch = rectify_channel(tape, bound, p, robust, fragile)?;
    let sp = rectify_spatial(tape, bound, p, ch.a, ch.b)?;
    fuse(tape, bound, p, sp.a, sp.b)
}
