//! All-MLP decode head and the training objectives.

use rand::Rng;

use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub classes: usize,
    pub embed_dim: usize,
    pub proj_w: Vec<ParamId>,
    pub proj_b: Vec<ParamId>,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl HeadParams {
    pub fn init<S: Scalar, R: Rng>(
        level_channels: &[usize; LEVELS],
        embed_dim: usize,
        classes: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let mut proj_w = Vec::with_capacity(LEVELS);
        let mut proj_b = Vec::with_capacity(LEVELS);
        for (i, &c) in level_channels.iter().enumerate() {
            proj_w.push(store.uniform(&format!("head.proj{}.weight", i + 1), &[embed_dim, c], c, rng)?);
            proj_b.push(store.constant(&format!("head.proj{}.bias", i + 1), &[embed_dim], 0.0)?);
        }
        let cat = LEVELS * embed_dim;
        Ok(Self {
            classes,
            embed_dim,
            proj_w,
            proj_b,
            fuse_w: store.uniform("head.fuse.weight", &[embed_dim, cat], cat, rng)?,
            fuse_b: store.constant("head.fuse.bias", &[embed_dim], 0.0)?,
            cls_w: store.uniform("head.classifier.weight", &[classes, embed_dim], embed_dim, rng)?,
            cls_b: store.constant("head.classifier.bias", &[classes], 0.0)?,
        })
    }
}

/// Projects every level to the embedding width, resamples to the finest
/// grid, fuses, classifies, and resamples the logits to `out_h × out_w`.
pub fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    p: &HeadParams,
    pyramid: &FeaturePyramid,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    if pyramid.levels.len() != LEVELS {
        return Err(Error::InvalidArgument(format!(
            "decode expects {LEVELS} levels, got {}",
            pyramid.levels.len()
        )));
    }
    let (_, gh, gw) = tape.value(pyramid.levels[0]).dims3()?;
    let mut projected = Vec::with_capacity(LEVELS);
    for (i, &lvl) in pyramid.levels.iter().enumerate() {
        let y = tape.conv1x1(lvl, bound.var(p.proj_w[i]), Some(bound.var(p.proj_b[i])))?;
        projected.push(tape.resample_bilinear(y, gh, gw)?);
    }
    let cat = tape.concat(&projected)?;
    let fused = tape.conv1x1(cat, bound.var(p.fuse_w), Some(bound.var(p.fuse_b)))?;
    let fused = tape.gelu(fused)?;
    let logits = tape.conv1x1(fused, bound.var(p.cls_w), Some(bound.var(p.cls_b)))?;
    tape.resample_bilinear(logits, out_h, out_w)
}

/// Pixel-mean cross-entropy over non-ignored labels.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `L = L_M + β · L_C`.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, l_m: Var, l_c: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("beta must be a finite non-negative number, got {beta}")));
    }
    let weighted = tape.mul_scalar(l_c, S::lit(beta))?;
    tape.add(l_m, weighted)
}

/// Per-pixel argmax over the class axis; ties resolve to the lowest class id.
pub fn argmax_classes<S: Scalar>(logits: &[S], classes: usize) -> Vec<u8> {
    let n = logits.len() / classes;
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * n + p] > logits[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
