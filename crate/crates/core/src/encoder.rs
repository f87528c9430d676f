//! Shared-weight hierarchical encoder producing a four-level feature pyramid.
//!
//! Each stage is a strided patch merge (non-overlapping `k×k` gather plus a
//! pointwise linear embedding and layer norm) followed by residual channel-MLP
//! blocks. Stage strides are fixed at 4, 2, 2, 2, giving maps at 1/4, 1/8,
//! 1/16 and 1/32 of the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

pub const LEVELS: usize = 4;
pub const STAGE_DOWNSAMPLE: [usize; LEVELS] = [4, 2, 2, 2];
/// Inputs must be divisible by the product of all stage strides.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; LEVELS],
    pub blocks_per_stage: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64, 96],
            blocks_per_stage: 1,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stage_channels.contains(&0) || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        Ok(())
    }

    /// Output shapes `[C_i, H/2^(i+1), W/2^(i+1)]` for an `H×W` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> [[usize; 3]; LEVELS] {
        let mut out = [[0; 3]; LEVELS];
        let (mut hh, mut ww) = (h, w);
        for (i, &k) in STAGE_DOWNSAMPLE.iter().enumerate() {
            hh /= k;
            ww /= k;
            out[i] = [self.stage_channels[i], hh, ww];
        }
        out
    }
}

/// Four feature maps of one modality, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Var>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::InvalidArgument(format!(
                "feature pyramid needs {LEVELS} levels, got {}",
                levels.len()
            )));
        }
        Ok(Self { levels })
    }
}

#[derive(Clone, Debug)]
struct MixerBlock {
    ln_g: ParamId,
    ln_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Stage {
    patch: usize,
    embed_w: ParamId,
    embed_b: ParamId,
    norm_g: ParamId,
    norm_b: ParamId,
    blocks: Vec<MixerBlock>,
}

/// Parameter handles of the encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderParams {
    stages: Vec<Stage>,
}

impl EncoderParams {
    pub fn init<S: Scalar, R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = cfg.in_channels;
        for (i, (&k, &c)) in STAGE_DOWNSAMPLE.iter().zip(&cfg.stage_channels).enumerate() {
            let fan = cin * k * k;
            let p = format!("encoder.stage{}", i + 1);
            let embed_w = store.uniform(&format!("{p}.embed.weight"), &[c, fan], fan, rng)?;
            let embed_b = store.constant(&format!("{p}.embed.bias"), &[c], 0.0)?;
            let norm_g = store.constant(&format!("{p}.embed_norm.gamma"), &[c], 1.0)?;
            let norm_b = store.constant(&format!("{p}.embed_norm.beta"), &[c], 0.0)?;
            let hidden = c * cfg.mlp_ratio;
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let q = format!("{p}.block{b}");
                blocks.push(MixerBlock {
                    ln_g: store.constant(&format!("{q}.norm.gamma"), &[c], 1.0)?,
                    ln_b: store.constant(&format!("{q}.norm.beta"), &[c], 0.0)?,
                    fc1_w: store.uniform(&format!("{q}.fc1.weight"), &[hidden, c], c, rng)?,
                    fc1_b: store.constant(&format!("{q}.fc1.bias"), &[hidden], 0.0)?,
                    fc2_w: store.uniform(&format!("{q}.fc2.weight"), &[c, hidden], hidden, rng)?,
                    fc2_b: store.constant(&format!("{q}.fc2.bias"), &[c], 0.0)?,
                });
            }
            stages.push(Stage {
                patch: k,
                embed_w,
                embed_b,
                norm_g,
                norm_b,
                blocks,
            });
            cin = c;
        }
        Ok(Self { stages })
    }

    /// Weight of the patch embedding of stage `i` (0-based).
    pub fn embed_weight(&self, stage: usize) -> ParamId {
        self.stages[stage].embed_w
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::IndivisibleInput { h, w });
    }
    Ok(())
}

/// Runs one `[3, H, W]` image through all four stages.
pub fn encode<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, params: &EncoderParams, image: Var) -> Result<FeaturePyramid> {
    let (_, h, w) = tape.value(image).dims3()?;
    check_input_size(h, w)?;
    let mut x = image;
    let mut levels = Vec::with_capacity(LEVELS);
    for stage in &params.stages {
        x = tape.space_to_depth(x, stage.patch)?;
        x = tape.conv1x1(x, bound.var(stage.embed_w), Some(bound.var(stage.embed_b)))?;
        x = tape.layer_norm(x, bound.var(stage.norm_g), bound.var(stage.norm_b))?;
        for blk in &stage.blocks {
            let mut hdn = tape.layer_norm(x, bound.var(blk.ln_g), bound.var(blk.ln_b))?;
            hdn = tape.conv1x1(hdn, bound.var(blk.fc1_w), Some(bound.var(blk.fc1_b)))?;
            hdn = tape.gelu(hdn)?;
            hdn = tape.conv1x1(hdn, bound.var(blk.fc2_w), Some(bound.var(blk.fc2_b)))?;
            x = tape.add(x, hdn)?;
        }
        levels.push(x);
    }
    FeaturePyramid::new(levels)
}

/// Encodes every modality image with the same weights, preserving order.
pub fn encode_batch<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    params: &EncoderParams,
    images: &[Var],
) -> Result<Vec<FeaturePyramid>> {
    let first = *images.first().ok_or(Error::Empty("encode_batch"))?;
    let shape = tape.shape(first).to_vec();
    for &img in &images[1..] {
        if tape.shape(img) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode_batch",
                left: shape,
                right: tape.shape(img).to_vec(),
            });
        }
    }
    images.iter().map(|&img| encode(tape, bound, params, img)).collect()
}
