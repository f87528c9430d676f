//! Multi-scale robust/fragile modality selection.
//!
//! At every pyramid level the modality features are compared against their
//! elementwise mean by cosine similarity. The most similar modality is the
//! robust one and the least similar the fragile one; the pair goes through
//! the interaction module and the result is added to the mean feature. The
//! remaining modalities feed a symmetric KL-to-midpoint consistency penalty on
//! their (mapped) similarity to the interaction feature.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::mim::{self, MimParams};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{cosine_value, Tape, Tensor, Var};

/// Lower clamp for mapped similarities before taking logarithms.
pub const MAPPED_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// Pyramid level, 1-based.
    pub scale: usize,
    /// Cosine similarity of each modality to the mean feature, in input order.
    pub scores: Vec<f64>,
    pub robust: usize,
    pub fragile: usize,
    /// Modalities strictly between robust and fragile, by descending score.
    pub remaining: Vec<usize>,
}

/// Cosine similarity of two tensors of equal size; 0 if either has norm
/// below 1e-12.
pub fn cosine<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(cosine_value(a.data(), b.data()).as_f64())
}

/// Elementwise arithmetic mean of equally shaped features.
pub fn mean_feature<S: Scalar>(tape: &mut Tape<S>, features: &[Var]) -> Result<Var> {
    let (&first, rest) = features.split_first().ok_or(Error::Empty("mean_feature"))?;
    let mut acc = first;
    for &f in rest {
        acc = tape.add(acc, f)?;
    }
    tape.binary_scalar(crate::tensor::BinaryKind::Div, acc, S::lit(features.len() as f64))
}

/// Descending stable sort of `scores`; ties keep the lower modality index
/// first.
pub fn rank_scores(scale: usize, scores: Vec<f64>) -> Result<RankingResult> {
    if scores.len() < 2 {
        return Err(Error::TooFewModalities {
            need: 2,
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let robust = order[0];
    let fragile = *order.last().expect("non-empty");
    let remaining = order[1..order.len() - 1].to_vec();
    Ok(RankingResult {
        scale,
        scores,
        robust,
        fragile,
        remaining,
    })
}

pub fn rank_modalities<S: Scalar>(tape: &Tape<S>, features: &[Var], mean: Var, scale: usize) -> Result<RankingResult> {
    let m = tape.value(mean);
    let scores = features
        .iter()
        .map(|&f| cosine(tape.value(f), m))
        .collect::<Result<Vec<_>>>()?;
    rank_scores(scale, scores)
}

/// Mapped similarities of the first two remaining modalities at one level;
/// empty when fewer than two remain.
#[derive(Clone, Debug, Default)]
pub struct ScaleConsistency {
    pub mapped: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MasmOutput {
    pub fused: FeaturePyramid,
    pub rankings: Vec<RankingResult>,
    pub consistency: Vec<ScaleConsistency>,
}

/// `clamp((c + 1) / 2, ε, 1)` on the tape.
pub fn map_similarity<S: Scalar>(tape: &mut Tape<S>, c: Var) -> Result<Var> {
    let shifted = tape.add_scalar(c, S::one())?;
    let half = tape.mul_scalar(shifted, S::lit(0.5))?;
    tape.clamp(half, S::lit(MAPPED_EPS), S::one())
}

pub fn map_similarity_value(c: f64) -> f64 {
    ((c + 1.0) / 2.0).clamp(MAPPED_EPS, 1.0)
}

pub fn masm_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    mim_params: &[MimParams],
    pyramids: &[FeaturePyramid],
) -> Result<MasmOutput> {
    if pyramids.len() < 2 {
        return Err(Error::TooFewModalities {
            need: 2,
            got: pyramids.len(),
        });
    }
    if mim_params.len() != LEVELS {
        return Err(Error::InvalidArgument(format!(
            "expected {LEVELS} interaction parameter sets, got {}",
            mim_params.len()
        )));
    }
    let mut fused = Vec::with_capacity(LEVELS);
    let mut rankings = Vec::with_capacity(LEVELS);
    let mut consistency = Vec::with_capacity(LEVELS);
    for (level, params) in mim_params.iter().enumerate() {
        let feats: Vec<Var> = pyramids.iter().map(|p| p.levels[level]).collect();
        let mean = mean_feature(tape, &feats)?;
        let ranking = rank_modalities(tape, &feats, mean, level + 1)?;
        let f_mim = mim::interact(tape, bound, params, feats[ranking.robust], feats[ranking.fragile])?;
        fused.push(tape.add(f_mim, mean)?);
        let mut mapped = Vec::new();
        if ranking.remaining.len() >= 2 {
            for &j in &ranking.remaining[..2] {
                let c = tape.cosine(feats[j], f_mim)?;
                mapped.push(map_similarity(tape, c)?);
            }
        }
        consistency.push(ScaleConsistency { mapped });
        rankings.push(ranking);
    }
    Ok(MasmOutput {
        fused: FeaturePyramid::new(fused)?,
        rankings,
        consistency,
    })
}

/// `K · [ĉ₁ log(ĉ₁/m) + ĉ₂ log(ĉ₂/m)]` with `m = (ĉ₁ + ĉ₂)/2`.
pub fn pair_divergence_value(c1: f64, c2: f64, classes: usize) -> f64 {
    let m = 0.5 * (c1 + c2);
    classes as f64 * (c1 * (c1 / m).ln() + c2 * (c2 / m).ln())
}

fn pair_divergence<S: Scalar>(tape: &mut Tape<S>, c1: Var, c2: Var, classes: usize) -> Result<Var> {
    let s = tape.add(c1, c2)?;
    let mid = tape.mul_scalar(s, S::lit(0.5))?;
    let mut parts = Vec::with_capacity(2);
    for c in [c1, c2] {
        let ratio = tape.div(c, mid)?;
        let lg = tape.log(ratio)?;
        parts.push(tape.mul(c, lg)?);
    }
    let sum = tape.add(parts[0], parts[1])?;
    tape.mul_scalar(sum, S::lit(classes as f64))
}

/// Mean of the per-level pair divergences over levels that have two mapped
/// similarities; a constant zero when none do.
pub fn consistency_loss<S: Scalar>(tape: &mut Tape<S>, terms: &[ScaleConsistency], classes: usize) -> Result<Var> {
    let mut per_scale = Vec::new();
    for t in terms {
        match t.mapped.as_slice() {
            [] => {}
            [c1, c2, ..] => per_scale.push(pair_divergence(tape, *c1, *c2, classes)?),
            [_] => {
                return Err(Error::InvalidArgument(
                    "a level needs zero or at least two mapped similarities".into(),
                ))
            }
        }
    }
    let Some((&first, rest)) = per_scale.split_first() else {
        return Ok(tape.constant(Tensor::scalar(S::zero())?));
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    tape.binary_scalar(crate::tensor::BinaryKind::Div, acc, S::lit(per_scale.len() as f64))
}

/// Debug dump: one row per (sample, scale, modality).
pub fn write_rankings_csv<W: Write>(mut out: W, rows: &[(usize, Vec<RankingResult>)], modalities: &[String]) -> Result<()> {
    writeln!(out, "sample,scale,modality,cosine,robust,fragile")?;
    for (sample, rankings) in rows {
        for r in rankings {
            for (m, score) in r.scores.iter().enumerate() {
                let name = modalities.get(m).map(String::as_str).unwrap_or("?");
                writeln!(
                    out,
                    "{sample},{},{name},{score:.9},{},{}",
                    r.scale,
                    u8::from(r.robust == m),
                    u8::from(r.fragile == m)
                )?;
            }
        }
    }
    Ok(())
}
