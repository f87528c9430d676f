//! The full segmentation model: shared encoder, per-level interaction
//! modules, and the decode head, all stored in one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderParams, FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::head::{self, HeadParams};
use crate::masm::{self, RankingResult};
use crate::mim::MimParams;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::synth::ModalityScene;
use crate::tensor::{Tape, Tensor, Var};

fn default_embed_dim() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Modality names in the order the model expects its inputs.
    pub modalities: Vec<String>,
    pub classes: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub input_norm: InputNorm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.modalities.len() > crate::eval::MAX_MODALITIES {
            return Err(Error::Config(format!(
                "at most {} modalities are supported, got {}",
                crate::eval::MAX_MODALITIES,
                self.modalities.len()
            )));
        }
        for (i, name) in self.modalities.iter().enumerate() {
            if name.is_empty() || self.modalities[..i].contains(name) {
                return Err(Error::Config(format!("modality names must be unique and non-empty: {name:?}")));
            }
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!("classes must be in 2..=255, got {}", self.classes)));
        }
        self.encoder.validate()
    }
}

/// Preprocessing applied to every modality image before the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// Raw `[0, 1]` values.
    None,
    /// Per image and channel: subtract the mean, divide by
    /// `sqrt(var + INPUT_NORM_EPS)`.
    #[default]
    PerImage,
}

pub const INPUT_NORM_EPS: f64 = 1e-2;

/// Standardizes each channel of a `[C, H, W]` image.
pub fn standardize_image<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = img.dims3()?;
    let n = h * w;
    let mut out = Vec::with_capacity(c * n);
    for ch in img.data().chunks_exact(n) {
        let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + INPUT_NORM_EPS).sqrt();
        out.extend(ch.iter().map(|v| S::lit((v.as_f64() - mean) * inv)));
    }
    debug_assert_eq!(out.len(), c * n);
    Tensor::new(img.shape(), out)
}

/// How modality features are combined during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Robust/fragile selection with the interaction module and the
    /// consistency loss.
    #[default]
    Selection,
    /// Plain per-level mean of all modalities; no interaction, no
    /// consistency term.
    MeanFusion,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub encoder: EncoderParams,
    pub mim: Vec<MimParams>,
    pub head: HeadParams,
}

/// Result of one training forward pass, still on the tape.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub bound: Bound,
    pub seg_loss: Var,
    pub consistency_loss: Var,
    pub total: Var,
    pub rankings: Vec<RankingResult>,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialised model; the same seed gives the same
    /// weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&config.encoder, &mut store, &mut rng)?;
        let mim = (0..LEVELS)
            .map(|i| {
                MimParams::init(
                    &format!("mim.level{}", i + 1),
                    config.encoder.stage_channels[i],
                    &mut store,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = HeadParams::init(
            &config.encoder.stage_channels,
            config.embed_dim,
            config.classes,
            &mut store,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            mim,
            head,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.config.modalities.len()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Encoder input for modality `m` of `scene`.
    pub fn input(&self, scene: &ModalityScene, m: usize) -> Result<Tensor<S>> {
        let raw = scene.image_tensor::<S>(m)?;
        match self.config.input_norm {
            InputNorm::None => Ok(raw),
            InputNorm::PerImage => standardize_image(&raw),
        }
    }

    fn check_scene(&self, scene: &ModalityScene) -> Result<()> {
        if scene.modality_count() != self.modality_count() {
            return Err(Error::ModalityMismatch {
                model: self.config.modalities.clone(),
                data: vec![format!("<{} modalities>", scene.modality_count())],
            });
        }
        encoder::check_input_size(scene.height, scene.width)
    }

    /// Encodes all modalities of `scene` and computes `L_M`, `L_C` and
    /// `L = L_M + β·L_C` on `tape`.
    pub fn train_forward(
        &self,
        tape: &mut Tape<S>,
        scene: &ModalityScene,
        mode: FusionMode,
        beta: f64,
    ) -> Result<TrainForward> {
        self.check_scene(scene)?;
        let bound = self.store.bind(tape, true);
        let images = (0..scene.modality_count())
            .map(|m| Ok(tape.constant(self.input(scene, m)?)))
            .collect::<Result<Vec<_>>>()?;
        let pyramids = encoder::encode_batch(tape, &bound, &self.encoder, &images)?;
        let (fused, consistency_loss, rankings) = match mode {
            FusionMode::Selection => {
                let out = masm::masm_forward(tape, &bound, &self.mim, &pyramids)?;
                let lc = masm::consistency_loss(tape, &out.consistency, self.classes())?;
                (out.fused, lc, out.rankings)
            }
            FusionMode::MeanFusion => {
                let fused = mean_pyramid(tape, &pyramids)?;
                (fused, tape.constant(Tensor::scalar(S::zero())?), Vec::new())
            }
        };
        let logits = head::decode(tape, &bound, &self.head, &fused, scene.height, scene.width)?;
        let seg_loss = head::cross_entropy(tape, logits, &scene.labels)?;
        let total = head::total_loss(tape, seg_loss, consistency_loss, beta)?;
        Ok(TrainForward {
            bound,
            seg_loss,
            consistency_loss,
            total,
            rankings,
        })
    }

    /// Per-level features of every modality, computed without gradients.
    pub fn encode_scene(&self, scene: &ModalityScene) -> Result<Vec<Vec<Tensor<S>>>> {
        self.check_scene(scene)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        (0..scene.modality_count())
            .map(|m| {
                let img = tape.constant(self.input(scene, m)?);
                let pyr = encoder::encode(&mut tape, &bound, &self.encoder, img)?;
                Ok(pyr.levels.iter().map(|&v| tape.value(v).clone()).collect())
            })
            .collect()
    }

    /// Logits `[K, out_h, out_w]` from the per-level mean of the given
    /// modality features.
    pub fn decode_subset(&self, features: &[&[Tensor<S>]], out_h: usize, out_w: usize) -> Result<Tensor<S>> {
        if features.is_empty() {
            return Err(Error::Empty("decode_subset"));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let pyramids = features
            .iter()
            .map(|levels| {
                if levels.len() != LEVELS {
                    return Err(Error::InvalidArgument(format!("expected {LEVELS} levels, got {}", levels.len())));
                }
                FeaturePyramid::new(levels.iter().map(|t| tape.constant(t.clone())).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = mean_pyramid(&mut tape, &pyramids)?;
        let logits = head::decode(&mut tape, &bound, &self.head, &fused, out_h, out_w)?;
        Ok(tape.value(logits).clone())
    }

    /// Predicted class map of `scene` using only the modalities in `subset`.
    pub fn predict(&self, scene: &ModalityScene, subset: &[usize]) -> Result<Vec<u8>> {
        let feats = self.encode_scene(scene)?;
        let chosen = subset
            .iter()
            .map(|&m| {
                feats
                    .get(m)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::InvalidArgument(format!("modality index {m} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = self.decode_subset(&chosen, scene.height, scene.width)?;
        Ok(head::argmax_classes(logits.data(), self.classes()))
    }
}

/// Elementwise mean of the pyramids, level by level.
pub fn mean_pyramid<S: Scalar>(tape: &mut Tape<S>, pyramids: &[FeaturePyramid]) -> Result<FeaturePyramid> {
    let levels = (0..LEVELS)
        .map(|l| {
            let feats: Vec<Var> = pyramids.iter().map(|p| p.levels[l]).collect();
            masm::mean_feature(tape, &feats)
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}
