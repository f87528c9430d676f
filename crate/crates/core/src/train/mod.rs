//! Mini-batch training with AdamW, warm-up plus polynomial decay, CSV
//! logging and resumable checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_model, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, MIM_ARGUMENT_ORDER};
pub use config::{check_modalities, ModelSection, OptimConfig, TrainConfig};
pub use optim::{AdamW, LrSchedule};

use crate::error::{Error, Result};
use crate::masm::RankingResult;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::{Dataset, ModalityScene};
use crate::tensor::Tape;

/// Losses averaged over the samples of one update or one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub seg: f64,
    pub consistency: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub losses: LossStats,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub model: Model<S>,
    pub optim: AdamW<S>,
    /// Completed epochs.
    pub epoch: usize,
    shuffle_rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh model for data with the given modalities and class count.
    pub fn new(config: TrainConfig, modalities: &[String], classes: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.resolve_model(modalities, classes)?, config.seed)?;
        let optim = AdamW::new(&config.optim, &model.store);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        Ok(Self {
            config,
            model,
            optim,
            epoch: 0,
            shuffle_rng,
        })
    }

    pub(crate) fn from_parts(config: TrainConfig, model: Model<S>, optim: AdamW<S>, epoch: usize, shuffle_rng: ChaCha8Rng) -> Self {
        Self {
            config,
            model,
            optim,
            epoch,
            shuffle_rng,
        }
    }

    pub(crate) fn shuffle_rng(&self) -> &ChaCha8Rng {
        &self.shuffle_rng
    }

    /// Number of optimizer updates taken so far.
    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.config.batch_size) as u64
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        LrSchedule::new(&self.config.optim, self.steps_per_epoch(samples) * self.config.epochs as u64)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        check_modalities(&self.model.config.modalities, &data.modalities)?;
        if data.classes != self.model.config.classes {
            return Err(Error::ConfigMismatch(format!(
                "model has {} classes, data has {}",
                self.model.config.classes, data.classes
            )));
        }
        if data.is_empty() {
            return Err(Error::Empty("training split"));
        }
        Ok(())
    }

    /// One optimizer update over `batch`. Every sample is forwarded on its own
    /// tape and the gradients are summed in batch order, scaled by `1/B`.
    pub fn train_step(&mut self, batch: &[&ModalityScene], lr: f64) -> Result<(LossStats, Vec<Vec<RankingResult>>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let scale = S::lit(1.0 / batch.len() as f64);
        self.model.store.zero_grads();
        let mut stats = LossStats::default();
        let mut rankings = Vec::with_capacity(batch.len());
        for scene in batch {
            let mut tape = Tape::new();
            let out = self
                .model
                .train_forward(&mut tape, scene, self.config.mode, self.config.beta)?;
            let lm = tape.value(out.seg_loss).item()?.as_f64();
            let lc = tape.value(out.consistency_loss).item()?.as_f64();
            let l = tape.value(out.total).item()?.as_f64();
            if !(lm.is_finite() && lc.is_finite() && l.is_finite()) {
                return Err(self.non_finite(scene, lm, lc, &out.rankings));
            }
            let grads = tape.backward(out.total)?;
            self.model.store.accumulate(&grads, &out.bound, scale)?;
            stats.seg += lm;
            stats.consistency += lc;
            stats.total += l;
            rankings.push(out.rankings);
        }
        let grads_finite = self
            .model
            .store
            .iter()
            .all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !grads_finite {
            return Err(Error::NonFiniteLoss {
                step: self.step(),
                diagnostics: "loss finite but gradients are not".into(),
            });
        }
        self.optim.update(&mut self.model.store, lr)?;
        let n = batch.len() as f64;
        stats.seg /= n;
        stats.consistency /= n;
        stats.total /= n;
        Ok((stats, rankings))
    }

    fn non_finite(&self, scene: &ModalityScene, lm: f64, lc: f64, rankings: &[RankingResult]) -> Error {
        let mut d = format!("scene seed {}, L_M={lm}, L_C={lc}", scene.seed);
        for r in rankings {
            let _ = write!(d, "; scale {} similarities {:?}", r.scale, r.scores);
        }
        Error::NonFiniteLoss {
            step: self.step(),
            diagnostics: d,
        }
    }

    /// Runs one shuffled pass over `data`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        self.check_data(data)?;
        let schedule = self.schedule(data.len());
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut sums = LossStats::default();
        let mut lr = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            lr = schedule.lr_at(self.step());
            let batch: Vec<&ModalityScene> = chunk.iter().map(|&i| &data.scenes[i]).collect();
            let (s, _) = self.train_step(&batch, lr)?;
            let w = chunk.len() as f64;
            sums.seg += s.seg * w;
            sums.consistency += s.consistency * w;
            sums.total += s.total * w;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            losses: LossStats {
                seg: sums.seg / n,
                consistency: sums.consistency / n,
                total: sums.total / n,
            },
            lr,
        })
    }

    /// Trains the remaining epochs of the configured budget, calling
    /// `on_epoch` after each.
    pub fn fit(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch(data)?;
            on_epoch(&stats);
            log.push(stats);
        }
        Ok(log)
    }
}

pub const LOG_HEADER: &str = "epoch,L_M,L_C,L,lr";

pub fn write_log_row<W: Write>(out: &mut W, s: &EpochStats) -> Result<()> {
    writeln!(
        out,
        "{},{:.6},{:.6},{:.6},{:.6e}",
        s.epoch, s.losses.seg, s.losses.consistency, s.losses.total, s.lr
    )?;
    Ok(())
}
