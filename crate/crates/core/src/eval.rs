//! Segmentation metrics and the all-subsets (missing-modality) evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masm::{self, RankingResult};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::{Condition, Dataset, ModalityScene};
use crate::tensor::{Tape, Tensor, IGNORE_LABEL};

pub const MAX_MODALITIES: usize = 8;

/// Pixel confusion counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Adds one label map; pixels labelled [`IGNORE_LABEL`] are skipped.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "ConfusionMatrix::add",
                left: vec![pred.len()],
                right: vec![truth.len()],
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            for l in [p, t] {
                if l as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Intersection over union of class `c`, or `None` when the class is
    /// absent from both prediction and ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let k = self.classes;
        let tp = self.count(c, c);
        let row: u64 = (0..k).map(|j| self.count(c, j)).sum();
        let col: u64 = (0..k).map(|i| self.count(i, c)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU in percent over the classes that occur.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            return Err(Error::AllIgnored);
        }
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    cm.miou()
}

/// All non-empty subsets of `0..m`, ordered by size and then
/// lexicographically.
pub fn enumerate_subsets(m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > MAX_MODALITIES {
        return Err(Error::InvalidArgument(format!(
            "modality count must be in 1..={MAX_MODALITIES}, got {m}"
        )));
    }
    let mut subsets: Vec<Vec<usize>> = (1u32..1 << m)
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(subsets)
}

/// Short column code for a modality name.
pub fn modality_code(name: &str) -> String {
    match name {
        "rgb" | "camera" => "R".into(),
        "depth" => "D".into(),
        "event" => "E".into(),
        "lidar" | "range" => "L".into(),
        "frame" => "F".into(),
        other => other.chars().next().map(|c| c.to_uppercase().collect()).unwrap_or_default(),
    }
}

/// Column labels for the given subsets. Falls back to `+`-joined names when
/// the one-letter codes collide.
pub fn subset_labels(names: &[String], subsets: &[Vec<usize>]) -> Vec<String> {
    let codes: Vec<String> = names.iter().map(|n| modality_code(n)).collect();
    let unique = codes.iter().enumerate().all(|(i, c)| !c.is_empty() && !codes[..i].contains(c));
    subsets
        .iter()
        .map(|s| {
            if unique {
                s.iter().map(|&i| codes[i].as_str()).collect()
            } else {
                s.iter().map(|&i| names[i].as_str()).collect::<Vec<_>>().join("+")
            }
        })
        .collect()
}

/// Anything that can segment a scene from a subset of its modalities.
pub trait Predictor {
    /// Per-scene work shared by all subsets, e.g. encoded features.
    type Prepared;

    fn classes(&self) -> usize;
    fn prepare(&self, scene: &ModalityScene) -> Result<Self::Prepared>;
    fn predict(&self, prepared: &Self::Prepared, scene: &ModalityScene, subset: &[usize]) -> Result<Vec<u8>>;
}

impl<S: Scalar> Predictor for Model<S> {
    type Prepared = Vec<Vec<Tensor<S>>>;

    fn classes(&self) -> usize {
        self.config.classes
    }

    fn prepare(&self, scene: &ModalityScene) -> Result<Self::Prepared> {
        self.encode_scene(scene)
    }

    fn predict(&self, prepared: &Self::Prepared, scene: &ModalityScene, subset: &[usize]) -> Result<Vec<u8>> {
        let chosen: Vec<&[Tensor<S>]> = subset.iter().map(|&m| prepared[m].as_slice()).collect();
        let logits = self.decode_subset(&chosen, scene.height, scene.width)?;
        Ok(crate::head::argmax_classes(logits.data(), self.config.classes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// mIoU per subset column, in percent.
    pub values: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    pub modalities: Vec<String>,
    pub subsets: Vec<Vec<usize>>,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl MassReport {
    pub fn new(modalities: Vec<String>) -> Result<Self> {
        let subsets = enumerate_subsets(modalities.len())?;
        let columns = subset_labels(&modalities, &subsets);
        Ok(Self {
            modalities,
            subsets,
            columns,
            rows: Vec::new(),
        })
    }

    pub fn push_row(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        self.rows.push(ReportRow {
            name: name.into(),
            values,
            mean,
        });
        Ok(())
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| Model |");
        for c in &self.columns {
            let _ = write!(out, " {c} |");
        }
        out.push_str(" Mean |\n|---|");
        out.push_str(&"---:|".repeat(self.columns.len() + 1));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} |", r.name);
            for v in &r.values {
                let _ = write!(out, " {v:.2} |");
            }
            let _ = writeln!(out, " {:.2} |", r.mean);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",Mean\n");
        for r in &self.rows {
            out.push_str(&r.name);
            for v in &r.values {
                let _ = write!(out, ",{v:.2}");
            }
            let _ = writeln!(out, ",{:.2}", r.mean);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(s).map_err(|e| Error::Malformed(e.to_string()))?;
        let expected = enumerate_subsets(report.modalities.len())?;
        if report.subsets != expected
            || report.columns.len() != expected.len()
            || report.rows.iter().any(|r| r.values.len() != expected.len())
        {
            return Err(Error::Malformed("report columns do not match its modalities".into()));
        }
        Ok(report)
    }
}

/// mIoU of every modality subset over the scenes of `dataset` that match
/// `condition` (all scenes when `None`). Features are prepared once per
/// scene and reused across subsets.
pub fn evaluate_subsets<P: Predictor>(
    predictor: &P,
    dataset: &Dataset,
    condition: Option<Condition>,
) -> Result<Vec<f64>> {
    let subsets = enumerate_subsets(dataset.modalities.len())?;
    let mut matrices = vec![ConfusionMatrix::new(predictor.classes()); subsets.len()];
    let mut used = 0usize;
    for scene in dataset
        .scenes
        .iter()
        .filter(|s| condition.is_none_or(|c| s.condition == c))
    {
        let prepared = predictor.prepare(scene)?;
        for (cm, subset) in matrices.iter_mut().zip(&subsets) {
            let pred = predictor.predict(&prepared, scene, subset)?;
            cm.add(&pred, &scene.labels)?;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("evaluation split"));
    }
    matrices.iter().map(ConfusionMatrix::miou).collect()
}

/// Full all-subsets report for one model, with a row named `name`.
pub fn mass_report<P: Predictor>(
    predictor: &P,
    dataset: &Dataset,
    name: &str,
    condition: Option<Condition>,
) -> Result<MassReport> {
    let mut report = MassReport::new(dataset.modalities.clone())?;
    report.push_row(name, evaluate_subsets(predictor, dataset, condition)?)?;
    Ok(report)
}

/// Robust/fragile ranking of every level for one scene, from the encoder
/// features alone.
pub fn scene_rankings<S: Scalar>(model: &Model<S>, scene: &ModalityScene) -> Result<Vec<RankingResult>> {
    let feats = model.encode_scene(scene)?;
    rankings_from_features(&feats)
}

pub fn rankings_from_features<S: Scalar>(feats: &[Vec<Tensor<S>>]) -> Result<Vec<RankingResult>> {
    if feats.len() < 2 {
        return Err(Error::TooFewModalities {
            need: 2,
            got: feats.len(),
        });
    }
    let levels = feats[0].len();
    (0..levels)
        .map(|l| {
            let mut tape = Tape::new();
            let vars: Vec<_> = feats.iter().map(|f| tape.constant(f[l].clone())).collect();
            let mean = masm::mean_feature(&mut tape, &vars)?;
            masm::rank_modalities(&tape, &vars, mean, l + 1)
        })
        .collect()
}
