//! Segmentation losses, the combined objective and overlap metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// Weights of the objective terms, serialized as `[λ1, λ2, λ3, λ4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct LossWeights {
    /// language reconstruction
    pub v2t: f64,
    /// vision reconstruction
    pub t2v: f64,
    /// contrastive alignment
    pub ccl: f64,
    /// Dice + cross-entropy
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from([1.0, 1.0, 0.2, 5.0])
    }
}

impl From<[f64; 4]> for LossWeights {
    fn from(l: [f64; 4]) -> Self {
        Self {
            v2t: l[0],
            t2v: l[1],
            ccl: l[2],
            seg: l[3],
        }
    }
}

impl From<LossWeights> for [f64; 4] {
    fn from(l: LossWeights) -> Self {
        [l.v2t, l.t2v, l.ccl, l.seg]
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all: [f64; 4] = (*self).into();
        if all.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")))
        }
    }
}

fn target_const<T: Scalar>(g: &Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(dim_err!(
            "logits {:?} vs target {:?}",
            g.shape(logits),
            target.shape()
        ));
    }
    Ok(g.constant(target.clone()))
}

/// `1 − (2Σpy + ε)/(Σp + Σy + ε)` with `p = σ(logits)`, per sample (leading
/// axis), averaged over the batch.
pub fn dice_loss<T: Scalar>(g: &Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let y = target_const(g, logits, target)?;
    let b = g.shape(logits)[0];
    let p = g.reshape(g.sigmoid(logits), &[b, target.len() / b])?;
    let y = g.reshape(y, &[b, target.len() / b])?;
    let inter = g.sum_axis(g.mul(p, y)?, 1)?;
    let num = g.add_scalar(g.scale(inter, 2.0), DICE_EPS);
    let den = g.add_scalar(g.add(g.sum_axis(p, 1)?, g.sum_axis(y, 1)?)?, DICE_EPS);
    let ratio = g.mean(g.div(num, den)?);
    Ok(g.add_scalar(g.neg(ratio), 1.0))
}

/// Mean binary cross-entropy from logits, `softplus(x) − y·x`.
pub fn ce_loss<T: Scalar>(g: &Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let y = target_const(g, logits, target)?;
    let per_pixel = g.sub(g.softplus(logits), g.mul(y, logits)?)?;
    Ok(g.mean(per_pixel))
}

/// Terms of the objective. Absent auxiliary terms contribute nothing.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub v2t: Option<Var>,
    pub t2v: Option<Var>,
    pub ccl: Option<Var>,
    pub dice: Var,
    pub ce: Var,
}

/// `λ1·L_V2T + λ2·L_T2V + λ3·L_CCL + λ4·(L_Dice + L_CE)`.
pub fn total_loss<T: Scalar>(g: &Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut total = g.scale(g.add(terms.dice, terms.ce)?, w.seg);
    for (term, lambda) in [(terms.v2t, w.v2t), (terms.t2v, w.t2v), (terms.ccl, w.ccl)] {
        if let Some(t) = term {
            total = g.add(total, g.scale(t, lambda))?;
        }
    }
    Ok(total)
}

/// Overlap scores of one prediction against its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    /// mean over {foreground, background}
    pub dice: f64,
    pub miou: f64,
    pub dice_fg: f64,
    pub iou_fg: f64,
}

/// Pixel counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Counts {
    inter: u64,
    pred: u64,
    target: u64,
}

impl Counts {
    fn dice(self) -> f64 {
        let den = self.pred + self.target;
        if den == 0 {
            1.0
        } else {
            (2 * self.inter) as f64 / den as f64
        }
    }

    fn iou(self) -> f64 {
        let union = self.pred + self.target - self.inter;
        if union == 0 {
            1.0
        } else {
            self.inter as f64 / union as f64
        }
    }
}

/// Dice and IoU of binary masks, per class and averaged over the two
/// classes; a class absent from both masks scores 1.
pub fn metrics(pred: &[bool], target: &[bool]) -> Result<SampleMetrics> {
    if pred.len() != target.len() {
        return Err(dim_err!(
            "prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        ));
    }
    let mut fg = Counts::default();
    let mut bg = Counts::default();
    for (&p, &y) in pred.iter().zip(target) {
        fg.pred += p as u64;
        fg.target += y as u64;
        fg.inter += (p && y) as u64;
        bg.pred += !p as u64;
        bg.target += !y as u64;
        bg.inter += (!p && !y) as u64;
    }
    Ok(SampleMetrics {
        dice: 0.5 * (fg.dice() + bg.dice()),
        miou: 0.5 * (fg.iou() + bg.iou()),
        dice_fg: fg.dice(),
        iou_fg: fg.iou(),
    })
}

/// Threshold logits at probability 0.5.
pub fn binarize<T: Scalar>(logits: &[T]) -> Vec<bool> {
    logits.iter().map(|&x| x > T::zero()).collect()
}

/// Aggregate metrics over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub miou: f64,
    pub dice_fg: f64,
    pub miou_fg: f64,
    pub sample_ids: Vec<String>,
    pub per_sample: Vec<SampleMetrics>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    sample_id: &'a str,
    dice: f64,
    miou: f64,
}

impl MetricReport {
    pub fn from_samples(sample_ids: Vec<String>, per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            dice: mean(|s| s.dice),
            miou: mean(|s| s.miou),
            dice_fg: mean(|s| s.dice_fg),
            miou_fg: mean(|s| s.iou_fg),
            sample_ids,
            per_sample,
        }
    }

    /// `sample_id,dice,miou` rows (two-class convention).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (id, s) in self.sample_ids.iter().zip(&self.per_sample) {
            w.serialize(CsvRow {
                sample_id: id,
                dice: s.dice,
                miou: s.miou,
            })?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

#[cfg(test)]
mod tests;
