use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Checkpoint, RunConfig};
use crate::autodiff::Graph;
use crate::data::{grammar_vocabulary, load_split, sample_seed, Sample, Split};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::interaction::AttentionKind;
use crate::model::{forward_infer, forward_train, model_param_specs, Batch, ModelConfig};
use crate::objective::{binarize, metrics, MetricReport};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_DIR: &str = "best";
pub const LAST_GOOD_DIR: &str = "last_good";
const EVAL_BATCH: usize = 32;

/// One row of the training log: epoch means of the loss terms and the
/// validation scores after the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l_ccl: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub val_dice: f64,
    pub val_miou: f64,
    pub val_dice_fg: f64,
    pub val_miou_fg: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Checkpoint with the highest validation mIoU.
    pub best: Checkpoint,
    pub seconds: f64,
}

/// Fresh model state for `run`.
pub fn init_checkpoint(model: &ModelConfig, run: &RunConfig) -> Result<Checkpoint> {
    run.validate()?;
    let vocab = grammar_vocabulary();
    if vocab.len() != model.vocab_size {
        return Err(Error::Config(format!(
            "model expects {} tokens, vocabulary has {}",
            model.vocab_size,
            vocab.len()
        )));
    }
    let params = ParamStore::init(&model_param_specs(model, run.recon_layers), run.master_seed);
    Ok(Checkpoint {
        epoch: 0,
        model: model.clone(),
        run: run.clone(),
        optimizer: Adam::for_store(&params),
        params,
        vocab,
    })
}

fn step_seed(master: u64, step: usize) -> u64 {
    sample_seed(master ^ 0x57E9_5EED, step as u64)
}

fn epoch_order(master: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(master ^ 0x0DE7_0DE7, epoch as u64)));
    idx
}

struct StepResult {
    terms: [f64; 6],
    grads: BTreeMap<String, Tensor<f32>>,
    failure: Option<String>,
}

impl StepResult {
    fn failed(detail: String) -> Self {
        Self {
            terms: [f64::NAN; 6],
            grads: BTreeMap::new(),
            failure: Some(detail),
        }
    }
}

fn train_step(ck: &Checkpoint, batch: &Batch<f32>, seed: u64) -> Result<StepResult> {
    let g = Graph::<f32>::new();
    let p = Binder::new(&g, &ck.params);
    let out = forward_train(&p, &ck.model, &ck.run, batch, seed, None)?;
    let val = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| g.item(v) as f64);
    let t = &out.terms;
    let terms = [
        g.item(out.loss) as f64,
        val(t.v2t),
        val(t.t2v),
        val(t.ccl),
        g.item(t.dice) as f64,
        g.item(t.ce) as f64,
    ];
    let grads = if terms[0].is_finite() {
        let gr = g.backward(out.loss)?;
        p.bound()
            .into_iter()
            .filter_map(|(name, v)| gr.get(v).map(|t| (name, t)))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok(StepResult {
        terms,
        grads,
        failure: None,
    })
}

/// Binary masks predicted for `samples`.
pub fn predict(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    attention: AttentionKind,
    vocab: &Vocabulary,
    samples: &[Sample],
) -> Result<Vec<Vec<bool>>> {
    let mut out = Vec::with_capacity(samples.len());
    let px = model.image_size * model.image_size;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::<f32>::from_samples(&refs, vocab, model)?;
        let g = Graph::<f32>::new();
        let p = Binder::frozen(&g, params);
        let r = forward_infer(&p, model, attention, &batch.images, &batch.tokens, false)?;
        let logits = g.value(r.logits);
        out.extend(logits.data().chunks(px).map(binarize));
    }
    Ok(out)
}

/// Two-class and foreground overlap scores of the model on `samples`.
pub fn evaluate_samples(ck: &Checkpoint, samples: &[Sample]) -> Result<MetricReport> {
    let preds = predict(&ck.params, &ck.model, ck.run.attention, &ck.vocab, samples)?;
    let per_sample = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| metrics(p, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(
        samples.iter().map(|s| s.id.clone()).collect(),
        per_sample,
    ))
}

/// Evaluate a saved checkpoint on one split of a dataset directory.
pub fn evaluate(ckpt: &Path, data: &Path, split: Split) -> Result<MetricReport> {
    let ck = Checkpoint::load(ckpt)?;
    evaluate_samples(&ck, &load_split(data, split)?)
}

/// Train on the `train` split of `data` and select on `val`. Writes the log,
/// the best checkpoint and, on divergence, the last good state under `out`.
pub fn train(model: &ModelConfig, run: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    train_on(model, run, &train, &val, Some(out))
}

fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// In-memory variant of [`train`]; `out` is optional.
pub fn train_on(
    model: &ModelConfig,
    run: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    out: Option<&Path>,
) -> Result<TrainSummary> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and val splits must not be empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let started = Instant::now();
    let mut ck = init_checkpoint(model, run)?;
    let steps_per_epoch = train.len().div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;
    let mut prev: Option<Checkpoint> = None;
    for epoch in 0..run.epochs {
        let t0 = Instant::now();
        let order = epoch_order(run.master_seed, epoch, train.len());
        let mut sums = [0.0f64; 6];
        let mut lr = 0.0;
        for idx in order.chunks(run.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::<f32>::from_samples(&refs, &ck.vocab, model)?;
            let r = match train_step(&ck, &batch, step_seed(run.master_seed, step)) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => StepResult::failed(e.to_string()),
                Err(e) => return Err(e),
            };
            let finite = r.terms[0].is_finite() && r.grads.values().all(|t| t.all_finite());
            if !finite {
                // the state before the last update is the newest one whose
                // loss was finite
                let good = prev.as_ref().unwrap_or(&ck);
                if let Some(dir) = out {
                    good.save(&dir.join(LAST_GOOD_DIR))?;
                }
                let detail = r.failure.unwrap_or_else(|| format!("loss terms {:?}", r.terms));
                return Err(Error::Diverged { epoch, step, detail });
            }
            prev = Some(ck.clone());
            lr = run.lr_at(step, total_steps);
            ck.optimizer.update(&mut ck.params, &r.grads, lr)?;
            for (s, t) in sums.iter_mut().zip(r.terms) {
                *s += t * idx.len() as f64;
            }
            step += 1;
        }
        ck.epoch = epoch + 1;
        let report = evaluate_samples(&ck, val)?;
        let n = train.len() as f64;
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sums[0] / n,
            l_v2t: sums[1] / n,
            l_t2v: sums[2] / n,
            l_ccl: sums[3] / n,
            l_dice: sums[4] / n,
            l_ce: sums[5] / n,
            val_dice: report.dice,
            val_miou: report.miou,
            val_dice_fg: report.dice_fg,
            val_miou_fg: report.miou_fg,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} dice {:.4} ce {:.4} val mIoU {:.4} ({:.1}s)",
            row.epoch,
            row.loss,
            row.l_dice,
            row.l_ce,
            row.val_miou,
            row.seconds
        );
        history.push(row);
        if let Some(dir) = out {
            write_log(&dir.join(LOG_FILE), &history)?;
        }
        if best.as_ref().is_none_or(|(m, _)| report.miou > *m) {
            if let Some(dir) = out {
                ck.save(&dir.join(BEST_DIR))?;
            }
            best = Some((report.miou, ck.clone()));
        }
    }
    let (_, best) = best.expect("at least one epoch");
    Ok(TrainSummary {
        best_epoch: best.epoch,
        history,
        best,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn best_checkpoint_path(out: &Path) -> PathBuf {
    out.join(BEST_DIR)
}
