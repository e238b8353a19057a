//! Model dimensions and the full training / inference forward passes.

use serde::{Deserialize, Serialize};

/// Architecture dimensions. Training hyperparameters live in
/// [`RunConfig`](crate::train::RunConfig).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 8.
    pub image_size: usize,
    /// Output channels of the three downsampling stages.
    pub channels: [usize; 3],
    /// Shared feature width D.
    pub dim: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Maximum prompt length L.
    pub max_len: usize,
    pub vocab_size: usize,
    pub decoder_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [16, 32, 64],
            dim: 64,
            text_layers: 2,
            heads: 4,
            ffn_hidden: 128,
            max_len: 8,
            vocab_size: crate::data::GRAMMAR_WORDS.len() + 2,
            decoder_channels: [16, 8],
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference checks: 2×2 = 4 patches,
    /// 3 tokens, width 8.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            channels: [2, 3, 4],
            dim: 8,
            text_layers: 1,
            heads: 2,
            ffn_hidden: 8,
            max_len: 3,
            vocab_size: 6,
            decoder_channels: [2, 2],
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    /// Number of patches N.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

// ---------------------------------------------------------------------------

use crate::autodiff::{Graph, Var};
use crate::data::Sample;
use crate::encoders::{
    decode_mask, decoder_param_specs, encode_image, encode_text, text_param_specs,
    visual_param_specs, Tokenized, Vocabulary,
};
use crate::error::{dim_err, Result};
use crate::interaction::{
    contrastive_loss, fuse, interaction_param_specs, interest_weights, similarity_matrix,
    text_to_vision, vision_to_text, AttentionKind, FusionOutput,
};
use crate::objective::{ce_loss, dice_loss, total_loss, LossTerms};
use crate::params::{Binder, ParamSpec};
use crate::reconstruction::{
    apply_mask, loss_t2v, loss_v2t, reconstruct, reconstructor_param_specs, sample_mask,
    BlockLayout, MaskSpec,
};
use crate::tensor::{Scalar, Tensor};
use crate::train::RunConfig;

/// Every parameter of the model with `recon_layers` reconstructor blocks
/// per direction.
pub fn model_param_specs(cfg: &ModelConfig, recon_layers: usize) -> Vec<ParamSpec> {
    let mut s = visual_param_specs(cfg);
    s.extend(text_param_specs(cfg));
    s.extend(interaction_param_specs(cfg.dim));
    s.extend(reconstructor_param_specs("cvr", cfg.dim, recon_layers));
    s.extend(reconstructor_param_specs("clr", cfg.dim, recon_layers));
    s.extend(decoder_param_specs(cfg));
    s
}

/// Images, prompts and targets of one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    /// `[B, S, S, 1]`
    pub images: Tensor<T>,
    pub tokens: Vec<Tokenized>,
    /// `[B, S, S, 1]` with values in {0, 1}
    pub masks: Tensor<T>,
    pub ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample], vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.image_size;
        let b = samples.len();
        if b == 0 {
            return Err(dim_err!("empty batch"));
        }
        let mut images = Vec::with_capacity(b * s * s);
        let mut masks = Vec::with_capacity(b * s * s);
        let mut tokens = Vec::with_capacity(b);
        for x in samples {
            if x.image.len() != s * s || x.mask.len() != s * s {
                return Err(dim_err!("sample {} is not {s}x{s}", x.id));
            }
            images.extend(x.image.iter().map(|&p| T::from_f64_lossy(p as f64)));
            masks.extend(x.mask.iter().map(|&m| if m { T::one() } else { T::zero() }));
            tokens.push(vocab.tokenize(&x.prompt, cfg.max_len)?);
        }
        Ok(Self {
            images: Tensor::new(&[b, s, s, 1], images)?,
            tokens,
            masks: Tensor::new(&[b, s, s, 1], masks)?,
            ids: samples.iter().map(|x| x.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Masks fixed in advance instead of sampled, e.g. so that a
/// finite-difference check sees the same masks at every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOverride {
    pub vision: Vec<MaskSpec>,
    pub text: Vec<MaskSpec>,
}

/// Everything the training forward pass produces.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub loss: Var,
    pub terms: LossTerms,
    /// `[B, S, S, 1]`
    pub logits: Var,
    pub fusion: FusionOutput,
    pub vision_masks: Vec<MaskSpec>,
    pub text_masks: Vec<MaskSpec>,
}

fn uniform_weights<T: Scalar>(b: usize, n: usize) -> Tensor<T> {
    Tensor::full(&[b, n], T::from_f64_lossy(1.0 / n as f64))
}

/// Uniform over real tokens, zero at pads.
fn uniform_text_weights<T: Scalar>(keep: &Tensor<T>) -> Tensor<T> {
    let l = keep.shape()[1];
    let mut out = keep.clone();
    for row in out.data_mut().chunks_mut(l) {
        let n = row.iter().filter(|&&k| k != T::zero()).count().max(1);
        let w = T::from_f64_lossy(1.0 / n as f64);
        row.iter_mut().for_each(|k| *k *= w);
    }
    out
}

/// Seed of the mask drawn for `sample` of the batch at `step_seed`.
pub fn mask_seed(step_seed: u64, sample: usize, modality: u64) -> u64 {
    crate::data::sample_seed(step_seed ^ modality.wrapping_mul(0x9E37_79B9), sample as u64)
}

fn draw_masks<T: Scalar>(
    g: &Graph<T>,
    weights: Var,
    eligible: Option<&[Vec<bool>]>,
    alpha: f64,
    run: &RunConfig,
    step_seed: u64,
    modality: u64,
) -> Result<Vec<MaskSpec>> {
    let w = g.value(weights);
    let width = w.shape()[1];
    w.data()
        .chunks(width)
        .enumerate()
        .map(|(b, row)| {
            let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
            let el = eligible.map(|e| e[b].as_slice());
            sample_mask(&row, el, alpha, run.mask_strategy, mask_seed(step_seed, b, modality))
        })
        .collect()
}

/// Patch features that feed the mask decoder: V + V'.
fn decoder_input<T: Scalar>(g: &Graph<T>, v: Var, v_prime: Var) -> Result<Var> {
    g.add(v, v_prime)
}

/// Full training objective on one batch.
pub fn forward_train<T: Scalar>(
    p: &Binder<T>,
    cfg: &ModelConfig,
    run: &RunConfig,
    batch: &Batch<T>,
    step_seed: u64,
    masks: Option<&MaskOverride>,
) -> Result<TrainOutputs> {
    let g = p.graph();
    let b = batch.len();
    let images = g.constant(batch.images.clone());
    let vis = encode_image(p, cfg, images)?;
    let txt = encode_text(p, cfg, &batch.tokens)?;
    let keep: Tensor<T> = txt.keep();
    let nonpad = txt.nonpad_counts();
    let (v, e) = (vis.values, txt.values);
    let n = g.shape(v)[1];

    let fusion = fuse(p, v, e, &keep, run.attention)?;
    let fused = decoder_input(g, v, fusion.v_prime)?;
    let logits = decode_mask(p, cfg, fused, vis.grid, &vis.skip_stack)?;
    let dice = dice_loss(g, logits, &batch.masks)?;
    let ce = ce_loss(g, logits, &batch.masks)?;

    let (ccl_poi, ccl_woi) = if run.use_ccl_condition {
        (fusion.w_poi, fusion.w_woi)
    } else {
        (
            g.constant(uniform_weights(b, n)),
            g.constant(uniform_text_weights(&keep)),
        )
    };
    let s = similarity_matrix(g, v, e, ccl_poi, ccl_woi, &keep)?;
    let ccl = contrastive_loss(g, s, run.tau)?;

    let layout = BlockLayout::default();
    let ones_text = g.constant(keep.clone());
    let ones_vis = g.constant(Tensor::ones(&[b, n]));

    let mut vision_masks = Vec::new();
    let t2v = if run.use_cvr {
        vision_masks = match masks {
            Some(m) => m.vision.clone(),
            None => draw_masks(g, fusion.w_poi, None, run.alpha_v, run, step_seed, 1)?,
        };
        let v_m = apply_mask(g, v, &vision_masks)?;
        let (cond, weights) = if run.use_cvr_condition {
            (fusion.w_woi, fusion.w_poi)
        } else {
            (ones_text, g.constant(uniform_weights(b, n)))
        };
        let v_hat = reconstruct(p, "cvr", v_m, e, cond, Some(&keep), run.recon_layers, layout)?;
        Some(loss_t2v(g, v, v_hat, weights)?)
    } else {
        None
    };

    let mut text_masks = Vec::new();
    let v2t = if run.use_clr {
        let eligible: Vec<Vec<bool>> =
            txt.pad_mask.iter().map(|m| m.iter().map(|p| !p).collect()).collect();
        text_masks = match masks {
            Some(m) => m.text.clone(),
            None => draw_masks(g, fusion.w_woi, Some(&eligible), run.alpha_t, run, step_seed, 2)?,
        };
        let e_m = apply_mask(g, e, &text_masks)?;
        let (cond, weights) = if run.use_clr_condition {
            (fusion.w_poi, fusion.w_woi)
        } else {
            (ones_vis, g.constant(uniform_text_weights(&keep)))
        };
        let e_hat = reconstruct(p, "clr", e_m, v, cond, None, run.recon_layers, layout)?;
        Some(loss_v2t(g, e, e_hat, weights, &nonpad)?)
    } else {
        None
    };

    let terms = LossTerms {
        v2t,
        t2v,
        ccl: Some(ccl),
        dice,
        ce,
    };
    let loss = total_loss(g, &terms, &run.lambda)?;
    Ok(TrainOutputs {
        loss,
        terms,
        logits,
        fusion,
        vision_masks,
        text_masks,
    })
}

/// Outputs of the pruned inference pass.
#[derive(Debug, Clone, Copy)]
pub struct InferOutputs {
    /// `[B, S, S, 1]`
    pub logits: Var,
    /// `[B, N]` and `[B, L]`, present when requested
    pub w_poi: Option<Var>,
    pub w_woi: Option<Var>,
}

/// Segmentation-only forward: encoders, text→vision fusion and decoder.
/// The reconstructors and contrastive head are never built; the
/// vision→text branch runs only when interest heatmaps are requested.
pub fn forward_infer<T: Scalar>(
    p: &Binder<T>,
    cfg: &ModelConfig,
    attention: AttentionKind,
    images: &Tensor<T>,
    tokens: &[Tokenized],
    heatmaps: bool,
) -> Result<InferOutputs> {
    let g = p.graph();
    let images = g.constant(images.clone());
    let vis = encode_image(p, cfg, images)?;
    let txt = encode_text(p, cfg, tokens)?;
    let keep: Tensor<T> = txt.keep();
    let (v, e) = (vis.values, txt.values);
    let (v_prime, e_prime) = match attention {
        AttentionKind::Cross => {
            let vp = text_to_vision(p, v, e, &keep)?.output;
            let ep = if heatmaps {
                Some(vision_to_text(p, e, v)?.output)
            } else {
                None
            };
            (vp, ep)
        }
        AttentionKind::SelfAttention => {
            let (vp, ep) = crate::interaction::self_attention_fusion(p, v, e, &keep)?;
            (vp, Some(ep))
        }
    };
    let fused = decoder_input(g, v, v_prime)?;
    let logits = decode_mask(p, cfg, fused, vis.grid, &vis.skip_stack)?;
    let (w_poi, w_woi) = match (heatmaps, e_prime) {
        (true, Some(ep)) => {
            let (a, b) = interest_weights(p, v_prime, ep, &keep)?;
            (Some(a), Some(b))
        }
        _ => (None, None),
    };
    Ok(InferOutputs {
        logits,
        w_poi,
        w_woi,
    })
}

/// Multiply-adds of the two cross-attention directions for one sample:
/// projections `3(N+L)D²` plus logits and weighted sums `4NLD`.
pub fn fusion_macs(n: usize, l: usize, d: usize) -> u64 {
    (3 * (n + l) * d * d + 4 * n * l * d) as u64
}

/// Parameter totals and the closed-form cost of one inference forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelCost {
    /// every trainable parameter, reconstructors included
    pub params: usize,
    /// parameters the pruned inference path reads
    pub inference_params: usize,
    /// multiply-adds of one inference forward (no heatmaps), per sample
    pub inference_macs: u64,
}

fn used_at_inference(name: &str, attention: AttentionKind) -> bool {
    let pruned = ["cvr.", "clr.", "ci.v2t.", "ci.poi.", "ci.woi."];
    let fusion_unused = match attention {
        AttentionKind::Cross => "ci.self.",
        AttentionKind::SelfAttention => "ci.t2v.",
    };
    !pruned.iter().any(|p| name.starts_with(p)) && !name.starts_with(fusion_unused)
}

/// Parameter count and inference multiply-adds, counted by formula.
pub fn count_params_flops(cfg: &ModelConfig, recon_layers: usize, attention: AttentionKind) -> ModelCost {
    let specs = model_param_specs(cfg, recon_layers);
    let params = specs.iter().map(|s| s.numel()).sum();
    let inference_params = specs
        .iter()
        .filter(|s| used_at_inference(&s.name, attention))
        .map(|s| s.numel())
        .sum();
    let (s, d, l, f) = (cfg.image_size, cfg.dim, cfg.max_len, cfg.ffn_hidden);
    let [c1, c2, c3] = cfg.channels;
    let [d0, d1] = cfg.decoder_channels;
    let n = cfg.patches();
    let conv = |side: usize, cin: usize, cout: usize| side * side * 9 * cin * cout;
    let visual = conv(s / 2, 1, c1) + conv(s / 4, c1, c2) + conv(s / 8, c2, c3) + conv(s / 8, c3, d);
    let text = cfg.text_layers * (4 * l * d * d + 2 * l * l * d + 2 * l * d * f);
    let fusion = match attention {
        AttentionKind::Cross => (n + 2 * l) * d * d + 2 * n * l * d,
        AttentionKind::SelfAttention => 3 * (n + l) * d * d + 2 * (n + l) * (n + l) * d,
    };
    let decoder = conv(s / 4, d + c2, d0) + conv(s / 2, d0 + c1, d1) + conv(s, d1 + 1, 1);
    ModelCost {
        params,
        inference_params,
        inference_macs: (visual + text + fusion + decoder) as u64,
    }
}

/// Finite-difference check of the whole training objective on the micro
/// configuration (`batch` of 1 or 2 samples), every loss term active and
/// masks held fixed.
pub fn micro_gradcheck(seed: u64, batch: usize) -> Result<crate::autodiff::GradcheckReport> {
    let run = RunConfig {
        recon_layers: 2,
        ..RunConfig::default()
    };
    micro_gradcheck_with(&run, seed, batch)
}

/// [`micro_gradcheck`] under an arbitrary run configuration.
pub fn micro_gradcheck_with(
    run: &RunConfig,
    seed: u64,
    batch: usize,
) -> Result<crate::autodiff::GradcheckReport> {
    use rand::{Rng, SeedableRng};

    if !(1..=2).contains(&batch) {
        return Err(crate::Error::Config(format!("micro gradcheck takes 1 or 2 samples, got {batch}")));
    }
    let cfg = ModelConfig::micro();
    let store = crate::params::ParamStore::<f64>::init(&model_param_specs(&cfg, run.recon_layers), seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6C0C);
    let px = cfg.image_size * cfg.image_size;
    let shape = [batch, cfg.image_size, cfg.image_size, 1];
    let images = Tensor::new(&shape, (0..batch * px).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let masks = Tensor::new(
        &shape,
        (0..batch * px).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )?;
    // first prompt has a pad, second fills the sequence
    let prompts: [&[usize]; 2] = [&[2, 4], &[3, 5, 1]];
    let vision_masks: [&[usize]; 2] = [&[1, 2], &[0, 3]];
    let text_masks: [&[usize]; 2] = [&[0], &[2]];
    let spec = |ratio: f64, idx: &[usize]| MaskSpec {
        ratio,
        masked_indices: idx.to_vec(),
        rng_seed: 0,
    };
    let batch_data = Batch {
        images,
        tokens: prompts[..batch].iter().map(|ids| Tokenized::from_ids(ids, cfg.max_len)).collect(),
        masks,
        ids: (0..batch).map(|i| format!("probe{i}")).collect(),
    };
    let fixed = MaskOverride {
        vision: vision_masks[..batch].iter().map(|m| spec(run.alpha_v, m)).collect(),
        text: text_masks[..batch].iter().map(|m| spec(run.alpha_t, m)).collect(),
    };
    let names: Vec<String> = store.names().cloned().collect();
    let values: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    crate::autodiff::gradcheck(&values, crate::autodiff::DEFAULT_STEP, |g, vars| {
        let p = Binder::preset(g, names.iter().cloned().zip(vars.iter().copied()));
        Ok(forward_train(&p, &cfg, run, &batch_data, 0, Some(&fixed))?.loss)
    })
}
