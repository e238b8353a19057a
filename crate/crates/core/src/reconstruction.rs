//! Interest-weighted feature masking and the conditioned reconstructor Ψ.
//!
//! Ψ is a stack of conditioned cross-attention blocks. Each block computes
//! `softmax((X·W_q)(C·W_k)ᵀ/√D ⊙ c)·(C·W_v)`, where `c` is the per-context
//! condition broadcast over query rows, followed by optional residual and
//! feed-forward sublayers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::{linear, linear_specs};
use crate::error::{dim_err, Error, Result};
use crate::params::{Binder, ParamSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Draw positions proportionally to their interest weights.
    Weighted,
    /// Draw positions uniformly.
    Random,
}

/// Positions of one sequence whose features are zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub masked_indices: Vec<usize>,
    pub rng_seed: u64,
}

/// `m = max(1, round_half_up(α·n))` for α > 0, else 0; never above n.
pub fn mask_count(alpha: f64, n: usize) -> usize {
    if alpha <= 0.0 || n == 0 {
        return 0;
    }
    ((alpha * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

/// Draw `mask_count(α, #eligible)` distinct eligible positions.
///
/// Weighted sampling without replacement uses Gumbel-top-k on
/// `ln w + Gumbel`; eligible positions with zero weight follow all
/// positive-weight ones in uniformly random order. `eligible` defaults to
/// every position.
pub fn sample_mask(
    weights: &[f64],
    eligible: Option<&[bool]>,
    alpha: f64,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1], got {alpha}")));
    }
    if let Some(e) = eligible {
        if e.len() != weights.len() {
            return Err(dim_err!(
                "eligibility mask of length {} for {} weights",
                e.len(),
                weights.len()
            ));
        }
    }
    let is_eligible = |i: usize| eligible.is_none_or(|e| e[i]);
    let candidates: Vec<usize> = (0..weights.len()).filter(|&i| is_eligible(i)).collect();
    let m = mask_count(alpha, candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (tier, key): positive weights rank in tier 1 by perturbed log-weight,
    // zero weights in tier 0 by a uniform key
    let mut keyed: Vec<(u8, f64, usize)> = candidates
        .into_iter()
        .map(|i| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let gumbel = -(-u.ln()).ln();
            match strategy {
                MaskStrategy::Random => (1, gumbel, i),
                MaskStrategy::Weighted if weights[i] > 0.0 => (1, weights[i].ln() + gumbel, i),
                MaskStrategy::Weighted => (0, gumbel, i),
            }
        })
        .collect();
    keyed.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut masked_indices: Vec<usize> = keyed.iter().take(m).map(|k| k.2).collect();
    masked_indices.sort_unstable();
    Ok(MaskSpec {
        ratio: alpha,
        masked_indices,
        rng_seed: seed,
    })
}

/// `[B, P, 1]` multiplier with 0 on masked rows.
pub fn keep_rows<T: Scalar>(specs: &[MaskSpec], rows: usize) -> Result<Tensor<T>> {
    let mut keep = vec![T::one(); specs.len() * rows];
    for (b, s) in specs.iter().enumerate() {
        for &i in &s.masked_indices {
            if i >= rows {
                return Err(Error::Internal(format!(
                    "mask index {i} out of range for {rows} rows"
                )));
            }
            keep[b * rows + i] = T::zero();
        }
    }
    Tensor::new(&[specs.len(), rows, 1], keep)
}

/// Zero the masked rows of `x` (`[B, P, D]`, one spec per sample). Other
/// rows pass through unchanged.
pub fn apply_mask<T: Scalar>(g: &Graph<T>, x: Var, specs: &[MaskSpec]) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != specs.len() {
        return Err(dim_err!("{} mask specs for features {s:?}", specs.len()));
    }
    let keep = g.constant(keep_rows(specs, s[1])?);
    g.mul(x, keep)
}

/// Which sublayers a reconstructor block contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub residual: bool,
    pub feed_forward: bool,
}

impl Default for BlockLayout {
    fn default() -> Self {
        Self {
            residual: true,
            feed_forward: true,
        }
    }
}

impl BlockLayout {
    /// Bare conditioned attention, no residual or feed-forward.
    pub fn attention_only() -> Self {
        Self {
            residual: false,
            feed_forward: false,
        }
    }
}

pub fn reconstructor_param_specs(prefix: &str, dim: usize, layers: usize) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for k in 0..layers {
        for proj in ["q", "k", "v"] {
            linear_specs(&mut s, &format!("{prefix}.b{k}.{proj}"), dim, dim, false);
        }
        linear_specs(&mut s, &format!("{prefix}.b{k}.ff1"), dim, dim, true);
        linear_specs(&mut s, &format!("{prefix}.b{k}.ff2"), dim, dim, true);
    }
    s
}

/// Ψ(query, context, condition): `layers` blocks, each reading the previous
/// block's output as query.
///
/// `query` is `[B, P, D]`, `context` `[B, Q, D]`, `condition` `[B, Q]`.
/// Context positions with `context_keep = 0` are excluded from the softmax.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct<T: Scalar>(
    p: &Binder<T>,
    prefix: &str,
    query: Var,
    context: Var,
    condition: Var,
    context_keep: Option<&Tensor<T>>,
    layers: usize,
    layout: BlockLayout,
) -> Result<Var> {
    let g = p.graph();
    let (sq, sc, sw) = (g.shape(query), g.shape(context), g.shape(condition));
    if sq.len() != 3 || sc.len() != 3 || sq[0] != sc[0] || sq[2] != sc[2] || sw != [sc[0], sc[1]] {
        return Err(dim_err!(
            "reconstructor shapes do not agree: query {sq:?}, context {sc:?}, condition {sw:?}"
        ));
    }
    if layers == 0 {
        return Err(Error::Config("reconstructor needs at least one block".into()));
    }
    let (b, q, d) = (sc[0], sc[1], sc[2]);
    let cond = g.reshape(condition, &[b, 1, q])?;
    let keep = context_keep.map(|k| k.clone().reshape(&[b, 1, q])).transpose()?;
    let mut x = query;
    for k in 0..layers {
        let name = |s: &str| format!("{prefix}.b{k}.{s}");
        let qp = g.matmul(x, p.get(&name("q.w"))?)?;
        let kp = g.matmul(context, p.get(&name("k.w"))?)?;
        let vp = g.matmul(context, p.get(&name("v.w"))?)?;
        let logits = g.scale(g.matmul_t(qp, kp)?, 1.0 / (d as f64).sqrt());
        let logits = g.mul(logits, cond)?;
        let attn = g.masked_softmax(logits, 2, keep.as_ref())?;
        let mut h = g.matmul(attn, vp)?;
        if layout.residual {
            h = g.add(x, h)?;
        }
        if layout.feed_forward {
            let f = g.relu(linear(p, h, &name("ff1"), true)?);
            let f = linear(p, f, &name("ff2"), true)?;
            h = if layout.residual { g.add(h, f)? } else { f };
        }
        x = h;
    }
    Ok(x)
}

/// Interest-weighted squared error,
/// `mean_b (1/count_b) Σ_j w_j ‖x_j − x̂_j‖²`.
///
/// Targets and weights are detached, so gradients reach only `recon`.
/// `counts[b]` is N for patches and the number of real tokens for text.
pub fn weighted_reconstruction_loss<T: Scalar>(
    g: &Graph<T>,
    target: Var,
    recon: Var,
    weights: Var,
    counts: &[usize],
) -> Result<Var> {
    let (st, sr, sw) = (g.shape(target), g.shape(recon), g.shape(weights));
    if st != sr || st.len() != 3 || sw != st[..2] || counts.len() != st[0] {
        return Err(dim_err!(
            "reconstruction loss shapes: target {st:?}, recon {sr:?}, weights {sw:?}"
        ));
    }
    let (b, p) = (st[0], st[1]);
    let diff = g.sub(recon, g.detach(target))?;
    let sq = g.reshape(g.sum_axis(g.square(diff), 2)?, &[b, p])?;
    let weighted = g.sum_axis(g.mul(sq, g.detach(weights))?, 1)?;
    let inv = counts
        .iter()
        .map(|&c| T::from_f64_lossy(1.0 / c.max(1) as f64))
        .collect();
    let per_sample = g.mul(weighted, g.constant(Tensor::new(&[b, 1], inv)?))?;
    Ok(g.mean(per_sample))
}

/// Vision reconstruction loss over N patches.
pub fn loss_t2v<T: Scalar>(g: &Graph<T>, v: Var, v_hat: Var, w_poi: Var) -> Result<Var> {
    let s = g.shape(v);
    let counts = vec![s.get(1).copied().unwrap_or(0); s.first().copied().unwrap_or(0)];
    weighted_reconstruction_loss(g, v, v_hat, w_poi, &counts)
}

/// Language reconstruction loss over the real tokens of each prompt; pads
/// must carry zero weight.
pub fn loss_v2t<T: Scalar>(
    g: &Graph<T>,
    e: Var,
    e_hat: Var,
    w_woi: Var,
    nonpad: &[usize],
) -> Result<Var> {
    weighted_reconstruction_loss(g, e, e_hat, w_woi, nonpad)
}
