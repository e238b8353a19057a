//! Bidirectional cross-attention fusion, interest weights and the
//! conditioned contrastive loss.
//!
//! All functions are batched: visual features are `[B, N, D]`, text features
//! `[B, L, D]`, and text keep-masks `[B, L]` (1 = real token, 0 = pad).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::linear_specs;
use crate::error::{dim_err, Error, Result};
use crate::params::{Binder, ParamSpec};
use crate::tensor::{Scalar, Tensor};

/// Guard added to vector norms in the cosine alignment.
pub const COSINE_EPS: f64 = 1e-8;

/// Additive penalty that keeps pad columns out of a max over cosines
/// (which never fall below −1).
const PAD_PENALTY: f64 = -4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Separate vision→text and text→vision cross-attention.
    Cross,
    /// One self-attention over the concatenated patch and token sequence.
    #[serde(rename = "self")]
    SelfAttention,
}

/// Output of one attention call plus its normalized weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[B, P, D]`
    pub output: Var,
    /// `[B, P, Q]`, rows on the simplex over kept keys
    pub weights: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[B, N, D]`
    pub v_prime: Var,
    /// `[B, L, D]`
    pub e_prime: Var,
    /// `[B, N]`
    pub w_poi: Var,
    /// `[B, L]`, zero at pads
    pub w_woi: Var,
}

pub fn interaction_param_specs(dim: usize) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for dir in ["ci.t2v", "ci.v2t", "ci.self"] {
        for proj in ["q", "k", "v"] {
            linear_specs(&mut s, &format!("{dir}.{proj}"), dim, dim, false);
        }
    }
    linear_specs(&mut s, "ci.poi", dim, 1, false);
    linear_specs(&mut s, "ci.woi", dim, 1, false);
    s
}

fn same_width<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[2] || sa[0] != sb[0] {
        return Err(dim_err!("feature width mismatch: {sa:?} vs {sb:?}"));
    }
    Ok(sa[2])
}

/// `softmax((query·W_q)(context·W_k)ᵀ / √D) · (context·W_v)` with the
/// softmax over context rows whose `key_keep` (`[B, Q]`) is nonzero.
pub fn cross_attention<T: Scalar>(
    p: &Binder<T>,
    prefix: &str,
    query: Var,
    context: Var,
    key_keep: Option<&Tensor<T>>,
) -> Result<Attended> {
    let g = p.graph();
    let d = same_width(g, query, context)?;
    let q = g.matmul(query, p.get(&format!("{prefix}.q.w"))?)?;
    let k = g.matmul(context, p.get(&format!("{prefix}.k.w"))?)?;
    let v = g.matmul(context, p.get(&format!("{prefix}.v.w"))?)?;
    let logits = g.scale(g.matmul_t(q, k)?, 1.0 / (d as f64).sqrt());
    let keep = key_keep
        .map(|k| {
            let s = k.shape();
            k.clone().reshape(&[s[0], 1, s[1]])
        })
        .transpose()?;
    let weights = g.masked_softmax(logits, 2, keep.as_ref())?;
    Ok(Attended {
        output: g.matmul(weights, v)?,
        weights,
    })
}

/// Patches attend to the non-pad tokens: V' of shape `[B, N, D]`.
pub fn text_to_vision<T: Scalar>(
    p: &Binder<T>,
    v: Var,
    e: Var,
    text_keep: &Tensor<T>,
) -> Result<Attended> {
    cross_attention(p, "ci.t2v", v, e, Some(text_keep))
}

/// Tokens attend to all patches: E' of shape `[B, L, D]`.
pub fn vision_to_text<T: Scalar>(p: &Binder<T>, e: Var, v: Var) -> Result<Attended> {
    cross_attention(p, "ci.v2t", e, v, None)
}

/// Self-attention over `[V; E]`, split back into (V', E').
pub fn self_attention_fusion<T: Scalar>(
    p: &Binder<T>,
    v: Var,
    e: Var,
    text_keep: &Tensor<T>,
) -> Result<(Var, Var)> {
    let g = p.graph();
    same_width(g, v, e)?;
    let (b, n) = (g.shape(v)[0], g.shape(v)[1]);
    let l = g.shape(e)[1];
    let x = g.concat(&[v, e], 1)?;
    let mut keep = Vec::with_capacity(b * (n + l));
    for i in 0..b {
        keep.extend(std::iter::repeat_n(T::one(), n));
        keep.extend_from_slice(&text_keep.data()[i * l..(i + 1) * l]);
    }
    let keep = Tensor::new(&[b, n + l], keep)?;
    let out = cross_attention(p, "ci.self", x, x, Some(&keep))?.output;
    Ok((g.narrow(out, 1, 0, n)?, g.narrow(out, 1, n, l)?))
}

/// Linear D→1 scores per position, softmax over positions (pads excluded
/// for tokens): (W_poi `[B, N]`, W_woi `[B, L]`).
pub fn interest_weights<T: Scalar>(
    p: &Binder<T>,
    v_prime: Var,
    e_prime: Var,
    text_keep: &Tensor<T>,
) -> Result<(Var, Var)> {
    let g = p.graph();
    let score = |x: Var, name: &str| -> Result<Var> {
        let s = g.shape(x);
        let z = g.matmul(x, p.get(name)?)?;
        g.reshape(z, &[s[0], s[1]])
    };
    let w_poi = g.softmax(score(v_prime, "ci.poi.w")?, 1)?;
    let w_woi = g.masked_softmax(score(e_prime, "ci.woi.w")?, 1, Some(text_keep))?;
    Ok((w_poi, w_woi))
}

/// Full fusion step: V', E' and both interest weight vectors.
pub fn fuse<T: Scalar>(
    p: &Binder<T>,
    v: Var,
    e: Var,
    text_keep: &Tensor<T>,
    attention: AttentionKind,
) -> Result<FusionOutput> {
    let (v_prime, e_prime) = match attention {
        AttentionKind::Cross => (
            text_to_vision(p, v, e, text_keep)?.output,
            vision_to_text(p, e, v)?.output,
        ),
        AttentionKind::SelfAttention => self_attention_fusion(p, v, e, text_keep)?,
    };
    let (w_poi, w_woi) = interest_weights(p, v_prime, e_prime, text_keep)?;
    Ok(FusionOutput {
        v_prime,
        e_prime,
        w_poi,
        w_woi,
    })
}

fn l2_normalize<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let norm = g.sqrt(g.sum_axis(g.square(x), axis)?);
    g.div(x, g.add_scalar(norm, COSINE_EPS))
}

/// Cosine alignment `a_ij = vᵢ·e_j / (‖vᵢ‖‖e_j‖)`: `[B, N, L]`.
pub fn alignment_matrix<T: Scalar>(g: &Graph<T>, v: Var, e: Var) -> Result<Var> {
    same_width(g, v, e)?;
    g.matmul_t(l2_normalize(g, v)?, l2_normalize(g, e)?)
}

fn pad_penalty<T: Scalar>(keep: &Tensor<T>) -> Tensor<T> {
    let pen = T::from_f64_lossy(PAD_PENALTY);
    keep.map(|k| if k == T::zero() { pen } else { T::zero() })
}

/// Per-pair similarity
/// `S = ½(Σᵢ w_vⁱ maxⱼ a_ij + Σⱼ w_eʲ maxᵢ a_ij)` with pad columns excluded
/// from the max over j. `a` is `[B, N, L]`; returns `[B]`.
pub fn pair_similarity<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    w_poi: Var,
    w_woi: Var,
    text_keep: &Tensor<T>,
) -> Result<Var> {
    let s = g.shape(a);
    if s.len() != 3 || g.shape(w_poi) != [s[0], s[1]] || g.shape(w_woi) != [s[0], s[2]] {
        return Err(dim_err!(
            "alignment {s:?} does not match weights {:?} / {:?}",
            g.shape(w_poi),
            g.shape(w_woi)
        ));
    }
    let (b, n, l) = (s[0], s[1], s[2]);
    let pen = g.constant(pad_penalty(text_keep).reshape(&[b, 1, l])?);
    let row_max = g.max_axis(g.add(a, pen)?, 2)?;
    let row_max = g.reshape(row_max, &[b, n])?;
    let vis = g.sum_axis(g.mul(row_max, w_poi)?, 1)?;
    let col_max = g.reshape(g.max_axis(a, 1)?, &[b, l])?;
    let txt = g.sum_axis(g.mul(col_max, w_woi)?, 1)?;
    let total = g.scale(g.add(vis, txt)?, 0.5);
    g.reshape(total, &[b])
}

/// `[B, B]` similarities of every image i against every prompt j.
pub fn similarity_matrix<T: Scalar>(
    g: &Graph<T>,
    v: Var,
    e: Var,
    w_poi: Var,
    w_woi: Var,
    text_keep: &Tensor<T>,
) -> Result<Var> {
    let d = same_width(g, v, e)?;
    let (b, n, l) = (g.shape(v)[0], g.shape(v)[1], g.shape(e)[1]);
    let vn = g.reshape(l2_normalize(g, v)?, &[b * n, d])?;
    let en = g.reshape(l2_normalize(g, e)?, &[b * l, d])?;
    // a[i, n, j, l]
    let a = g.reshape(g.matmul_t(vn, en)?, &[b, n, b, l])?;

    let pen = g.constant(pad_penalty(text_keep).reshape(&[1, 1, b, l])?);
    let row_max = g.reshape(g.max_axis(g.add(a, pen)?, 3)?, &[b, n, b])?;
    let wp = g.reshape(w_poi, &[b, n, 1])?;
    let vis = g.reshape(g.sum_axis(g.mul(row_max, wp)?, 1)?, &[b, b])?;

    let col_max = g.reshape(g.max_axis(a, 1)?, &[b, b, l])?;
    let ww = g.reshape(w_woi, &[1, b, l])?;
    let txt = g.reshape(g.sum_axis(g.mul(col_max, ww)?, 2)?, &[b, b])?;
    Ok(g.scale(g.add(vis, txt)?, 0.5))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Symmetric InfoNCE over a `[B, B]` similarity matrix with logits `S/τ`,
/// averaged over both directions.
pub fn contrastive_loss<T: Scalar>(g: &Graph<T>, s: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let shape = g.shape(s);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(dim_err!("similarity matrix must be square, got {shape:?}"));
    }
    let b = shape[0];
    let z = g.scale(s, 1.0 / tau);
    let eye = g.constant(Tensor::eye(b));
    let rows = g.sum(g.mul(g.log_softmax(z, 1)?, eye)?);
    let cols = g.sum(g.mul(g.log_softmax(z, 0)?, eye)?);
    Ok(g.scale(g.add(rows, cols)?, -0.5 / b as f64))
}

/// How the temperature enters the contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperatureForm {
    /// `exp(S/τ)`, the form used for training.
    Scaled,
    /// `exp(S)/τ` in numerator and denominator, in which τ cancels.
    Printed,
}

/// Plain-number evaluation of the symmetric contrastive loss for a
/// row-major `b × b` similarity matrix. Both forms share the same
/// arithmetic apart from where τ enters, so at τ = 1 they agree bit for bit.
pub fn contrastive_loss_value(s: &[f64], b: usize, tau: f64, form: TemperatureForm) -> Result<f64> {
    check_tau(tau)?;
    if s.len() != b * b || b == 0 {
        return Err(dim_err!("expected {b}x{b} similarities, got {}", s.len()));
    }
    let num: Vec<f64> = s
        .iter()
        .map(|&x| match form {
            TemperatureForm::Scaled => (x / tau).exp(),
            TemperatureForm::Printed => x.exp() / tau,
        })
        .collect();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| num[i * b + j]).sum();
        let col: f64 = (0..b).map(|j| num[j * b + i]).sum();
        total -= (num[i * b + i] / row).ln() + (num[i * b + i] / col).ln();
    }
    Ok(total / (2 * b) as f64)
}
