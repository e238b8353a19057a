//! Visual and text feature encoders and the mask decoder.
//!
//! The visual encoder is a three-stage strided convolutional downsampler
//! whose coarsest map (`grid × grid` patches of width `dim`) becomes the
//! patch features `V`. The text encoder is a small pre-norm transformer over
//! word embeddings producing token features `E`. The decoder upsamples fused
//! patch features back to pixel logits through skip connections.

mod vocab;

pub use vocab::{Tokenized, Vocabulary, PAD_ID, UNK_ID};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::model::ModelConfig;
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Patch features of a batch of images.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    /// `[B, N, D]`
    pub values: Var,
    /// (H', W') with N = H'·W'
    pub grid: (usize, usize),
    /// Inputs of each downsampling stage, finest first: the image itself,
    /// then the stage-1 and stage-2 maps (all NHWC).
    pub skip_stack: Vec<Var>,
}

/// Token features of a batch of prompts.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `[B, L, D]`
    pub values: Var,
    pub token_ids: Vec<Vec<usize>>,
    /// `true` at padded positions
    pub pad_mask: Vec<Vec<bool>>,
}

impl TextFeatures {
    /// `[B, L]` with 1 at real tokens and 0 at padding.
    pub fn keep<T: Scalar>(&self) -> Tensor<T> {
        keep_tensor(&self.pad_mask)
    }

    pub fn nonpad_counts(&self) -> Vec<usize> {
        self.pad_mask
            .iter()
            .map(|m| m.iter().filter(|p| !**p).count())
            .collect()
    }
}

pub(crate) fn keep_tensor<T: Scalar>(pad_mask: &[Vec<bool>]) -> Tensor<T> {
    let b = pad_mask.len();
    let l = pad_mask.first().map_or(0, Vec::len);
    let data = pad_mask
        .iter()
        .flatten()
        .map(|&p| if p { T::zero() } else { T::one() })
        .collect();
    Tensor::new(&[b, l], data).expect("rectangular pad mask")
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, kernel: usize, cin: usize, cout: usize) {
    let fan_in = kernel * kernel * cin;
    out.push(ParamSpec::new(
        format!("{name}.w"),
        &[fan_in, cout],
        Init::Uniform { fan_in },
    ));
    out.push(ParamSpec::new(format!("{name}.b"), &[cout], Init::Uniform { fan_in }));
}

pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize, bias: bool) {
    out.push(ParamSpec::new(
        format!("{name}.w"),
        &[din, dout],
        Init::Uniform { fan_in: din },
    ));
    if bias {
        out.push(ParamSpec::new(
            format!("{name}.b"),
            &[dout],
            Init::Uniform { fan_in: din },
        ));
    }
}

fn conv<T: Scalar>(
    p: &Binder<T>,
    x: Var,
    name: &str,
    kernel: usize,
    stride: usize,
) -> Result<Var> {
    let g = p.graph();
    let y = g.conv2d(x, p.get(&format!("{name}.w"))?, kernel, stride, kernel / 2)?;
    g.add(y, p.get(&format!("{name}.b"))?)
}

pub(crate) fn linear<T: Scalar>(p: &Binder<T>, x: Var, name: &str, bias: bool) -> Result<Var> {
    let g = p.graph();
    let b = if bias {
        Some(p.get(&format!("{name}.b"))?)
    } else {
        None
    };
    g.linear(x, p.get(&format!("{name}.w"))?, b)
}

// -- visual -----------------------------------------------------------------

pub fn visual_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let [c0, c1, c2] = cfg.channels;
    let mut s = Vec::new();
    conv_specs(&mut s, "vis.stage1", 3, 1, c0);
    conv_specs(&mut s, "vis.stage2", 3, c0, c1);
    conv_specs(&mut s, "vis.stage3", 3, c1, c2);
    conv_specs(&mut s, "vis.head", 3, c2, cfg.dim);
    let n = cfg.patches();
    s.push(ParamSpec::new(
        "vis.pos",
        &[n, cfg.dim],
        Init::Uniform { fan_in: cfg.dim },
    ));
    s
}

/// Encode `[B, H, W, 1]` images with pixel values in `[0, 1]`.
pub fn encode_image<T: Scalar>(
    p: &Binder<T>,
    cfg: &ModelConfig,
    images: Var,
) -> Result<VisualFeatures> {
    let g = p.graph();
    let shape = g.shape(images);
    let s = cfg.image_size;
    if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 1 {
        return Err(dim_err!(
            "expected images of shape [B, {s}, {s}, 1], got {shape:?}"
        ));
    }
    let b = shape[0];
    let x1 = g.relu(conv(p, images, "vis.stage1", 3, 2)?);
    let x2 = g.relu(conv(p, x1, "vis.stage2", 3, 2)?);
    let x3 = g.relu(conv(p, x2, "vis.stage3", 3, 2)?);
    let head = conv(p, x3, "vis.head", 3, 1)?;
    let grid = cfg.grid();
    let flat = g.reshape(head, &[b, grid * grid, cfg.dim])?;
    let values = g.add(flat, p.get("vis.pos")?)?;
    Ok(VisualFeatures {
        values,
        grid: (grid, grid),
        skip_stack: vec![images, x1, x2],
    })
}

// -- text -------------------------------------------------------------------

pub fn text_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let mut s = vec![
        ParamSpec::new("txt.tok", &[cfg.vocab_size, d], Init::Uniform { fan_in: d }),
        ParamSpec::new("txt.pos", &[cfg.max_len, d], Init::Uniform { fan_in: d }),
    ];
    for l in 0..cfg.text_layers {
        let pre = format!("txt.l{l}");
        for ln in ["ln1", "ln2"] {
            s.push(ParamSpec::new(format!("{pre}.{ln}.g"), &[d], Init::Ones));
            s.push(ParamSpec::new(format!("{pre}.{ln}.b"), &[d], Init::Zeros));
        }
        for proj in ["q", "k", "v", "o"] {
            linear_specs(&mut s, &format!("{pre}.attn.{proj}"), d, d, true);
        }
        linear_specs(&mut s, &format!("{pre}.ff1"), d, cfg.ffn_hidden, true);
        linear_specs(&mut s, &format!("{pre}.ff2"), cfg.ffn_hidden, d, true);
    }
    s.push(ParamSpec::new("txt.lnf.g", &[d], Init::Ones));
    s.push(ParamSpec::new("txt.lnf.b", &[d], Init::Zeros));
    s
}

fn layer_norm<T: Scalar>(p: &Binder<T>, x: Var, name: &str) -> Result<Var> {
    let g = p.graph();
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul(n, p.get(&format!("{name}.g"))?)?;
    g.add(n, p.get(&format!("{name}.b"))?)
}

/// Multi-head self-attention over `[B, L, D]` with padded keys excluded.
fn self_attention<T: Scalar>(
    p: &Binder<T>,
    cfg: &ModelConfig,
    x: Var,
    key_keep: &Tensor<T>,
    name: &str,
) -> Result<Var> {
    let g = p.graph();
    let shape = g.shape(x);
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let h = cfg.heads;
    let dh = d / h;
    let split = |v: Var| -> Result<Var> {
        let r = g.reshape(v, &[b, l, h, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let q = split(linear(p, x, &format!("{name}.q"), true)?)?;
    let k = split(linear(p, x, &format!("{name}.k"), true)?)?;
    let v = split(linear(p, x, &format!("{name}.v"), true)?)?;
    let scores = g.scale(g.matmul_t(q, k)?, 1.0 / (dh as f64).sqrt());
    let keep = key_keep.clone().reshape(&[b, 1, 1, l])?;
    let attn = g.masked_softmax(scores, 3, Some(&keep))?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, l, d])?;
    linear(p, out, &format!("{name}.o"), true)
}

/// Embed and encode already tokenized prompts (all of length `max_len`).
pub fn encode_text<T: Scalar>(
    p: &Binder<T>,
    cfg: &ModelConfig,
    tokens: &[Tokenized],
) -> Result<TextFeatures> {
    let g = p.graph();
    let b = tokens.len();
    let l = cfg.max_len;
    if b == 0 {
        return Err(dim_err!("encode_text needs at least one prompt"));
    }
    let mut ids = Vec::with_capacity(b * l);
    for t in tokens {
        if t.ids.len() != l {
            return Err(dim_err!("token sequence of length {} != max_len {l}", t.ids.len()));
        }
        if let Some(&bad) = t.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        ids.extend_from_slice(&t.ids);
    }
    let pad_mask: Vec<Vec<bool>> = tokens.iter().map(|t| t.pad_mask.clone()).collect();
    let keep: Tensor<T> = keep_tensor(&pad_mask);

    let emb = g.gather_rows(p.get("txt.tok")?, &ids)?;
    let emb = g.reshape(emb, &[b, l, cfg.dim])?;
    let mut x = g.add(emb, p.get("txt.pos")?)?;
    for layer in 0..cfg.text_layers {
        let pre = format!("txt.l{layer}");
        let h = layer_norm(p, x, &format!("{pre}.ln1"))?;
        let a = self_attention(p, cfg, h, &keep, &format!("{pre}.attn"))?;
        x = g.add(x, a)?;
        let h = layer_norm(p, x, &format!("{pre}.ln2"))?;
        let f = g.relu(linear(p, h, &format!("{pre}.ff1"), true)?);
        let f = linear(p, f, &format!("{pre}.ff2"), true)?;
        x = g.add(x, f)?;
    }
    let values = layer_norm(p, x, "txt.lnf")?;
    Ok(TextFeatures {
        values,
        token_ids: tokens.iter().map(|t| t.ids.clone()).collect(),
        pad_mask,
    })
}

// -- decoder ----------------------------------------------------------------

pub fn decoder_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let [c0, c1, _] = cfg.channels;
    let [d0, d1] = cfg.decoder_channels;
    let mut s = Vec::new();
    conv_specs(&mut s, "dec.up1", 3, cfg.dim + c1, d0);
    conv_specs(&mut s, "dec.up2", 3, d0 + c0, d1);
    conv_specs(&mut s, "dec.out", 3, d1 + 1, 1);
    s
}

/// Upsample fused `[B, N, D]` patch features to `[B, H, W, 1]` pixel logits.
pub fn decode_mask<T: Scalar>(
    p: &Binder<T>,
    cfg: &ModelConfig,
    fused: Var,
    grid: (usize, usize),
    skip_stack: &[Var],
) -> Result<Var> {
    let g: &Graph<T> = p.graph();
    if skip_stack.len() != 3 {
        return Err(Error::Config(format!(
            "decoder expects 3 skip maps, got {}",
            skip_stack.len()
        )));
    }
    let shape = g.shape(fused);
    if shape.len() != 3 || grid != (cfg.grid(), cfg.grid()) || shape[1] != grid.0 * grid.1 {
        return Err(dim_err!(
            "fused features {shape:?} cannot be laid out on a {grid:?} grid"
        ));
    }
    let x = g.reshape(fused, &[shape[0], grid.0, grid.1, shape[2]])?;
    let x = g.concat(&[g.upsample2x(x)?, skip_stack[2]], 3)?;
    let x = g.relu(conv(p, x, "dec.up1", 3, 1)?);
    let x = g.concat(&[g.upsample2x(x)?, skip_stack[1]], 3)?;
    let x = g.relu(conv(p, x, "dec.up2", 3, 1)?);
    let x = g.concat(&[g.upsample2x(x)?, skip_stack[0]], 3)?;
    conv(p, x, "dec.out", 3, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, DEFAULT_STEP};
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut s = visual_param_specs(cfg);
        s.extend(text_param_specs(cfg));
        s.extend(decoder_param_specs(cfg));
        s
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Tensor::new(&[1, s, s, 1], (0..s * s).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn visual(store: &ParamStore<f32>, cfg: &ModelConfig, img: &Tensor<f32>) -> Tensor<f32> {
        let g = Graph::new();
        let p = Binder::frozen(&g, store);
        let x = g.constant(img.clone());
        let f = encode_image(&p, cfg, x).unwrap();
        (*g.value(f.values)).clone()
    }

    #[test]
    fn visual_features_shape_and_degenerate_input() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&all_specs(&cfg), 1);
        let s = cfg.image_size;
        let v = visual(&store, &cfg, &Tensor::zeros(&[1, s, s, 1]));
        assert_eq!(v.shape(), &[1, 64, 64]);
        assert!(v.all_finite());
    }

    #[test]
    fn visual_features_are_sensitive_and_deterministic() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&all_specs(&cfg), 2);
        let img = random_image(&cfg, 3);
        let mut other = img.clone();
        other.data_mut()[31 * 64 + 17] += 0.5;
        let a = visual(&store, &cfg, &img);
        let b = visual(&store, &cfg, &img);
        let c = visual(&store, &cfg, &other);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let store2 = ParamStore::init(&all_specs(&cfg), 2);
        assert_eq!(visual(&store2, &cfg, &img), a);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = ModelConfig::default();
        let store = ParamStore::<f32>::init(&all_specs(&cfg), 1);
        let g = Graph::new();
        let p = Binder::frozen(&g, &store);
        let x = g.constant(Tensor::zeros(&[1, 32, 32, 1]));
        assert!(matches!(encode_image(&p, &cfg, x), Err(Error::Dimension(_))));
    }

    fn text(store: &ParamStore<f32>, cfg: &ModelConfig, toks: &[Tokenized]) -> Tensor<f32> {
        let g = Graph::new();
        let p = Binder::frozen(&g, store);
        let f = encode_text(&p, cfg, toks).unwrap();
        (*g.value(f.values)).clone()
    }

    #[test]
    fn pad_embeddings_do_not_leak_into_real_tokens() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::init(&all_specs(&cfg), 4);
        let toks = [Tokenized::from_ids(&[5, 9, 3], cfg.max_len)];
        let before = text(&store, &cfg, &toks);
        let table = store.get_mut("txt.tok").unwrap();
        for x in &mut table.data_mut()[..cfg.dim] {
            *x += 3.0;
        }
        let pos = store.get_mut("txt.pos").unwrap();
        for x in &mut pos.data_mut()[5 * cfg.dim..] {
            *x -= 2.0;
        }
        let after = text(&store, &cfg, &toks);
        let real = 3 * cfg.dim;
        assert_eq!(&before.data()[..real], &after.data()[..real]);
        assert_ne!(before.data()[real..], after.data()[real..]);
    }

    #[test]
    fn single_token_keeps_full_length() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&all_specs(&cfg), 5);
        let e = text(&store, &cfg, &[Tokenized::from_ids(&[7], cfg.max_len)]);
        assert_eq!(e.shape(), &[1, cfg.max_len, cfg.dim]);
        assert!(e.all_finite());
    }

    #[test]
    fn out_of_range_token_is_a_vocabulary_error() {
        let cfg = ModelConfig::default();
        let store = ParamStore::<f32>::init(&all_specs(&cfg), 5);
        let g = Graph::new();
        let p = Binder::frozen(&g, &store);
        let toks = [Tokenized::from_ids(&[cfg.vocab_size], cfg.max_len)];
        assert!(matches!(encode_text(&p, &cfg, &toks), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn empty_prompt_is_finite() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&all_specs(&cfg), 5);
        let e = text(&store, &cfg, &[Tokenized::from_ids(&[], cfg.max_len)]);
        assert!(e.all_finite());
    }

    #[test]
    fn transformer_block_gradients_match_finite_differences() {
        let cfg = ModelConfig::micro();
        let specs = text_param_specs(&cfg);
        let store = ParamStore::<f64>::init(&specs, 6);
        let names: Vec<String> = store.names().cloned().collect();
        let values: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let toks = [Tokenized::from_ids(&[2, 4], cfg.max_len)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = Tensor::new(
            &[1, cfg.max_len, cfg.dim],
            (0..cfg.max_len * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = gradcheck(&values, DEFAULT_STEP, |g, vars| {
            let p = Binder::preset(g, names.iter().cloned().zip(vars.iter().copied()));
            let e = encode_text(&p, &cfg, &toks)?;
            let c = g.constant(probe.clone());
            Ok(g.sum(g.mul(e.values, c)?))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn decoder_output_matches_image_shape() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&all_specs(&cfg), 8);
        let g = Graph::new();
        let p = Binder::frozen(&g, &store);
        let img = g.constant(random_image(&cfg, 9));
        let f = encode_image(&p, &cfg, img).unwrap();
        let logits = decode_mask(&p, &cfg, f.values, f.grid, &f.skip_stack).unwrap();
        let out = g.value(logits);
        assert_eq!(out.shape(), &[1, 64, 64, 1]);
        assert!(out.all_finite());
        let probs = g.value(g.sigmoid(logits));
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let err = decode_mask(&p, &cfg, f.values, f.grid, &f.skip_stack[..2]);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
