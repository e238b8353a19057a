use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};

use super::Checkpoint;
use crate::autodiff::Graph;
use crate::data::load_gray;
use crate::error::{dim_err, Error, Result};
use crate::model::forward_infer;
use crate::objective::binarize;
use crate::params::Binder;
use crate::tensor::Tensor;

/// Result of segmenting one image for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// row-major S×S
    pub mask: Vec<bool>,
    /// set when the prompt is empty or more than half unknown words
    pub warning: Option<String>,
    /// `[H', W']` patch interest, summing to 1
    pub w_poi: Option<Tensor<f32>>,
    /// one weight per token position (0 at pads)
    pub w_woi: Option<Vec<f32>>,
}

/// Segment `pixels` (8-bit, S×S) for `prompt`.
pub fn infer_pixels(ck: &Checkpoint, pixels: &[u8], prompt: &str, heatmaps: bool) -> Result<Inference> {
    let s = ck.model.image_size;
    if pixels.len() != s * s {
        return Err(dim_err!("image has {} pixels, model expects {s}x{s}", pixels.len()));
    }
    let tokens = ck.vocab.tokenize(prompt, ck.model.max_len)?;
    let warning = if tokens.empty {
        Some("empty prompt; segmenting with an all-pad sequence".to_string())
    } else if tokens.mostly_unknown() {
        Some(format!(
            "{} of {} prompt words are not in the vocabulary",
            tokens.unknown,
            tokens.len_nonpad()
        ))
    } else {
        None
    };
    let image = Tensor::new(&[1, s, s, 1], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    let g = Graph::<f32>::new();
    let p = Binder::frozen(&g, &ck.params);
    let out = forward_infer(&p, &ck.model, ck.run.attention, &image, &[tokens], heatmaps)?;
    let grid = ck.model.grid();
    let w_poi = out
        .w_poi
        .map(|w| g.value(w).as_ref().clone().reshape(&[grid, grid]))
        .transpose()?;
    Ok(Inference {
        mask: binarize(g.value(out.logits).data()),
        warning,
        w_poi,
        w_woi: out.w_woi.map(|w| g.value(w).data().to_vec()),
    })
}

pub fn infer(ckpt: &Path, image: &Path, prompt: &str, heatmaps: bool) -> Result<Inference> {
    let ck = Checkpoint::load(ckpt)?;
    infer_pixels(&ck, &load_gray(image)?, prompt, heatmaps)
}

fn save_png(path: &Path, side: usize, px: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(side as u32, side as u32, px)
        .ok_or_else(|| Error::Internal("pixel buffer does not match image side".into()))?;
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

impl Inference {
    pub fn save_mask(&self, path: &Path) -> Result<()> {
        let side = (self.mask.len() as f64).sqrt() as usize;
        save_png(path, side, self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
    }

    /// Write W_poi as an H'×W' PNG scaled so the largest weight is white.
    /// Returns the path written, if heatmaps were computed.
    pub fn save_heatmap(&self, path: &Path) -> Result<Option<PathBuf>> {
        let Some(w) = &self.w_poi else {
            return Ok(None);
        };
        let max = w.data().iter().cloned().fold(0.0f32, f32::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let px = w.data().iter().map(|&x| (x * scale).round().clamp(0.0, 255.0) as u8).collect();
        save_png(path, w.shape()[0], px)?;
        Ok(Some(path.to_path_buf()))
    }
}
