//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Build with `wasm-pack build crates/web --target web --out-dir www/pkg`
//! and serve `crates/web/www`.

use wasm_bindgen::prelude::*;

use crossrecon::data::{counterfactual_pair, SceneSpec, CANVAS};
use crossrecon::interaction::{contrastive_loss_value, TemperatureForm};
use crossrecon::reconstruction::{sample_mask, MaskStrategy};

fn js_err(e: crossrecon::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One generated scene with its prompt and referred mask.
#[wasm_bindgen]
pub struct Scene {
    prompt: String,
    pixels: Vec<u8>,
    target: Vec<u8>,
    counterfactual: Option<(String, Vec<u8>, String, Vec<u8>)>,
}

fn mask_bytes(m: &[bool]) -> Vec<u8> {
    m.iter().map(|&b| b as u8).collect()
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Scene {
        let spec = SceneSpec::generate(seed);
        let counterfactual = counterfactual_pair(&spec)
            .ok()
            .map(|p| (p.prompt_a, mask_bytes(&p.mask_a), p.prompt_b, mask_bytes(&p.mask_b)));
        Scene {
            prompt: spec.prompt.clone(),
            pixels: spec.render(),
            target: mask_bytes(&spec.target_mask()),
            counterfactual,
        }
    }

    pub fn side() -> usize {
        CANVAS
    }

    #[wasm_bindgen(getter)]
    pub fn prompt(&self) -> String {
        self.prompt.clone()
    }

    /// Grey levels, row-major.
    #[wasm_bindgen(getter)]
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    /// 1 on the referred shapes.
    #[wasm_bindgen(getter)]
    pub fn target(&self) -> Vec<u8> {
        self.target.clone()
    }

    /// Two single-shape prompts for the same image; empty when the scene
    /// has one shape.
    #[wasm_bindgen(getter)]
    pub fn counterfactual_prompts(&self) -> Vec<String> {
        self.counterfactual
            .as_ref()
            .map(|(a, _, b, _)| vec![a.clone(), b.clone()])
            .unwrap_or_default()
    }

    /// Mask of counterfactual prompt `which` (0 or 1).
    pub fn counterfactual_mask(&self, which: usize) -> Vec<u8> {
        match (&self.counterfactual, which) {
            (Some((_, a, _, _)), 0) => a.clone(),
            (Some((_, _, _, b)), 1) => b.clone(),
            _ => Vec::new(),
        }
    }
}

/// Inclusion frequency of each position over `draws` masks of ratio
/// `alpha`; `weighted = false` samples uniformly.
#[wasm_bindgen]
pub fn mask_frequencies(
    weights: Vec<f64>,
    alpha: f64,
    weighted: bool,
    draws: u32,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    let strategy = if weighted {
        MaskStrategy::Weighted
    } else {
        MaskStrategy::Random
    };
    let mut counts = vec![0u32; weights.len()];
    for k in 0..draws as u64 {
        let m = sample_mask(&weights, None, alpha, strategy, seed.wrapping_add(k)).map_err(js_err)?;
        for i in m.masked_indices {
            counts[i] += 1;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect())
}

/// Contrastive loss of a row-major `b×b` similarity matrix at temperature
/// `tau`: `[exp(S/τ) form, exp(S)/τ form]`.
#[wasm_bindgen]
pub fn contrastive_losses(similarities: Vec<f64>, b: usize, tau: f64) -> Result<Vec<f64>, JsError> {
    Ok(vec![
        contrastive_loss_value(&similarities, b, tau, TemperatureForm::Scaled).map_err(js_err)?,
        contrastive_loss_value(&similarities, b, tau, TemperatureForm::Printed).map_err(js_err)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_buffers_cover_the_canvas() {
        let s = Scene::new(3);
        assert_eq!(s.pixels().len(), Scene::side() * Scene::side());
        assert_eq!(s.target().len(), s.pixels().len());
        assert!(s.target().contains(&1));
        assert!(!s.prompt().is_empty());
    }

    #[test]
    fn counterfactual_masks_exist_for_multi_shape_scenes() {
        let s = (0..50).map(Scene::new).find(|s| !s.counterfactual_prompts().is_empty()).unwrap();
        let (a, b) = (s.counterfactual_mask(0), s.counterfactual_mask(1));
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x & y == 0));
        assert!(s.counterfactual_mask(2).is_empty());
    }

    #[test]
    fn heavier_positions_are_masked_more_often() {
        let f = mask_frequencies(vec![0.1, 0.2, 0.3, 0.4], 0.5, true, 2000, 1).unwrap();
        assert!(f.windows(2).all(|w| w[0] < w[1]), "{f:?}");
        let total: f64 = f.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn both_temperature_forms_agree_at_one() {
        let s = vec![0.9, 0.1, -0.2, 0.7];
        let l = contrastive_losses(s.clone(), 2, 1.0).unwrap();
        assert_eq!(l[0], l[1]);
        let l = contrastive_losses(s, 2, 0.07).unwrap();
        assert_ne!(l[0], l[1]);
    }
}
