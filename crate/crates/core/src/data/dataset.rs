//! On-disk dataset: generation, manifest and loading.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::scene::{sample_seed, SceneSpec, CANVAS};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const DEFAULT_COUNT: usize = 2500;
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

/// One line of `manifest.jsonl`; paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub seed: u64,
}

/// Split sizes for `count` samples: train and val are rounded, test takes
/// the remainder.
pub fn split_sizes(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if count == 0 || ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "need count >= 1 and non-negative ratios summing to 1, got {count} / {ratios:?}"
        )));
    }
    let train = ((count as f64 * ratios[0]).round() as usize).min(count);
    let val = ((count as f64 * ratios[1]).round() as usize).min(count - train);
    Ok([train, val, count - train - val])
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn png_bytes(pixels: Vec<u8>) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(CANVAS as u32, CANVAS as u32, pixels)
        .ok_or_else(|| Error::Internal("pixel buffer does not match canvas".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Write `count` samples under `root` and return the manifest records.
pub fn generate(root: &Path, count: usize, ratios: [f64; 3], master_seed: u64) -> Result<Vec<ManifestRecord>> {
    let sizes = split_sizes(count, ratios)?;
    for split in Split::ALL {
        for sub in ["images", "masks"] {
            let dir = root.join(split.name()).join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut records = Vec::with_capacity(count);
    let mut index = 0usize;
    for (split, &n) in Split::ALL.iter().zip(&sizes) {
        for _ in 0..n {
            let seed = sample_seed(master_seed, index as u64);
            let scene = SceneSpec::generate(seed);
            let id = format!("{index:05}");
            let image = format!("{}/images/{id}.png", split.name());
            let mask = format!("{}/masks/{id}.png", split.name());
            write_atomic(&root.join(&image), &png_bytes(scene.render())?)?;
            let mask_px = scene.target_mask().iter().map(|&m| if m { 255 } else { 0 }).collect();
            write_atomic(&root.join(&mask), &png_bytes(mask_px)?)?;
            records.push(ManifestRecord {
                id,
                split: *split,
                image,
                mask,
                prompt: scene.prompt,
                seed,
            });
            index += 1;
        }
    }
    let mut text = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut text, r)?;
        text.write_all(b"\n").map_err(|e| Error::io(root.join(MANIFEST), e))?;
    }
    write_atomic(&root.join(MANIFEST), &text)?;
    Ok(records)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A loaded sample: pixels scaled to [0, 1] and a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f32>,
    pub mask: Vec<bool>,
    pub prompt: String,
    pub seed: u64,
}

impl Sample {
    /// In-memory sample identical to what [`generate`] writes for `seed`.
    pub fn from_scene(id: impl Into<String>, scene: &SceneSpec) -> Self {
        Self {
            id: id.into(),
            image: scene.render().iter().map(|&p| p as f32 / 255.0).collect(),
            mask: scene.target_mask(),
            prompt: scene.prompt.clone(),
            seed: scene.rng_seed,
        }
    }
}

/// Decode a grey PNG of the canvas size into raw 8-bit pixels.
pub fn load_gray(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path)?.to_luma8();
    if img.width() as usize != CANVAS || img.height() as usize != CANVAS {
        return Err(Error::Dimension(format!(
            "{} is {}x{}, expected {CANVAS}x{CANVAS}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.into_raw())
}

/// Load every sample of `split` in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    read_manifest(root)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let image = load_gray(&root.join(&r.image))?;
            let mask = load_gray(&root.join(&r.mask))?;
            Ok(Sample {
                id: r.id,
                image: image.iter().map(|&p| p as f32 / 255.0).collect(),
                mask: mask.iter().map(|&m| m >= 128).collect(),
                prompt: r.prompt,
                seed: r.seed,
            })
        })
        .collect()
}
