//! Synthetic language-guided segmentation benchmark.
//!
//! Each scene holds one to three shapes (circle, square or bar) in distinct
//! quadrants of a 64×64 canvas. A prompt such as `"upper left circle"` or
//! `"both lower squares"` names a subset of the shapes, and the ground truth
//! is exactly the union of their pixels.

mod dataset;
mod scene;

pub use dataset::{
    generate, load_gray, load_split, read_manifest, split_sizes, ManifestRecord, Sample, Split,
    DEFAULT_COUNT, DEFAULT_RATIOS, MANIFEST,
};
pub use scene::{
    counterfactual_pair, grammar_vocabulary, sample_seed, union_mask, CounterfactualPair,
    Quadrant, SceneSpec, Shape, ShapeKind, CANVAS, FOREGROUND_RANGE, GRAMMAR_WORDS,
};
