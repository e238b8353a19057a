//! Shape scenes, rasterization and the referring-expression grammar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};

pub const CANVAS: usize = 64;
/// Accepted fraction of target pixels.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.20);
const MARGIN: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Bar];

    /// Singular and plural synonyms.
    fn words(self) -> [(&'static str, &'static str); 2] {
        match self {
            ShapeKind::Circle => [("circle", "circles"), ("disc", "discs")],
            ShapeKind::Square => [("square", "squares"), ("box", "boxes")],
            ShapeKind::Bar => [("bar", "bars"), ("stripe", "stripes")],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    pub fn is_upper(self) -> bool {
        matches!(self, Quadrant::UpperLeft | Quadrant::UpperRight)
    }

    pub fn is_left(self) -> bool {
        matches!(self, Quadrant::UpperLeft | Quadrant::LowerLeft)
    }

    /// Top-left pixel of the quadrant.
    fn origin(self) -> (i32, i32) {
        let h = (CANVAS / 2) as i32;
        (
            if self.is_left() { 0 } else { h },
            if self.is_upper() { 0 } else { h },
        )
    }
}

/// One half of the canvas, as named in prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Half {
    Upper,
    Lower,
    Left,
    Right,
}

impl Half {
    const ALL: [Half; 4] = [Half::Upper, Half::Lower, Half::Left, Half::Right];

    fn contains(self, q: Quadrant) -> bool {
        match self {
            Half::Upper => q.is_upper(),
            Half::Lower => !q.is_upper(),
            Half::Left => q.is_left(),
            Half::Right => !q.is_left(),
        }
    }

    fn words(self) -> &'static [&'static str] {
        match self {
            Half::Upper => &["upper", "top"],
            Half::Lower => &["lower", "bottom"],
            Half::Left => &["left"],
            Half::Right => &["right"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub quadrant: Quadrant,
    /// centre in pixels
    pub cx: i32,
    pub cy: i32,
    /// radius or half-extent along the long axis
    pub size: i32,
    /// half-extent across a bar
    pub thickness: i32,
    pub vertical: bool,
    /// grey level 0–255
    pub intensity: u8,
}

impl Shape {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            ShapeKind::Bar => {
                let (along, across) = if self.vertical { (dy, dx) } else { (dx, dy) };
                along.abs() <= self.size && across.abs() <= self.thickness
            }
        }
    }

    /// Row-major 64×64 pixel mask.
    pub fn mask(&self) -> Vec<bool> {
        (0..CANVAS * CANVAS)
            .map(|i| self.contains((i % CANVAS) as i32, (i / CANVAS) as i32))
            .collect()
    }
}

/// A scene plus the prompt that refers to a subset of its shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<Shape>,
    /// indices into `shapes` named by the prompt
    pub target: Vec<usize>,
    pub prompt: String,
    pub background: u8,
    pub rng_seed: u64,
}

/// Every word the prompt grammar can produce.
pub const GRAMMAR_WORDS: &[&str] = &[
    "upper", "top", "lower", "bottom", "left", "right", //
    "circle", "disc", "square", "box", "bar", "stripe", //
    "circles", "discs", "squares", "boxes", "bars", "stripes", //
    "both", "all", "shapes", "the", "segment", "find", "show", "mark", "highlight", "please",
    "in", "image", "picture", "on", "of", "a", "region", "object", "corner", "side", "this",
];

/// The fixed vocabulary of the synthetic benchmark.
pub fn grammar_vocabulary() -> Vocabulary {
    Vocabulary::from_words(GRAMMAR_WORDS)
}

/// Deterministic per-index seed derived from a master seed.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master_seed ^ mix(index))
}

fn random_shape(rng: &mut ChaCha8Rng, quadrant: Quadrant) -> Shape {
    let kind = *ShapeKind::ALL.choose(rng).expect("non-empty");
    let vertical = rng.gen_bool(0.5);
    let (size, thickness) = match kind {
        ShapeKind::Circle => (rng.gen_range(5..=11), 0),
        ShapeKind::Square => (rng.gen_range(4..=10), 0),
        ShapeKind::Bar => (rng.gen_range(7..=13), rng.gen_range(2..=4)),
    };
    let (ex, ey) = match (kind, vertical) {
        (ShapeKind::Bar, false) => (size, thickness),
        (ShapeKind::Bar, true) => (thickness, size),
        _ => (size, size),
    };
    let (ox, oy) = quadrant.origin();
    let half = (CANVAS / 2) as i32;
    let cx = ox + rng.gen_range(MARGIN + ex..=half - 1 - MARGIN - ex);
    let cy = oy + rng.gen_range(MARGIN + ey..=half - 1 - MARGIN - ey);
    Shape {
        kind,
        quadrant,
        cx,
        cy,
        size,
        thickness,
        vertical,
        intensity: rng.gen_range(140..=255),
    }
}

/// A referring expression: its content words and the shapes it names.
#[derive(Debug, Clone)]
struct Reference {
    body: Vec<&'static str>,
    target: Vec<usize>,
    plural: bool,
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).copied().expect("non-empty")
}

fn single_reference(rng: &mut ChaCha8Rng, shapes: &[Shape], i: usize) -> Reference {
    let s = shapes[i];
    let v = if s.quadrant.is_upper() { Half::Upper } else { Half::Lower };
    let h = if s.quadrant.is_left() { Half::Left } else { Half::Right };
    let noun = s.kind.words().choose(rng).expect("non-empty").0;
    Reference {
        body: vec![pick(rng, v.words()), pick(rng, h.words()), noun],
        target: vec![i],
        plural: false,
    }
}

/// Plural references whose target set is defined by a predicate over the
/// scene, so each is unambiguous by construction.
fn plural_references(rng: &mut ChaCha8Rng, shapes: &[Shape]) -> Vec<Reference> {
    let mut out = Vec::new();
    for half in Half::ALL {
        let inside: Vec<usize> = (0..shapes.len())
            .filter(|&i| half.contains(shapes[i].quadrant))
            .collect();
        if inside.len() != 2 {
            continue;
        }
        let (a, b) = (shapes[inside[0]].kind, shapes[inside[1]].kind);
        let noun = if a == b {
            a.words().choose(rng).expect("non-empty").1
        } else {
            "shapes"
        };
        out.push(Reference {
            body: vec!["both", pick(rng, half.words()), noun],
            target: inside,
            plural: true,
        });
    }
    for kind in ShapeKind::ALL {
        let same: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].kind == kind).collect();
        if same.len() >= 2 {
            let noun = kind.words().choose(rng).expect("non-empty").1;
            out.push(Reference {
                body: vec!["all", noun],
                target: same,
                plural: true,
            });
        }
    }
    if shapes.len() >= 2 {
        out.push(Reference {
            body: vec!["all", "shapes"],
            target: (0..shapes.len()).collect(),
            plural: true,
        });
    }
    out
}

/// Wrap a reference in optional filler words; at most 8 words in total.
fn phrase(rng: &mut ChaCha8Rng, r: &Reference) -> String {
    const VERBS: &[&str] = &["segment", "find", "show", "mark", "highlight"];
    const SUFFIXES: &[&[&str]] = &[&["in", "the", "image"], &["in", "this", "picture"], &["region"]];
    let mut words: Vec<&str> = Vec::new();
    if rng.gen_bool(0.6) {
        if rng.gen_bool(0.15) {
            words.push("please");
        }
        words.push(pick(rng, VERBS));
    }
    if !r.plural && rng.gen_bool(0.5) {
        words.push("the");
    }
    words.extend(&r.body);
    if rng.gen_bool(0.3) {
        let suffix = SUFFIXES.choose(rng).expect("non-empty");
        if words.len() + suffix.len() <= 8 {
            words.extend(*suffix);
        }
    }
    words.join(" ")
}

/// Union mask of the given shapes.
pub fn union_mask(shapes: &[Shape], which: &[usize]) -> Vec<bool> {
    (0..CANVAS * CANVAS)
        .map(|i| {
            let (x, y) = ((i % CANVAS) as i32, (i / CANVAS) as i32);
            which.iter().any(|&k| shapes[k].contains(x, y))
        })
        .collect()
}

fn foreground_fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64
}

impl SceneSpec {
    /// Sample a scene, its referring prompt and target from one seed.
    ///
    /// Shapes sit in distinct quadrants, so they never overlap; sizes and
    /// targets are redrawn until the target covers 2–20 % of the canvas.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let n = *[1usize, 2, 2, 3, 3].choose(&mut rng).expect("non-empty");
            let mut quadrants = Quadrant::ALL.to_vec();
            quadrants.shuffle(&mut rng);
            let mut shapes: Vec<Shape> = quadrants[..n]
                .iter()
                .map(|&q| random_shape(&mut rng, q))
                .collect();
            shapes.sort_by_key(|s| Quadrant::ALL.iter().position(|&q| q == s.quadrant));
            let plural = plural_references(&mut rng, &shapes);
            let reference = if !plural.is_empty() && rng.gen_bool(0.3) {
                plural.choose(&mut rng).expect("non-empty").clone()
            } else {
                let i = rng.gen_range(0..shapes.len());
                single_reference(&mut rng, &shapes, i)
            };
            let frac = foreground_fraction(&union_mask(&shapes, &reference.target));
            if frac < FOREGROUND_RANGE.0 || frac > FOREGROUND_RANGE.1 {
                continue;
            }
            let prompt = phrase(&mut rng, &reference);
            return Self {
                shapes,
                target: reference.target,
                prompt,
                background: rng.gen_range(0..=60),
                rng_seed: seed,
            };
        }
    }

    /// 8-bit grey image: shapes over a flat background with per-pixel
    /// intensity jitter.
    pub fn render(&self) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ 0x5EED_1A6E);
        (0..CANVAS * CANVAS)
            .map(|i| {
                let (x, y) = ((i % CANVAS) as i32, (i / CANVAS) as i32);
                let base = self
                    .shapes
                    .iter()
                    .find(|s| s.contains(x, y))
                    .map_or(self.background, |s| s.intensity);
                let jitter: i32 = rng.gen_range(-12..=12);
                (base as i32 + jitter).clamp(0, 255) as u8
            })
            .collect()
    }

    /// Ground truth of the scene's own prompt.
    pub fn target_mask(&self) -> Vec<bool> {
        union_mask(&self.shapes, &self.target)
    }

    /// All shape pixels.
    pub fn shapes_mask(&self) -> Vec<bool> {
        union_mask(&self.shapes, &(0..self.shapes.len()).collect::<Vec<_>>())
    }
}

/// Two prompts naming different single shapes of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPair {
    pub prompt_a: String,
    pub mask_a: Vec<bool>,
    pub prompt_b: String,
    pub mask_b: Vec<bool>,
}

/// Refer to two distinct shapes of `scene` with canonical prompts
/// (`"<upper|lower> <left|right> <kind>"`).
pub fn counterfactual_pair(scene: &SceneSpec) -> Result<CounterfactualPair> {
    if scene.shapes.len() < 2 {
        return Err(Error::NotApplicable(format!(
            "counterfactual prompts need two shapes, scene has {}",
            scene.shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed ^ 0xC0FF_EE00);
    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.shuffle(&mut rng);
    let canonical = |i: usize| {
        let s = scene.shapes[i];
        format!(
            "{} {} {}",
            if s.quadrant.is_upper() { "upper" } else { "lower" },
            if s.quadrant.is_left() { "left" } else { "right" },
            s.kind.words()[0].0
        )
    };
    let (a, b) = (order[0], order[1]);
    Ok(CounterfactualPair {
        prompt_a: canonical(a),
        mask_a: union_mask(&scene.shapes, &[a]),
        prompt_b: canonical(b),
        mask_b: union_mask(&scene.shapes, &[b]),
    })
}
