//! Deterministic top-down scenes of colored targets with templated
//! referring expressions.
//!
//! Objects are axis-aligned: roads are long rectangles, buildings squares,
//! vehicles small rectangles and tanks circles. Every object in a scene has
//! a distinct (color, category) pair, so "the <color> <category>" always
//! names exactly one of them. Distractors are biased toward sharing either
//! the referent's color or its category, so neither word alone suffices.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ReferringSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Road,
    Building,
    Vehicle,
    Tank,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Road, Category::Building, Category::Vehicle, Category::Tank];

    pub fn word(self) -> &'static str {
        match self {
            Category::Road => "road",
            Category::Building => "building",
            Category::Vehicle => "vehicle",
            Category::Tank => "tank",
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.20, 0.20]),
    ("green", [0.25, 0.70, 0.30]),
    ("blue", [0.20, 0.35, 0.85]),
    ("yellow", [0.90, 0.85, 0.25]),
    ("orange", [0.95, 0.55, 0.15]),
    ("purple", [0.60, 0.30, 0.75]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.55, 0.55, 0.55]),
];

pub const LOCATIONS: [&str; 4] = ["left", "right", "top", "bottom"];

/// Every word the expression grammar can produce, in a fixed order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w = vec!["the", "on"];
    w.extend(COLORS.iter().map(|c| c.0));
    w.extend(Category::ALL.iter().map(|c| c.word()));
    w.extend(LOCATIONS);
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Pixels `x0 <= x < x0 + w`, `y0 <= y < y0 + h`.
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    /// Pixels whose centers lie within `r` of `(cx, cy)`.
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Circle { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Inclusive-exclusive pixel bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Rect { x0, y0, w, h } => (x0, y0, x0 + w, y0 + h),
            Shape::Circle { cx, cy, r } => (
                (cx - r).floor().max(0.0) as usize,
                (cy - r).floor().max(0.0) as usize,
                (cx + r).ceil() as usize,
                (cy + r).ceil() as usize,
            ),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { x0, y0, w, h } => (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0),
            Shape::Circle { cx, cy, .. } => (cx, cy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    /// Index into [`COLORS`].
    pub color: usize,
    pub shape: Shape,
    /// 0 or 90 degrees.
    pub orientation: u16,
}

impl SceneObject {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
    pub referent: usize,
    /// Location word used in the expression, if any.
    pub location: Option<String>,
}

impl SceneSpec {
    pub fn distractors(&self) -> usize {
        self.objects.len() - 1
    }

    pub fn referent(&self) -> &SceneObject {
        &self.objects[self.referent]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub canvas: usize,
    /// Side of the union-encoder copy of the image.
    pub union_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub location_prob: f64,
    pub same_color_prob: f64,
    pub same_category_prob: f64,
    /// Blend weight of object color over the background.
    pub contrast: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            union_size: 64,
            min_objects: 2,
            max_objects: 4,
            location_prob: 0.5,
            same_color_prob: 0.25,
            same_category_prob: 0.25,
            contrast: 0.8,
            noise: 0.04,
        }
    }
}

const PLACE_TRIES: usize = 200;
const SCENE_TRIES: usize = 20;
const MARGIN: usize = 2;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.canvas < 32 || !self.canvas.is_multiple_of(16) {
            return bad(format!(
                "data.canvas {} must be a multiple of 16, at least 32",
                self.canvas
            ));
        }
        if self.union_size == 0 || self.union_size > self.canvas {
            return bad(format!("data.union_size {} must be in 1..=canvas", self.union_size));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("data.min_objects must be in 1..=data.max_objects".into());
        }
        if self.max_objects > COLORS.len() * Category::ALL.len() {
            return bad("data.max_objects exceeds the number of distinct objects".into());
        }
        for (k, v) in [
            ("data.location_prob", self.location_prob),
            ("data.same_color_prob", self.same_color_prob),
            ("data.same_category_prob", self.same_category_prob),
            ("data.contrast", self.contrast),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("data.noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

fn random_shape(rng: &mut ChaCha8Rng, cat: Category, canvas: usize) -> (Shape, u16) {
    let s = canvas as f64 / 128.0;
    let px = |v: f64| ((v * s).round() as usize).max(2);
    let rect = |long: (f64, f64), short: (f64, f64), rng: &mut ChaCha8Rng| {
        let a = px(rng.gen_range(long.0..=long.1));
        let b = px(rng.gen_range(short.0..=short.1));
        let vertical = rng.gen_bool(0.5);
        let (w, h) = if vertical { (b, a) } else { (a, b) };
        let x0 = rng.gen_range(0..=canvas - w);
        let y0 = rng.gen_range(0..=canvas - h);
        (Shape::Rect { x0, y0, w, h }, if vertical { 90 } else { 0 })
    };
    match cat {
        Category::Road => rect((56.0, 96.0), (8.0, 12.0), rng),
        Category::Vehicle => rect((12.0, 16.0), (6.0, 8.0), rng),
        Category::Building => {
            let side = px(rng.gen_range(16.0..=26.0));
            let x0 = rng.gen_range(0..=canvas - side);
            let y0 = rng.gen_range(0..=canvas - side);
            (
                Shape::Rect {
                    x0,
                    y0,
                    w: side,
                    h: side,
                },
                0,
            )
        }
        Category::Tank => {
            let r = rng.gen_range(6.0..=11.0) * s;
            let cx = rng.gen_range(r..=canvas as f64 - r);
            let cy = rng.gen_range(r..=canvas as f64 - r);
            (Shape::Circle { cx, cy, r }, 0)
        }
    }
}

fn overlaps(a: &Shape, b: &Shape) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    ax0 < bx1 + MARGIN && bx0 < ax1 + MARGIN && ay0 < by1 + MARGIN && by0 < ay1 + MARGIN
}

fn location_word(shape: &Shape, canvas: usize) -> &'static str {
    let (cx, cy) = shape.center();
    let dx = cx - canvas as f64 / 2.0;
    let dy = cy - canvas as f64 / 2.0;
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if dy < 0.0 {
        "top"
    } else {
        "bottom"
    }
}

/// Pick attributes for a distractor, avoiding pairs already in the scene.
fn distractor_attrs(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    referent: (Category, usize),
    used: &[(Category, usize)],
) -> Option<(Category, usize)> {
    let u: f64 = rng.gen();
    let mut pool: Vec<(Category, usize)> = Vec::new();
    for &cat in &Category::ALL {
        for color in 0..COLORS.len() {
            if !used.contains(&(cat, color)) {
                pool.push((cat, color));
            }
        }
    }
    let preferred: Vec<(Category, usize)> = if u < cfg.same_color_prob {
        pool.iter().copied().filter(|p| p.1 == referent.1).collect()
    } else if u < cfg.same_color_prob + cfg.same_category_prob {
        pool.iter().copied().filter(|p| p.0 == referent.0).collect()
    } else {
        Vec::new()
    };
    let from = if preferred.is_empty() { &pool } else { &preferred };
    from.choose(rng).copied()
}

fn try_scene(rng: &mut ChaCha8Rng, seed: u64, cfg: &SynthConfig) -> Option<SceneSpec> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let ref_attrs = (*Category::ALL.choose(rng)?, rng.gen_range(0..COLORS.len()));
    let mut attrs = vec![ref_attrs];
    for _ in 1..n {
        let a = distractor_attrs(rng, cfg, ref_attrs, &attrs)?;
        attrs.push(a);
    }
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for (category, color) in attrs {
        let placed = (0..PLACE_TRIES).find_map(|_| {
            let (shape, orientation) = random_shape(rng, category, cfg.canvas);
            (!objects.iter().any(|o| overlaps(&o.shape, &shape))).then_some((shape, orientation))
        });
        let (shape, orientation) = placed?;
        objects.push(SceneObject {
            category,
            color,
            shape,
            orientation,
        });
    }
    // Shuffle draw order so the referent is not always first.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let referent = order.iter().position(|&i| i == 0)?;
    let objects: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
    let location = rng
        .gen_bool(cfg.location_prob)
        .then(|| location_word(&objects[referent].shape, cfg.canvas).to_string());
    Some(SceneSpec {
        seed,
        canvas: cfg.canvas,
        objects,
        referent,
        location,
    })
}

pub fn expression(spec: &SceneSpec) -> String {
    let r = spec.referent();
    let mut e = format!("the {} {}", r.color_name(), r.category.word());
    if let Some(loc) = &spec.location {
        e.push_str(" on the ");
        e.push_str(loc);
    }
    e
}

fn render(rng: &mut ChaCha8Rng, spec: &SceneSpec, cfg: &SynthConfig) -> Vec<u8> {
    let n = cfg.canvas;
    let base: f64 = rng.gen_range(0.30..0.50);
    let tint: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let mut img = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let u = x as f64 / n as f64 - 0.5;
            let v = y as f64 / n as f64 - 0.5;
            let obj = spec.objects.iter().find(|o| o.shape.contains(x, y));
            for c in 0..3 {
                let bg = base + tint[c] + gx * u + gy * v;
                let mut val = match obj {
                    Some(o) => cfg.contrast * COLORS[o.color].1[c] + (1.0 - cfg.contrast) * bg,
                    None => bg,
                };
                if cfg.noise > 0.0 {
                    val += rng.gen_range(-cfg.noise..=cfg.noise);
                }
                img[(y * n + x) * 3 + c] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

/// Deterministic sample for `seed`.
pub fn synth_scene(seed: u64, id: &str, cfg: &SynthConfig) -> Result<ReferringSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = (0..SCENE_TRIES)
        .find_map(|_| try_scene(&mut rng, seed, cfg))
        .ok_or_else(|| Error::Generation {
            seed,
            msg: format!(
                "could not place {}..={} non-overlapping objects on a {} canvas",
                cfg.min_objects, cfg.max_objects, cfg.canvas
            ),
        })?;
    let image = render(&mut rng, &spec, cfg);
    let n = cfg.canvas;
    let r = spec.referent().shape;
    let mask = (0..n * n).map(|i| r.contains(i % n, i / n) as u8).collect();
    Ok(ReferringSample {
        id: id.to_string(),
        width: n,
        height: n,
        image,
        mask,
        expression: expression(&spec),
        seed,
        meta: Some(spec),
    })
}
