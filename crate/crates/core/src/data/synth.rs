//! Synthetic shape scenes: coloured circles, squares, triangles and stars
//! on a noisy background, with tight boxes.

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{Annotation, AnnotationFile, Category, ImageEntry};
use super::DetectionSet;
use crate::detector::BBox;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    /// Whether the point `(u, v)` of the unit box belongs to the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            Shape::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
            Shape::Star => point_in_polygon(u, v, &star_polygon()),
        }
    }
}

fn star_polygon() -> [(f64, f64); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (i, p) in pts.iter_mut().enumerate() {
        let r = if i % 2 == 0 { 0.5 } else { 0.21 };
        let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
        *p = (0.5 + r * a.cos(), 0.55 + r * a.sin());
    }
    pts
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colour {
    Red,
    Blue,
    Green,
    Yellow,
}

impl Colour {
    pub fn name(self) -> &'static str {
        match self {
            Colour::Red => "red",
            Colour::Blue => "blue",
            Colour::Green => "green",
            Colour::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Colour::Red => [0.86, 0.18, 0.16],
            Colour::Blue => [0.16, 0.32, 0.88],
            Colour::Green => [0.15, 0.70, 0.25],
            Colour::Yellow => [0.92, 0.80, 0.15],
        }
    }
}

/// Scene generator settings. Classes are every colour × shape pair, colour
/// major: with two colours and four shapes, classes 0–3 are the first
/// colour's shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    pub colours: Vec<Colour>,
    /// Object side length as a fraction of the canvas.
    pub scale_range: (f64, f64),
    /// Allow objects to overlap; later objects are painted over earlier ones.
    pub occlusion: bool,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            min_objects: 1,
            max_objects: 3,
            shapes: Shape::ALL.to_vec(),
            colours: vec![Colour::Red, Colour::Blue],
            scale_range: (0.15, 0.5),
            occlusion: true,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

const MIN_OBJECT_PIXELS: f64 = 4.0;
const MAX_PLACEMENT_TRIES: usize = 50;
/// Overlapping placements are rejected beyond this IoU so every object
/// stays recognisable.
const MAX_OVERLAP_IOU: f64 = 0.3;

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.colours.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.colours
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |s| format!("{}-{}", c.name(), s.name())))
            .collect()
    }

    fn class_parts(&self, class_id: usize) -> (Colour, Shape) {
        let ns = self.shapes.len();
        (self.colours[class_id / ns], self.shapes[class_id % ns])
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() == 0 {
            return Err(Error::config("scene catalog is empty"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("bad object scale range {:?}", self.scale_range)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("need 1 ≤ min_objects ≤ max_objects"));
        }
        let min_side = lo * self.canvas as f64;
        if min_side < MIN_OBJECT_PIXELS {
            return Err(Error::config(format!(
                "canvas {} too small: smallest object would be {min_side:.1} px",
                self.canvas
            )));
        }
        if !self.occlusion && self.max_objects as f64 * min_side * min_side > (self.canvas * self.canvas) as f64 {
            return Err(Error::config(format!(
                "canvas {} cannot hold {} disjoint objects",
                self.canvas, self.max_objects
            )));
        }
        Ok(())
    }

    /// Renders one scene. The first object has class `first_class`; the
    /// others are drawn uniformly.
    pub fn render(&self, rng: &mut ChaCha8Rng, first_class: usize) -> (Array3<f32>, Vec<(BBox, usize)>) {
        let size = self.canvas;
        let mut img = background(size, rng);
        let count = rng.random_range(self.min_objects..=self.max_objects);
        let mut objects: Vec<(BBox, usize)> = Vec::new();
        for n in 0..count {
            let class_id = if n == 0 {
                first_class
            } else {
                rng.random_range(0..self.num_classes())
            };
            for _ in 0..MAX_PLACEMENT_TRIES {
                if let Some(b) = self.try_place(&mut img, rng, class_id, &objects) {
                    objects.push((b, class_id));
                    break;
                }
            }
        }
        add_noise(&mut img, self.noise_std, rng);
        (img, objects)
    }

    fn try_place(
        &self,
        img: &mut Array3<f32>,
        rng: &mut ChaCha8Rng,
        class_id: usize,
        existing: &[(BBox, usize)],
    ) -> Option<BBox> {
        let size = self.canvas as f64;
        let side = rng.random_range(self.scale_range.0..=self.scale_range.1) * size;
        let aspect = rng.random_range(0.85..1.18);
        let w = (side * aspect).min(size);
        let h = (side / aspect).min(size);
        let x0 = rng.random_range(0.0..=size - w);
        let y0 = rng.random_range(0.0..=size - h);
        let (colour, shape) = self.class_parts(class_id);

        // tight box of the painted pixels
        let (mut l, mut t, mut r, mut b) = (usize::MAX, usize::MAX, 0, 0);
        let mut mask = Vec::new();
        let (px0, py0) = (x0.floor() as usize, y0.floor() as usize);
        let (px1, py1) = (((x0 + w).ceil() as usize).min(self.canvas), ((y0 + h).ceil() as usize).min(self.canvas));
        for py in py0..py1 {
            for px in px0..px1 {
                let u = (px as f64 + 0.5 - x0) / w;
                let v = (py as f64 + 0.5 - y0) / h;
                if shape.contains(u, v) {
                    mask.push((px, py));
                    l = l.min(px);
                    t = t.min(py);
                    r = r.max(px + 1);
                    b = b.max(py + 1);
                }
            }
        }
        if mask.is_empty() {
            return None;
        }
        let bbox = BBox::new(l as f64, t as f64, r as f64, b as f64);
        if bbox.width() < MIN_OBJECT_PIXELS || bbox.height() < MIN_OBJECT_PIXELS {
            return None;
        }
        for (other, _) in existing {
            let overlaps = if self.occlusion {
                bbox.iou(other) > MAX_OVERLAP_IOU || bbox.intersection(other) > 0.5 * other.area()
            } else {
                bbox.intersection(other) > 0.0
            };
            if overlaps {
                return None;
            }
        }
        let base = colour.rgb();
        let jitter: f32 = rng.random_range(-0.08..0.08);
        for (px, py) in mask {
            for (ch, &v) in base.iter().enumerate() {
                img[[ch, py, px]] = (v + jitter).clamp(0.0, 1.0);
            }
        }
        Some(bbox)
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base: f32 = rng.random_range(0.35..0.65);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let (gx, gy): (f32, f32) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let fx = x as f32 / size as f32 - 0.5;
        let fy = y as f32 / size as f32 - 0.5;
        (base + tint[c] + gx * fx + gy * fy).clamp(0.0, 1.0)
    })
}

fn add_noise(img: &mut Array3<f32>, noise_std: f64, rng: &mut ChaCha8Rng) {
    if noise_std <= 0.0 {
        return;
    }
    // sum of uniforms: cheap, bounded, close enough to Gaussian for texture
    let scale = (noise_std * 2.0) as f32;
    img.mapv_inplace(|v| {
        let n: f32 = rng.random::<f32>() + rng.random::<f32>() + rng.random::<f32>() - 1.5;
        (v + n * scale).clamp(0.0, 1.0)
    });
}

/// Train and test splits of a generated benchmark.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub train: DetectionSet,
    pub test: DetectionSet,
}

fn image_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split << 32 | index);
    rng
}

fn generate_split(spec: &SceneSpec, split: u64, count: usize, name: &str) -> DetectionSet {
    let nc = spec.num_classes();
    let mut file = AnnotationFile {
        categories: spec
            .class_names()
            .into_iter()
            .enumerate()
            .map(|(id, name)| Category { id: id as u64, name })
            .collect(),
        ..Default::default()
    };
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = image_rng(spec.seed, split, i as u64);
        let (img, objects) = spec.render(&mut rng, i % nc);
        file.images.push(ImageEntry {
            id: i as u64,
            file_name: format!("{name}/{i:05}.png"),
            width: spec.canvas as u32,
            height: spec.canvas as u32,
        });
        for (b, c) in objects {
            file.annotations.push(Annotation {
                id: file.annotations.len() as u64,
                image_id: i as u64,
                category_id: c as u64,
                bbox: [b.left, b.top, b.width(), b.height()],
            });
        }
        images.push(img);
    }
    DetectionSet::new(file, images).expect("generated annotations are consistent")
}

/// Generates both splits. Image `i` always contains class `i mod Nc`, so
/// every class appears in both splits once each holds at least Nc images.
pub fn generate_dataset(spec: &SceneSpec, num_train: usize, num_test: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    let nc = spec.num_classes();
    if num_train < nc || num_test < nc {
        return Err(Error::config(format!(
            "need at least {nc} images per split to cover every class"
        )));
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train: generate_split(spec, 0, num_train, "train"),
        test: generate_split(spec, 1, num_test, "test"),
    })
}

/// Classes present in a set of annotations.
pub fn classes_present(file: &AnnotationFile) -> BTreeSet<usize> {
    file.histogram().into_keys().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_catalog_is_colour_major() {
        let spec = SceneSpec::default();
        assert_eq!(spec.num_classes(), 8);
        let names = spec.class_names();
        assert_eq!(names[0], "red-circle");
        assert_eq!(names[3], "red-star");
        assert_eq!(names[4], "blue-circle");
    }

    #[test]
    fn shapes_fill_their_boxes() {
        for shape in Shape::ALL {
            assert!(shape.contains(0.5, 0.6), "{shape:?}");
            assert!(!shape.contains(0.02, 0.02) || shape == Shape::Square);
        }
    }

    #[test]
    fn too_small_canvas_is_rejected() {
        let spec = SceneSpec {
            canvas: 16,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let crowded = SceneSpec {
            occlusion: false,
            scale_range: (0.5, 0.6),
            max_objects: 5,
            ..Default::default()
        };
        assert!(crowded.validate().is_err());
    }

    #[test]
    fn disjoint_mode_has_no_overlaps() {
        let spec = SceneSpec {
            occlusion: false,
            seed: 4,
            ..Default::default()
        };
        let ds = generate_dataset(&spec, 40, 8).unwrap();
        for gt in ds.train.annotations.ground_truths() {
            for (i, a) in gt.boxes.iter().enumerate() {
                for b in &gt.boxes[i + 1..] {
                    assert_eq!(a.bbox.intersection(&b.bbox), 0.0);
                }
            }
        }
    }
}
