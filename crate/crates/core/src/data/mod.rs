//! Detection datasets: synthetic shape scenes, COCO-style annotation files,
//! per-task label filtering and the flip/translate augmentation.
//!
//! On disk a dataset is laid out as
//!
//! ```text
//! images/train/00000.png ...
//! images/test/00000.png ...
//! annotations/full.json       training split, every class labelled
//! annotations/test.json       test split, every class labelled
//! annotations/task1.json ...  training split, only that task's classes labelled
//! ```

mod annotations;
mod augment;
mod synth;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;

pub use annotations::{ingest_external, Annotation, AnnotationFile, Category, ImageEntry};
pub use augment::Augmentation;
pub use synth::{classes_present, generate_dataset, Colour, SceneSpec, Shape, SyntheticDataset};

use crate::taskloss::GroundTruth;
use crate::{Error, Result};

/// Images (CHW, RGB in `[0, 1]`) paired with their annotation file. Images
/// are shared between label-filtered views of the same split.
#[derive(Clone, Debug)]
pub struct DetectionSet {
    pub annotations: AnnotationFile,
    images: Arc<Vec<Array3<f32>>>,
    ground_truths: Vec<GroundTruth>,
}

impl DetectionSet {
    pub fn new(annotations: AnnotationFile, images: Vec<Array3<f32>>) -> Result<Self> {
        Self::with_shared(annotations, Arc::new(images))
    }

    fn with_shared(annotations: AnnotationFile, images: Arc<Vec<Array3<f32>>>) -> Result<Self> {
        annotations.validate()?;
        if annotations.images.len() != images.len() {
            return Err(Error::shape(format!(
                "{} image entries but {} images",
                annotations.images.len(),
                images.len()
            )));
        }
        for (entry, img) in annotations.images.iter().zip(images.iter()) {
            if img.dim() != (3, entry.height as usize, entry.width as usize) {
                return Err(Error::shape(format!(
                    "image {} is {:?}, annotation says {}x{}",
                    entry.id,
                    img.dim(),
                    entry.width,
                    entry.height
                )));
            }
        }
        let ground_truths = annotations.ground_truths();
        Ok(Self {
            annotations,
            images,
            ground_truths,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &Array3<f32> {
        &self.images[index]
    }

    pub fn ground_truth(&self, index: usize) -> &GroundTruth {
        &self.ground_truths[index]
    }

    pub fn ground_truths(&self) -> &[GroundTruth] {
        &self.ground_truths
    }

    pub fn num_classes(&self) -> usize {
        self.annotations.num_classes()
    }

    /// Same images, labels restricted to `classes`.
    pub fn filter_for_task(&self, classes: &BTreeSet<usize>) -> DetectionSet {
        Self::with_shared(self.annotations.filter_for_task(classes), Arc::clone(&self.images))
            .expect("filtering preserves consistency")
    }

    /// Indices of images holding at least one box of `classes`.
    pub fn indices_with_any(&self, classes: &BTreeSet<usize>) -> Vec<usize> {
        self.ground_truths
            .iter()
            .enumerate()
            .filter(|(_, gt)| gt.boxes.iter().any(|b| classes.contains(&b.class_id)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes every image as PNG under `images_root` using the annotation
    /// file names.
    pub fn save_images(&self, images_root: &Path) -> Result<()> {
        for (entry, img) in self.annotations.images.iter().zip(self.images.iter()) {
            save_png(img, &images_root.join(&entry.file_name))?;
        }
        Ok(())
    }

    /// Loads an annotation file and its PNG images.
    pub fn load(annotation_path: &Path, images_root: &Path) -> Result<Self> {
        let annotations = ingest_external(annotation_path, images_root)?;
        let images = annotations
            .images
            .iter()
            .map(|e| load_png(&images_root.join(&e.file_name)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(annotations, images)
    }
}

/// Writes a generated benchmark in the on-disk layout, including one
/// label-filtered annotation file per task.
pub fn write_layout(dataset: &SyntheticDataset, tasks: &[BTreeSet<usize>], root: &Path) -> Result<()> {
    let images = root.join("images");
    dataset.train.save_images(&images)?;
    dataset.test.save_images(&images)?;
    let ann = root.join("annotations");
    dataset.train.annotations.save(&ann.join("full.json"))?;
    dataset.test.annotations.save(&ann.join("test.json"))?;
    for (k, classes) in tasks.iter().enumerate() {
        dataset
            .train
            .annotations
            .filter_for_task(classes)
            .save(&ann.join(format!("task{}.json", k + 1)))?;
    }
    Ok(())
}

pub fn save_png(img: &Array3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|ch| {
            (img[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}
