//! COCO-style annotation files.
//!
//! ```json
//! {
//!   "images":      [{"id": 0, "file_name": "train/00000.png", "width": 64, "height": 64}],
//!   "annotations": [{"id": 0, "image_id": 0, "category_id": 3, "bbox": [x, y, w, h]}],
//!   "categories":  [{"id": 3, "name": "blue-circle"}]
//! }
//! ```
//!
//! `bbox` is `[left, top, width, height]` in pixels. Category ids may be
//! sparse; the detector's class index of a category is its position in the
//! id-sorted category list.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::taskloss::{GroundTruth, GtBox};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn to_bbox(&self) -> BBox {
        let [x, y, w, h] = self.bbox;
        BBox::from_xywh(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

fn duplicates(ids: impl IntoIterator<Item = u64>) -> Vec<u64> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dup.insert(id);
        }
    }
    dup.into_iter().collect()
}

impl AnnotationFile {
    /// Checks unique ids, referential integrity and box bounds.
    pub fn validate(&self) -> Result<()> {
        for (what, dup) in [
            ("image", duplicates(self.images.iter().map(|i| i.id))),
            ("annotation", duplicates(self.annotations.iter().map(|a| a.id))),
            ("category", duplicates(self.categories.iter().map(|c| c.id))),
        ] {
            if !dup.is_empty() {
                return Err(Error::Integrity(format!("duplicate {what} ids: {dup:?}")));
            }
        }
        let images: BTreeMap<u64, &ImageEntry> = self.images.iter().map(|i| (i.id, i)).collect();
        let categories: BTreeSet<u64> = self.categories.iter().map(|c| c.id).collect();
        for a in &self.annotations {
            let Some(img) = images.get(&a.image_id) else {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing image {}",
                    a.id, a.image_id
                )));
            };
            if !categories.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing category {}",
                    a.id, a.category_id
                )));
            }
            let b = a.to_bbox();
            let inside = b.left >= 0.0
                && b.top >= 0.0
                && b.right <= img.width as f64
                && b.bottom <= img.height as f64;
            if !b.is_valid() || !inside || a.bbox.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "annotation {} box {:?} is empty or outside its {}x{} image",
                    a.id, a.bbox, img.width, img.height
                )));
            }
        }
        Ok(())
    }

    /// Category ids in class-index order.
    pub fn category_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Category names in class-index order.
    pub fn class_names(&self) -> Vec<String> {
        let mut cats = self.categories.clone();
        cats.sort_by_key(|c| c.id);
        cats.into_iter().map(|c| c.name).collect()
    }

    pub fn class_index(&self, category_id: u64) -> Option<usize> {
        self.category_ids().binary_search(&category_id).ok()
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Instance counts per class index.
    pub fn histogram(&self) -> BTreeMap<usize, u64> {
        let ids = self.category_ids();
        let mut h = BTreeMap::new();
        for a in &self.annotations {
            if let Ok(c) = ids.binary_search(&a.category_id) {
                *h.entry(c).or_insert(0) += 1;
            }
        }
        h
    }

    /// Keeps only annotations whose class index is in `classes`. Images and
    /// categories are untouched: objects of other classes stay in the
    /// pixels but become unlabelled.
    pub fn filter_for_task(&self, classes: &BTreeSet<usize>) -> AnnotationFile {
        let ids = self.category_ids();
        AnnotationFile {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| {
                    ids.binary_search(&a.category_id)
                        .is_ok_and(|c| classes.contains(&c))
                })
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }

    /// Ground truth of every image, in image order, with class indices.
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        let ids = self.category_ids();
        let mut by_image: BTreeMap<u64, Vec<GtBox>> = BTreeMap::new();
        for a in &self.annotations {
            if let Ok(c) = ids.binary_search(&a.category_id) {
                by_image.entry(a.image_id).or_default().push(GtBox {
                    bbox: a.to_bbox(),
                    class_id: c,
                });
            }
        }
        self.images
            .iter()
            .map(|img| GroundTruth {
                image_id: img.id,
                boxes: by_image.remove(&img.id).unwrap_or_default(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Loads an external annotation file and checks that every referenced image
/// exists under `images_root`.
pub fn ingest_external(annotation_path: &Path, images_root: &Path) -> Result<AnnotationFile> {
    let file = AnnotationFile::load(annotation_path)?;
    let missing: Vec<&str> = file
        .images
        .iter()
        .filter(|img| !images_root.join(&img.file_name).is_file())
        .map(|img| img.file_name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "{} image file(s) missing under {}: {:?}",
            missing.len(),
            images_root.display(),
            &missing[..missing.len().min(5)]
        )));
    }
    log::info!(
        "ingested {}: {} images, {} classes, histogram {:?}",
        annotation_path.display(),
        file.images.len(),
        file.num_classes(),
        file.histogram()
    );
    Ok(file)
}
