//! `index.json`: the dataset manifest shared with external feature exporters.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "num_classes": 3,
//!   "images": [
//!     {"image_id": "img_0000", "feature_file": "img_0000.vfm.vgfm",
//!      "input_file": "img_0000.input.vgfm", "width": 128, "height": 128, "stride": 8.0}
//!   ],
//!   "annotations": {"img_0000": [{"box": [8.0, 16.0, 40.0, 48.0], "class_id": 1}]},
//!   "proposals": {"img_0000": [[6.0, 15.0, 41.0, 50.0]]},
//!   "splits": {"labeled": ["img_0000"], "unlabeled": [], "eval": []}
//! }
//! ```
//!
//! Paths are relative to the index file. `input_file` (detector input map) and
//! `proposals` are optional; exporters of real imagery only write the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::BBox;

pub const SCHEMA_VERSION: u32 = 1;

/// A box with a class and, for predictions, a confidence score.
///
/// Ground-truth annotations carry no score. `class_id == num_classes` is the
/// background sentinel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox<f64>,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Detection {
    pub fn annotation(bbox: BBox<f64>, class_id: usize) -> Self {
        Self {
            bbox,
            class_id,
            score: None,
        }
    }

    pub fn prediction(bbox: BBox<f64>, class_id: usize, score: f64) -> Self {
        Self {
            bbox,
            class_id,
            score: Some(score),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id > num_classes {
            return Err(Error::Validation(format!(
                "class id {} exceeds background sentinel {num_classes}",
                self.class_id
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_file: Option<String>,
    pub width: u32,
    pub height: u32,
    pub stride: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub labeled: Vec<String>,
    #[serde(default)]
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub eval: Vec<String>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Eval => &self.eval,
        }
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        [Split::Labeled, Split::Unlabeled, Split::Eval]
            .into_iter()
            .find(|s| self.ids(*s).iter().any(|i| i == image_id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub num_classes: usize,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub annotations: BTreeMap<String, Vec<Detection>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub proposals: BTreeMap<String, Vec<BBox<f64>>>,
    pub splits: Splits,
    /// Directory that relative file paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn background_id(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageEntry> {
        self.images
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    /// Entries of one split, in image-id order.
    pub fn split_images(&self, split: Split) -> Vec<&ImageEntry> {
        let wanted: BTreeSet<&str> = self.splits.ids(split).iter().map(String::as_str).collect();
        self.images
            .iter()
            .filter(|e| wanted.contains(e.image_id.as_str()))
            .collect()
    }

    pub fn annotations_of(&self, image_id: &str) -> &[Detection] {
        self.annotations
            .get(image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn proposals_of(&self, image_id: &str) -> &[BBox<f64>] {
        self.proposals
            .get(image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn feature_path(&self, entry: &ImageEntry) -> PathBuf {
        self.root.join(&entry.feature_file)
    }

    pub fn input_path(&self, entry: &ImageEntry) -> Option<PathBuf> {
        entry.input_file.as_ref().map(|f| self.root.join(f))
    }

    /// Sorts images by id and checks every invariant; file existence is checked
    /// when `check_files` is set.
    pub fn validate(&mut self, check_files: bool) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported index schema_version {}",
                self.schema_version
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        self.images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for s in [
            &mut self.splits.labeled,
            &mut self.splits.unlabeled,
            &mut self.splits.eval,
        ] {
            s.sort();
        }

        let dupes: Vec<&str> = self
            .images
            .windows(2)
            .filter(|w| w[0].image_id == w[1].image_id)
            .map(|w| w[0].image_id.as_str())
            .collect();
        if !dupes.is_empty() {
            return Err(Error::Validation(format!("duplicate image ids: {dupes:?}")));
        }
        let known: BTreeSet<&str> = self.images.iter().map(|e| e.image_id.as_str()).collect();

        let bad_geometry: Vec<&str> = self
            .images
            .iter()
            .filter(|e| e.width == 0 || e.height == 0 || !(e.stride.is_finite() && e.stride > 0.0))
            .map(|e| e.image_id.as_str())
            .collect();
        if !bad_geometry.is_empty() {
            return Err(Error::Validation(format!(
                "invalid image geometry: {bad_geometry:?}"
            )));
        }

        let unknown: Vec<&str> = self
            .annotations
            .keys()
            .chain(self.proposals.keys())
            .chain(self.splits.labeled.iter())
            .chain(self.splits.unlabeled.iter())
            .chain(self.splits.eval.iter())
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Validation(format!(
                "references to unknown image ids: {unknown:?}"
            )));
        }

        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        let mut overlap = BTreeSet::new();
        for split in [Split::Labeled, Split::Unlabeled, Split::Eval] {
            for id in self.splits.ids(split) {
                if seen.insert(id.as_str(), split).is_some() {
                    overlap.insert(id.as_str());
                }
            }
        }
        if !overlap.is_empty() {
            return Err(Error::Validation(format!(
                "image ids assigned to more than one split: {overlap:?}"
            )));
        }

        let bad_class: Vec<&str> = self
            .annotations
            .iter()
            .filter(|(_, dets)| {
                dets.iter().any(|d| {
                    d.class_id >= self.num_classes || d.validate(self.num_classes).is_err()
                })
            })
            .map(|(id, _)| id.as_str())
            .collect();
        if !bad_class.is_empty() {
            return Err(Error::Validation(format!(
                "annotations with unknown class ids (C = {}): {bad_class:?}",
                self.num_classes
            )));
        }

        if check_files {
            let missing: Vec<&str> = self
                .images
                .iter()
                .filter(|e| {
                    !self.root.join(&e.feature_file).is_file()
                        || e.input_file
                            .as_ref()
                            .is_some_and(|f| !self.root.join(f).is_file())
                })
                .map(|e| e.image_id.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Validation(format!(
                    "missing feature files for images: {missing:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Reads and fully validates `index.json`; images come back sorted by id.
pub fn load_dataset(index_path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = index_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    index.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    index.validate(true)?;
    Ok(index)
}

pub fn write_dataset(index_path: impl AsRef<Path>, index: &DatasetIndex) -> Result<()> {
    let path = index_path.as_ref();
    let text = serde_json::to_string_pretty(index).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> DatasetIndex {
        let mut annotations = BTreeMap::new();
        annotations.insert(
            "a".to_string(),
            vec![Detection::annotation(
                BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
                0,
            )],
        );
        DatasetIndex {
            schema_version: 1,
            num_classes: 2,
            images: vec![ImageEntry {
                image_id: "a".into(),
                feature_file: "a.vgfm".into(),
                input_file: None,
                width: 16,
                height: 16,
                stride: 8.0,
            }],
            annotations,
            proposals: BTreeMap::new(),
            splits: Splits {
                labeled: vec!["a".into()],
                ..Default::default()
            },
            root: PathBuf::new(),
        }
    }

    #[test]
    fn minimal_index_validates() {
        let mut idx = minimal();
        idx.validate(false).unwrap();
        assert_eq!(idx.background_id(), 2);
        assert_eq!(idx.split_images(Split::Labeled).len(), 1);
    }

    #[test]
    fn split_overlap_rejected() {
        let mut idx = minimal();
        idx.splits.eval.push("a".into());
        let err = idx.validate(false).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("\"a\"")));
    }

    #[test]
    fn unknown_class_and_unknown_image_rejected() {
        let mut idx = minimal();
        idx.annotations.get_mut("a").unwrap()[0].class_id = 2;
        assert!(idx.validate(false).is_err());

        let mut idx = minimal();
        idx.splits.unlabeled.push("ghost".into());
        let err = idx.validate(false).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn missing_file_rejected() {
        let mut idx = minimal();
        idx.root = PathBuf::from("/nonexistent-dir");
        let err = idx.validate(true).unwrap_err();
        assert!(err.to_string().contains("missing feature files"));
    }

    #[test]
    fn detection_json_shape() {
        let d = Detection::prediction(BBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 1, 0.5);
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"box":[1.0,2.0,3.0,4.0],"class_id":1,"score":0.5}"#
        );
        let gt: Detection = serde_json::from_str(r#"{"box":[1,2,3,4],"class_id":0}"#).unwrap();
        assert_eq!(gt.score, None);
    }
}
