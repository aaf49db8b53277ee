//! MVTec-style directory ingestion.
//!
//! ```text
//! <root>/<class>/train/good/*.png
//! <root>/<class>/test/good/*.png
//! <root>/<class>/test/<defect>/*.png
//! <root>/<class>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GOOD: &str = "good";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// `<class>/<split>/<defect>/<stem>`, unique within a dataset.
    pub id: String,
    pub class_name: String,
    pub split: Split,
    /// `good` for normal samples.
    pub defect: String,
    pub label: u8,
    pub image_path: PathBuf,
    /// Absent for normal samples, whose mask is all zero.
    pub mask_path: Option<PathBuf>,
}

impl SampleRecord {
    pub fn is_anomalous(&self) -> bool {
        self.label == 1
    }

    /// Ground-truth mask at its native resolution, or an all-zero mask of
    /// `(height, width)` for normal samples.
    pub fn load_mask(&self, height: usize, width: usize) -> Result<Array2<bool>> {
        match &self.mask_path {
            None => Ok(Array2::from_elem((height, width), false)),
            Some(path) => read_mask(path),
        }
    }
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

/// Immutable list of samples grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn class_split<'a>(&'a self, class: &'a str, split: Split) -> impl Iterator<Item = &'a SampleRecord> {
        self.records
            .iter()
            .filter(move |r| r.split == split && r.class_name == class)
    }

    /// Restricts the index to the given classes, keeping their order.
    pub fn only_classes(&self, classes: &[String]) -> Result<DatasetIndex> {
        for c in classes {
            if !self.classes.contains(c) {
                return Err(Error::config(format!("class '{c}' is not in the dataset")));
            }
        }
        Ok(DatasetIndex {
            root: self.root.clone(),
            classes: classes.to_vec(),
            records: self
                .records
                .iter()
                .filter(|r| classes.contains(&r.class_name))
                .cloned()
                .collect(),
        })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn find_mask(gt_dir: &Path, image: &Path) -> Result<Option<PathBuf>> {
    let stem = stem(image);
    let prefix = format!("{stem}_mask");
    Ok(images_in(gt_dir)?.into_iter().find(|p| {
        let s = self::stem(p);
        s == prefix || s.starts_with(&prefix) || s == stem
    }))
}

/// Enumerates every class directory under `root` (those containing `train/`).
pub fn load_mvtec_layout(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::data_at(root, "dataset root is not a directory"));
    }
    let mut classes = Vec::new();
    let mut records = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.join("train").is_dir()) {
        let class = class_dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data_at(&class_dir, "class directory name is not valid UTF-8"))?
            .to_string();
        let before = records.len();
        load_class(&class_dir, &class, &mut records)?;
        let train = records[before..].iter().filter(|r| r.split == Split::Train).count();
        if train == 0 {
            return Err(Error::data_at(&class_dir, format!("class '{class}' has no training images")));
        }
        classes.push(class);
    }
    if classes.is_empty() {
        return Err(Error::data_at(root, "no class directories with a train/ folder"));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        records,
    })
}

fn load_class(dir: &Path, class: &str, out: &mut Vec<SampleRecord>) -> Result<()> {
    let record = |split: Split, defect: &str, image: PathBuf, mask: Option<PathBuf>| SampleRecord {
        id: format!("{class}/{}/{defect}/{}", split.as_str(), stem(&image)),
        class_name: class.to_string(),
        split,
        defect: defect.to_string(),
        label: u8::from(defect != GOOD),
        image_path: image,
        mask_path: mask,
    };
    let train_good = dir.join("train").join(GOOD);
    if train_good.is_dir() {
        for img in images_in(&train_good)? {
            out.push(record(Split::Train, GOOD, img, None));
        }
    }
    let test = dir.join("test");
    if !test.is_dir() {
        return Ok(());
    }
    // normal test images first, then defect types in name order
    let mut subdirs: Vec<PathBuf> = sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()).collect();
    subdirs.sort_by_key(|p| p.file_name().map(|n| n != GOOD));
    for sub in subdirs {
        let defect = sub.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if defect == GOOD {
            for img in images_in(&sub)? {
                out.push(record(Split::Test, GOOD, img, None));
            }
            continue;
        }
        let gt = dir.join("ground_truth").join(&defect);
        if !gt.is_dir() {
            return Err(Error::data_at(
                &gt,
                format!("missing ground_truth directory for defect type '{defect}' of class '{class}'"),
            ));
        }
        for img in images_in(&sub)? {
            let mask = find_mask(&gt, &img)?
                .ok_or_else(|| Error::data_at(&img, "anomalous test image has no ground-truth mask"))?;
            out.push(record(Split::Test, &defect, img, Some(mask)));
        }
    }
    Ok(())
}
