//! Annotated face data: landmark files, PGM images, detector boxes and
//! train/validation splits.

mod pgm;
mod pts;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Shape};
use crate::imaging::GrayImage;

pub use pgm::{encode_pgm, load_gray_image};
pub use pts::{format_pts, parse_pts};

pub const IMAGE_EXTENSION: &str = "pgm";
pub const LANDMARK_EXTENSION: &str = "pts";
/// Growth applied to the ground-truth box when a record has no detector box.
pub const FALLBACK_BOX_EXPANSION: f64 = 0.05;
/// Landmarks further than this fraction of the image size outside the frame
/// are reported as warnings.
pub const FRAME_MARGIN: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct FaceRecord {
    pub id: String,
    pub image: GrayImage,
    pub shape: Shape,
    /// Detector box, when one was supplied.
    pub bbox: Option<BoundingBox>,
}

impl FaceRecord {
    /// Box used to initialize training: the detector box, or the
    /// ground-truth box grown by 5%.
    pub fn training_box(&self) -> BoundingBox {
        self.bbox
            .unwrap_or_else(|| self.shape.bounding_box().expanded(FALLBACK_BOX_EXPANSION))
    }

    /// Whether every landmark lies within [`FRAME_MARGIN`] of the image.
    pub fn within_frame_margin(&self) -> bool {
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        let (mx, my) = (FRAME_MARGIN * w, FRAME_MARGIN * h);
        self.shape
            .points()
            .iter()
            .all(|p| p.x >= -mx && p.x <= w + mx && p.y >= -my && p.y <= h + my)
    }
}

/// Parses `stem x y width height` lines. Blank lines and `#` comments are
/// skipped.
pub fn parse_bbox_manifest(text: &str) -> Result<BTreeMap<String, BoundingBox>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Dataset(format!("bbox manifest line {}: {m}", n + 1));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(bad("expected `stem x y width height`"));
        }
        let mut v = [0.0; 4];
        for (slot, tok) in v.iter_mut().zip(&tokens[1..]) {
            *slot = tok.parse().map_err(|_| bad(&format!("`{tok}` is not a number")))?;
        }
        let b = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(&e.to_string()))?;
        if out.insert(tokens[0].to_string(), b).is_some() {
            return Err(bad(&format!("duplicate stem {}", tokens[0])));
        }
    }
    Ok(out)
}

pub fn format_bbox_manifest<'a>(entries: impl IntoIterator<Item = (&'a str, &'a BoundingBox)>) -> String {
    entries
        .into_iter()
        .map(|(stem, b)| format!("{stem} {} {} {} {}\n", b.x, b.y, b.width, b.height))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Skip bad entries and list them in the report.
    #[default]
    Lenient,
    /// Fail on the first problem.
    Strict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub problem: String,
}

impl fmt::Display for LoadIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.problem)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// Entries that were skipped.
    pub skipped: Vec<LoadIssue>,
    /// Loaded records with something unusual about them.
    pub warnings: Vec<LoadIssue>,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub records: Vec<FaceRecord>,
    pub report: LoadReport,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_pair(stem: &str, image: &Path, landmarks: &Path) -> std::result::Result<FaceRecord, LoadIssue> {
    let issue = |path: &Path, problem: String| LoadIssue {
        path: path.to_path_buf(),
        problem,
    };
    let bytes = read(image).map_err(|e| issue(image, e.to_string()))?;
    let img = load_gray_image(&bytes).map_err(|e| issue(image, e.to_string()))?;
    let text = read(landmarks).map_err(|e| issue(landmarks, e.to_string()))?;
    let text = String::from_utf8(text).map_err(|_| issue(landmarks, "not UTF-8 text".into()))?;
    let shape = parse_pts(&text).map_err(|e| issue(landmarks, e.to_string()))?;
    Ok(FaceRecord {
        id: stem.to_string(),
        image: img,
        shape,
        bbox: None,
    })
}

/// Loads every `<stem>.pgm` / `<stem>.pts` pair directly under `root`, in
/// lexicographic stem order. Boxes come from the optional manifest.
pub fn load_dataset(root: &Path, manifest: Option<&Path>, mode: LoadMode) -> Result<LoadedDataset> {
    let mut stems: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if !path.is_file() {
            continue;
        }
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let slot = stems.entry(stem.to_string_lossy().into_owned()).or_default();
        match ext.to_str() {
            Some(IMAGE_EXTENSION) => slot.0 = Some(path),
            Some(LANDMARK_EXTENSION) => slot.1 = Some(path),
            _ => {}
        }
    }
    let boxes = match manifest {
        Some(p) => {
            let text = String::from_utf8(read(p)?)
                .map_err(|_| Error::Dataset(format!("{}: not UTF-8 text", p.display())))?;
            parse_bbox_manifest(&text)?
        }
        None => BTreeMap::new(),
    };

    let mut records = Vec::new();
    let mut report = LoadReport::default();
    for (stem, paths) in &stems {
        let outcome = match paths {
            (Some(img), Some(pts)) => load_pair(stem, img, pts),
            (None, Some(pts)) => Err(LoadIssue {
                path: pts.clone(),
                problem: "landmark file has no matching image".into(),
            }),
            (Some(img), None) => Err(LoadIssue {
                path: img.clone(),
                problem: "image has no matching landmark file".into(),
            }),
            (None, None) => continue,
        };
        match outcome {
            Ok(mut r) => {
                r.bbox = boxes.get(stem).copied();
                if !r.within_frame_margin() {
                    let issue = LoadIssue {
                        path: paths.1.clone().unwrap_or_default(),
                        problem: "landmarks extend well outside the image".into(),
                    };
                    log::warn!("{issue}");
                    report.warnings.push(issue);
                }
                records.push(r);
            }
            Err(issue) if mode == LoadMode::Strict => return Err(Error::Dataset(issue.to_string())),
            Err(issue) => {
                log::warn!("skipping {issue}");
                report.skipped.push(issue);
            }
        }
    }
    for stem in boxes.keys().filter(|s| !records.iter().any(|r| &r.id == *s)) {
        log::warn!("bbox manifest entry {stem} matches no loaded record");
    }
    Ok(LoadedDataset { records, report })
}

/// Training, validation and held-out test records; pairwise disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T = FaceRecord> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles `records` with `seed` and takes the first `n` as validation.
/// The test part is left empty.
pub fn split_validation<T>(mut records: Vec<T>, n: usize, seed: u64) -> Result<DatasetSplit<T>> {
    if n >= records.len() {
        return Err(Error::InvalidArgument(format!(
            "validation size {n} must be below the record count {}",
            records.len()
        )));
    }
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = records.split_off(n);
    Ok(DatasetSplit {
        train,
        validation: records,
        test: Vec::new(),
    })
}

#[cfg(test)]
mod tests;
