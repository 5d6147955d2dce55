//! Dataset manifests, open-set splits, image loading and bounding-box crops.
//!
//! A manifest is JSONL: one logo record per line with keys `image_path`,
//! `brand`, and optional `bbox` (`[x, y, w, h]` in pixels), `ocr_text`,
//! `split`. Relative `image_path`s resolve against the manifest file's
//! directory. Invalid lines are collected with their line numbers rather than
//! silently dropped; `strict` loading turns them into a hard error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgtensor::{self, ImageTensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} has {count} invalid record(s); first: line {line}: {reason}")]
    InvalidRecords {
        path: PathBuf,
        count: usize,
        line: usize,
        reason: String,
    },
    #[error("open-set split needs at least 2 distinct brands, got {0}")]
    TooFewBrands(usize),
    #[error("test_fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("bbox ({x},{y},{w},{h}) out of bounds for {width}x{height} image")]
    BboxOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Image(#[from] imgtensor::ImageError),
}

/// Brand identifier; non-empty and not whitespace-only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BrandId(String);

impl BrandId {
    pub fn new(value: impl Into<String>) -> Result<Self, String> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err("brand id must not be empty or whitespace-only".into());
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BrandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for BrandId {
    type Error = String;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<BrandId> for String {
    fn from(id: BrandId) -> Self {
        id.0
    }
}

/// Pixel rectangle `(x, y, w, h)`; `w` and `h` are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct Bbox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Bbox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, String> {
        if w < 1 || h < 1 {
            return Err(format!("bbox requires w >= 1 and h >= 1, got {w}x{h}"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn fits(&self, img_w: usize, img_h: usize) -> bool {
        (self.x + self.w) as usize <= img_w && (self.y + self.h) as usize <= img_h
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &Bbox) -> f64 {
        let x1 = self.x.max(other.x) as f64;
        let y1 = self.y.max(other.y) as f64;
        let x2 = ((self.x + self.w).min(other.x + other.w)) as f64;
        let y2 = ((self.y + self.h).min(other.y + other.h)) as f64;
        let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
        let union = (self.w as f64 * self.h as f64) + (other.w as f64 * other.h as f64) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl TryFrom<[u32; 4]> for Bbox {
    type Error = String;
    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Bbox> for [u32; 4] {
    fn from(b: Bbox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One logo instance: an image (optionally a box within it), its brand, and
/// optionally the ground-truth text printed on the logo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogoRecord {
    pub image_path: PathBuf,
    pub brand: BrandId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Bbox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
    #[serde(default)]
    pub split: Split,
}

/// A parse or validation failure for one manifest line.
#[derive(Debug, Clone)]
pub struct InvalidRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<LogoRecord>,
    pub open_set: bool,
    /// Lines that failed to parse or validate, with 1-based line numbers.
    pub invalid: Vec<InvalidRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<LogoRecord>) -> Self {
        Self {
            records,
            open_set: false,
            invalid: Vec::new(),
        }
    }

    pub fn brands(&self) -> BTreeSet<&BrandId> {
        self.records.iter().map(|r| &r.brand).collect()
    }

    pub fn by_brand(&self) -> BTreeMap<&BrandId, Vec<&LogoRecord>> {
        let mut map: BTreeMap<&BrandId, Vec<&LogoRecord>> = BTreeMap::new();
        for rec in &self.records {
            map.entry(&rec.brand).or_default().push(rec);
        }
        map
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Load a JSONL manifest. Relative image paths are resolved against the
/// manifest's directory. Invalid lines land in `manifest.invalid`; with
/// `strict` they become an error instead.
pub fn load_manifest(path: &Path, strict: bool) -> Result<DatasetManifest, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut invalid = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogoRecord>(&line) {
            Ok(mut rec) => {
                if rec.image_path.is_relative() {
                    rec.image_path = base.join(&rec.image_path);
                }
                match validate_record(&rec) {
                    Ok(()) => records.push(rec),
                    Err(reason) => invalid.push(InvalidRecord {
                        line: line_no,
                        reason,
                    }),
                }
            }
            Err(e) => invalid.push(InvalidRecord {
                line: line_no,
                reason: format!("malformed JSON: {e}"),
            }),
        }
    }
    if strict && !invalid.is_empty() {
        let first = &invalid[0];
        return Err(DataError::InvalidRecords {
            path: path.to_path_buf(),
            count: invalid.len(),
            line: first.line,
            reason: first.reason.clone(),
        });
    }
    Ok(DatasetManifest {
        records,
        open_set: false,
        invalid,
    })
}

/// Bbox bounds are checked against the decoded image lazily (at crop/encode
/// time); here we check what the record alone can tell us.
fn validate_record(rec: &LogoRecord) -> Result<(), String> {
    if !rec.image_path.exists() {
        return Err(format!(
            "image path does not resolve: {}",
            rec.image_path.display()
        ));
    }
    Ok(())
}

/// Write records as JSONL. Paths are emitted relative to the output file's
/// directory when possible so manifests stay relocatable.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for rec in &manifest.records {
        let mut rec = rec.clone();
        if let Ok(rel) = rec.image_path.strip_prefix(base) {
            rec.image_path = rel.to_path_buf();
        }
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Split a manifest into disjoint train/test manifests at the *brand* level.
/// Every brand lands on exactly one side; splitting at the record level would
/// leak test brands into training and void the open-set contract.
pub fn make_open_set_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let mut brands: Vec<&BrandId> = manifest.brands().into_iter().collect();
    if brands.len() < 2 {
        return Err(DataError::TooFewBrands(brands.len()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    brands.shuffle(&mut rng);
    let n_test = ((brands.len() as f64 * test_fraction).round() as usize)
        .clamp(1, brands.len() - 1);
    let test_brands: BTreeSet<&BrandId> = brands[..n_test].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in &manifest.records {
        let mut rec = rec.clone();
        if test_brands.contains(&rec.brand) {
            rec.split = Split::Test;
            test.push(rec);
        } else {
            rec.split = Split::Train;
            train.push(rec);
        }
    }
    let mut train_m = DatasetManifest::new(train);
    let mut test_m = DatasetManifest::new(test);
    train_m.open_set = true;
    test_m.open_set = true;
    Ok((train_m, test_m))
}

/// Cut the bbox region out of an image, channels preserved.
pub fn crop(image: &ImageTensor, bbox: &Bbox) -> Result<ImageTensor, DataError> {
    let (w, h) = (imgtensor::width(image), imgtensor::height(image));
    if !bbox.fits(w, h) {
        return Err(DataError::BboxOutOfBounds {
            x: bbox.x,
            y: bbox.y,
            w: bbox.w,
            h: bbox.h,
            width: w,
            height: h,
        });
    }
    Ok(imgtensor::crop_region(
        &image.view(),
        bbox.x as usize,
        bbox.y as usize,
        bbox.w as usize,
        bbox.h as usize,
    ))
}

/// Load a record's image and apply its bbox crop when present.
pub fn load_record_image(rec: &LogoRecord) -> Result<ImageTensor, DataError> {
    let img = imgtensor::load_image(&rec.image_path)?;
    match &rec.bbox {
        Some(b) => crop(&img, b),
        None => Ok(img),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::io::Write as _;

    fn touch_image(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        let img = Array3::from_elem((3, 4, 4), 0.5);
        imgtensor::save_png(&img.view(), &p).unwrap();
        p
    }

    fn write_lines(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    #[test]
    fn load_three_line_fixture() {
        let dir = tempfile::tempdir().unwrap();
        touch_image(dir.path(), "a.png");
        let lines: Vec<String> = (0..3)
            .map(|i| format!(r#"{{"image_path":"a.png","brand":"b{i}"}}"#))
            .collect();
        let path = write_lines(dir.path(), "m.jsonl", &lines);
        let m = load_manifest(&path, false).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.invalid.is_empty());
        // relative paths resolve against the manifest directory
        assert!(m.records[0].image_path.is_absolute() || m.records[0].image_path.exists());
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(dir.path(), "m.jsonl", &[]);
        let m = load_manifest(&path, false).unwrap();
        assert_eq!(m.len(), 0);
    }

    #[test]
    fn zero_width_bbox_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        touch_image(dir.path(), "a.png");
        let lines = vec![
            r#"{"image_path":"a.png","brand":"ok"}"#.to_string(),
            r#"{"image_path":"a.png","brand":"bad","bbox":[0,0,0,2]}"#.to_string(),
        ];
        let path = write_lines(dir.path(), "m.jsonl", &lines);
        let m = load_manifest(&path, false).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.invalid.len(), 1);
        assert_eq!(m.invalid[0].line, 2);

        let err = load_manifest(&path, true).unwrap_err();
        assert!(matches!(err, DataError::InvalidRecords { line: 2, .. }));
    }

    #[test]
    fn missing_manifest_errors() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.jsonl"), false),
            Err(DataError::MissingFile(_))
        ));
    }

    #[test]
    fn open_set_split_is_brand_level_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = touch_image(dir.path(), "a.png");
        let mut records = Vec::new();
        for b in 0..10 {
            for _ in 0..3 {
                records.push(LogoRecord {
                    image_path: img.clone(),
                    brand: BrandId::new(format!("brand{b}")).unwrap(),
                    bbox: None,
                    ocr_text: None,
                    split: Split::Train,
                });
            }
        }
        let m = DatasetManifest::new(records);
        let (tr, te) = make_open_set_split(&m, 0.2, 7).unwrap();
        assert_eq!(tr.brands().len(), 8);
        assert_eq!(te.brands().len(), 2);
        let inter: Vec<_> = tr.brands().intersection(&te.brands()).cloned().collect();
        assert!(inter.is_empty());
        // partition: every brand on exactly one side
        assert_eq!(tr.brands().len() + te.brands().len(), m.brands().len());
        assert_eq!(tr.len() + te.len(), m.len());

        let (tr2, te2) = make_open_set_split(&m, 0.2, 7).unwrap();
        assert_eq!(tr.brands(), tr2.brands());
        assert_eq!(te.brands(), te2.brands());
    }

    #[test]
    fn single_brand_split_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = touch_image(dir.path(), "a.png");
        let m = DatasetManifest::new(vec![LogoRecord {
            image_path: img,
            brand: BrandId::new("only").unwrap(),
            bbox: None,
            ocr_text: None,
            split: Split::Train,
        }]);
        assert!(matches!(
            make_open_set_split(&m, 0.5, 1),
            Err(DataError::TooFewBrands(1))
        ));
    }

    #[test]
    fn crop_full_image_is_identity_and_idempotent() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y + x) as f32 / 12.0);
        let full = Bbox::new(0, 0, 4, 4).unwrap();
        let once = crop(&img, &full).unwrap();
        assert_eq!(once, img);
        let twice = crop(&once, &full).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn crop_center_block() {
        let img = Array3::from_shape_fn((3, 4, 4), |(_, y, x)| (y * 4 + x) as f32);
        let c = crop(&img, &Bbox::new(1, 1, 2, 2).unwrap()).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c[[0, 0, 0]], 5.0);
        assert_eq!(c[[0, 1, 1]], 10.0);
    }

    #[test]
    fn crop_out_of_bounds_errors() {
        let img = Array3::zeros((3, 4, 4));
        let b = Bbox::new(3, 3, 2, 2).unwrap();
        assert!(matches!(
            crop(&img, &b),
            Err(DataError::BboxOutOfBounds { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = touch_image(dir.path(), "a.png");
        let m = DatasetManifest::new(vec![LogoRecord {
            image_path: img,
            brand: BrandId::new("x").unwrap(),
            bbox: Some(Bbox::new(0, 0, 2, 2).unwrap()),
            ocr_text: Some("acme".into()),
            split: Split::Test,
        }]);
        let path = dir.path().join("round.jsonl");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path, true).unwrap();
        assert_eq!(back.records, m.records);
    }
}
