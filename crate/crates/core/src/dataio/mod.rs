//! Dataset formats and loading.
//!
//! Both persistent formats are line-delimited JSON records (UTF-8, one
//! object per line):
//!
//! * manifest: `{"id", "path", "score", "category"}` with `path` relative to
//!   the manifest file's directory;
//! * scanpaths: `{"image_id", "observer_id", "fixations": [[x, y, duration_ms], ...]}`.
//!
//! Image payloads are 8-bit RGB PNG, decoded to reals by dividing by 255.
//! Loading is single-threaded; loaded structures are immutable afterwards
//! and safe to share across threads.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AqaError, Result};

/// An image with its ground-truth mean-opinion score and category tag.
/// Pixels are `H x W x C` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Array3<f64>,
    pub score: f64,
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub score: f64,
    pub category: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory image paths are resolved against.
    pub base_dir: PathBuf,
    pub split_seed: u64,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub duration_ms: f64,
}

/// An ordered fixation sequence tied to one image and observer.
#[derive(Debug, Clone, PartialEq)]
pub struct Scanpath {
    pub image_id: String,
    pub observer_id: String,
    pub fixations: Vec<Fixation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanpathLine {
    image_id: String,
    observer_id: String,
    fixations: Vec<[f64; 3]>,
}

impl Scanpath {
    pub fn validate(&self) -> Result<()> {
        if self.fixations.is_empty() {
            return Err(AqaError::Validation(format!(
                "scanpath for image {:?} has no fixations",
                self.image_id
            )));
        }
        for f in &self.fixations {
            if !(0.0..=1.0).contains(&f.x) || !(0.0..=1.0).contains(&f.y) {
                return Err(AqaError::Validation(format!(
                    "fixation ({}, {}) outside [0,1]^2 for image {:?}",
                    f.x, f.y, self.image_id
                )));
            }
            if !(f.duration_ms > 0.0) {
                return Err(AqaError::Validation(format!(
                    "non-positive fixation duration {} for image {:?}",
                    f.duration_ms, self.image_id
                )));
            }
        }
        Ok(())
    }
}

fn validate_entry(entry: &ManifestEntry) -> Result<()> {
    if !(1.0..=10.0).contains(&entry.score) {
        return Err(AqaError::Validation(format!(
            "score {} outside [1,10] for id {:?}",
            entry.score, entry.id
        )));
    }
    Ok(())
}

impl DatasetManifest {
    /// Load and validate a manifest. Every referenced image must decode as
    /// 8-bit RGB and all images must share one shape.
    pub fn load(path: &Path, split_seed: u64, train_fraction: f64) -> Result<Self> {
        let manifest = Self::load_unchecked(path, split_seed, train_fraction)?;
        let mut shape: Option<(usize, usize)> = None;
        for entry in &manifest.entries {
            let img_path = manifest.base_dir.join(&entry.path);
            let pixels = load_image(&img_path)?;
            let dim = (pixels.shape()[0], pixels.shape()[1]);
            match shape {
                None => shape = Some(dim),
                Some(s) if s != dim => {
                    return Err(AqaError::Validation(format!(
                        "image {:?} has shape {:?}, expected {:?}",
                        entry.id, dim, s
                    )))
                }
                _ => {}
            }
        }
        Ok(manifest)
    }

    /// Parse and validate the record lines without touching image payloads.
    pub fn load_unchecked(path: &Path, split_seed: u64, train_fraction: f64) -> Result<Self> {
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(AqaError::Config(format!(
                "train_fraction {train_fraction} outside (0,1)"
            )));
        }
        let file = File::open(path).map_err(|e| AqaError::io(path, e))?;
        let reader = BufReader::new(file);
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| AqaError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| AqaError::parse(path, i + 1, e.to_string()))?;
            validate_entry(&entry)?;
            if !seen.insert(entry.id.clone()) {
                return Err(AqaError::Validation(format!("duplicate id {:?}", entry.id)));
            }
            entries.push(entry);
        }
        Ok(DatasetManifest {
            entries,
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            split_seed,
            train_fraction,
        })
    }

    pub fn write(entries: &[ManifestEntry], path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AqaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for entry in entries {
            let line = serde_json::to_string(entry).map_err(|e| AqaError::Numeric(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| AqaError::io(path, e))?;
        }
        w.flush().map_err(|e| AqaError::io(path, e))?;
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Decode every referenced image into an [`ImageRecord`].
    pub fn load_records(&self) -> Result<Vec<ImageRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let pixels = load_image(&self.base_dir.join(&e.path))?;
                Ok(ImageRecord {
                    id: e.id.clone(),
                    pixels,
                    score: e.score,
                    category: e.category.clone(),
                })
            })
            .collect()
    }

    pub fn split(&self) -> Result<(Vec<String>, Vec<String>)> {
        split_ids(&self.ids(), self.split_seed, self.train_fraction)
    }
}

/// Deterministic train/test partition: sort ids lexicographically, shuffle
/// with a Fisher-Yates pass driven by ChaCha8 seeded from `seed`, take the
/// first `floor(fraction * n)` as the training set. The floor has a 1e-9
/// guard against binary representation error in `fraction * n`.
pub fn split_ids(ids: &[String], seed: u64, fraction: f64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(AqaError::Validation("cannot split an empty manifest".into()));
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(AqaError::Config(format!("fraction {fraction} outside (0,1)")));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..sorted.len()).rev() {
        let j = rng.random_range(0..=i);
        sorted.swap(i, j);
    }
    let n_train = ((fraction * sorted.len() as f64) + 1e-9).floor() as usize;
    let test = sorted.split_off(n_train);
    Ok((sorted, test))
}

/// Group scanpaths by image id (ordered for deterministic iteration).
pub fn group_by_image(paths: &[Scanpath]) -> BTreeMap<String, Vec<&Scanpath>> {
    let mut map: BTreeMap<String, Vec<&Scanpath>> = BTreeMap::new();
    for p in paths {
        map.entry(p.image_id.clone()).or_default().push(p);
    }
    map
}

pub fn load_scanpaths(path: &Path) -> Result<Vec<Scanpath>> {
    let file = File::open(path).map_err(|e| AqaError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AqaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScanpathLine = serde_json::from_str(&line)
            .map_err(|e| AqaError::parse(path, i + 1, e.to_string()))?;
        let sp = Scanpath {
            image_id: parsed.image_id,
            observer_id: parsed.observer_id,
            fixations: parsed
                .fixations
                .iter()
                .map(|f| Fixation {
                    x: f[0],
                    y: f[1],
                    duration_ms: f[2],
                })
                .collect(),
        };
        sp.validate()?;
        out.push(sp);
    }
    Ok(out)
}

pub fn write_scanpaths(paths: &[Scanpath], out: &Path) -> Result<()> {
    let file = File::create(out).map_err(|e| AqaError::io(out, e))?;
    let mut w = BufWriter::new(file);
    for p in paths {
        let line = ScanpathLine {
            image_id: p.image_id.clone(),
            observer_id: p.observer_id.clone(),
            fixations: p
                .fixations
                .iter()
                .map(|f| [f.x, f.y, f.duration_ms])
                .collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| AqaError::Numeric(e.to_string()))?;
        writeln!(w, "{json}").map_err(|e| AqaError::io(out, e))?;
    }
    w.flush().map_err(|e| AqaError::io(out, e))?;
    Ok(())
}

/// Decode an 8-bit RGB PNG to `H x W x 3` reals in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| AqaError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(pixels)
}

/// Encode `H x W x 3` reals in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(pixels: &ndarray::ArrayView3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    assert_eq!(c, 3, "expected RGB pixels");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (pixels[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| AqaError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
