//! On-disk fingerprint datasets and validation splitting.
//!
//! Layout under a root directory:
//!
//! ```text
//! train/live/*.png|*.pgm
//! train/fake/*.png|*.pgm
//! test/live/…   (optional)
//! test/fake/…   (optional)
//! ```
//!
//! File stems may follow `<subject>_<anything>[__<material>]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Material tag for files without a `__<material>` suffix.
pub const UNKNOWN_MATERIAL: &str = "unknown";
const IMAGE_EXTENSIONS: [&str; 2] = ["png", "pgm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Live = 0,
    Fake = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Live, Label::Fake];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "live" | "0" => Some(Label::Live),
            "fake" | "1" => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A decoded grayscale image, `1×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: Label,
    pub material: String,
    pub subject: Option<String>,
    pub source: Option<PathBuf>,
}

impl<T: Scalar> Sample<T> {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Source path, or a positional name for in-memory samples.
    pub fn describe(&self, index: usize) -> String {
        match &self.source {
            Some(p) => p.display().to_string(),
            None => format!("sample #{index}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub subject: Option<String>,
    pub material: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn counts(entries: &[ManifestEntry]) -> (usize, usize) {
        let live = entries.iter().filter(|e| e.label == Label::Live).count();
        (live, entries.len() - live)
    }

    /// Number of images per `(height, width)` across both splits.
    pub fn size_histogram(&self) -> BTreeMap<(usize, usize), usize> {
        let mut h = BTreeMap::new();
        for e in self.train.iter().chain(&self.test) {
            *h.entry((e.height, e.width)).or_insert(0) += 1;
        }
        h
    }

    /// `path,label,subject,material` lines for every entry.
    pub fn to_text(&self) -> String {
        let mut out = String::from("path,label,subject,material\n");
        for e in self.train.iter().chain(&self.test) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.path.display(),
                e.label,
                e.subject.as_deref().unwrap_or(""),
                e.material
            ));
        }
        out
    }
}

/// Splits a file stem into `(subject, material)`.
///
/// `s017_left_index__gelatin` gives `(Some("s017"), "gelatin")`.
pub fn parse_stem(stem: &str) -> (Option<String>, String) {
    let (rest, material) = match stem.rsplit_once("__") {
        Some((rest, m)) if !m.is_empty() => (rest, m.to_string()),
        _ => (stem, UNKNOWN_MATERIAL.to_string()),
    };
    let subject = rest.split_once('_').map(|(s, _)| s).filter(|s| !s.is_empty()).map(str::to_string);
    (subject, material)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn scan_class(dir: &Path, label: Label) -> Result<Vec<ManifestEntry>> {
    if !dir.is_dir() {
        return Err(Error::Layout(format!("missing class directory {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && is_image(p));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Layout(format!("class directory {} holds no PNG or PGM images", dir.display())));
    }
    paths
        .into_iter()
        .map(|path| {
            let (width, height) = image::image_dimensions(&path)
                .map_err(|e| Error::Decode { path: path.clone(), reason: e.to_string() })?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let (subject, material) = parse_stem(stem);
            Ok(ManifestEntry { path, label, subject, material, height: height as usize, width: width as usize })
        })
        .collect()
}

fn scan_split(root: &Path, split: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for label in Label::ALL {
        entries.extend(scan_class(&root.join(split).join(label.as_str()), label)?);
    }
    Ok(entries)
}

/// Enumerates the dataset under `root` and reads image headers only.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let train = scan_split(root, "train")?;
    let test = if root.join("test").is_dir() { scan_split(root, "test")? } else { Vec::new() };
    Ok(DatasetManifest { root: root.to_path_buf(), train, test })
}

/// Decodes a grayscale image scaled to `[0, 1]`. Color images are reduced to
/// luminance.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let gray = match decoded {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            log::warn!("{}: {:?} image converted to 8-bit luminance", path.display(), other.color());
            other.to_luma8()
        }
    };
    let (w, h) = gray.dimensions();
    let scale = T::cast(1.0 / 255.0);
    let data = gray.into_raw().into_iter().map(|v| T::cast(v as f64) * scale).collect();
    Tensor::from_vec(&[1, h as usize, w as usize], data)
}

pub fn load_sample<T: Scalar>(entry: &ManifestEntry) -> Result<Sample<T>> {
    Ok(Sample {
        image: load_image(&entry.path)?,
        label: entry.label,
        material: entry.material.clone(),
        subject: entry.subject.clone(),
        source: Some(entry.path.clone()),
    })
}

pub fn load_samples<T: Scalar>(entries: &[ManifestEntry]) -> Result<Vec<Sample<T>>> {
    entries.iter().map(load_sample).collect()
}

/// Writes a `1×H×W` (or `H×W`) image as 8-bit grayscale PNG, rounding
/// `v·255`.
pub fn save_png<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(Error::InvalidShape(format!("cannot write image of shape {s:?}"))),
    };
    let bytes = image.data().iter().map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })
}

/// Anything with a class label and optional subject that can be split.
pub trait Labeled {
    fn label(&self) -> Label;
    fn subject(&self) -> Option<&str>;
}

impl Labeled for ManifestEntry {
    fn label(&self) -> Label {
        self.label
    }
    fn subject(&self) -> Option<&str> {
        self.subject.as_deref()
    }
}

impl<T> Labeled for Sample<T> {
    fn label(&self) -> Label {
        self.label
    }
    fn subject(&self) -> Option<&str> {
        self.subject.as_deref()
    }
}

fn class_target(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Stratified train/validation split returning sorted indices.
///
/// Each class contributes `round(fraction·n)` items (at least one while the
/// class has two or more). When every item carries a subject, whole
/// subjects move to validation so no subject appears on both sides, and
/// per-class counts land as near their targets as subject sizes allow.
pub fn split_indices<S: Labeled>(items: &[S], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return contract_err(format!("validation fraction must be in (0, 1), got {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = [0usize; 2];
    for label in Label::ALL {
        targets[label.index()] = class_target(items.iter().filter(|s| s.label() == label).count(), fraction);
    }
    let mut val = BTreeSet::new();
    let with_subjects = !items.is_empty() && items.iter().all(|s| s.subject().is_some());
    if with_subjects {
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in items.iter().enumerate() {
            by_subject.entry(s.subject().expect("checked")).or_default().push(i);
        }
        let mut subjects: Vec<&str> = by_subject.keys().copied().collect();
        subjects.shuffle(&mut rng);
        let mut taken = [0usize; 2];
        for subject in subjects {
            if taken == targets {
                break;
            }
            let members = &by_subject[subject];
            let mut add = [0usize; 2];
            members.iter().for_each(|&i| add[items[i].label().index()] += 1);
            // accept a subject when it moves every class it touches closer to its target
            let closer =
                |c: usize| add[c] == 0 || (taken[c] + add[c]).abs_diff(targets[c]) < taken[c].abs_diff(targets[c]);
            if (0..2).all(closer) {
                taken[0] += add[0];
                taken[1] += add[1];
                val.extend(members.iter().copied());
            }
        }
    } else {
        if items.iter().any(|s| s.subject().is_some()) {
            log::warn!("some files carry no subject prefix; validation split is per image, not per subject");
        }
        for label in Label::ALL {
            let mut idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].label() == label).collect();
            idx.shuffle(&mut rng);
            val.extend(idx.into_iter().take(targets[label.index()]));
        }
    }
    let train = (0..items.len()).filter(|i| !val.contains(i)).collect();
    Ok((train, val.into_iter().collect()))
}

/// Splits the manifest's train entries into training and validation lists.
pub fn split_validation(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let (train, val) = split_indices(&manifest.train, fraction, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| manifest.train[i].clone()).collect();
    Ok((pick(train), pick(val)))
}
