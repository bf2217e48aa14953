//! Dataset ingestion, class filtering, mixed-set assembly, and synthetic
//! degradation (fog, gamma) for building test sets.
//!
//! Label files are UTF-8 text, one box per line: `class_id cx cy w h`
//! with normalized center coordinates. Manifests are JSON, one record per
//! image (image path, label path, origin, reference id), with paths
//! relative to the manifest file.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;

/// Normalized center-form box with a class id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { class_id, cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_center = (0.0..=1.0).contains(&self.cx) && (0.0..=1.0).contains(&self.cy);
        let ok_extent =
            self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0;
        let finite =
            [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !(ok_center && ok_extent && finite) {
            return Err(Error::InvalidArgument(format!(
                "box outside [0,1]: cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)` corners, possibly extending past the image edge.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Area of the intersection with the unit image square.
    pub fn clipped_area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        let w = x2.min(1.0) - x1.max(0.0);
        let h = y2.min(1.0) - y1.max(0.0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Plain rectangle intersection-over-union, ignoring class ids.
    /// All areas derive from the same corner values, so identical boxes
    /// score exactly 1.
    pub fn rect_iou(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let area_a = (ax2 - ax1) * (ay2 - ay1);
        let area_b = (bx2 - bx1) * (by2 - by1);
        let union = area_a + area_b - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// How an image entered the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Stylized,
    FogSynth,
    GammaSynth,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Origin::Original => "original",
            Origin::Stylized => "stylized",
            Origin::FogSynth => "fog_synth",
            Origin::GammaSynth => "gamma_synth",
        };
        write!(f, "{s}")
    }
}

/// Where an entry's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Memory(ImageTensor),
}

/// One manifest entry: a labeled image reference.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub source: ImageSource,
    pub boxes: Vec<BoundingBox>,
    pub origin: Origin,
    /// Id of the clean content image this derives from; equals `image_id`
    /// for originals.
    pub reference_id: String,
}

impl ImageRecord {
    pub fn load_pixels(&self) -> Result<ImageTensor> {
        match &self.source {
            ImageSource::File(path) => ImageTensor::load_png(path),
            ImageSource::Memory(img) => Ok(img.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A materialized labeled image (pixels in memory).
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image_id: String,
    pub pixels: ImageTensor,
    pub boxes: Vec<BoundingBox>,
    pub origin: Origin,
    pub reference_id: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub class_names: Vec<String>,
    pub entries: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split, class_names: Vec<String>) -> Self {
        Self {
            name: name.into(),
            split,
            class_names,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Structural invariants: unique ids, class ids within the universe.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Dataset(format!(
                    "duplicate image id '{}'",
                    e.image_id
                )));
            }
            for b in &e.boxes {
                if b.class_id >= self.class_names.len() {
                    return Err(Error::Dataset(format!(
                        "image '{}': class id {} out of range (|classes| = {})",
                        e.image_id,
                        b.class_id,
                        self.class_names.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.image_id.as_str()).collect()
    }

    /// Materializes an entry by index.
    pub fn load_entry(&self, index: usize) -> Result<LabeledImage> {
        let e = &self.entries[index];
        Ok(LabeledImage {
            image_id: e.image_id.clone(),
            pixels: e.load_pixels()?,
            boxes: e.boxes.clone(),
            origin: e.origin,
            reference_id: e.reference_id.clone(),
        })
    }
}

/// Per-entry problem reported during ingestion.
#[derive(Debug, Clone)]
pub struct LoadDiagnostic {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for LoadDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.path.display(), line, self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    /// Entries rejected or boxes dropped, with file (+line) context.
    pub diagnostics: Vec<LoadDiagnostic>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    split: Split,
    class_names: Vec<String>,
    entries: Vec<ManifestEntryFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntryFile {
    image_id: String,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    origin: Origin,
    reference_id: String,
}

/// Reads a manifest and its label files from disk.
///
/// Entries with missing images or out-of-range boxes are rejected and
/// reported; boxes that clip to zero area are dropped with a warning.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let raw = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut manifest = DatasetManifest::new(file.name, file.split, file.class_names);
    let mut diagnostics = Vec::new();

    for entry in file.entries {
        let image_path = base.join(&entry.image);
        if !image_path.exists() {
            diagnostics.push(LoadDiagnostic {
                path: image_path,
                line: None,
                message: format!("missing image file for entry '{}'", entry.image_id),
            });
            continue;
        }
        let mut boxes = Vec::new();
        let mut rejected = false;
        if let Some(labels) = &entry.labels {
            let label_path = base.join(labels);
            match parse_label_file(&label_path, manifest.class_names.len()) {
                Ok((parsed, mut warns)) => {
                    boxes = parsed;
                    diagnostics.append(&mut warns);
                }
                Err(diag) => {
                    diagnostics.push(diag);
                    rejected = true;
                }
            }
        }
        if rejected {
            continue;
        }
        manifest.entries.push(ImageRecord {
            image_id: entry.image_id,
            source: ImageSource::File(image_path),
            boxes,
            origin: entry.origin,
            reference_id: entry.reference_id,
        });
    }

    manifest.validate()?;
    Ok(LoadedDataset {
        manifest,
        diagnostics,
    })
}

/// Parses a one-box-per-line label file. A hard error on any line rejects
/// the whole entry; degenerate boxes are dropped with warnings.
fn parse_label_file(
    path: &Path,
    num_classes: usize,
) -> std::result::Result<(Vec<BoundingBox>, Vec<LoadDiagnostic>), LoadDiagnostic> {
    let raw = std::fs::read_to_string(path).map_err(|e| LoadDiagnostic {
        path: path.to_path_buf(),
        line: None,
        message: format!("cannot read label file: {e}"),
    })?;
    let mut boxes = Vec::new();
    let mut warnings = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(LoadDiagnostic {
                path: path.to_path_buf(),
                line: Some(line_num),
                message: format!("expected 5 fields 'class cx cy w h', got {}", fields.len()),
            });
        }
        let class_id: usize = fields[0].parse().map_err(|_| LoadDiagnostic {
            path: path.to_path_buf(),
            line: Some(line_num),
            message: format!("bad class id '{}'", fields[0]),
        })?;
        let mut vals = [0.0f64; 4];
        for (i, f) in fields[1..].iter().enumerate() {
            vals[i] = f.parse().map_err(|_| LoadDiagnostic {
                path: path.to_path_buf(),
                line: Some(line_num),
                message: format!("bad number '{f}'"),
            })?;
        }
        if class_id >= num_classes {
            return Err(LoadDiagnostic {
                path: path.to_path_buf(),
                line: Some(line_num),
                message: format!("class id {class_id} out of range (< {num_classes})"),
            });
        }
        let b = BoundingBox::new(class_id, vals[0], vals[1], vals[2], vals[3]).map_err(|e| {
            LoadDiagnostic {
                path: path.to_path_buf(),
                line: Some(line_num),
                message: e.to_string(),
            }
        })?;
        if b.clipped_area() <= 0.0 {
            warnings.push(LoadDiagnostic {
                path: path.to_path_buf(),
                line: Some(line_num),
                message: "box clips to zero area, dropped".into(),
            });
            continue;
        }
        boxes.push(b);
    }
    Ok((boxes, warnings))
}

/// Writes a manifest (with per-entry label files when boxes exist).
///
/// Entries must be file-backed; image paths are stored relative to the
/// manifest directory when possible.
pub fn save_dataset(manifest: &DatasetManifest, manifest_path: &Path) -> Result<()> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let labels_dir = base.join("labels");

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let ImageSource::File(path) = &e.source else {
            return Err(Error::Dataset(format!(
                "entry '{}' has no file backing; write its pixels first",
                e.image_id
            )));
        };
        let rel = path
            .strip_prefix(base)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| path.to_string_lossy().into_owned());
        let labels = if e.boxes.is_empty() {
            None
        } else {
            std::fs::create_dir_all(&labels_dir).map_err(|er| Error::io(&labels_dir, er))?;
            let label_rel = format!("labels/{}.txt", e.image_id);
            let label_path = base.join(&label_rel);
            write_label_file(&label_path, &e.boxes)?;
            Some(label_rel)
        };
        entries.push(ManifestEntryFile {
            image_id: e.image_id.clone(),
            image: rel,
            labels,
            origin: e.origin,
            reference_id: e.reference_id.clone(),
        });
    }
    let file = ManifestFile {
        name: manifest.name.clone(),
        split: manifest.split,
        class_names: manifest.class_names.clone(),
        entries,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Dataset(format!("manifest serialization: {e}")))?;
    std::fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

pub fn write_label_file(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            b.class_id, b.cx, b.cy, b.w, b.h
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Keeps only images containing at least one of the named classes; boxes of
/// dropped classes are removed and class ids remapped to the kept ordering.
pub fn filter_classes(dataset: &DatasetManifest, keep: &[String]) -> Result<DatasetManifest> {
    let mut remap = vec![None; dataset.class_names.len()];
    for (new_id, name) in keep.iter().enumerate() {
        let old_id = dataset
            .class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown class '{name}' (dataset has: {})",
                    dataset.class_names.join(", ")
                ))
            })?;
        remap[old_id] = Some(new_id);
    }

    let mut out = DatasetManifest::new(dataset.name.clone(), dataset.split, keep.to_vec());
    for e in &dataset.entries {
        let boxes: Vec<BoundingBox> = e
            .boxes
            .iter()
            .filter_map(|b| {
                remap[b.class_id].map(|new_id| BoundingBox {
                    class_id: new_id,
                    ..*b
                })
            })
            .collect();
        if boxes.is_empty() {
            continue;
        }
        out.entries.push(ImageRecord {
            boxes,
            ..e.clone()
        });
    }
    Ok(out)
}

/// Union of originals and stylized entries; every stylized entry must
/// reference an original by id.
pub fn mix_datasets(
    originals: &DatasetManifest,
    stylized: &DatasetManifest,
) -> Result<DatasetManifest> {
    if originals.class_names != stylized.class_names {
        return Err(Error::Dataset(
            "cannot mix datasets with different class universes".into(),
        ));
    }
    let original_ids = originals.ids();
    for e in &stylized.entries {
        if !original_ids.contains(e.reference_id.as_str()) {
            return Err(Error::Dataset(format!(
                "stylized entry '{}' references unknown original '{}'",
                e.image_id, e.reference_id
            )));
        }
    }
    let mut out = DatasetManifest::new(
        format!("{}_mixed", originals.name),
        originals.split,
        originals.class_names.clone(),
    );
    out.entries.extend(originals.entries.iter().cloned());
    out.entries.extend(stylized.entries.iter().cloned());
    out.validate()?;
    Ok(out)
}

/// Normalized Euclidean distance from the image center, the depth proxy of
/// the scattering model. Returns values in `[0, 1]` (1 at the corners).
pub fn center_depth(height: usize, width: usize, y: usize, x: usize) -> f64 {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let max = (cy * cy + cx * cx).sqrt();
    if max == 0.0 {
        return 0.0;
    }
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    (dy * dy + dx * dx).sqrt() / max
}

/// Atmospheric scattering: `I = J*t + A*(1-t)`, `t = exp(-beta * d)` with the
/// center-distance depth proxy.
pub fn synthesize_fog(image: &ImageTensor, beta: f64, airlight: f64) -> Result<ImageTensor> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "fog beta must be >= 0, got {beta}"
        )));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::InvalidArgument(format!(
            "airlight must be in [0,1], got {airlight}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut data = image.data().clone();
    for y in 0..h {
        for x in 0..w {
            let t = (-beta * center_depth(h, w, y, x)).exp();
            for c in 0..3 {
                let j = data[[c, y, x]];
                data[[c, y, x]] = j * t + airlight * (1.0 - t);
            }
        }
    }
    ImageTensor::from_chw(data)
}

/// Power-law transform: `out = in^gamma`.
pub fn synthesize_gamma(image: &ImageTensor, gamma: f64) -> Result<ImageTensor> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    let data = image.data().mapv(|v| v.powf(gamma));
    ImageTensor::from_chw(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    Fog,
    Gamma,
    /// Alternates fog and gamma across the set.
    Mixed,
}

/// Sampling ranges for the degraded-test-set builder. Gamma follows the
/// documented `[1.5, 5]` convention; fog ranges are a stand-in strong enough
/// to be clearly out-of-distribution for a clean-trained model.
pub const FOG_BETA_RANGE: (f64, f64) = (2.0, 4.0);
pub const FOG_AIRLIGHT_RANGE: (f64, f64) = (0.75, 0.95);
pub const GAMMA_RANGE: (f64, f64) = (1.5, 5.0);

/// Builds a degraded copy of `manifest`. With `out_dir`, images are written
/// as PNGs; otherwise they stay in memory. Boxes are copied verbatim and
/// every output references its source image.
pub fn degrade_manifest(
    manifest: &DatasetManifest,
    mode: DegradeMode,
    out_dir: Option<&Path>,
    seed: u64,
) -> Result<DatasetManifest> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = DatasetManifest::new(
        format!("{}_{}", manifest.name, mode_tag(mode)),
        manifest.split,
        manifest.class_names.clone(),
    );
    for (i, e) in manifest.entries.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let pixels = e.load_pixels()?;
        let use_fog = match mode {
            DegradeMode::Fog => true,
            DegradeMode::Gamma => false,
            DegradeMode::Mixed => i % 2 == 0,
        };
        let (degraded, origin, tag) = if use_fog {
            let beta = rng.random_range(FOG_BETA_RANGE.0..=FOG_BETA_RANGE.1);
            let airlight = rng.random_range(FOG_AIRLIGHT_RANGE.0..=FOG_AIRLIGHT_RANGE.1);
            (
                synthesize_fog(&pixels, beta, airlight)?,
                Origin::FogSynth,
                "fog",
            )
        } else {
            let gamma = rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
            (
                synthesize_gamma(&pixels, gamma)?,
                Origin::GammaSynth,
                "gamma",
            )
        };
        let image_id = format!("{}__{}", e.image_id, tag);
        let source = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("{image_id}.png"));
                degraded.save_png(&path)?;
                ImageSource::File(path)
            }
            None => ImageSource::Memory(degraded),
        };
        out.entries.push(ImageRecord {
            image_id,
            source,
            boxes: e.boxes.clone(),
            origin,
            reference_id: e.image_id.clone(),
        });
    }
    Ok(out)
}

fn mode_tag(mode: DegradeMode) -> &'static str {
    match mode {
        DegradeMode::Fog => "fog",
        DegradeMode::Gamma => "gamma",
        DegradeMode::Mixed => "degraded",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn record(id: &str, reference: &str, origin: Origin, boxes: Vec<BoundingBox>) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            source: ImageSource::File(PathBuf::from(format!("{id}.png"))),
            boxes,
            origin,
            reference_id: reference.to_string(),
        }
    }

    fn bx(class_id: usize) -> BoundingBox {
        BoundingBox::new(class_id, 0.5, 0.5, 0.2, 0.2).unwrap()
    }

    fn manifest_with(classes: &[&str], entries: Vec<ImageRecord>) -> DatasetManifest {
        let mut m = DatasetManifest::new(
            "test",
            Split::Train,
            classes.iter().map(|s| s.to_string()).collect(),
        );
        m.entries = entries;
        m
    }

    #[test]
    fn box_field_mapping() {
        let b = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(b.class_id, 0);
        assert_eq!((b.cx, b.cy), (0.5, 0.5));
    }

    #[test]
    fn box_rejects_out_of_range() {
        assert!(BoundingBox::new(0, 1.2, 0.5, 0.2, 0.2).is_err());
        assert!(BoundingBox::new(0, 0.5, 0.5, 0.0, 0.2).is_err());
        assert!(BoundingBox::new(0, 0.5, 0.5, 0.2, 1.5).is_err());
    }

    #[test]
    fn filter_drops_images_without_kept_classes() {
        // Classes {person, car, sofa}; keep {person, car}: sofa-only image dropped.
        let m = manifest_with(
            &["person", "car", "sofa"],
            vec![
                record("a", "a", Origin::Original, vec![bx(0), bx(2)]),
                record("b", "b", Origin::Original, vec![bx(2)]),
                record("c", "c", Origin::Original, vec![bx(1)]),
            ],
        );
        let f = filter_classes(&m, &["person".into(), "car".into()]).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.entries[0].image_id, "a");
        assert_eq!(f.entries[0].boxes.len(), 1);
        assert_eq!(f.entries[1].boxes[0].class_id, 1); // car remapped 1 -> 1
    }

    #[test]
    fn filter_keep_all_is_identity() {
        let m = manifest_with(
            &["person", "car"],
            vec![record("a", "a", Origin::Original, vec![bx(0), bx(1)])],
        );
        let f = filter_classes(&m, &["person".into(), "car".into()]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.entries[0].boxes.len(), 2);
        assert_eq!(f.class_names, m.class_names);
    }

    #[test]
    fn filter_keeps_subset_boxes() {
        // 2 person + 1 sofa, keep person: same image, 2 boxes.
        let m = manifest_with(
            &["person", "sofa"],
            vec![record("a", "a", Origin::Original, vec![bx(0), bx(0), bx(1)])],
        );
        let f = filter_classes(&m, &["person".into()]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.entries[0].boxes.len(), 2);
    }

    #[test]
    fn filter_unknown_class_is_fatal() {
        let m = manifest_with(&["person"], vec![]);
        assert!(filter_classes(&m, &["ghost".into()]).is_err());
    }

    #[test]
    fn filter_is_idempotent() {
        let m = manifest_with(
            &["person", "car", "sofa"],
            vec![
                record("a", "a", Origin::Original, vec![bx(0), bx(2)]),
                record("b", "b", Origin::Original, vec![bx(1)]),
            ],
        );
        let keep = vec!["person".to_string(), "car".to_string()];
        let once = filter_classes(&m, &keep).unwrap();
        let twice = filter_classes(&once, &keep).unwrap();
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.entries.iter().zip(&twice.entries) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.boxes, b.boxes);
        }
    }

    #[test]
    fn mix_counts_add() {
        let originals = manifest_with(
            &["person"],
            vec![
                record("a", "a", Origin::Original, vec![bx(0)]),
                record("b", "b", Origin::Original, vec![bx(0)]),
            ],
        );
        // 2 originals x 3 styles x 1 alpha -> 6 stylized, mix -> 8.
        let mut stylized_entries = Vec::new();
        for content in ["a", "b"] {
            for style in ["s1", "s2", "s3"] {
                stylized_entries.push(record(
                    &format!("{content}__{style}__a1.00"),
                    content,
                    Origin::Stylized,
                    vec![bx(0)],
                ));
            }
        }
        let stylized = manifest_with(&["person"], stylized_entries);
        let mixed = mix_datasets(&originals, &stylized).unwrap();
        assert_eq!(mixed.len(), 8);
    }

    #[test]
    fn mix_with_empty_stylized_is_identity() {
        let originals = manifest_with(
            &["person"],
            vec![record("a", "a", Origin::Original, vec![bx(0)])],
        );
        let stylized = manifest_with(&["person"], vec![]);
        let mixed = mix_datasets(&originals, &stylized).unwrap();
        assert_eq!(mixed.len(), originals.len());
    }

    #[test]
    fn mix_rejects_dangling_reference() {
        let originals = manifest_with(
            &["person"],
            vec![record("a", "a", Origin::Original, vec![bx(0)])],
        );
        let stylized = manifest_with(
            &["person"],
            vec![record("x__s1", "ghost", Origin::Stylized, vec![bx(0)])],
        );
        assert!(mix_datasets(&originals, &stylized).is_err());
    }

    #[test]
    fn fog_zero_beta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = ImageTensor::random(8, 9, &mut rng);
        let out = synthesize_fog(&img, 0.0, 0.8).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn fog_saturates_to_airlight() {
        let img = ImageTensor::constant(9, 9, 0.2).unwrap();
        let out = synthesize_fog(&img, 1e6, 0.8).unwrap();
        // Corner pixel has d = 1 -> t ~ 0 -> airlight.
        assert!((out.get(0, 0, 0) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn fog_halfway_transmittance() {
        // At t = 0.5: I = 0.2 * 0.5 + 0.8 * 0.5 = 0.5. Solve beta so the
        // corner pixel (d = 1) has exactly t = 0.5.
        let img = ImageTensor::constant(5, 5, 0.2).unwrap();
        let beta = std::f64::consts::LN_2;
        let out = synthesize_fog(&img, beta, 0.8).unwrap();
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fog_rejects_negative_beta() {
        let img = ImageTensor::zeros(4, 4);
        assert!(synthesize_fog(&img, -1.0, 0.5).is_err());
    }

    #[test]
    fn gamma_identity_and_known_value() {
        let img = ImageTensor::constant(4, 4, 0.25).unwrap();
        let same = synthesize_gamma(&img, 1.0).unwrap();
        assert_eq!(img, same);
        let sq = synthesize_gamma(&img, 2.0).unwrap();
        assert!((sq.get(0, 0, 0) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn gamma_fixed_points() {
        let mut img = ImageTensor::zeros(2, 2);
        img.set(0, 0, 0, 1.0);
        for g in [0.3, 1.7, 4.2] {
            let out = synthesize_gamma(&img, g).unwrap();
            assert_eq!(out.get(0, 0, 0), 1.0);
            assert_eq!(out.get(1, 0, 0), 0.0);
        }
    }

    #[test]
    fn gamma_rejects_nonpositive() {
        let img = ImageTensor::zeros(2, 2);
        assert!(synthesize_gamma(&img, 0.0).is_err());
        assert!(synthesize_gamma(&img, -2.0).is_err());
    }

    #[test]
    fn manifest_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::constant(6, 6, 0.4).unwrap();
        let img_path = dir.path().join("a.png");
        img.save_png(&img_path).unwrap();

        let m = manifest_with(
            &["person"],
            vec![ImageRecord {
                image_id: "a".into(),
                source: ImageSource::File(img_path),
                boxes: vec![bx(0)],
                origin: Origin::Original,
                reference_id: "a".into(),
            }],
        );
        let manifest_path = dir.path().join("set.json");
        save_dataset(&m, &manifest_path).unwrap();
        let loaded = load_dataset(&manifest_path).unwrap();
        assert!(loaded.diagnostics.is_empty());
        assert_eq!(loaded.manifest.len(), 1);
        assert_eq!(loaded.manifest.entries[0].boxes, m.entries[0].boxes);
    }

    #[test]
    fn load_reports_missing_image_and_bad_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::constant(6, 6, 0.4).unwrap();
        img.save_png(&dir.path().join("good.png")).unwrap();
        std::fs::write(dir.path().join("good.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
        img.save_png(&dir.path().join("bad.png")).unwrap();
        std::fs::write(dir.path().join("bad.txt"), "0 1.5 0.5 0.2 0.2\n").unwrap();

        let manifest = serde_json::json!({
            "name": "t", "split": "train", "class_names": ["person"],
            "entries": [
                {"image_id": "good", "image": "good.png", "labels": "good.txt",
                 "origin": "original", "reference_id": "good"},
                {"image_id": "bad", "image": "bad.png", "labels": "bad.txt",
                 "origin": "original", "reference_id": "bad"},
                {"image_id": "ghost", "image": "ghost.png",
                 "origin": "original", "reference_id": "ghost"}
            ]
        });
        let path = dir.path().join("m.json");
        std::fs::write(&path, manifest.to_string()).unwrap();

        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.manifest.len(), 1);
        assert_eq!(loaded.manifest.entries[0].image_id, "good");
        assert_eq!(loaded.diagnostics.len(), 2);
        let joined: String = loaded
            .diagnostics
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        assert!(joined.contains("bad.txt:1"));
        assert!(joined.contains("missing image"));
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = serde_json::json!({
            "name": "e", "split": "test", "class_names": [], "entries": []
        });
        let path = dir.path().join("m.json");
        std::fs::write(&path, manifest.to_string()).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.manifest.is_empty());
        assert!(loaded.diagnostics.is_empty());
    }

    #[test]
    fn label_line_maps_to_box() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.txt");
        std::fs::write(&path, "0 0.5 0.5 0.2 0.2\n").unwrap();
        let (boxes, warns) = parse_label_file(&path, 1).unwrap();
        assert!(warns.is_empty());
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].class_id, 0);
        assert_eq!(boxes[0].cx, 0.5);
    }
}
