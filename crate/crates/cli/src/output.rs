//! Run-directory helpers: produced-file manifests and detection overlays.

use std::path::{Path, PathBuf};

use sdnia_core::detector::Detection;
use sdnia_core::{Error, ImageTensor, Result};

/// Records every artifact a command writes under the run directory.
#[derive(Default)]
pub struct ProducedFiles {
    files: Vec<PathBuf>,
}

impl ProducedFiles {
    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }

    /// Writes `produced_files.json` in `dir` and includes itself.
    pub fn write(mut self, dir: &Path) -> Result<()> {
        let manifest_path = dir.join("produced_files.json");
        self.files.push(manifest_path.clone());
        let listed: Vec<String> = self
            .files
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        let json = serde_json::to_string_pretty(&listed)
            .map_err(|e| Error::Config(format!("produced-files serialization: {e}")))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

const CLASS_COLORS: [[f64; 3]; 6] = [
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.2, 0.4, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
];

/// Draws 2px box borders (class-colored) on a copy of the image.
pub fn draw_detections(image: &ImageTensor, detections: &[Detection]) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for det in detections {
        let color = CLASS_COLORS[det.class_id % CLASS_COLORS.len()];
        let (x1, y1, x2, y2) = det.box_.corners();
        let px1 = ((x1 * w as f64) as isize).clamp(0, w as isize - 1) as usize;
        let px2 = ((x2 * w as f64) as isize).clamp(0, w as isize - 1) as usize;
        let py1 = ((y1 * h as f64) as isize).clamp(0, h as isize - 1) as usize;
        let py2 = ((y2 * h as f64) as isize).clamp(0, h as isize - 1) as usize;
        for x in px1..=px2 {
            for dy in 0..2usize {
                let top = (py1 + dy).min(h - 1);
                let bottom = py2.saturating_sub(dy);
                for c in 0..3 {
                    out.set(c, top, x, color[c]);
                    out.set(c, bottom, x, color[c]);
                }
            }
        }
        for y in py1..=py2 {
            for dx in 0..2usize {
                let left = (px1 + dx).min(w - 1);
                let right = px2.saturating_sub(dx);
                for c in 0..3 {
                    out.set(c, y, left, color[c]);
                    out.set(c, y, right, color[c]);
                }
            }
        }
    }
    out
}
