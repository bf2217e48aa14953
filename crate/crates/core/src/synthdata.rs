//! Procedural toy data: a synthetic shapes detection dataset (circle,
//! square, triangle on textured backgrounds) and extreme-condition style
//! images, sized for desk-scale experiments.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::imagery::{BoundingBox, DatasetManifest, ImageRecord, ImageSource, Origin, Split};
use crate::stylizer::StyleImage;

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_extent: f64,
    pub max_extent: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_shapes: 1,
            max_shapes: 3,
            min_extent: 0.20,
            max_extent: 0.42,
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let base = rng.random_range(0.30..0.55);
    let tilt = rng.random_range(-0.12..0.12);
    let tint: [f64; 3] = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let mut data = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let grad = base + tilt * (y as f64 / size as f64);
            let noise = rng.random_range(-0.04..0.04);
            for c in 0..3 {
                data[[c, y, x]] = (grad + tint[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    data
}

/// Class-coded warm palette with jitter: circles red, squares orange,
/// triangles yellow. The classes differ mainly in the green/red ratio, a
/// cue that gamma darkening skews (ratios raise to the power gamma) and fog
/// washes toward the airlight, so photometric degradation genuinely
/// confuses a model trained on clean images only.
fn class_color(class: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let r = rng.random_range(0.85..1.0);
    let g_base: f64 = match class {
        0 => 0.12,
        1 => 0.55,
        _ => 0.95,
    };
    let g = (g_base + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0) * r;
    let b = rng.random_range(0.05..0.18);
    [r, g, b]
}

fn paint_shape(
    data: &mut Array3<f64>,
    class: usize,
    cx: f64,
    cy: f64,
    extent: f64,
    color: [f64; 3],
) {
    let size = data.shape()[1];
    let half = extent / 2.0;
    let inside = |px: f64, py: f64| -> bool {
        let dx = px - cx;
        let dy = py - cy;
        match class {
            0 => dx * dx + dy * dy <= half * half,
            1 => dx.abs() <= half && dy.abs() <= half,
            // Upward triangle inscribed in the box.
            _ => {
                if dy < -half || dy > half {
                    return false;
                }
                let frac = (dy + half) / (2.0 * half);
                dx.abs() <= frac * half
            }
        }
    };
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64;
            let py = (y as f64 + 0.5) / size as f64;
            if inside(px, py) {
                for c in 0..3 {
                    data[[c, y, x]] = color[c];
                }
            }
        }
    }
}

/// One synthetic image with its boxes.
pub fn synth_image(config: &ShapesConfig, rng: &mut ChaCha8Rng) -> (ImageTensor, Vec<BoundingBox>) {
    let size = config.image_size;
    let mut data = background(size, rng);
    let n = rng.random_range(config.min_shapes..=config.max_shapes);
    let mut boxes: Vec<BoundingBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n && attempts < 40 {
        attempts += 1;
        let extent = rng.random_range(config.min_extent..=config.max_extent);
        let half = extent / 2.0;
        let cx = rng.random_range(half..(1.0 - half));
        let cy = rng.random_range(half..(1.0 - half));
        let class = rng.random_range(0..SHAPE_CLASSES.len());
        let candidate = BoundingBox {
            class_id: class,
            cx,
            cy,
            w: extent,
            h: extent,
        };
        if boxes.iter().any(|b| b.rect_iou(&candidate) > 0.1) {
            continue;
        }
        paint_shape(&mut data, class, cx, cy, extent, class_color(class, rng));
        boxes.push(candidate);
    }
    (
        ImageTensor::from_chw_clamped(data).expect("3-channel synthesis"),
        boxes,
    )
}

/// Generates a shapes manifest. With `out_dir`, images are written as PNGs;
/// otherwise they stay in memory.
pub fn generate_shapes(
    name: &str,
    split: Split,
    count: usize,
    config: &ShapesConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DatasetManifest> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = DatasetManifest::new(
        name,
        split,
        SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    );
    for i in 0..count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let (pixels, boxes) = synth_image(config, &mut rng);
        let image_id = format!("{name}_{i:05}");
        let source = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("{image_id}.png"));
                pixels.save_png(&path)?;
                ImageSource::File(path)
            }
            None => ImageSource::Memory(pixels),
        };
        manifest.entries.push(ImageRecord {
            image_id: image_id.clone(),
            source,
            boxes,
            origin: Origin::Original,
            reference_id: image_id,
        });
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleKind {
    /// Bright, washed-out, low contrast.
    Fog,
    /// Dark with crushed shadows.
    Night,
}

impl StyleKind {
    pub fn id(&self) -> &'static str {
        match self {
            StyleKind::Fog => "fog",
            StyleKind::Night => "night",
        }
    }
}

/// A procedural extreme-condition style image.
pub fn style_image(kind: StyleKind, size: usize, seed: u64) -> StyleImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match kind {
        StyleKind::Fog => Array3::from_shape_fn((3, size, size), |(_, y, _)| {
            let base = 0.85 + 0.05 * (y as f64 / size as f64);
            (base + rng.random_range(-0.015..0.015)).clamp(0.0, 1.0)
        }),
        StyleKind::Night => Array3::from_shape_fn((3, size, size), |(c, y, _)| {
            let base = 0.05 + 0.05 * (y as f64 / size as f64);
            let blue_lift = if c == 2 { 0.02 } else { 0.0 };
            (base + blue_lift + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0)
        }),
    };
    StyleImage {
        id: kind.id().to_string(),
        pixels: ImageTensor::from_chw_clamped(data).expect("3-channel style"),
    }
}
