//! Arbitrary style transfer with controllable strength behind a pluggable
//! backend interface.
//!
//! A backend predicts a style vector from a style image and re-renders a
//! content image under a (possibly blended) style vector. The procedural
//! backend gives a closed-form, fully checkable stylizer: its 9-d vector is
//! `(airlight rgb, fog beta, gamma, color-shift rgb, contrast)` and its
//! transfer applies those photometric operators relative to the content's
//! own predicted vector, so re-applying a content's own style is a bit-exact
//! identity.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::imagery::{DatasetManifest, ImageRecord, ImageSource, LabeledImage, Origin};

/// Fixed-length real embedding of a style.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector {
    values: Vec<f64>,
}

impl StyleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "style vector entries must be finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A named style image.
#[derive(Debug, Clone)]
pub struct StyleImage {
    pub id: String,
    pub pixels: ImageTensor,
}

pub trait StylizerBackend: Send + Sync {
    /// Identity used in error messages.
    fn name(&self) -> &str;

    /// Dimension of the vectors this backend produces and consumes.
    fn style_dim(&self) -> usize;

    /// Predicts the style vector of an image. Deterministic per input.
    fn predict(&self, image: &ImageTensor) -> Result<StyleVector>;

    /// Re-renders `content` under `style`; preserves spatial dimensions and
    /// clamps output to `[0, 1]`.
    fn transfer(&self, content: &ImageTensor, style: &StyleVector) -> Result<ImageTensor>;
}

pub fn predict_style(backend: &dyn StylizerBackend, image: &ImageTensor) -> Result<StyleVector> {
    let v = backend.predict(image).map_err(|e| Error::Backend {
        backend: backend.name().to_string(),
        message: e.to_string(),
    })?;
    if v.dim() != backend.style_dim() {
        return Err(Error::Backend {
            backend: backend.name().to_string(),
            message: format!(
                "predicted dimension {} != declared {}",
                v.dim(),
                backend.style_dim()
            ),
        });
    }
    Ok(v)
}

/// Identity interpolation: `alpha * style + (1 - alpha) * content`.
pub fn blend_style(content: &StyleVector, style: &StyleVector, alpha: f64) -> Result<StyleVector> {
    if content.dim() != style.dim() {
        return Err(Error::ShapeMismatch(format!(
            "style vector dims differ: {} vs {}",
            content.dim(),
            style.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0,1], got {alpha}"
        )));
    }
    let values = content
        .values
        .iter()
        .zip(&style.values)
        .map(|(c, s)| alpha * s + (1.0 - alpha) * c)
        .collect();
    StyleVector::new(values)
}

/// Content style vectors, cached per content image id. Concurrent readers,
/// single-writer insertion.
#[derive(Default)]
pub struct StyleCache {
    inner: RwLock<HashMap<String, StyleVector>>,
}

impl StyleCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_predict(
        &self,
        backend: &dyn StylizerBackend,
        image_id: &str,
        pixels: &ImageTensor,
    ) -> Result<StyleVector> {
        if let Some(v) = self.inner.read().expect("cache poisoned").get(image_id) {
            return Ok(v.clone());
        }
        let v = predict_style(backend, pixels)?;
        self.inner
            .write()
            .expect("cache poisoned")
            .insert(image_id.to_string(), v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lossless output naming: content and style ids plus the strength.
pub fn stylized_id(content_id: &str, style_id: &str, alpha: f64) -> String {
    format!("{content_id}__{style_id}__a{alpha:.2}")
}

/// Stylizes one labeled image. Boxes are copied verbatim; the output
/// references the content image.
pub fn stylize(
    backend: &dyn StylizerBackend,
    cache: &StyleCache,
    content: &LabeledImage,
    style: &StyleImage,
    alpha: f64,
) -> Result<LabeledImage> {
    let content_vec = cache.get_or_predict(backend, &content.image_id, &content.pixels)?;
    let style_vec = predict_style(backend, &style.pixels)?;
    let blended = blend_style(&content_vec, &style_vec, alpha)?;
    let pixels = backend
        .transfer(&content.pixels, &blended)
        .map_err(|e| Error::Backend {
            backend: backend.name().to_string(),
            message: e.to_string(),
        })?;
    Ok(LabeledImage {
        image_id: stylized_id(&content.image_id, &style.id, alpha),
        pixels,
        boxes: content.boxes.clone(),
        origin: Origin::Stylized,
        reference_id: content.image_id.clone(),
    })
}

/// A per-image stylization failure inside a batch job.
#[derive(Debug)]
pub struct StylizeFailure {
    pub content_id: String,
    pub style_id: String,
    pub alpha: f64,
    pub message: String,
}

/// Stylizes every (content, style, alpha) triple: exactly
/// `N_c * N_s * N_alpha` outputs minus reported failures.
///
/// With `out_dir` set, images are written as PNGs and the result is
/// file-backed; otherwise outputs stay in memory.
pub fn batch_stylize(
    backend: &dyn StylizerBackend,
    contents: &DatasetManifest,
    styles: &[StyleImage],
    alphas: &[f64],
    out_dir: Option<&Path>,
) -> Result<(DatasetManifest, Vec<StylizeFailure>)> {
    for a in alphas {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in [0,1], got {a}"
            )));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Style vectors are shared across all contents; predict them once.
    let style_vecs: Vec<StyleVector> = styles
        .iter()
        .map(|s| predict_style(backend, &s.pixels))
        .collect::<Result<_>>()?;

    let cache = StyleCache::new();
    let results: Vec<(Vec<ImageRecord>, Vec<StylizeFailure>)> = contents
        .entries
        .par_iter()
        .map(|entry| {
            let mut records = Vec::new();
            let mut failures = Vec::new();
            let pixels = match entry.load_pixels() {
                Ok(p) => p,
                Err(e) => {
                    for style in styles {
                        for &alpha in alphas {
                            failures.push(StylizeFailure {
                                content_id: entry.image_id.clone(),
                                style_id: style.id.clone(),
                                alpha,
                                message: e.to_string(),
                            });
                        }
                    }
                    return (records, failures);
                }
            };
            let content_vec = match cache.get_or_predict(backend, &entry.image_id, &pixels) {
                Ok(v) => v,
                Err(e) => {
                    for style in styles {
                        for &alpha in alphas {
                            failures.push(StylizeFailure {
                                content_id: entry.image_id.clone(),
                                style_id: style.id.clone(),
                                alpha,
                                message: e.to_string(),
                            });
                        }
                    }
                    return (records, failures);
                }
            };
            for (style, style_vec) in styles.iter().zip(&style_vecs) {
                for &alpha in alphas {
                    let outcome = blend_style(&content_vec, style_vec, alpha)
                        .and_then(|blended| backend.transfer(&pixels, &blended));
                    match outcome {
                        Ok(out_pixels) => {
                            let id = stylized_id(&entry.image_id, &style.id, alpha);
                            let source = match out_dir {
                                Some(dir) => {
                                    let path = dir.join(format!("{id}.png"));
                                    match out_pixels.save_png(&path) {
                                        Ok(_) => ImageSource::File(path),
                                        Err(e) => {
                                            failures.push(StylizeFailure {
                                                content_id: entry.image_id.clone(),
                                                style_id: style.id.clone(),
                                                alpha,
                                                message: e.to_string(),
                                            });
                                            continue;
                                        }
                                    }
                                }
                                None => ImageSource::Memory(out_pixels),
                            };
                            records.push(ImageRecord {
                                image_id: id,
                                source,
                                boxes: entry.boxes.clone(),
                                origin: Origin::Stylized,
                                reference_id: entry.image_id.clone(),
                            });
                        }
                        Err(e) => failures.push(StylizeFailure {
                            content_id: entry.image_id.clone(),
                            style_id: style.id.clone(),
                            alpha,
                            message: e.to_string(),
                        }),
                    }
                }
            }
            (records, failures)
        })
        .collect();

    let mut manifest = DatasetManifest::new(
        format!("{}_stylized", contents.name),
        contents.split,
        contents.class_names.clone(),
    );
    let mut failures = Vec::new();
    for (records, fails) in results {
        manifest.entries.extend(records);
        failures.extend(fails);
    }
    Ok((manifest, failures))
}

/// Indices into the procedural 9-d style vector.
mod dim {
    pub const AIRLIGHT: usize = 0; // ..3
    pub const BETA: usize = 3;
    pub const GAMMA: usize = 4;
    pub const SHIFT: usize = 5; // ..8
    pub const CONTRAST: usize = 8;
    pub const LEN: usize = 9;
}

/// Reference luminance spread of a clear scene, used to normalize the
/// contrast and fog estimates.
const CLEAR_LUM_STD: f64 = 0.2;

/// Deterministic photometric stylizer. See module docs for the vector
/// layout and the relative-transfer identity property.
#[derive(Debug, Default, Clone)]
pub struct ProceduralBackend;

impl ProceduralBackend {
    pub fn new() -> Self {
        Self
    }

    fn stats(image: &ImageTensor) -> ProceduralStats {
        let lum = image.luminance();
        let n = lum.len();
        let mut sorted: Vec<f64> = lum.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite luminance"));
        let pct = |p: f64| sorted[((p * (n - 1) as f64).round() as usize).min(n - 1)];
        let mean_lum = sorted.iter().sum::<f64>() / n as f64;
        let std_lum = image.luminance_std();
        let p10 = pct(0.10);
        let p90 = pct(0.90);

        // Airlight: mean color over the brightest decile of pixels.
        let mut air = [0.0f64; 3];
        let mut count = 0usize;
        for y in 0..image.height() {
            for x in 0..image.width() {
                if lum[[y, x]] >= p90 {
                    for (c, a) in air.iter_mut().enumerate() {
                        *a += image.get(c, y, x);
                    }
                    count += 1;
                }
            }
        }
        if count > 0 {
            for a in air.iter_mut() {
                *a /= count as f64;
            }
        }
        ProceduralStats {
            mean_lum,
            std_lum,
            p10,
            airlight: air,
            channel_means: [
                image.channel_mean(0),
                image.channel_mean(1),
                image.channel_mean(2),
            ],
        }
    }
}

struct ProceduralStats {
    mean_lum: f64,
    std_lum: f64,
    p10: f64,
    airlight: [f64; 3],
    channel_means: [f64; 3],
}

impl StylizerBackend for ProceduralBackend {
    fn name(&self) -> &str {
        "procedural"
    }

    fn style_dim(&self) -> usize {
        dim::LEN
    }

    fn predict(&self, image: &ImageTensor) -> Result<StyleVector> {
        let s = Self::stats(image);
        let mut v = vec![0.0; dim::LEN];
        v[dim::AIRLIGHT] = s.airlight[0];
        v[dim::AIRLIGHT + 1] = s.airlight[1];
        v[dim::AIRLIGHT + 2] = s.airlight[2];
        // Fog lifts the darkest pixels toward the airlight; read beta off the
        // 10th percentile of luminance. A clear scene (p10 near 0) maps to
        // beta near 0; a washed-out scene (p10 near 1) saturates at -ln(0.01).
        v[dim::BETA] = -(1.0 - s.p10).clamp(1e-2, 1.0).ln();
        // A power law maps a mid-gray mean to mean^gamma; invert that.
        v[dim::GAMMA] = (s.mean_lum.max(1e-4).ln() / 0.5f64.ln()).clamp(0.2, 8.0);
        v[dim::SHIFT] = s.channel_means[0] - s.mean_lum;
        v[dim::SHIFT + 1] = s.channel_means[1] - s.mean_lum;
        v[dim::SHIFT + 2] = s.channel_means[2] - s.mean_lum;
        v[dim::CONTRAST] = (s.std_lum / CLEAR_LUM_STD).clamp(0.05, 2.0);
        StyleVector::new(v)
    }

    fn transfer(&self, content: &ImageTensor, style: &StyleVector) -> Result<ImageTensor> {
        if style.dim() != dim::LEN {
            return Err(Error::ShapeMismatch(format!(
                "procedural backend expects dim {}, got {}",
                dim::LEN,
                style.dim()
            )));
        }
        let own = self.predict(content)?;
        let v = style.values();
        let o = own.values();

        // Operator parameters relative to the content's own style; when the
        // target equals the content's style every operator is the exact
        // identity and is skipped, leaving pixels untouched bit for bit.
        let gamma = v[dim::GAMMA] / o[dim::GAMMA];
        let contrast = v[dim::CONTRAST] / o[dim::CONTRAST];
        let shift = [
            v[dim::SHIFT] - o[dim::SHIFT],
            v[dim::SHIFT + 1] - o[dim::SHIFT + 1],
            v[dim::SHIFT + 2] - o[dim::SHIFT + 2],
        ];
        let beta = (v[dim::BETA] - o[dim::BETA]).max(0.0);
        let airlight = [
            v[dim::AIRLIGHT].clamp(0.0, 1.0),
            v[dim::AIRLIGHT + 1].clamp(0.0, 1.0),
            v[dim::AIRLIGHT + 2].clamp(0.0, 1.0),
        ];

        let (h, w) = (content.height(), content.width());
        let mut data = content.data().clone();
        if gamma != 1.0 {
            let g = gamma.clamp(0.05, 20.0);
            data.mapv_inplace(|x| x.powf(g));
        }
        if shift != [0.0; 3] {
            for c in 0..3 {
                if shift[c] != 0.0 {
                    let mut plane = data.index_axis_mut(ndarray::Axis(0), c);
                    plane.mapv_inplace(|x| (x + shift[c]).clamp(0.0, 1.0));
                }
            }
        }
        if contrast != 1.0 {
            data.mapv_inplace(|x| (0.5 + (x - 0.5) * contrast).clamp(0.0, 1.0));
        }
        if beta != 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let t = (-beta * crate::imagery::center_depth(h, w, y, x)).exp();
                    for c in 0..3 {
                        data[[c, y, x]] = data[[c, y, x]] * t + airlight[c] * (1.0 - t);
                    }
                }
            }
        }
        ImageTensor::from_chw_clamped(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::BoundingBox;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::random(h, w, &mut rng)
    }

    /// A bright low-contrast image, the procedural stand-in for a fog style.
    fn fog_style_image(h: usize, w: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((3, h, w), |(_, y, _)| {
            0.82 + 0.06 * (y as f64 / h.max(1) as f64)
        });
        ImageTensor::from_chw(data).unwrap()
    }

    fn labeled(id: &str, pixels: ImageTensor) -> LabeledImage {
        LabeledImage {
            image_id: id.into(),
            pixels,
            boxes: vec![BoundingBox::new(0, 0.5, 0.5, 0.25, 0.25).unwrap()],
            origin: Origin::Original,
            reference_id: id.into(),
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let backend = ProceduralBackend::new();
        let img = noisy_image(3, 16, 16);
        let a = backend.predict(&img).unwrap();
        let b = backend.predict(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_dim_matches_declared() {
        let backend = ProceduralBackend::new();
        let img = noisy_image(4, 8, 8);
        assert_eq!(backend.predict(&img).unwrap().dim(), backend.style_dim());
    }

    #[test]
    fn distinct_constant_styles_have_distinct_vectors() {
        // Closed form on constant images: airlight and channel means equal
        // the constant, std is 0, so the vectors differ in the airlight and
        // gamma slots.
        let backend = ProceduralBackend::new();
        let bright = ImageTensor::constant(8, 8, 0.9).unwrap();
        let dark = ImageTensor::constant(8, 8, 0.1).unwrap();
        let vb = backend.predict(&bright).unwrap();
        let vd = backend.predict(&dark).unwrap();
        assert!((vb.values()[0] - 0.9).abs() < 1e-12);
        assert!((vd.values()[0] - 0.1).abs() < 1e-12);
        assert_ne!(vb, vd);
    }

    #[test]
    fn blend_endpoints_exact() {
        let c = StyleVector::new(vec![0.0, 2.0]).unwrap();
        let s = StyleVector::new(vec![4.0, 0.0]).unwrap();
        assert_eq!(blend_style(&c, &s, 0.0).unwrap(), c);
        assert_eq!(blend_style(&c, &s, 1.0).unwrap(), s);
        let mid = blend_style(&c, &s, 0.5).unwrap();
        assert_eq!(mid.values(), &[2.0, 1.0]);
    }

    #[test]
    fn blend_rejects_bad_inputs() {
        let c = StyleVector::new(vec![0.0, 2.0]).unwrap();
        let s3 = StyleVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(blend_style(&c, &s3, 0.5).is_err());
        let s = StyleVector::new(vec![1.0, 2.0]).unwrap();
        assert!(blend_style(&c, &s, 1.5).is_err());
        assert!(blend_style(&c, &s, -0.1).is_err());
    }

    #[test]
    fn alpha_zero_is_bitexact_identity() {
        let backend = ProceduralBackend::new();
        let cache = StyleCache::new();
        let content = labeled("c0", noisy_image(9, 20, 24));
        let style = StyleImage {
            id: "fog".into(),
            pixels: fog_style_image(16, 16),
        };
        let out = stylize(&backend, &cache, &content, &style, 0.0).unwrap();
        assert_eq!(out.pixels, content.pixels);
        assert_eq!(out.boxes, content.boxes);
        assert_eq!(out.reference_id, "c0");
        assert_eq!(out.origin, Origin::Stylized);
        assert_eq!(out.image_id, "c0__fog__a0.00");
    }

    #[test]
    fn full_fog_style_reduces_contrast() {
        let backend = ProceduralBackend::new();
        let cache = StyleCache::new();
        let content = labeled("c1", noisy_image(17, 24, 24));
        let before = content.pixels.luminance_std();
        let style = StyleImage {
            id: "fog".into(),
            pixels: fog_style_image(16, 16),
        };
        let out = stylize(&backend, &cache, &content, &style, 1.0).unwrap();
        let after = out.pixels.luminance_std();
        // Heavy fog embedding: contrast drops by at least half.
        assert!(
            after < 0.5 * before,
            "expected strong contrast reduction, got {before} -> {after}"
        );
        assert_eq!(out.boxes, content.boxes);
    }

    #[test]
    fn transfer_preserves_spatial_dims() {
        let backend = ProceduralBackend::new();
        let img = noisy_image(5, 13, 7);
        let style = backend.predict(&fog_style_image(8, 8)).unwrap();
        let out = backend.transfer(&img, &style).unwrap();
        assert_eq!((out.height(), out.width()), (13, 7));
    }

    #[test]
    fn batch_counts_are_exact() {
        let backend = ProceduralBackend::new();
        let mut contents = DatasetManifest::new("toy", crate::imagery::Split::Train, vec![
            "thing".to_string(),
        ]);
        for i in 0..2 {
            contents.entries.push(ImageRecord {
                image_id: format!("c{i}"),
                source: ImageSource::Memory(noisy_image(i as u64, 12, 12)),
                boxes: vec![BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2).unwrap()],
                origin: Origin::Original,
                reference_id: format!("c{i}"),
            });
        }
        let styles = vec![
            StyleImage { id: "s1".into(), pixels: fog_style_image(8, 8) },
            StyleImage { id: "s2".into(), pixels: ImageTensor::constant(8, 8, 0.15).unwrap() },
            StyleImage { id: "s3".into(), pixels: noisy_image(99, 8, 8) },
        ];
        let alphas = [0.5, 1.0];
        let (out, failures) = batch_stylize(&backend, &contents, &styles, &alphas, None).unwrap();
        assert!(failures.is_empty());
        assert_eq!(out.len(), 2 * 3 * 2);

        let (empty, _) = batch_stylize(&backend, &contents, &styles, &[], None).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn batch_rejects_invalid_alpha() {
        let backend = ProceduralBackend::new();
        let contents = DatasetManifest::new("toy", crate::imagery::Split::Train, vec![]);
        assert!(batch_stylize(&backend, &contents, &[], &[1.2], None).is_err());
    }

    #[test]
    fn cache_predicts_once_per_content() {
        let backend = ProceduralBackend::new();
        let cache = StyleCache::new();
        let img = noisy_image(1, 10, 10);
        let v1 = cache.get_or_predict(&backend, "a", &img).unwrap();
        let v2 = cache.get_or_predict(&backend, "a", &img).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(cache.len(), 1);
    }
}
