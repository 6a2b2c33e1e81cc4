//! Joint image/text embeddings behind a provider abstraction.
//!
//! A provider encodes class-label prompts and images into one embedding
//! space of dimension `d_emb`. The dense image path mirrors how an
//! attention-pooled vision encoder is remapped for dense prediction: the
//! value and output projections become two 1x1 convolutions applied
//! positionwise to the last convolutional feature, so each grid cell gets
//! its own embedding. The global path is the spatial mean of the dense map.
//!
//! Two implementations:
//! * [`ToyProvider`] — fully deterministic given a seed, designed so that
//!   pixels in a class's canonical color embed close to that class's
//!   codebook vector while background pixels stay near an orthogonal
//!   background direction. Supports score gradients for CAM.
//! * [`PrecomputedProvider`] — loads externally computed dense features and
//!   text embeddings from an IMRSEG-TENSOR directory, for plugging in a real
//!   vision-language model without bundling weights.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette::canonical_color;
use crate::tensorfile;

/// Placeholder token replaced by the class label in prompt templates.
pub const CLASS_PLACEHOLDER: &str = "[class]";

/// Default prompt template.
pub const DEFAULT_TEMPLATE: &str = "a photo of a [class]";

/// A text embedding plus the prompt it was encoded from.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub vector: Array1<f64>,
    pub prompt: String,
}

/// Per-cell embeddings of shape (h, w, d_emb) for an image of
/// `source_resolution` pixels.
#[derive(Debug, Clone)]
pub struct DenseFeatureMap {
    pub tensor: Array3<f64>,
    pub source_resolution: (usize, usize),
}

/// Pooled whole-image embedding.
#[derive(Debug, Clone)]
pub struct GlobalEmbedding {
    pub vector: Array1<f64>,
}

/// Last-layer activations together with the gradient of the image/text
/// cosine score with respect to them. Consumed by the CAM path.
#[derive(Debug, Clone)]
pub struct CamGradients {
    /// (h, w, channels) activations of the provider's last conv feature.
    pub activations: Array3<f64>,
    /// d(cos(global, text)) / d(activations), same shape.
    pub score_grad: Array3<f64>,
}

/// Which provider to construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Toy,
    PrecomputedImport,
}

/// Construction-time description of a provider.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    /// Embedding dimension shared by text and dense image features.
    pub d_emb: usize,
    pub seed: u64,
    /// Channel count of the toy last conv feature (the analogue of a real
    /// encoder's bottleneck width).
    pub conv_feature_channels: usize,
    /// Feature grid cell size in pixels (grid = image size / stride).
    pub feature_stride: usize,
    /// Class vocabulary of the toy codebook.
    pub classes: Vec<String>,
    /// Root directory for the precomputed-import kind.
    #[serde(default)]
    pub root: Option<PathBuf>,
}

impl ProviderSpec {
    pub fn toy(seed: u64, classes: &[String]) -> Self {
        ProviderSpec {
            kind: ProviderKind::Toy,
            d_emb: 16,
            seed,
            conv_feature_channels: 32,
            feature_stride: 4,
            classes: classes.to_vec(),
            root: None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider + Send + Sync>> {
        match self.kind {
            ProviderKind::Toy => Ok(Box::new(ToyProvider::new(self)?)),
            ProviderKind::PrecomputedImport => {
                let root = self.root.as_ref().ok_or_else(|| {
                    Error::Config("precomputed-import provider needs a root directory".into())
                })?;
                Ok(Box::new(PrecomputedProvider::load(root)?))
            }
        }
    }
}

/// An image handed to a provider: pixel data plus an optional stable id
/// (precomputed providers key their feature files by id).
#[derive(Clone, Copy)]
pub struct ImageRef<'a> {
    pub pixels: &'a Array3<f64>,
    pub id: Option<&'a str>,
}

impl<'a> ImageRef<'a> {
    pub fn new(pixels: &'a Array3<f64>) -> Self {
        ImageRef { pixels, id: None }
    }

    pub fn with_id(pixels: &'a Array3<f64>, id: &'a str) -> Self {
        ImageRef { pixels, id: Some(id) }
    }
}

/// Joint image/text embedding provider. Implementations are immutable after
/// construction; encoding never mutates internal state.
pub trait EmbeddingProvider {
    fn d_emb(&self) -> usize;

    /// Encode `template` with its placeholder replaced by `class_label`.
    fn encode_text(&self, class_label: &str, template: &str) -> Result<TextEmbedding>;

    /// Positionwise dense embedding of the image's feature grid.
    fn encode_image_dense(&self, image: ImageRef<'_>) -> Result<DenseFeatureMap>;

    /// Whole-image embedding: the spatial mean of the dense map.
    fn encode_image_global(&self, image: ImageRef<'_>) -> Result<GlobalEmbedding> {
        let dense = self.encode_image_dense(image)?;
        Ok(GlobalEmbedding { vector: mean_over_grid(&dense.tensor) })
    }

    /// Last activations and the gradient of cos(global, text) w.r.t. them.
    /// Providers without a differentiable image path return a capability
    /// error.
    fn cam_gradients(&self, image: ImageRef<'_>, text: &TextEmbedding) -> Result<CamGradients>;
}

pub(crate) fn mean_over_grid(dense: &Array3<f64>) -> Array1<f64> {
    let (h, w, d) = dense.dim();
    let mut out = Array1::zeros(d);
    for y in 0..h {
        for x in 0..w {
            for k in 0..d {
                out[k] += dense[[y, x, k]];
            }
        }
    }
    out / (h * w) as f64
}

fn fill_template(class_label: &str, template: &str) -> Result<String> {
    let count = template.matches(CLASS_PLACEHOLDER).count();
    if count != 1 {
        return Err(Error::Config(format!(
            "template {template:?} must contain exactly one {CLASS_PLACEHOLDER:?} placeholder, found {count}"
        )));
    }
    Ok(template.replace(CLASS_PLACEHOLDER, class_label))
}

// ---------------------------------------------------------------------------
// Toy provider
// ---------------------------------------------------------------------------

/// Width of the color kernel around each canonical class color.
const COLOR_KERNEL_TAU: f64 = 0.15;
/// Scale of the seeded noise columns mixed into pixel embeddings.
const NOISE_SCALE: f64 = 0.04;
/// Scale of the extra stat-mix channels padding the conv feature.
const PAD_MIX_SCALE: f64 = 0.5;
/// Stat channels: centered mean RGB (3) + per-channel std (3).
const N_STATS: usize = 6;

pub struct ToyProvider {
    d_emb: usize,
    stride: usize,
    conv_channels: usize,
    classes: Vec<String>,
    class_colors: Vec<[f64; 3]>,
    /// Codebook rows, one per class; `background` is the extra direction.
    codebook: Array2<f64>,
    background: Array1<f64>,
    /// Orthogonal "value" projection (conv_channels x conv_channels).
    v_mat: Array2<f64>,
    /// Output projection (d_emb x conv_channels); c_mat = emb_map * v_mat^T.
    c_mat: Array2<f64>,
    /// The effective positionwise map c(v(.)) = emb_map.
    emb_map: Array2<f64>,
    /// Mixing matrix for the pad channels (pad x N_STATS).
    pad_mix: Array2<f64>,
}

impl ToyProvider {
    pub fn new(spec: &ProviderSpec) -> Result<Self> {
        if spec.classes.is_empty() {
            return Err(Error::Config("toy provider needs a non-empty class list".into()));
        }
        let n = spec.classes.len();
        let needed = n + 1 + N_STATS;
        if spec.conv_feature_channels < needed {
            return Err(Error::Config(format!(
                "conv_feature_channels = {} too small for {} classes (need >= {needed})",
                spec.conv_feature_channels, n
            )));
        }
        if spec.d_emb == 0 || spec.feature_stride == 0 {
            return Err(Error::Config("d_emb and feature_stride must be positive".into()));
        }

        let mut rng = SeededGaussian::new(spec.seed);
        // Codebook: Gaussian rows, unit-normalized, then orthogonalized when
        // they fit inside d_emb so canonical/background cosine targets hold.
        let mut rows: Vec<Array1<f64>> =
            (0..n + 1).map(|_| rng.vector(spec.d_emb)).collect();
        orthonormalize(&mut rows);
        let background = rows.pop().expect("n + 1 rows");
        let mut codebook = Array2::zeros((n, spec.d_emb));
        for (i, row) in rows.iter().enumerate() {
            codebook.row_mut(i).assign(row);
        }

        // Orthogonal value projection; its transpose inverts it, so the
        // output projection can realize any effective positionwise map.
        let cc = spec.conv_feature_channels;
        let mut v_rows: Vec<Array1<f64>> = (0..cc).map(|_| rng.vector(cc)).collect();
        orthonormalize(&mut v_rows);
        let mut v_mat = Array2::zeros((cc, cc));
        for (i, row) in v_rows.iter().enumerate() {
            v_mat.row_mut(i).assign(row);
        }

        // Effective map: kernel channel -> class vector, background channel
        // -> background vector, stat/pad channels -> small seeded noise.
        let mut emb_map = Array2::zeros((spec.d_emb, cc));
        for c in 0..n {
            for k in 0..spec.d_emb {
                emb_map[[k, c]] = codebook[[c, k]];
            }
        }
        for k in 0..spec.d_emb {
            emb_map[[k, n]] = background[k];
        }
        for col in n + 1..cc {
            for k in 0..spec.d_emb {
                emb_map[[k, col]] = NOISE_SCALE * rng.sample();
            }
        }
        let c_mat = emb_map.dot(&v_mat.t());

        let n_pad = cc - needed;
        let mut pad_mix = Array2::zeros((n_pad, N_STATS));
        for i in 0..n_pad {
            for j in 0..N_STATS {
                pad_mix[[i, j]] = PAD_MIX_SCALE * rng.sample();
            }
        }

        let class_colors = spec.classes.iter().map(|c| canonical_color(c)).collect();
        Ok(ToyProvider {
            d_emb: spec.d_emb,
            stride: spec.feature_stride,
            conv_channels: cc,
            classes: spec.classes.clone(),
            class_colors,
            codebook,
            background,
            v_mat,
            c_mat,
            emb_map,
            pad_mix,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// The value-projection matrix (exposed so tests can apply the two
    /// projections positionwise themselves).
    pub fn v_matrix(&self) -> &Array2<f64> {
        &self.v_mat
    }

    /// The output-projection matrix.
    pub fn c_matrix(&self) -> &Array2<f64> {
        &self.c_mat
    }

    fn grid_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("toy provider expects 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        Ok(())
    }

    /// The toy last conv feature: per-cell color-kernel responses, a
    /// background indicator, local RGB statistics and seeded stat mixes.
    pub fn conv_features(&self, image: ImageRef<'_>) -> Result<Array3<f64>> {
        self.check_image(image.pixels)?;
        let (h, w, _) = image.pixels.dim();
        let (gh, gw) = self.grid_dims(h, w);
        let n = self.classes.len();
        let mut out = Array3::zeros((gh, gw, self.conv_channels));
        for gy in 0..gh {
            for gx in 0..gw {
                let y0 = gy * self.stride;
                let x0 = gx * self.stride;
                let y1 = (y0 + self.stride).min(h);
                let x1 = (x0 + self.stride).min(w);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let mut mean = [0.0; 3];
                let mut sq = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for ch in 0..3 {
                            let v = image.pixels[[y, x, ch]];
                            mean[ch] += v;
                            sq[ch] += v * v;
                        }
                    }
                }
                for ch in 0..3 {
                    mean[ch] /= count;
                    sq[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt();
                }
                let mut wsum = 0.0;
                for (c, col) in self.class_colors.iter().enumerate() {
                    let d2: f64 =
                        (0..3).map(|ch| (mean[ch] - col[ch]).powi(2)).sum();
                    let wv = (-d2 / (2.0 * COLOR_KERNEL_TAU * COLOR_KERNEL_TAU)).exp();
                    out[[gy, gx, c]] = wv;
                    wsum += wv;
                }
                out[[gy, gx, n]] = (1.0 - wsum).max(0.0);
                let mut stats = [0.0; N_STATS];
                for ch in 0..3 {
                    stats[ch] = mean[ch] - 0.5;
                    stats[ch + 3] = sq[ch];
                }
                for (i, s) in stats.iter().enumerate() {
                    out[[gy, gx, n + 1 + i]] = *s;
                }
                for p in 0..self.pad_mix.nrows() {
                    let mut acc = 0.0;
                    for (j, s) in stats.iter().enumerate() {
                        acc += self.pad_mix[[p, j]] * s;
                    }
                    out[[gy, gx, n + 1 + N_STATS + p]] = acc;
                }
            }
        }
        Ok(out)
    }
}

impl EmbeddingProvider for ToyProvider {
    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn encode_text(&self, class_label: &str, template: &str) -> Result<TextEmbedding> {
        let prompt = fill_template(class_label, template)?;
        let idx = self
            .classes
            .iter()
            .position(|c| c == class_label)
            .ok_or_else(|| Error::UnknownClass(class_label.to_string()))?;
        Ok(TextEmbedding { vector: self.codebook.row(idx).to_owned(), prompt })
    }

    fn encode_image_dense(&self, image: ImageRef<'_>) -> Result<DenseFeatureMap> {
        let conv = self.conv_features(image)?;
        let (gh, gw, _) = conv.dim();
        let mut out = Array3::zeros((gh, gw, self.d_emb));
        for gy in 0..gh {
            for gx in 0..gw {
                // c(v(f)), both positionwise 1x1 projections
                for k in 0..self.d_emb {
                    let mut acc = 0.0;
                    for j in 0..self.conv_channels {
                        acc += self.emb_map[[k, j]] * conv[[gy, gx, j]];
                    }
                    out[[gy, gx, k]] = acc;
                }
            }
        }
        let (h, w, _) = image.pixels.dim();
        Ok(DenseFeatureMap { tensor: out, source_resolution: (h, w) })
    }

    fn cam_gradients(&self, image: ImageRef<'_>, text: &TextEmbedding) -> Result<CamGradients> {
        if text.vector.len() != self.d_emb {
            return Err(Error::Shape(format!(
                "text embedding dim {} != provider d_emb {}",
                text.vector.len(),
                self.d_emb
            )));
        }
        let activations = self.conv_features(image)?;
        let (gh, gw, _) = activations.dim();
        let dense = self.encode_image_dense(image)?;
        let u = mean_over_grid(&dense.tensor);
        let nu = u.dot(&u).sqrt();
        let t = &text.vector;
        let nt = t.dot(t).sqrt();

        let mut score_grad = Array3::zeros((gh, gw, self.conv_channels));
        if nu > 1e-12 && nt > 1e-12 {
            let cos = u.dot(t) / (nu * nt);
            // d score / d u
            let du: Array1<f64> = t / (nu * nt) - &(&u * (cos / (nu * nu)));
            // u = emb_map . mean(f): every cell shares the same gradient
            let per_cell = self.emb_map.t().dot(&du) / (gh * gw) as f64;
            for gy in 0..gh {
                for gx in 0..gw {
                    for j in 0..self.conv_channels {
                        score_grad[[gy, gx, j]] = per_cell[j];
                    }
                }
            }
        }
        Ok(CamGradients { activations, score_grad })
    }
}

/// Deterministic standard Gaussian stream (Box-Muller over ChaCha8).
pub(crate) struct SeededGaussian {
    rng: rand_chacha::ChaCha8Rng,
}

impl SeededGaussian {
    pub(crate) fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        SeededGaussian { rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed) }
    }

    pub(crate) fn sample(&mut self) -> f64 {
        use rand::Rng;
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub(crate) fn vector(&mut self, n: usize) -> Array1<f64> {
        Array1::from_iter((0..n).map(|_| self.sample()))
    }
}

/// Gram-Schmidt with unit normalization. Rows beyond the space dimension
/// (or degenerate rows) are left normalized-only.
pub(crate) fn orthonormalize(rows: &mut [Array1<f64>]) {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    for i in 0..rows.len() {
        if i < dim {
            for j in 0..i {
                let proj = rows[i].dot(&rows[j]);
                let prev = rows[j].clone();
                rows[i].zip_mut_with(&prev, |a, &b| *a -= proj * b);
            }
        }
        let norm = rows[i].dot(&rows[i]).sqrt();
        if norm > 1e-12 {
            rows[i].mapv_inplace(|v| v / norm);
        }
    }
}

// ---------------------------------------------------------------------------
// Precomputed-import provider
// ---------------------------------------------------------------------------

/// Manifest schema of a precomputed feature directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct PrecomputedManifest {
    pub d_emb: usize,
    /// image id -> relative tensor path, shape (h, w, d_emb)
    pub images: std::collections::BTreeMap<String, String>,
    /// class label -> relative tensor path, shape (d_emb)
    pub texts: std::collections::BTreeMap<String, String>,
}

pub struct PrecomputedProvider {
    root: PathBuf,
    manifest: PrecomputedManifest,
}

impl PrecomputedProvider {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: PrecomputedManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(&manifest_path, format!("bad manifest: {e}")))?;
        if manifest.d_emb == 0 {
            return Err(Error::data(&manifest_path, "d_emb must be positive"));
        }
        Ok(PrecomputedProvider { root: root.to_path_buf(), manifest })
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn d_emb(&self) -> usize {
        self.manifest.d_emb
    }

    fn encode_text(&self, class_label: &str, template: &str) -> Result<TextEmbedding> {
        let prompt = fill_template(class_label, template)?;
        let rel = self
            .manifest
            .texts
            .get(class_label)
            .ok_or_else(|| Error::UnknownClass(class_label.to_string()))?;
        let path = self.root.join(rel);
        let t = tensorfile::read_tensor(&path)?;
        if t.ndim() != 1 || t.len() != self.manifest.d_emb {
            return Err(Error::data(&path, format!("expected ({},) text tensor", self.manifest.d_emb)));
        }
        let vector = Array1::from_iter(t.iter().cloned());
        Ok(TextEmbedding { vector, prompt })
    }

    fn encode_image_dense(&self, image: ImageRef<'_>) -> Result<DenseFeatureMap> {
        let id = image.id.ok_or_else(|| {
            Error::Capability("precomputed-import provider requires an image id".into())
        })?;
        let rel = self.manifest.images.get(id).ok_or_else(|| {
            Error::data(self.root.join("manifest.json"), format!("image id {id:?} not in manifest"))
        })?;
        let path = self.root.join(rel);
        let t = tensorfile::read_tensor(&path)?;
        if t.ndim() != 3 || t.shape()[2] != self.manifest.d_emb {
            return Err(Error::data(
                &path,
                format!("expected (h, w, {}) dense tensor, got {:?}", self.manifest.d_emb, t.shape()),
            ));
        }
        let shape = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let tensor = t.into_shape_with_order(shape).expect("rank checked").into_dimensionality().unwrap();
        let (h, w, _) = image.pixels.dim();
        Ok(DenseFeatureMap { tensor, source_resolution: (h, w) })
    }

    fn cam_gradients(&self, _image: ImageRef<'_>, _text: &TextEmbedding) -> Result<CamGradients> {
        Err(Error::Capability(
            "precomputed-import provider has no differentiable image path; use the cosine method"
                .into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::palette::CANONICAL_CLASSES;

    fn classes() -> Vec<String> {
        CANONICAL_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    fn toy(seed: u64) -> ToyProvider {
        ToyProvider::new(&ProviderSpec::toy(seed, &classes())).unwrap()
    }

    fn solid_image(h: usize, w: usize, color: [f64; 3]) -> Array3<f64> {
        let mut img = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img[[y, x, c]] = color[c];
                }
            }
        }
        img
    }

    #[test]
    fn text_embedding_is_the_codebook_row_and_unit_norm() {
        let p = toy(0);
        let e = p.encode_text("circle", "a photo of a [class]").unwrap();
        assert_eq!(e.prompt, "a photo of a circle");
        assert_eq!(e.vector.len(), 16);
        assert!((e.vector.dot(&e.vector).sqrt() - 1.0).abs() < 1e-12);
        // deterministic bit-identical
        let e2 = p.encode_text("circle", "a photo of a [class]").unwrap();
        assert_eq!(e.vector, e2.vector);
    }

    #[test]
    fn unknown_class_is_an_error() {
        let p = toy(0);
        let err = p.encode_text("zeppelin", DEFAULT_TEMPLATE).unwrap_err();
        assert!(matches!(err, Error::UnknownClass(_)));
    }

    #[test]
    fn template_must_have_exactly_one_placeholder() {
        let p = toy(0);
        assert!(p.encode_text("circle", "no placeholder").is_err());
        assert!(p.encode_text("circle", "[class] and [class]").is_err());
    }

    #[test]
    fn codebook_cosines_match_independent_reconstruction() {
        // regenerate the seeded codebook with an independent Gram-Schmidt
        let p = toy(0);
        let n = CANONICAL_CLASSES.len();
        let mut rng = SeededGaussian::new(0);
        let mut rows: Vec<Array1<f64>> = (0..n + 1).map(|_| rng.vector(16)).collect();
        orthonormalize(&mut rows);
        let a = p.encode_text("circle", DEFAULT_TEMPLATE).unwrap().vector;
        let b = p.encode_text("square", DEFAULT_TEMPLATE).unwrap().vector;
        let expect = rows[0].dot(&rows[1]);
        assert!((a.dot(&b) - expect).abs() < 1e-12);
        // orthogonalized codebook: cosine is zero
        assert!(a.dot(&b).abs() < 1e-9);
    }

    #[test]
    fn one_pixel_image_matches_single_site_projection() {
        let p = toy(3);
        let img = solid_image(1, 1, [0.9, 0.2, 0.1]);
        let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap();
        assert_eq!(dense.tensor.dim(), (1, 1, 16));
        let conv = p.conv_features(ImageRef::new(&img)).unwrap();
        let f = conv.index_axis(ndarray::Axis(0), 0);
        let f = f.index_axis(ndarray::Axis(0), 0);
        let via_vc = p.c_matrix().dot(&p.v_matrix().dot(&f.to_owned()));
        for k in 0..16 {
            assert!((dense.tensor[[0, 0, k]] - via_vc[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_has_identical_cell_embeddings() {
        let p = toy(1);
        let img = solid_image(16, 16, [0.4, 0.4, 0.4]);
        let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
        let (gh, gw, d) = dense.dim();
        assert_eq!((gh, gw), (4, 4));
        for y in 0..gh {
            for x in 0..gw {
                for k in 0..d {
                    assert_eq!(dense[[y, x, k]], dense[[0, 0, k]]);
                }
            }
        }
    }

    #[test]
    fn two_tone_image_matches_per_pixel_projection_oracle() {
        let p = toy(2);
        let mut img = solid_image(8, 8, [0.2, 0.2, 0.2]);
        for y in 0..8 {
            for x in 4..8 {
                img[[y, x, 0]] = 0.9;
                img[[y, x, 1]] = 0.1;
                img[[y, x, 2]] = 0.1;
            }
        }
        let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
        let conv = p.conv_features(ImageRef::new(&img)).unwrap();
        let (gh, gw, _) = dense.dim();
        // independent loop: apply v then c per cell
        for y in 0..gh {
            for x in 0..gw {
                let f: Array1<f64> =
                    Array1::from_iter((0..32).map(|j| conv[[y, x, j]]));
                let oracle = p.c_matrix().dot(&p.v_matrix().dot(&f));
                for k in 0..16 {
                    assert!((dense[[y, x, k]] - oracle[k]).abs() < 1e-9);
                }
            }
        }
        // left cells equal each other, differ from right cells
        for y in 0..gh {
            for k in 0..16 {
                assert_eq!(dense[[y, 0, k]], dense[[0, 0, k]]);
                assert_eq!(dense[[y, 1, k]], dense[[0, 1, k]]);
            }
        }
        let lr: f64 = (0..16).map(|k| (dense[[0, 0, k]] - dense[[0, 3, k]]).abs()).sum();
        assert!(lr > 0.1, "left and right halves should differ, got {lr}");
    }

    #[test]
    fn global_embedding_is_spatial_mean_and_mirror_invariant() {
        let p = toy(4);
        let mut img = solid_image(8, 8, [0.3, 0.3, 0.3]);
        img[[2, 1, 0]] = 0.9;
        let g = p.encode_image_global(ImageRef::new(&img)).unwrap().vector;
        let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
        let mean = mean_over_grid(&dense);
        for k in 0..16 {
            assert!((g[k] - mean[k]).abs() < 1e-12);
        }
        // horizontal mirror
        let mut mirrored = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    mirrored[[y, x, c]] = img[[y, 7 - x, c]];
                }
            }
        }
        let gm = p.encode_image_global(ImageRef::new(&mirrored)).unwrap().vector;
        for k in 0..16 {
            assert!((g[k] - gm[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_permutation_permutes_dense_outputs() {
        let p = toy(5);
        let mut img = solid_image(8, 8, [0.25, 0.25, 0.25]);
        for y in 0..4 {
            for x in 0..4 {
                img[[y, x, 0]] = 0.95;
            }
        }
        let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
        // swap the two top 4x4 cells of the image
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    swapped[[y, x, c]] = img[[y, x + 4, c]];
                    swapped[[y, x + 4, c]] = img[[y, x, c]];
                }
            }
        }
        let dense2 = p.encode_image_dense(ImageRef::new(&swapped)).unwrap().tensor;
        for k in 0..16 {
            assert_eq!(dense[[0, 0, k]], dense2[[0, 1, k]]);
            assert_eq!(dense[[0, 1, k]], dense2[[0, 0, k]]);
            assert_eq!(dense[[1, 1, k]], dense2[[1, 1, k]]);
        }
    }

    #[test]
    fn within_cell_pixel_permutation_leaves_output_unchanged() {
        let p = toy(6);
        let mut img = solid_image(4, 4, [0.2, 0.2, 0.2]);
        img[[0, 0, 0]] = 0.9;
        img[[1, 3, 1]] = 0.7;
        let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
        // permute pixels inside the single 4x4 cell (stats are symmetric)
        let mut perm = img.clone();
        for c in 0..3 {
            perm[[0, 0, c]] = img[[3, 3, c]];
            perm[[3, 3, c]] = img[[0, 0, c]];
        }
        let dense2 = p.encode_image_dense(ImageRef::new(&perm)).unwrap().tensor;
        for k in 0..16 {
            assert!((dense[[0, 0, k]] - dense2[[0, 0, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_color_cells_embed_close_to_their_class() {
        let p = toy(0);
        for (i, class) in CANONICAL_CLASSES.iter().enumerate() {
            let color = canonical_color(class);
            let img = solid_image(4, 4, color);
            let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
            let e = p.encode_text(class, DEFAULT_TEMPLATE).unwrap().vector;
            let v: Array1<f64> = Array1::from_iter((0..16).map(|k| dense[[0, 0, k]]));
            let cos = v.dot(&e) / v.dot(&v).sqrt();
            assert!(cos >= 0.8, "class {i} ({class}) fg cosine {cos} < 0.8");
        }
    }

    #[test]
    fn background_cells_stay_far_from_every_class() {
        let p = toy(0);
        for gray in [0.08, 0.15, 0.25, 0.35] {
            let img = solid_image(4, 4, [gray, gray * 1.1, gray * 0.9]);
            let dense = p.encode_image_dense(ImageRef::new(&img)).unwrap().tensor;
            let v: Array1<f64> = Array1::from_iter((0..16).map(|k| dense[[0, 0, k]]));
            for class in CANONICAL_CLASSES {
                let e = p.encode_text(class, DEFAULT_TEMPLATE).unwrap().vector;
                let cos = v.dot(&e) / v.dot(&v).sqrt();
                assert!(cos <= 0.2, "bg {gray} vs {class}: cosine {cos} > 0.2");
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let p = toy(0);
        let img = Array3::<f64>::zeros((4, 4, 4));
        let err = p.encode_image_dense(ImageRef::new(&img)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn precomputed_round_trip_and_capability_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("t")).unwrap();
        let dense = crate::autodiff::Tensor::from_shape_vec(
            ndarray::IxDyn(&[2, 2, 4]),
            (0..16).map(|i| i as f64 / 16.0).collect(),
        )
        .unwrap();
        let text = crate::autodiff::Tensor::from_shape_vec(
            ndarray::IxDyn(&[4]),
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        tensorfile::write_tensor(&root.join("t/img0.tensor"), &dense).unwrap();
        tensorfile::write_tensor(&root.join("t/circle.tensor"), &text).unwrap();
        let manifest = PrecomputedManifest {
            d_emb: 4,
            images: [("img0".to_string(), "t/img0.tensor".to_string())].into_iter().collect(),
            texts: [("circle".to_string(), "t/circle.tensor".to_string())].into_iter().collect(),
        };
        std::fs::write(root.join("manifest.json"), serde_json::to_string(&manifest).unwrap())
            .unwrap();

        let p = PrecomputedProvider::load(root).unwrap();
        assert_eq!(p.d_emb(), 4);
        let pixels = Array3::<f64>::zeros((8, 8, 3));
        let dm = p.encode_image_dense(ImageRef::with_id(&pixels, "img0")).unwrap();
        assert_eq!(dm.tensor.dim(), (2, 2, 4));
        let t = p.encode_text("circle", DEFAULT_TEMPLATE).unwrap();
        assert_eq!(t.vector[0] as f32, 1.0);
        // no id -> capability error; cam -> capability error
        assert!(matches!(
            p.encode_image_dense(ImageRef::new(&pixels)).unwrap_err(),
            Error::Capability(_)
        ));
        assert!(matches!(
            p.cam_gradients(ImageRef::with_id(&pixels, "img0"), &t).unwrap_err(),
            Error::Capability(_)
        ));
    }
}
