//! Datasets, file loaders, and stochastic view augmentation.
//!
//! A [`Dataset`] is a dense `n x d` feature matrix with one integer label
//! per row, optionally annotated with an image geometry so spatial
//! augmentations know how to interpret the flat rows (channel-major
//! `(channels, height, width)` layout).
//!
//! Three sources are supported: a synthetic Gaussian mixture whose class
//! centers are random orthonormal directions ([`gen_gaussian_mixture`]), the
//! common binary image format of one label byte followed by 3072
//! channel-major pixel bytes per record ([`load_cifar10_bin`]), and CSV with
//! the label in a chosen column ([`load_csv_dataset`]). Soft label
//! distributions load separately ([`load_soft_labels`]) and are renormalized
//! after a 1e-3 sum sanity check.
//!
//! Augmentation is a pipeline of simple stochastic ops applied row-wise.
//! Each call documents its draw order (per sample: view 1's ops, then view
//! 2's), so a fixed generator state fixes both views exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Channel-major image geometry of a flattened feature row.
pub type ImageShape = (usize, usize, usize);

/// Dense labeled dataset; `image_shape` marks rows that are flattened
/// channel-major images. `name` tags the data source for reports and logs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub image_shape: Option<ImageShape>,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        image_shape: Option<ImageShape>,
    ) -> Result<Dataset> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                detail: format!(
                    "features {:?} with {} labels",
                    features.shape(),
                    labels.len()
                ),
            });
        }
        if n_classes == 0 || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::InvalidArg {
                what: format!("labels must lie in 0..{n_classes}"),
            });
        }
        if let Some((c, h, w)) = image_shape {
            if c * h * w != features.cols() {
                return Err(Error::ShapeMismatch {
                    op: "Dataset::new",
                    detail: format!(
                        "image shape {c}x{h}x{w} does not flatten to {} columns",
                        features.cols()
                    ),
                });
            }
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            image_shape,
            name: String::new(),
        })
    }

    /// Same dataset with a source tag attached.
    pub fn named(mut self, name: &str) -> Dataset {
        self.name = name.to_string();
        self
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// New dataset holding the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::InvalidArg {
                    what: format!("subset row {i} out of range 0..{}", self.rows()),
                });
            }
            data.extend_from_slice(self.features.row_slice(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::new(&[indices.len(), d], data),
            labels,
            self.n_classes,
            self.image_shape,
        )
        .map(|s| s.named(&self.name))
    }

    /// Splits into the first `n_first` rows and the rest.
    pub fn split_at(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.rows() {
            return Err(Error::InvalidArg {
                what: format!(
                    "split point {n_first} must lie strictly inside 0..{}",
                    self.rows()
                ),
            });
        }
        let head: Vec<usize> = (0..n_first).collect();
        let tail: Vec<usize> = (n_first..self.rows()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }
}

// ── Synthetic mixture ───────────────────────────────────────────────────

/// Parameters of the synthetic class mixture.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub n_per_class: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Distance of each class center from the origin.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub noise_std: f64,
}

/// Samples a labeled Gaussian mixture whose class centers are `separation`
/// times mutually orthonormal random directions (requires
/// `n_classes <= input_dim`). Rows are grouped by class: rows
/// `[c * n_per_class, (c + 1) * n_per_class)` carry label `c`.
pub fn gen_gaussian_mixture(spec: &MixtureSpec, prng: &mut Prng) -> Result<Dataset> {
    if spec.n_per_class == 0 || spec.input_dim == 0 || spec.n_classes == 0 {
        return Err(Error::InvalidArg {
            what: "mixture sizes must be positive".to_string(),
        });
    }
    if spec.n_classes > spec.input_dim {
        return Err(Error::InvalidArg {
            what: format!(
                "cannot fit {} orthonormal class directions in dimension {}",
                spec.n_classes, spec.input_dim
            ),
        });
    }
    if !(spec.separation.is_finite() && spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return Err(Error::InvalidArg {
            what: "separation and noise_std must be finite (noise_std >= 0)".to_string(),
        });
    }
    let d = spec.input_dim;
    // Gram-Schmidt on fresh Gaussian directions. A draw that collapses
    // (numerically dependent) is retried; independence failures are measure
    // zero, so a handful of retries is ample.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while dirs.len() < spec.n_classes {
        attempts += 1;
        if attempts > 16 * spec.n_classes {
            return Err(Error::InvalidArg {
                what: "failed to draw independent class directions".to_string(),
            });
        }
        let mut v: Vec<f64> = (0..d).map(|_| prng.normal()).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            for (x, &y) in v.iter_mut().zip(u.iter()) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        dirs.push(v);
    }

    let n = spec.n_per_class * spec.n_classes;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for j in 0..d {
                data.push(spec.separation * dir[j] + spec.noise_std * prng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(&[n, d], data), labels, spec.n_classes, None)
        .map(|s| s.named("mixture"))
}

// ── Binary image loader ─────────────────────────────────────────────────

const IMAGE_RECORD_BYTES: usize = 3073;
const IMAGE_PIXELS: usize = 3072;

/// Loads the standard binary image batch format: consecutive 3073-byte
/// records, each one label byte (0-9) followed by 3072 channel-major pixel
/// bytes (3 x 32 x 32). Pixels are scaled to `[0, 1]`. Errors cite the
/// offending byte offset.
pub fn load_cifar10_bin(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % IMAGE_RECORD_BYTES != 0 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: format!(
                "file length {} is not a positive multiple of {IMAGE_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / IMAGE_RECORD_BYTES;
    let mut data = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let offset = r * IMAGE_RECORD_BYTES;
        let label = bytes[offset];
        if label > 9 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: r + 1,
                detail: format!("label byte {label} at offset {offset} exceeds 9"),
            });
        }
        labels.push(label as usize);
        for &b in &bytes[offset + 1..offset + IMAGE_RECORD_BYTES] {
            data.push(b as f64 / 255.0);
        }
    }
    Dataset::new(
        Tensor::new(&[n, IMAGE_PIXELS], data),
        labels,
        10,
        Some((3, 32, 32)),
    )
    .map(|s| s.named(&file_stem(path)))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

// ── CSV loaders ─────────────────────────────────────────────────────────

fn parse_field(path: &Path, line: usize, field: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        detail: format!("expected a number, got {field:?}"),
    })
}

/// Loads a CSV dataset: column `label_column` holds an integer class label
/// and every other column is a feature, kept in file order. A non-numeric
/// first row is treated as a header and skipped. Error messages cite
/// 1-based line numbers.
pub fn load_csv_dataset(path: &Path, label_column: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            detail: e.to_string(),
        })?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        // Header detection: a first row whose label field is not numeric.
        if idx == 0
            && record
                .get(label_column.min(record.len().saturating_sub(1)))
                .map(|f| f.trim().parse::<f64>().is_err())
                == Some(true)
        {
            continue;
        }
        if record.len() < 2 || label_column >= record.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                detail: format!(
                    "need a label in column {label_column} and at least one feature, got {} fields",
                    record.len()
                ),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    detail: format!("expected {w} fields, got {}", record.len()),
                });
            }
            _ => {}
        }
        let label_raw = parse_field(path, line, record.get(label_column).unwrap())?;
        if label_raw < 0.0 || label_raw.fract() != 0.0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                detail: format!("label must be a nonnegative integer, got {label_raw}"),
            });
        }
        let mut feats = Vec::with_capacity(record.len() - 1);
        for (col, f) in record.iter().enumerate() {
            if col != label_column {
                feats.push(parse_field(path, line, f)?);
            }
        }
        rows.push((label_raw as usize, feats));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: "no data rows".to_string(),
        });
    }
    let d = rows[0].1.len();
    let n_classes = rows.iter().map(|(l, _)| l + 1).max().unwrap();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (l, f) in rows {
        labels.push(l);
        data.extend(f);
    }
    Dataset::new(
        Tensor::new(&[labels.len(), d], data),
        labels,
        n_classes,
        None,
    )
    .map(|s| s.named(&file_stem(path)))
}

/// Loads per-sample soft label distributions: each CSV row holds one
/// probability per class. Rows must be nonnegative and sum to 1 within
/// 1e-3; they are renormalized to sum to 1 exactly (up to rounding). A
/// non-numeric first row is treated as a header.
pub fn load_soft_labels(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            detail: e.to_string(),
        })?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if idx == 0 && record.get(0).map(|f| f.trim().parse::<f64>().is_err()) == Some(true) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    detail: format!("expected {w} fields, got {}", record.len()),
                });
            }
            _ => {}
        }
        let mut probs = Vec::with_capacity(record.len());
        for f in record.iter() {
            let p = parse_field(path, line, f)?;
            if p < 0.0 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    detail: format!("negative probability {p}"),
                });
            }
            probs.push(p);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                detail: format!("probabilities sum to {sum}, outside 1 +/- 1e-3"),
            });
        }
        for p in &mut probs {
            *p /= sum;
        }
        rows.push(probs);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: "no data rows".to_string(),
        });
    }
    Ok(rows)
}

// ── Augmentation ────────────────────────────────────────────────────────

/// One stochastic augmentation op. Vector ops apply to any row; image ops
/// require the dataset to carry an image shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    /// Adds `N(0, std^2)` noise per coordinate.
    VectorNoise { std: f64 },
    /// Zeroes each coordinate independently with probability `rate`.
    VectorDropout { rate: f64 },
    /// Applies `count` random Givens rotations, each on a fresh random
    /// coordinate pair with angle uniform in `[-max_angle, max_angle]`.
    VectorRotation { max_angle: f64, count: usize },
    /// Flips the image horizontally with probability 1/2.
    ImageFlip,
    /// Zero-pads by `padding` on every side, then crops a random window of
    /// the original size.
    ImageCrop { padding: usize },
    /// Adds `N(0, std^2)` noise per pixel.
    ImageNoise { std: f64 },
}

/// An ordered augmentation pipeline.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
}

impl AugmentPolicy {
    pub fn validate(&self, image_shape: Option<ImageShape>) -> Result<()> {
        for op in &self.ops {
            match op {
                AugmentOp::VectorNoise { std } | AugmentOp::ImageNoise { std } => {
                    if !(std.is_finite() && *std >= 0.0) {
                        return Err(Error::InvalidArg {
                            what: format!("noise std must be finite and nonnegative, got {std}"),
                        });
                    }
                }
                AugmentOp::VectorDropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::InvalidArg {
                            what: format!("dropout rate must lie in [0, 1), got {rate}"),
                        });
                    }
                }
                AugmentOp::VectorRotation { max_angle, count } => {
                    if !max_angle.is_finite() || *count == 0 {
                        return Err(Error::InvalidArg {
                            what: "rotation needs a finite angle and count >= 1".to_string(),
                        });
                    }
                }
                AugmentOp::ImageFlip | AugmentOp::ImageCrop { .. } => {}
            }
            let needs_image = matches!(
                op,
                AugmentOp::ImageFlip | AugmentOp::ImageCrop { .. } | AugmentOp::ImageNoise { .. }
            );
            if needs_image && image_shape.is_none() {
                return Err(Error::InvalidArg {
                    what: format!("{op:?} requires an image dataset"),
                });
            }
        }
        Ok(())
    }
}

/// Horizontal flip of a channel-major flattened image.
pub(crate) fn flip_horizontal(row: &[f64], (c, h, w): ImageShape) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = row[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Zero-pad then crop at offset `(oy, ox)` measured in the padded frame.
pub(crate) fn crop(row: &[f64], (c, h, w): ImageShape, padding: usize, oy: usize, ox: usize) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // Source pixel in the padded frame, mapped back to the
                // original; out-of-range stays zero.
                let sy = (y + oy) as isize - padding as isize;
                let sx = (x + ox) as isize - padding as isize;
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    out[ch * h * w + y * w + x] = row[ch * h * w + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

fn augment_row(
    row: &[f64],
    image_shape: Option<ImageShape>,
    policy: &AugmentPolicy,
    prng: &mut Prng,
) -> Vec<f64> {
    let mut v = row.to_vec();
    for op in &policy.ops {
        match op {
            AugmentOp::VectorNoise { std } | AugmentOp::ImageNoise { std } => {
                for x in &mut v {
                    *x += std * prng.normal();
                }
            }
            AugmentOp::VectorDropout { rate } => {
                for x in &mut v {
                    if prng.uniform() < *rate {
                        *x = 0.0;
                    }
                }
            }
            AugmentOp::VectorRotation { max_angle, count } => {
                for _ in 0..*count {
                    let i = prng.index(v.len());
                    let mut j = prng.index(v.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    let angle = (2.0 * prng.uniform() - 1.0) * max_angle;
                    let (s, c) = angle.sin_cos();
                    let (a, b) = (v[i], v[j]);
                    v[i] = c * a - s * b;
                    v[j] = s * a + c * b;
                }
            }
            AugmentOp::ImageFlip => {
                if prng.uniform() < 0.5 {
                    v = flip_horizontal(&v, image_shape.unwrap());
                }
            }
            AugmentOp::ImageCrop { padding } => {
                let span = 2 * padding + 1;
                let oy = prng.index(span);
                let ox = prng.index(span);
                v = crop(&v, image_shape.unwrap(), *padding, oy, ox);
            }
        }
    }
    v
}

/// Produces the two stochastic views of the selected rows. Per sample, view
/// 1's ops consume randomness first, then view 2's; samples are processed
/// in the order given.
pub fn make_views(
    data: &Dataset,
    indices: &[usize],
    policy: &AugmentPolicy,
    prng: &mut Prng,
) -> Result<(Tensor, Tensor)> {
    policy.validate(data.image_shape)?;
    if indices.is_empty() {
        return Err(Error::InvalidArg {
            what: "make_views needs at least one row".to_string(),
        });
    }
    let d = data.dim();
    let mut v1 = Vec::with_capacity(indices.len() * d);
    let mut v2 = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= data.rows() {
            return Err(Error::InvalidArg {
                what: format!("view row {i} out of range 0..{}", data.rows()),
            });
        }
        let row = data.features.row_slice(i);
        v1.extend(augment_row(row, data.image_shape, policy, prng));
        v2.extend(augment_row(row, data.image_shape, policy, prng));
    }
    Ok((
        Tensor::new(&[indices.len(), d], v1),
        Tensor::new(&[indices.len(), d], v2),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vcl-data-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    // ── mixture ─────────────────────────────────────────────────────

    #[test]
    fn mixture_layout_and_determinism() {
        let spec = MixtureSpec {
            n_per_class: 10,
            input_dim: 6,
            n_classes: 3,
            separation: 4.0,
            noise_std: 0.5,
        };
        let a = gen_gaussian_mixture(&spec, &mut Prng::new(1)).unwrap();
        let b = gen_gaussian_mixture(&spec, &mut Prng::new(1)).unwrap();
        assert_eq!(a.rows(), 30);
        assert_eq!(a.dim(), 6);
        assert_eq!(a.features.data(), b.features.data());
        for c in 0..3 {
            for r in 0..10 {
                assert_eq!(a.labels[c * 10 + r], c);
            }
        }
    }

    #[test]
    fn mixture_class_directions_are_orthonormal() {
        let spec = MixtureSpec {
            n_per_class: 4000,
            input_dim: 8,
            n_classes: 3,
            separation: 10.0,
            noise_std: 0.2,
        };
        let data = gen_gaussian_mixture(&spec, &mut Prng::new(2)).unwrap();
        // Empirical class means estimate separation * dir_c.
        let mut means = vec![vec![0.0; 8]; 3];
        for i in 0..data.rows() {
            let c = data.labels[i];
            for (j, &v) in data.features.row_slice(i).iter().enumerate() {
                means[c][j] += v / 4000.0;
            }
        }
        for c in 0..3 {
            let norm = l2_norm(&means[c]);
            assert!((norm - 10.0).abs() < 0.05, "center norm {norm}");
            for c2 in 0..c {
                let dot: f64 = means[c].iter().zip(&means[c2]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() / (10.0 * 10.0) < 0.01, "centers {c},{c2} not orthogonal");
            }
        }
    }

    #[test]
    fn mixture_rejects_more_classes_than_dimensions() {
        let spec = MixtureSpec {
            n_per_class: 1,
            input_dim: 2,
            n_classes: 3,
            separation: 1.0,
            noise_std: 0.1,
        };
        assert!(gen_gaussian_mixture(&spec, &mut Prng::new(3)).is_err());
    }

    // ── binary image loader ─────────────────────────────────────────

    fn fake_record(label: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(fill).take(IMAGE_PIXELS));
        rec
    }

    #[test]
    fn binary_image_batch_round_trip() {
        let path = temp_path("ok.bin");
        let mut bytes = fake_record(3, 255);
        bytes.extend(fake_record(9, 0));
        fs::write(&path, &bytes).unwrap();
        let data = load_cifar10_bin(&path).unwrap();
        assert_eq!(data.rows(), 2);
        assert_eq!(data.labels, vec![3, 9]);
        assert_eq!(data.image_shape, Some((3, 32, 32)));
        assert_eq!(data.features.at(0, 0), 1.0);
        assert_eq!(data.features.at(1, 100), 0.0);
    }

    #[test]
    fn binary_image_batch_rejects_bad_files() {
        let path = temp_path("bad.bin");
        // Truncated record.
        fs::write(&path, vec![0u8; IMAGE_RECORD_BYTES - 1]).unwrap();
        let err = load_cifar10_bin(&path).unwrap_err();
        assert!(err.to_string().contains("3073"), "{err}");
        // Label out of range, second record: the error names its offset.
        let mut bytes = fake_record(1, 7);
        bytes.extend(fake_record(10, 7));
        fs::write(&path, &bytes).unwrap();
        let err = load_cifar10_bin(&path).unwrap_err();
        assert!(err.to_string().contains("3073"), "offset missing: {err}");
    }

    // ── csv loaders ─────────────────────────────────────────────────

    #[test]
    fn csv_dataset_with_and_without_header() {
        let with = temp_path("with_header.csv");
        fs::write(&with, "label,f0,f1\n0,1.5,-2.0\n2,0.25,3.0\n").unwrap();
        let no = temp_path("no_header.csv");
        fs::write(&no, "0,1.5,-2.0\n2,0.25,3.0\n").unwrap();
        let a = load_csv_dataset(&with, 0).unwrap();
        let b = load_csv_dataset(&no, 0).unwrap();
        assert_eq!(a.labels, vec![0, 2]);
        assert_eq!(a.n_classes, 3);
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.features.at(1, 0), 0.25);
        assert_eq!(a.name, "with_header");
    }

    #[test]
    fn csv_label_column_can_sit_anywhere() {
        let path = temp_path("tail_label.csv");
        fs::write(&path, "f0,f1,label\n1.5,-2.0,0\n0.25,3.0,2\n").unwrap();
        let data = load_csv_dataset(&path, 2).unwrap();
        assert_eq!(data.labels, vec![0, 2]);
        assert_eq!(data.features.at(0, 0), 1.5);
        assert_eq!(data.features.at(1, 1), 3.0);
        // A column beyond the row width is an error.
        assert!(load_csv_dataset(&path, 3).is_err());
    }

    #[test]
    fn csv_errors_cite_the_line() {
        let path = temp_path("badfield.csv");
        fs::write(&path, "0,1.0,2.0\n1,oops,3.0\n").unwrap();
        match load_csv_dataset(&path, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let path = temp_path("ragged.csv");
        fs::write(&path, "0,1.0,2.0\n1,3.0\n").unwrap();
        match load_csv_dataset(&path, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let path = temp_path("fractional_label.csv");
        fs::write(&path, "0.5,1.0\n").unwrap();
        assert!(load_csv_dataset(&path, 0).is_err());
    }

    #[test]
    fn soft_labels_renormalize_within_tolerance() {
        let path = temp_path("soft.csv");
        fs::write(&path, "0.7005,0.2995\n0.2,0.8\n").unwrap();
        let rows = load_soft_labels(&path).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            let sum: f64 = r.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        // Off by more than 1e-3 is rejected.
        fs::write(&path, "0.7,0.2\n").unwrap();
        assert!(load_soft_labels(&path).is_err());
        // Negative entries are rejected.
        fs::write(&path, "1.2,-0.2\n").unwrap();
        assert!(load_soft_labels(&path).is_err());
    }

    // ── augmentation ────────────────────────────────────────────────

    fn vector_dataset() -> Dataset {
        let mut prng = Prng::new(20);
        Dataset::new(
            prng.gaussian_tensor(&[6, 10]),
            vec![0, 0, 1, 1, 2, 2],
            3,
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_is_identity_and_views_are_seeded() {
        let data = vector_dataset();
        let policy = AugmentPolicy {
            ops: vec![AugmentOp::VectorNoise { std: 0.0 }],
        };
        let idx = [0, 3, 5];
        let (v1, v2) = make_views(&data, &idx, &policy, &mut Prng::new(4)).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(v1.row_slice(r), data.features.row_slice(i));
            assert_eq!(v2.row_slice(r), data.features.row_slice(i));
        }
        let noisy = AugmentPolicy {
            ops: vec![AugmentOp::VectorNoise { std: 0.3 }],
        };
        let (a1, a2) = make_views(&data, &idx, &noisy, &mut Prng::new(5)).unwrap();
        let (b1, b2) = make_views(&data, &idx, &noisy, &mut Prng::new(5)).unwrap();
        assert_eq!(a1.data(), b1.data());
        assert_eq!(a2.data(), b2.data());
        assert_ne!(a1.data(), a2.data());
    }

    #[test]
    fn rotation_preserves_norms() {
        let data = vector_dataset();
        let policy = AugmentPolicy {
            ops: vec![AugmentOp::VectorRotation {
                max_angle: 0.7,
                count: 5,
            }],
        };
        let idx: Vec<usize> = (0..6).collect();
        let (v1, _) = make_views(&data, &idx, &policy, &mut Prng::new(6)).unwrap();
        for i in 0..6 {
            let before = l2_norm(data.features.row_slice(i));
            let after = l2_norm(v1.row_slice(i));
            assert!((before - after).abs() <= 1e-10);
        }
    }

    #[test]
    fn dropout_zeroes_roughly_rate_fraction() {
        let mut prng = Prng::new(7);
        let data = Dataset::new(
            Tensor::full(&[4, 500], 1.0),
            vec![0, 0, 0, 0],
            1,
            None,
        )
        .unwrap();
        let policy = AugmentPolicy {
            ops: vec![AugmentOp::VectorDropout { rate: 0.3 }],
        };
        let (v1, v2) = make_views(&data, &[0, 1, 2, 3], &policy, &mut prng).unwrap();
        let zeros = v1
            .data()
            .iter()
            .chain(v2.data().iter())
            .filter(|&&v| v == 0.0)
            .count();
        let frac = zeros as f64 / 4000.0;
        assert!((frac - 0.3).abs() < 0.04, "dropout fraction {frac}");
    }

    #[test]
    fn flip_and_crop_move_pixels_exactly() {
        let shape = (2usize, 2usize, 3usize);
        // Channel-major 2x2x3: row y=0 is [0,1,2], y=1 is [3,4,5]; second
        // channel offset by 10.
        let row: Vec<f64> = vec![0., 1., 2., 3., 4., 5., 10., 11., 12., 13., 14., 15.];
        let flipped = flip_horizontal(&row, shape);
        assert_eq!(flipped, vec![2., 1., 0., 5., 4., 3., 12., 11., 10., 15., 14., 13.]);
        // Centered crop offset equals identity.
        let same = crop(&row, shape, 1, 1, 1);
        assert_eq!(same, row);
        // Shifting one right in the padded frame drags zeros in on the left.
        let shifted = crop(&row, shape, 1, 1, 0);
        assert_eq!(shifted, vec![0., 0., 1., 0., 3., 4., 0., 10., 11., 0., 13., 14.]);
    }

    #[test]
    fn image_ops_require_image_shape() {
        let data = vector_dataset();
        let policy = AugmentPolicy {
            ops: vec![AugmentOp::ImageFlip],
        };
        assert!(make_views(&data, &[0], &policy, &mut Prng::new(8)).is_err());
    }

    #[test]
    fn dataset_split_and_subset() {
        let data = vector_dataset();
        let (head, tail) = data.split_at(2).unwrap();
        assert_eq!(head.rows(), 2);
        assert_eq!(tail.rows(), 4);
        assert_eq!(tail.labels, vec![1, 1, 2, 2]);
        assert!(data.split_at(0).is_err());
        assert!(data.split_at(6).is_err());
        assert!(data.subset(&[9]).is_err());
    }
}
