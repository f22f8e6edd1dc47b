//! Gaussian-posterior MLP encoder with optional per-layer spectral norm
//! control.
//!
//! The encoder maps an input row `x` to the parameters of a diagonal
//! Gaussian `N(mu(x), diag(exp(eps(x))))` whose sphere projection is the
//! embedding posterior (see [`crate::posterior`]). Architecturally it is a
//! plain MLP — hidden layers with a pointwise activation, then one linear
//! layer of width `2 * latent_dim` whose left half is `mu` and right half is
//! the log-variance `eps`, clamped to `[-30, 30]`.
//!
//! When `spectral_bounds` is set, the encoder is constructed bias-free and
//! its biases are excluded from training, so every layer fixes the origin.
//! Both supported activations are 1-Lipschitz with `act(0) = 0`, so after
//! [`MlpEncoder::spectral_project`] caps each weight matrix's top singular
//! value at its bound `b_l`, the network satisfies the composition bound
//!
//! ```text
//! ||mu(x)|| <= ||x|| * prod_l b_l
//! ```
//!
//! (the `mu` block of the final matrix is a submatrix, so its spectral norm
//! is bounded by the full matrix's). Spectral norms are estimated by power
//! iteration on `W^T W`; when the iteration fails to settle, the layer is
//! rescaled by its Frobenius norm instead — a safe over-estimate — and the
//! report marks the fallback.
//!
//! Checkpoints are a fixed binary layout (magic `VCLENC01`) storing every
//! weight as its IEEE-754 bit pattern, so a save/load round trip is exact.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::posterior::{PosteriorParams, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::prng::Prng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VCLENC01";

/// Pointwise hidden-layer activation. Both choices are 1-Lipschitz and fix
/// the origin, which the spectral composition bound relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Activation> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::Checkpoint {
                detail: format!("unknown activation tag {other}"),
            }),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Activation> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArg {
                what: format!("unknown activation {other:?} (expected tanh or relu)"),
            }),
        }
    }
}

/// Encoder architecture. `spectral_bounds`, when present, holds one positive
/// bound per weight matrix (hidden layers first, final layer last) and
/// switches the encoder to bias-free operation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub spectral_bounds: Option<Vec<f64>>,
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArg {
                what: "encoder layer widths must be positive".to_string(),
            });
        }
        if let Some(bounds) = &self.spectral_bounds {
            if bounds.len() != self.hidden_dims.len() + 1 {
                return Err(Error::InvalidArg {
                    what: format!(
                        "{} spectral bounds for {} weight matrices",
                        bounds.len(),
                        self.hidden_dims.len() + 1
                    ),
                });
            }
            if bounds.iter().any(|&b| !(b.is_finite() && b > 0.0)) {
                return Err(Error::InvalidArg {
                    what: "spectral bounds must be positive and finite".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Widths of the successive weight matrices as `(fan_in, fan_out)`.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, 2 * self.latent_dim));
        dims
    }
}

/// Graph handle for one encoder forward pass: the parameter leaves (for
/// gradient lookup and updates) and the posterior-parameter output nodes.
pub struct EncoderGraph {
    pub weight_ids: Vec<VarId>,
    pub bias_ids: Vec<VarId>,
    pub mu: VarId,
    pub log_var: VarId,
}

/// MLP encoder over row-vector inputs; weight matrices are stored
/// `(fan_in, fan_out)` so a forward pass is `x @ W + b`.
#[derive(Debug, Clone)]
pub struct MlpEncoder {
    config: EncoderConfig,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Outcome of capping one layer's spectral norm.
#[derive(Debug, Clone)]
pub struct ProjectionReport {
    pub layer: usize,
    /// Norm estimate the decision was based on (spectral, or Frobenius when
    /// `fallback` is set).
    pub estimated_norm: f64,
    /// Multiplier applied to the layer (1.0 when already within bound).
    pub scaled_by: f64,
    /// True when power iteration did not settle and the Frobenius norm — an
    /// upper bound on the spectral norm — was used instead.
    pub fallback: bool,
}

impl MlpEncoder {
    /// Fresh encoder with `N(0, 2 / fan_in)` weights and zero biases.
    pub fn new(config: EncoderConfig, prng: &mut Prng) -> Result<MlpEncoder> {
        config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let scale = (2.0 / fan_in as f64).sqrt();
            weights.push(prng.gaussian_tensor(&[fan_in, fan_out]).map(|v| v * scale));
            biases.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(MlpEncoder {
            config,
            weights,
            biases,
        })
    }

    /// Rebuilds an encoder from explicit parts (checkpoint loading, tests).
    pub fn from_parts(
        config: EncoderConfig,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<MlpEncoder> {
        config.validate()?;
        let dims = config.layer_dims();
        if weights.len() != dims.len() || biases.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                op: "MlpEncoder::from_parts",
                detail: format!(
                    "expected {} layers, got {} weights / {} biases",
                    dims.len(),
                    weights.len(),
                    biases.len()
                ),
            });
        }
        for (l, ((fan_in, fan_out), (w, b))) in
            dims.iter().zip(weights.iter().zip(biases.iter())).enumerate()
        {
            if w.shape() != [*fan_in, *fan_out] || b.shape() != [1, *fan_out] {
                return Err(Error::ShapeMismatch {
                    op: "MlpEncoder::from_parts",
                    detail: format!(
                        "layer {l}: weight {:?} / bias {:?}, expected ({fan_in}, {fan_out})",
                        w.shape(),
                        b.shape()
                    ),
                });
            }
            if config.spectral_bounds.is_some() && b.data().iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidArg {
                    what: format!("layer {l}: nonzero bias on a spectrally bounded encoder"),
                });
            }
        }
        Ok(MlpEncoder {
            config,
            weights,
            biases,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    /// Whether biases participate in training (false under spectral bounds,
    /// which require every layer to fix the origin).
    pub fn train_biases(&self) -> bool {
        self.config.spectral_bounds.is_none()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Builds one forward pass on `g`, registering the current parameters as
    /// fresh leaves.
    pub fn encode_graph(&self, g: &mut Graph, x: VarId) -> Result<EncoderGraph> {
        let weight_ids: Vec<VarId> = self.weights.iter().map(|w| g.param(w.clone())).collect();
        let bias_ids: Vec<VarId> = self.biases.iter().map(|b| g.param(b.clone())).collect();
        let (mu, log_var) = mlp_graph(
            g,
            x,
            &weight_ids,
            &bias_ids,
            self.config.activation,
            self.config.latent_dim,
        )?;
        Ok(EncoderGraph {
            weight_ids,
            bias_ids,
            mu,
            log_var,
        })
    }

    /// Encodes a batch of input rows into per-row posterior parameters. The
    /// arithmetic is the graph forward pass, so this agrees bit-for-bit with
    /// [`MlpEncoder::encode_graph`].
    pub fn encode(&self, x: &Tensor) -> Result<Vec<PosteriorParams>> {
        if !x.is_matrix() || x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "MlpEncoder::encode",
                detail: format!(
                    "input shape {:?}, encoder expects (n, {})",
                    x.shape(),
                    self.config.input_dim
                ),
            });
        }
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let eg = self.encode_graph(&mut g, xid)?;
        let mu = g.value(eg.mu);
        let lv = g.value(eg.log_var);
        (0..x.rows())
            .map(|i| PosteriorParams::new(mu.row_slice(i).to_vec(), lv.row_slice(i).to_vec()))
            .collect()
    }

    /// Caps each layer's top singular value at its configured bound,
    /// rescaling the weights in place. No-op (empty report) when the encoder
    /// has no spectral bounds.
    pub fn spectral_project(&mut self) -> Vec<ProjectionReport> {
        let Some(bounds) = self.config.spectral_bounds.clone() else {
            return Vec::new();
        };
        let mut reports = Vec::with_capacity(self.weights.len());
        for (l, (w, &bound)) in self.weights.iter_mut().zip(bounds.iter()).enumerate() {
            let (norm, fallback) = match spectral_norm(w, 30, 1e-8) {
                Some(s) => (s, false),
                None => (frobenius_norm(w), true),
            };
            let scaled_by = if norm > bound { bound / norm } else { 1.0 };
            if scaled_by != 1.0 {
                for v in w.data_mut() {
                    *v *= scaled_by;
                }
            }
            reports.push(ProjectionReport {
                layer: l,
                estimated_norm: norm,
                scaled_by,
                fallback,
            });
        }
        reports
    }

    /// Row-normalized posterior means of a batch: the deterministic point
    /// embedding used by probes and diagnostics. Errors if any mean is
    /// degenerate (norm below 1e-12).
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let posts = self.encode(x)?;
        let d = self.config.latent_dim;
        let mut data = Vec::with_capacity(posts.len() * d);
        for p in &posts {
            data.extend(crate::tensor::l2_normalize(p.mu())?);
        }
        Ok(Tensor::new(&[posts.len(), d], data))
    }

    /// Serializes to the fixed binary layout; f64 values are stored as
    /// little-endian IEEE-754 bit patterns, so decoding restores them
    /// exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u64(&mut buf, self.config.input_dim as u64);
        push_u64(&mut buf, self.config.latent_dim as u64);
        push_u64(&mut buf, self.config.hidden_dims.len() as u64);
        for &h in &self.config.hidden_dims {
            push_u64(&mut buf, h as u64);
        }
        buf.push(self.config.activation.tag());
        match &self.config.spectral_bounds {
            None => buf.push(0),
            Some(bounds) => {
                buf.push(1);
                for &b in bounds {
                    push_f64(&mut buf, b);
                }
            }
        }
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            for &v in w.data() {
                push_f64(&mut buf, v);
            }
            for &v in b.data() {
                push_f64(&mut buf, v);
            }
        }
        buf
    }

    /// Writes [`MlpEncoder::to_bytes`] to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Decodes an encoder from [`MlpEncoder::to_bytes`] output, verifying
    /// magic, layout, and exact length.
    pub fn from_bytes(bytes: &[u8]) -> Result<MlpEncoder> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                detail: format!("bad magic {magic:?}"),
            });
        }
        let input_dim = r.u64()? as usize;
        let latent_dim = r.u64()? as usize;
        let n_hidden = r.u64()? as usize;
        if n_hidden > 1024 {
            return Err(Error::Checkpoint {
                detail: format!("implausible hidden layer count {n_hidden}"),
            });
        }
        let mut hidden_dims = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden_dims.push(r.u64()? as usize);
        }
        let activation = Activation::from_tag(r.u8()?)?;
        let spectral_bounds = match r.u8()? {
            0 => None,
            1 => {
                let mut bounds = Vec::with_capacity(n_hidden + 1);
                for _ in 0..n_hidden + 1 {
                    bounds.push(r.f64()?);
                }
                Some(bounds)
            }
            other => {
                return Err(Error::Checkpoint {
                    detail: format!("bad spectral-bounds flag {other}"),
                })
            }
        };
        let config = EncoderConfig {
            input_dim,
            hidden_dims,
            latent_dim,
            activation,
            spectral_bounds,
        };
        config.validate().map_err(|e| Error::Checkpoint {
            detail: format!("invalid stored config: {e}"),
        })?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                w.push(r.f64()?);
            }
            weights.push(Tensor::new(&[fan_in, fan_out], w));
            let mut b = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                b.push(r.f64()?);
            }
            biases.push(Tensor::new(&[1, fan_out], b));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        MlpEncoder::from_parts(config, weights, biases).map_err(|e| Error::Checkpoint {
            detail: format!("inconsistent checkpoint: {e}"),
        })
    }

    /// Loads an encoder file written by [`MlpEncoder::save`].
    pub fn load(path: &Path) -> Result<MlpEncoder> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        MlpEncoder::from_bytes(&bytes)
    }
}

/// Builds the encoder network over existing parameter leaves: hidden layers
/// `act(h @ W + b)`, a linear final layer, and a column split into
/// `(mu, clamp(log_var))`. Exposed separately so gradient checks can drive
/// the same construction from their own leaves.
pub fn mlp_graph(
    g: &mut Graph,
    x: VarId,
    weight_ids: &[VarId],
    bias_ids: &[VarId],
    activation: Activation,
    latent_dim: usize,
) -> Result<(VarId, VarId)> {
    if weight_ids.is_empty() || weight_ids.len() != bias_ids.len() {
        return Err(Error::InvalidArg {
            what: "mlp_graph needs matching, nonempty weight and bias lists".to_string(),
        });
    }
    let mut h = x;
    let last = weight_ids.len() - 1;
    for l in 0..last {
        let lin = g.matmul(h, weight_ids[l])?;
        let shifted = g.add_row(lin, bias_ids[l])?;
        h = match activation {
            Activation::Tanh => g.tanh(shifted)?,
            Activation::Relu => g.relu(shifted)?,
        };
    }
    let lin = g.matmul(h, weight_ids[last])?;
    let out = g.add_row(lin, bias_ids[last])?;
    let width = g.value(out).cols();
    if width != 2 * latent_dim {
        return Err(Error::ShapeMismatch {
            op: "mlp_graph",
            detail: format!("final width {width}, expected {}", 2 * latent_dim),
        });
    }
    let mu = g.slice_cols(out, 0, latent_dim)?;
    let lv_raw = g.slice_cols(out, latent_dim, 2 * latent_dim)?;
    let log_var = g.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok((mu, log_var))
}

/// Top singular value of `w` by power iteration on `W^T W`, or `None` when
/// the estimate does not settle to `tol` within `max_iters` sweeps.
fn spectral_norm(w: &Tensor, max_iters: usize, tol: f64) -> Option<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut prev = f64::INFINITY;
    for _ in 0..max_iters {
        // u = W v, then v' = W^T u.
        let mut u = vec![0.0; rows];
        for i in 0..rows {
            let row = w.row_slice(i);
            let mut acc = 0.0;
            for j in 0..cols {
                acc += row[j] * v[j];
            }
            u[i] = acc;
        }
        let mut next = vec![0.0; cols];
        for i in 0..rows {
            let row = w.row_slice(i);
            for j in 0..cols {
                next[j] += row[j] * u[i];
            }
        }
        let norm = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // W^T W v vanished: the matrix is zero on the current subspace.
            return Some(0.0);
        }
        for x in &mut next {
            *x /= norm;
        }
        v = next;
        // Rayleigh quotient of W^T W at unit v is ||W v||^2.
        let mut sigma_sq = 0.0;
        for i in 0..rows {
            let row = w.row_slice(i);
            let mut acc = 0.0;
            for j in 0..cols {
                acc += row[j] * v[j];
            }
            sigma_sq += acc * acc;
        }
        let sigma = sigma_sq.sqrt();
        if (sigma - prev).abs() <= tol * f64::max(1.0, sigma) {
            return Some(sigma);
        }
        prev = sigma;
    }
    None
}

fn frobenius_norm(w: &Tensor) -> f64 {
    w.data().iter().map(|&v| v * v).sum::<f64>().sqrt()
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                detail: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_bits(u64::from_le_bytes(b.try_into().unwrap())))
    }
}
