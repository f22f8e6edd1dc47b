//! Training loop: methods, optimizers, schedules, metrics, checkpoints.
//!
//! One gradient step works on a batch of `batch_size` samples: augmentation
//! produces two views per sample, a shared-weight encoder forward maps both
//! views to posterior parameters, the configured loss is assembled on the
//! tape, and one `backward` yields parameter gradients. Incomplete trailing
//! batches are dropped, so every step sees the same batch size.
//!
//! Every random choice is drawn from a stream *derived* from the run seed
//! by purpose and position — `shuffle` by epoch, `augment` and `sample` by
//! `(epoch, batch)`, plus an `init` stream for weights — instead of one
//! sequential stream. Two consequences matter: methods that consume
//! different amounts of randomness (extra reparameterization draws, say)
//! still see identical shuffles and augmentations given the same seed, and
//! resuming from a checkpoint needs no generator state — epoch index and
//! seed reconstruct every stream exactly, so an interrupted run is
//! bit-identical to an uninterrupted one.
//!
//! The learning rate optionally follows per-epoch cosine decay,
//! `lr_e = lr * (1 + cos(pi e / E)) / 2`. Optimizers are SGD with momentum
//! (`v <- mu v + g`, `w <- w - lr v`) and Adam with bias correction. When
//! the encoder carries spectral bounds, each step ends by re-projecting the
//! weights onto the bounded-norm set and biases are left untouched.
//!
//! Metrics are one JSON object per epoch (JSONL); wall-clock time is
//! reported in the return value but deliberately kept out of the files so
//! reruns are byte-identical. Trainer checkpoints (magic `VCLTRN01`) store
//! the completed-epoch count, a canonical JSON fingerprint of the
//! configuration (verified on resume), the encoder bytes, and the optimizer
//! state, all f64s as exact bit patterns.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::time::Instant;

use crate::data::{make_views, AugmentPolicy, Dataset};
use crate::encoder::{mlp_graph, EncoderConfig, MlpEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::losses::{
    dist_nce_graph, draw_eps_checked, info_nce_asym_graph, info_nce_graph, kl_mean_graph,
    sampled_embeddings_graph, sup_con_graph, vsupcon_sup_graph,
};
use crate::posterior::kl_normalized;
use crate::prng::Prng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VCLTRN01";

/// Purpose labels for derived random streams.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_SAMPLE: u64 = 4;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pairwise contrastive loss over deterministic embeddings
    /// `normalize(mu)`; no regularizer.
    SimClr,
    /// Variational pairwise loss: sampled sphere embeddings plus
    /// `beta * KL` over both views' posteriors.
    VSimClr,
    /// One-directional variational pairwise loss: view-1 anchors and
    /// view-1 KL only.
    VSimClrAsym,
    /// Supervised contrastive loss over deterministic embeddings.
    SupCon,
    /// Variational supervised loss: sampled embeddings, per-view direction
    /// averaging, `beta * KL` over both views.
    VSupCon,
    /// Contrastive loss on normalized `[mu; sigma]` parameter features; no
    /// sampling, no regularizer.
    DistNce,
}

impl Method {
    pub fn uses_labels(self) -> bool {
        matches!(self, Method::SupCon | Method::VSupCon)
    }

    fn samples(self) -> bool {
        matches!(self, Method::VSimClr | Method::VSimClrAsym | Method::VSupCon)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "simclr" => Ok(Method::SimClr),
            "vsimclr" => Ok(Method::VSimClr),
            "vsimclr_asym" => Ok(Method::VSimClrAsym),
            "supcon" => Ok(Method::SupCon),
            "vsupcon" => Ok(Method::VSupCon),
            "distnce" => Ok(Method::DistNce),
            other => Err(Error::InvalidArg {
                what: format!(
                    "unknown method {other:?} (expected simclr, vsimclr, vsimclr_asym, supcon, vsupcon, or distnce)"
                ),
            }),
        }
    }
}

/// Gradient-descent rule. Learning rate lives here; the epoch schedule
/// multiplies it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> OptimizerKind {
        OptimizerKind::SgdMomentum {
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> OptimizerKind {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn lr(&self) -> f64 {
        match self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                lr.is_finite() && *lr > 0.0 && (0.0..1.0).contains(momentum)
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr.is_finite()
                    && *lr > 0.0
                    && (0.0..1.0).contains(beta1)
                    && (0.0..1.0).contains(beta2)
                    && *eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArg {
                what: format!("invalid optimizer settings {self:?}"),
            })
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub tau: f64,
    pub beta: f64,
    /// Reparameterization samples per posterior (sampling methods only; the
    /// batch grows by this factor).
    pub m_samples: usize,
    pub epochs: usize,
    /// Samples per batch; each contributes two views.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Per-epoch cosine decay of the learning rate.
    pub cosine_decay: bool,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Replace sampled embeddings by `normalize(mu)` exactly — the
    /// zero-variance limit of the sampling methods. With `beta = 0` the
    /// variational pairwise method then reproduces the plain pairwise
    /// method bit for bit.
    pub sigma_zero_limit: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArg {
                what: format!("temperature must be positive, got {}", self.tau),
            });
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArg {
                what: format!("beta must be nonnegative, got {}", self.beta),
            });
        }
        if self.m_samples == 0 {
            return Err(Error::InvalidArg {
                what: "m_samples must be at least 1".to_string(),
            });
        }
        if self.m_samples > 1 && matches!(self.method, Method::VSupCon) {
            return Err(Error::InvalidArg {
                what: "the supervised variational method is defined for m_samples = 1".to_string(),
            });
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArg {
                what: "batch_size must be at least 2".to_string(),
            });
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.optimizer.lr();
        if self.cosine_decay {
            base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            base
        }
    }
}

/// One epoch of metrics: means over the epoch's batches. Serialized as one
/// JSON object per line; nothing here depends on wall-clock time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: f64,
    /// Mean dimension-normalized KL of the batch posteriors (diagnostic;
    /// reported even when `beta = 0`).
    pub kl: f64,
    pub batches: usize,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Wall-clock duration; reported here only, never serialized.
    pub seconds: f64,
}

// ── Optimizer state ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum OptState {
    Sgd {
        velocity: Vec<Tensor>,
    },
    Adam {
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl OptState {
    fn new(kind: &OptimizerKind, shapes: &[Vec<usize>]) -> OptState {
        let zeros = || -> Vec<Tensor> { shapes.iter().map(|s| Tensor::zeros(s)).collect() };
        match kind {
            OptimizerKind::SgdMomentum { .. } => OptState::Sgd { velocity: zeros() },
            OptimizerKind::Adam { .. } => OptState::Adam {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// Applies one update to `param` from `grad` (slot `i`), scaling the
    /// optimizer's base rate to `lr`.
    fn apply(
        &mut self,
        kind: &OptimizerKind,
        lr: f64,
        i: usize,
        param: &mut Tensor,
        grad: &Tensor,
    ) {
        match (self, kind) {
            (OptState::Sgd { velocity }, OptimizerKind::SgdMomentum { momentum, .. }) => {
                let vel = &mut velocity[i];
                for (v, &g) in vel.data_mut().iter_mut().zip(grad.data()) {
                    *v = momentum * *v + g;
                }
                for (w, &v) in param.data_mut().iter_mut().zip(vel.data()) {
                    *w -= lr * v;
                }
            }
            (
                OptState::Adam { step, m, v },
                OptimizerKind::Adam {
                    beta1, beta2, eps, ..
                },
            ) => {
                // Callers bump `step` once per batch via `begin_step`.
                let t = *step as f64;
                let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                let mt = &mut m[i];
                let vt = &mut v[i];
                for ((mi, vi), (&g, w)) in mt
                    .data_mut()
                    .iter_mut()
                    .zip(vt.data_mut().iter_mut())
                    .zip(grad.data().iter().zip(param.data_mut().iter_mut()))
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            _ => unreachable!("optimizer state does not match optimizer kind"),
        }
    }

    fn begin_step(&mut self) {
        if let OptState::Adam { step, .. } = self {
            *step += 1;
        }
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

/// Stateful training driver: owns the encoder, optimizer state, and the
/// count of completed epochs.
pub struct Trainer {
    config: TrainConfig,
    encoder: MlpEncoder,
    opt_state: OptState,
    completed_epochs: usize,
}

impl Trainer {
    /// Fresh trainer with a newly initialized encoder (weights drawn from
    /// the run seed's `init` stream).
    pub fn new(config: TrainConfig, encoder_config: EncoderConfig) -> Result<Trainer> {
        config.validate()?;
        let mut init_rng = Prng::new(config.seed).derive(STREAM_INIT);
        let mut encoder = MlpEncoder::new(encoder_config, &mut init_rng)?;
        if encoder.config().spectral_bounds.is_some() {
            encoder.spectral_project();
        }
        let shapes = param_shapes(&encoder);
        let opt_state = OptState::new(&config.optimizer, &shapes);
        Ok(Trainer {
            config,
            encoder,
            opt_state,
            completed_epochs: 0,
        })
    }

    /// Wraps an existing encoder (evaluation-time fine-tuning, tests).
    pub fn with_encoder(config: TrainConfig, encoder: MlpEncoder) -> Result<Trainer> {
        config.validate()?;
        let shapes = param_shapes(&encoder);
        let opt_state = OptState::new(&config.optimizer, &shapes);
        Ok(Trainer {
            config,
            encoder,
            opt_state,
            completed_epochs: 0,
        })
    }

    pub fn encoder(&self) -> &MlpEncoder {
        &self.encoder
    }

    pub fn into_encoder(self) -> MlpEncoder {
        self.encoder
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    /// Runs every remaining epoch, optionally checkpointing to `path` every
    /// `interval` epochs (and always after the final one).
    pub fn fit(
        &mut self,
        data: &Dataset,
        checkpoint: Option<(&Path, usize)>,
    ) -> Result<TrainOutcome> {
        if let Some((_, interval)) = checkpoint {
            if interval == 0 {
                return Err(Error::InvalidArg {
                    what: "checkpoint interval must be at least 1".to_string(),
                });
            }
        }
        let start = Instant::now();
        let mut records = Vec::new();
        while self.completed_epochs < self.config.epochs {
            records.push(self.run_epoch(data)?);
            if let Some((path, interval)) = checkpoint {
                let done = self.completed_epochs;
                if done % interval == 0 || done == self.config.epochs {
                    self.save_checkpoint(path)?;
                }
            }
        }
        Ok(TrainOutcome {
            records,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs one epoch: shuffle, batch, two views, forward, loss, backward,
    /// update, optional spectral projection. Returns the epoch's metrics.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        if self.completed_epochs >= self.config.epochs {
            return Err(Error::InvalidArg {
                what: format!("all {} epochs already completed", self.config.epochs),
            });
        }
        if data.dim() != self.encoder.config().input_dim {
            return Err(Error::ShapeMismatch {
                op: "Trainer::run_epoch",
                detail: format!(
                    "data dimension {} vs encoder input {}",
                    data.dim(),
                    self.encoder.config().input_dim
                ),
            });
        }
        let n = data.rows();
        let bs = self.config.batch_size;
        if n < bs {
            return Err(Error::InvalidArg {
                what: format!("dataset has {n} rows, smaller than one batch of {bs}"),
            });
        }
        let epoch = self.completed_epochs;
        let root = Prng::new(self.config.seed);
        let mut order: Vec<usize> = (0..n).collect();
        root.derive(STREAM_SHUFFLE)
            .derive(epoch as u64)
            .shuffle(&mut order);

        let lr = self.config.lr_at(epoch);
        let n_batches = n / bs;
        let mut sums = (0.0, 0.0, 0.0); // loss, contrastive, kl
        for b in 0..n_batches {
            let idx = &order[b * bs..(b + 1) * bs];
            let mut augment_rng = root
                .derive(STREAM_AUGMENT)
                .derive(epoch as u64)
                .derive(b as u64);
            let mut sample_rng = root
                .derive(STREAM_SAMPLE)
                .derive(epoch as u64)
                .derive(b as u64);
            let (loss, contrastive, kl) = self
                .step(data, idx, lr, &mut augment_rng, &mut sample_rng)
                .map_err(|e| match e {
                    Error::NonFinite { op, node } => Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        detail: format!("op {op} produced a non-finite value at node {node}"),
                    },
                    other => other,
                })?;
            sums.0 += loss;
            sums.1 += contrastive;
            sums.2 += kl;
        }
        self.completed_epochs += 1;
        Ok(MetricsRecord {
            epoch,
            lr,
            loss: sums.0 / n_batches as f64,
            contrastive: sums.1 / n_batches as f64,
            kl: sums.2 / n_batches as f64,
            batches: n_batches,
        })
    }

    /// One gradient step. Returns `(loss, contrastive, kl)` values.
    fn step(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        lr: f64,
        augment_rng: &mut Prng,
        sample_rng: &mut Prng,
    ) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let (x1, x2) = make_views(data, idx, &cfg.augment, augment_rng)?;
        let n_pairs = idx.len();

        let mut g = Graph::new();
        let x1 = g.constant(x1);
        let x2 = g.constant(x2);
        let weight_ids: Vec<VarId> = self
            .encoder
            .weights()
            .iter()
            .map(|w| g.param(w.clone()))
            .collect();
        let bias_ids: Vec<VarId> = self
            .encoder
            .biases()
            .iter()
            .map(|b| g.param(b.clone()))
            .collect();
        let act = self.encoder.config().activation;
        let latent = self.encoder.config().latent_dim;
        let (mu1, lv1) = mlp_graph(&mut g, x1, &weight_ids, &bias_ids, act, latent)?;
        let (mu2, lv2) = mlp_graph(&mut g, x2, &weight_ids, &bias_ids, act, latent)?;

        // Embeddings per method: deterministic, sampled, or parameter
        // features (built inside dist_nce_graph).
        let embed = |g: &mut Graph, mu: VarId, lv: VarId, rng: &mut Prng| -> Result<VarId> {
            if cfg.method.samples() && !cfg.sigma_zero_limit {
                let mu_v = g.value(mu).clone();
                let sigma_v = g.value(lv).map(|x| (0.5 * x).exp());
                let eps_t = draw_eps_checked(&mu_v, &sigma_v, cfg.m_samples, rng)?;
                let eps = g.constant(eps_t);
                sampled_embeddings_graph(g, mu, lv, cfg.m_samples, eps)
            } else {
                g.row_normalize(mu)
            }
        };

        let m_eff = if cfg.method.samples() && !cfg.sigma_zero_limit {
            cfg.m_samples
        } else {
            1
        };

        let (contrastive, kl_posts): (VarId, Option<(VarId, VarId, Option<(VarId, VarId)>)>) =
            match cfg.method {
                Method::SimClr => {
                    let z1 = embed(&mut g, mu1, lv1, sample_rng)?;
                    let z2 = embed(&mut g, mu2, lv2, sample_rng)?;
                    let emb = g.vcat(z1, z2)?;
                    (info_nce_graph(&mut g, emb, n_pairs, cfg.tau)?, None)
                }
                Method::VSimClr => {
                    let z1 = embed(&mut g, mu1, lv1, sample_rng)?;
                    let z2 = embed(&mut g, mu2, lv2, sample_rng)?;
                    let emb = g.vcat(z1, z2)?;
                    let nce = info_nce_graph(&mut g, emb, n_pairs * m_eff, cfg.tau)?;
                    (nce, Some((mu1, lv1, Some((mu2, lv2)))))
                }
                Method::VSimClrAsym => {
                    let z1 = embed(&mut g, mu1, lv1, sample_rng)?;
                    let z2 = embed(&mut g, mu2, lv2, sample_rng)?;
                    let emb = g.vcat(z1, z2)?;
                    let nce = info_nce_asym_graph(&mut g, emb, n_pairs * m_eff, cfg.tau)?;
                    (nce, Some((mu1, lv1, None)))
                }
                Method::SupCon => {
                    let z1 = embed(&mut g, mu1, lv1, sample_rng)?;
                    let z2 = embed(&mut g, mu2, lv2, sample_rng)?;
                    let emb = g.vcat(z1, z2)?;
                    let labels = batch_labels(data, idx, 1);
                    (sup_con_graph(&mut g, emb, &labels, cfg.tau)?, None)
                }
                Method::VSupCon => {
                    let z1 = embed(&mut g, mu1, lv1, sample_rng)?;
                    let z2 = embed(&mut g, mu2, lv2, sample_rng)?;
                    let emb = g.vcat(z1, z2)?;
                    let labels = batch_labels(data, idx, 1);
                    let sup = vsupcon_sup_graph(&mut g, emb, &labels, n_pairs, cfg.tau)?;
                    (sup, Some((mu1, lv1, Some((mu2, lv2)))))
                }
                Method::DistNce => (dist_nce_graph(&mut g, mu1, lv1, mu2, lv2, cfg.tau)?, None),
            };

        // KL node only when the method regularizes and beta > 0 — with
        // beta = 0 the variational graph must coincide with the plain one.
        let loss = match kl_posts {
            Some((mu_a, lv_a, second)) if cfg.beta > 0.0 => {
                let kl_a = kl_mean_graph(&mut g, mu_a, lv_a)?;
                let kl = match second {
                    Some((mu_b, lv_b)) => {
                        let kl_b = kl_mean_graph(&mut g, mu_b, lv_b)?;
                        let sum = g.add(kl_a, kl_b)?;
                        g.affine(sum, 0.5, 0.0)?
                    }
                    None => kl_a,
                };
                let scaled = g.affine(kl, cfg.beta, 0.0)?;
                g.add(contrastive, scaled)?
            }
            _ => contrastive,
        };

        let grads = g.backward(loss)?;

        // Diagnostic KL (value level), regardless of beta: mean normalized
        // KL over both views' posteriors.
        let kl_value = {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (mu, lv) in [(mu1, lv1), (mu2, lv2)] {
                let mu_v = g.value(mu);
                let lv_v = g.value(lv);
                for i in 0..mu_v.rows() {
                    let p = crate::posterior::PosteriorParams::new(
                        mu_v.row_slice(i).to_vec(),
                        lv_v.row_slice(i).to_vec(),
                    )?;
                    sum += kl_normalized(&p);
                    count += 1;
                }
            }
            sum / count as f64
        };

        let loss_value = g.value(loss).item();
        let contrastive_value = g.value(contrastive).item();

        // Parameter update: weights always, biases only when trainable.
        self.opt_state.begin_step();
        let train_biases = self.encoder.train_biases();
        for (i, id) in weight_ids.iter().enumerate() {
            let grad = grads.wrt(*id).clone();
            self.opt_state.apply(
                &self.config.optimizer,
                lr,
                i,
                &mut self.encoder.weights_mut()[i],
                &grad,
            );
        }
        if train_biases {
            let n_w = weight_ids.len();
            for (i, id) in bias_ids.iter().enumerate() {
                let grad = grads.wrt(*id).clone();
                self.opt_state.apply(
                    &self.config.optimizer,
                    lr,
                    n_w + i,
                    &mut self.encoder.biases_mut()[i],
                    &grad,
                );
            }
        }
        if self.encoder.config().spectral_bounds.is_some() {
            self.encoder.spectral_project();
        }
        Ok((loss_value, contrastive_value, kl_value))
    }

    // ── Checkpointing ───────────────────────────────────────────────

    fn fingerprint(&self) -> String {
        // Canonical JSON of the run configuration; serde emits struct
        // fields in declaration order, so equal configs serialize equally.
        serde_json::to_string(&(&self.config, self.encoder.config()))
            .expect("config serialization cannot fail")
    }

    /// Writes a resumable snapshot: completed epochs, config fingerprint,
    /// encoder, optimizer state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u64(&mut buf, self.completed_epochs as u64);
        let fp = self.fingerprint().into_bytes();
        push_u64(&mut buf, fp.len() as u64);
        buf.extend_from_slice(&fp);
        let enc = self.encoder.to_bytes();
        push_u64(&mut buf, enc.len() as u64);
        buf.extend_from_slice(&enc);
        match &self.opt_state {
            OptState::Sgd { velocity } => {
                buf.push(0);
                for t in velocity {
                    for &v in t.data() {
                        push_f64(&mut buf, v);
                    }
                }
            }
            OptState::Adam { step, m, v } => {
                buf.push(1);
                push_u64(&mut buf, *step);
                for t in m.iter().chain(v.iter()) {
                    for &x in t.data() {
                        push_f64(&mut buf, x);
                    }
                }
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Restores a snapshot written by [`Trainer::save_checkpoint`]. The
    /// caller re-supplies the run configuration, which must match the
    /// stored fingerprint exactly — resuming under different settings
    /// would silently change the run.
    pub fn load_checkpoint(
        path: &Path,
        config: TrainConfig,
        encoder_config: EncoderConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint {
                    detail: format!("truncated at offset {}", *pos),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Checkpoint {
                detail: "bad trainer checkpoint magic".to_string(),
            });
        }
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let completed_epochs = read_u64(&mut pos)? as usize;
        let fp_len = read_u64(&mut pos)? as usize;
        if fp_len > bytes.len() {
            return Err(Error::Checkpoint {
                detail: format!("implausible fingerprint length {fp_len}"),
            });
        }
        let stored_fp = String::from_utf8(take(&mut pos, fp_len)?.to_vec()).map_err(|_| {
            Error::Checkpoint {
                detail: "fingerprint is not valid UTF-8".to_string(),
            }
        })?;
        let expected_fp = serde_json::to_string(&(&config, &encoder_config))
            .expect("config serialization cannot fail");
        if stored_fp != expected_fp {
            return Err(Error::Checkpoint {
                detail: "configuration does not match the checkpointed run".to_string(),
            });
        }
        let enc_len = read_u64(&mut pos)? as usize;
        if enc_len > bytes.len() {
            return Err(Error::Checkpoint {
                detail: format!("implausible encoder length {enc_len}"),
            });
        }
        let encoder = MlpEncoder::from_bytes(take(&mut pos, enc_len)?)?;
        if encoder.config() != &encoder_config {
            return Err(Error::Checkpoint {
                detail: "stored encoder does not match the supplied architecture".to_string(),
            });
        }
        let shapes = param_shapes(&encoder);
        let tag = take(&mut pos, 1)?[0];
        let read_tensors = |pos: &mut usize| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(shapes.len());
            for s in &shapes {
                let numel: usize = s.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    let b = take(pos, 8)?;
                    data.push(f64::from_bits(u64::from_le_bytes(b.try_into().unwrap())));
                }
                out.push(Tensor::new(s, data));
            }
            Ok(out)
        };
        let opt_state = match (tag, &config.optimizer) {
            (0, OptimizerKind::SgdMomentum { .. }) => OptState::Sgd {
                velocity: read_tensors(&mut pos)?,
            },
            (1, OptimizerKind::Adam { .. }) => {
                let step = read_u64(&mut pos)?;
                let m = read_tensors(&mut pos)?;
                let v = read_tensors(&mut pos)?;
                OptState::Adam { step, m, v }
            }
            _ => {
                return Err(Error::Checkpoint {
                    detail: format!("optimizer tag {tag} does not match the configuration"),
                })
            }
        };
        if pos != bytes.len() {
            return Err(Error::Checkpoint {
                detail: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        Ok(Trainer {
            config,
            encoder,
            opt_state,
            completed_epochs,
        })
    }
}

/// Duplicates per-sample labels across views (and `m` samples per view).
fn batch_labels(data: &Dataset, idx: &[usize], m: usize) -> Vec<usize> {
    let mut labels = Vec::with_capacity(2 * idx.len() * m);
    for _ in 0..2 {
        for &i in idx {
            for _ in 0..m {
                labels.push(data.labels[i]);
            }
        }
    }
    labels
}

fn param_shapes(encoder: &MlpEncoder) -> Vec<Vec<usize>> {
    encoder
        .weights()
        .iter()
        .chain(encoder.biases().iter())
        .map(|t| t.shape().to_vec())
        .collect()
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

// ── Metrics files ───────────────────────────────────────────────────────

/// Writes one JSON object per record, replacing the file.
pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialization cannot fail"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Appends records to an existing metrics file (resumed runs).
pub fn append_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialization cannot fail"));
        out.push('\n');
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a metrics file written by the functions above.
pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(records)
}
