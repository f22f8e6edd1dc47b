//! Temperature-scaled contrastive losses and their variational forms.
//!
//! All losses score pairs by cosine similarity over unit embeddings divided
//! by a temperature `tau`. The batch layout is fixed throughout the crate:
//! a batch of `N` positive pairs is a `2N x d` matrix whose row `i` and row
//! `(i + N) mod 2N` are the two views of the same sample.
//!
//! The self-supervised loss ([`info_nce`]) averages, over all `2N` anchors,
//!
//! ```text
//! log( sum_{j != i} exp(s_ij) ) - s_{i, pos(i)}
//! ```
//!
//! with per-anchor max subtraction inside the log-sum-exp. Averaging over
//! both views' anchors is exactly the symmetrized two-directional objective.
//! The supervised loss ([`sup_con`]) generalizes positives to all rows that
//! share the anchor's label; anchors whose positive set is empty are skipped
//! and counted.
//!
//! Variational forms replace point embeddings by sphere-projected Gaussian
//! posteriors: each view's embedding is a reparameterized sample
//! `normalize(mu + sigma .* eps)`, and the objective adds `beta` times the
//! batch mean of the dimension-normalized Gaussian KL to the standard normal
//! (see [`crate::posterior`]). Drawing `m > 1` samples per posterior
//! *enlarges the batch* to `m * 2N` rows — pairing sample `k` of view 1 with
//! sample `k` of view 2 — rather than averaging `m` losses, so the negative
//! pool grows `m`-fold. A one-directional variant ([`vcl_loss_asym`]) keeps
//! only view-1 anchors and regularizes only view-1 posteriors.
//!
//! Every loss exists twice: a plain function over concrete values (the
//! reference semantics, used by evaluation and tests) and a `*_graph`
//! builder over [`Graph`] nodes (used by training and gradient checks). The
//! two paths share their noise-drawing code and agree to within a few ulps.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::posterior::{kl_normalized, PosteriorParams};
use crate::prng::Prng;
use crate::tensor::{l2_norm, Tensor, NORM_FLOOR};

/// Tolerance for the unit-norm check on embedding rows.
const UNIT_TOL: f64 = 1e-8;

// ── Batch types ─────────────────────────────────────────────────────────

/// `2N x d` matrix of unit-norm embeddings; row `i` and row `(i + N) mod 2N`
/// are positives of each other. Construction verifies row norms.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    embeddings: Tensor,
    n_pairs: usize,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, n_pairs: usize) -> Result<EmbeddingBatch> {
        if !embeddings.is_matrix() || n_pairs == 0 || embeddings.rows() != 2 * n_pairs {
            return Err(Error::ShapeMismatch {
                op: "EmbeddingBatch::new",
                detail: format!(
                    "expected a 2N x d matrix with N = {n_pairs}, got shape {:?}",
                    embeddings.shape()
                ),
            });
        }
        for i in 0..embeddings.rows() {
            let norm = l2_norm(embeddings.row_slice(i));
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitRow { row: i, norm });
            }
        }
        Ok(EmbeddingBatch {
            embeddings,
            n_pairs,
        })
    }

    /// Normalizes each row of a raw matrix, then builds the batch. Errors on
    /// degenerate rows.
    pub fn normalized(raw: Tensor, n_pairs: usize) -> Result<EmbeddingBatch> {
        let (n, d) = (raw.rows(), raw.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = raw.row_slice(i);
            let norm = l2_norm(row);
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateNorm {
                    context: "EmbeddingBatch::normalized",
                    row: i,
                });
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        EmbeddingBatch::new(Tensor::new(&[n, d], data), n_pairs)
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Row index of the positive of row `i`.
    pub fn positive_of(&self, i: usize) -> usize {
        (i + self.n_pairs) % (2 * self.n_pairs)
    }
}

/// An [`EmbeddingBatch`] with one class label per row; the two views of a
/// sample carry the same label.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddingBatch {
    pub batch: EmbeddingBatch,
    pub labels: Vec<usize>,
}

impl LabeledEmbeddingBatch {
    pub fn new(batch: EmbeddingBatch, labels: Vec<usize>) -> Result<LabeledEmbeddingBatch> {
        let rows = 2 * batch.n_pairs();
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "LabeledEmbeddingBatch::new",
                detail: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        let n = batch.n_pairs();
        for i in 0..n {
            if labels[i] != labels[i + n] {
                return Err(Error::InvalidArg {
                    what: format!(
                        "views of sample {i} carry different labels ({} vs {})",
                        labels[i],
                        labels[i + n]
                    ),
                });
            }
        }
        Ok(LabeledEmbeddingBatch { batch, labels })
    }
}

/// Scalar loss plus optional per-anchor decomposition. When `per_anchor` is
/// present, `value` is exactly its mean; `skipped_anchors` counts anchors
/// excluded for having no positives (supervised losses only).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub per_anchor: Option<Vec<f64>>,
    pub skipped_anchors: usize,
}

/// A contrastive term plus a KL regularizer: `value = contrastive.value +
/// beta * kl_mean`, where `kl_mean` is the mean dimension-normalized KL over
/// the regularized posteriors (before scaling by `beta`).
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub value: f64,
    pub contrastive: LossValue,
    pub kl_mean: f64,
    pub beta: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArg {
            what: format!("temperature must be positive and finite, got {tau}"),
        });
    }
    Ok(())
}

// ── Plain (value-level) losses ──────────────────────────────────────────

/// Temperature-scaled cosine similarity of two unit vectors: `a . b / tau`.
/// Errors on non-unit inputs (tolerance 1e-8), mismatched lengths, or a
/// non-positive temperature.
pub fn cosine_sim(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            detail: format!("lengths {} and {} differ", a.len(), b.len()),
        });
    }
    for (row, v) in [(0usize, a), (1usize, b)] {
        let norm = l2_norm(v);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitRow { row, norm });
        }
    }
    let mut dot = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
    }
    Ok(dot / tau)
}

/// Similarity of rows `i` and `j` of a unit-row matrix, divided by `tau`.
fn sim(emb: &Tensor, i: usize, j: usize, tau: f64) -> f64 {
    let (a, b) = (emb.row_slice(i), emb.row_slice(j));
    let mut dot = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
    }
    dot / tau
}

/// Self-supervised contrastive loss over an embedding batch.
///
/// Per anchor `i` the term is `logsumexp_{j != i}(s_ij) - s_{i, pos(i)}`,
/// stabilized by max subtraction; the loss is the mean over all `2N`
/// anchors, which symmetrizes the two view directions. Requires `N >= 2`
/// (with a single pair the positive is the only candidate and the loss is
/// identically zero).
pub fn info_nce(batch: &EmbeddingBatch, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    if batch.n_pairs() < 2 {
        return Err(Error::InvalidArg {
            what: format!(
                "info_nce needs at least 2 pairs, got {}",
                batch.n_pairs()
            ),
        });
    }
    let emb = batch.embeddings();
    let rows = emb.rows();
    let mut per_anchor = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for j in 0..rows {
            if j != i {
                let s = sim(emb, i, j, tau);
                if s > max {
                    max = s;
                }
            }
        }
        let mut acc = 0.0;
        for j in 0..rows {
            if j != i {
                acc += (sim(emb, i, j, tau) - max).exp();
            }
        }
        let lse = max + acc.ln();
        let pos = sim(emb, i, batch.positive_of(i), tau);
        per_anchor.push(lse - pos);
    }
    let value = per_anchor.iter().sum::<f64>() / rows as f64;
    Ok(LossValue {
        value,
        per_anchor: Some(per_anchor),
        skipped_anchors: 0,
    })
}

/// Per-anchor supervised terms over an arbitrary labeled set of unit rows.
/// Returns `(terms, contributing)` where `terms[a]` is meaningful only when
/// `contributing[a]` is true.
fn supcon_terms(emb: &Tensor, labels: &[usize], tau: f64) -> (Vec<f64>, Vec<bool>) {
    let rows = emb.rows();
    let mut terms = vec![0.0; rows];
    let mut contributing = vec![false; rows];
    for a in 0..rows {
        let mut pos_count = 0usize;
        let mut max = f64::NEG_INFINITY;
        for j in 0..rows {
            if j != a {
                let s = sim(emb, a, j, tau);
                if s > max {
                    max = s;
                }
                if labels[j] == labels[a] {
                    pos_count += 1;
                }
            }
        }
        if pos_count == 0 {
            continue;
        }
        let mut acc = 0.0;
        let mut pos_sum = 0.0;
        for j in 0..rows {
            if j != a {
                let s = sim(emb, a, j, tau);
                acc += (s - max).exp();
                if labels[j] == labels[a] {
                    pos_sum += s;
                }
            }
        }
        let lse = max + acc.ln();
        terms[a] = lse - pos_sum / pos_count as f64;
        contributing[a] = true;
    }
    (terms, contributing)
}

/// Supervised contrastive loss over an arbitrary labeled collection of unit
/// rows (no pairing structure required): per anchor `a` with positives
/// `P(a)` (same label, excluding self) and candidates all other rows,
///
/// ```text
/// term(a) = logsumexp_{j != a}(s_aj) - (1 / |P(a)|) * sum_{p in P(a)} s_ap
/// ```
///
/// averaged over anchors with nonempty `P(a)`; anchors without positives are
/// skipped and counted in [`LossValue::skipped_anchors`]. Errors when every
/// anchor is skipped.
pub fn sup_con_rows(embeddings: &Tensor, labels: &[usize], tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    if !embeddings.is_matrix() || embeddings.rows() < 2 {
        return Err(Error::InvalidArg {
            what: "sup_con needs at least 2 embedding rows".to_string(),
        });
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::ShapeMismatch {
            op: "sup_con",
            detail: format!(
                "{} labels for {} rows",
                labels.len(),
                embeddings.rows()
            ),
        });
    }
    for i in 0..embeddings.rows() {
        let norm = l2_norm(embeddings.row_slice(i));
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitRow { row: i, norm });
        }
    }
    let (terms, contributing) = supcon_terms(embeddings, labels, tau);
    let per_anchor: Vec<f64> = terms
        .iter()
        .zip(contributing.iter())
        .filter(|(_, &c)| c)
        .map(|(&t, _)| t)
        .collect();
    if per_anchor.is_empty() {
        return Err(Error::NoPositives);
    }
    let value = per_anchor.iter().sum::<f64>() / per_anchor.len() as f64;
    Ok(LossValue {
        value,
        skipped_anchors: contributing.iter().filter(|&&c| !c).count(),
        per_anchor: Some(per_anchor),
    })
}

/// [`sup_con_rows`] on a paired, labeled batch.
pub fn sup_con(batch: &LabeledEmbeddingBatch, tau: f64) -> Result<LossValue> {
    sup_con_rows(batch.batch.embeddings(), &batch.labels, tau)
}

// ── Shared sampling helpers ─────────────────────────────────────────────

/// Extracts an `n x d` matrix of means and one of sigmas from posteriors.
fn stack_params(params: &[PosteriorParams]) -> Result<(Tensor, Tensor, Tensor)> {
    if params.is_empty() {
        return Err(Error::InvalidArg {
            what: "need at least one posterior".to_string(),
        });
    }
    let d = params[0].dim();
    if params.iter().any(|p| p.dim() != d) {
        return Err(Error::ShapeMismatch {
            op: "stack_params",
            detail: "posteriors have mixed dimensions".to_string(),
        });
    }
    let n = params.len();
    let mut mu = Vec::with_capacity(n * d);
    let mut lv = Vec::with_capacity(n * d);
    let mut sg = Vec::with_capacity(n * d);
    for p in params {
        mu.extend_from_slice(p.mu());
        lv.extend_from_slice(p.log_var());
        sg.extend(p.sigma());
    }
    Ok((
        Tensor::new(&[n, d], mu),
        Tensor::new(&[n, d], lv),
        Tensor::new(&[n, d], sg),
    ))
}

/// Draws reparameterization noise for `m` samples of each of `n` posteriors,
/// in sample-major order (posterior 0 samples `0..m`, then posterior 1, ...),
/// and enforces the degenerate-norm rule on `u = mu + sigma .* eps`: a row
/// whose norm falls below 1e-12 is redrawn once (in row order, after the
/// initial block), and a second failure is an error.
pub(crate) fn draw_eps_checked(mu: &Tensor, sigma: &Tensor, m: usize, prng: &mut Prng) -> Result<Tensor> {
    let (n, d) = (mu.rows(), mu.cols());
    let mut eps = Vec::with_capacity(n * m * d);
    for _ in 0..n * m {
        for _ in 0..d {
            eps.push(prng.normal());
        }
    }
    let row_norm = |eps: &[f64], row: usize| -> f64 {
        let i = row / m;
        let mut acc = 0.0;
        for j in 0..d {
            let u = mu.at(i, j) + sigma.at(i, j) * eps[row * d + j];
            acc += u * u;
        }
        acc.sqrt()
    };
    for row in 0..n * m {
        if row_norm(&eps, row) < NORM_FLOOR {
            for j in 0..d {
                eps[row * d + j] = prng.normal();
            }
            if row_norm(&eps, row) < NORM_FLOOR {
                return Err(Error::DegenerateNorm {
                    context: "sample_pn",
                    row,
                });
            }
        }
    }
    Ok(Tensor::new(&[n * m, d], eps))
}

// ── Graph builders ──────────────────────────────────────────────────────

/// Mask excluding the diagonal of an `n x n` similarity matrix.
fn offdiag_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![true; n * n];
    for i in 0..n {
        mask[i * n + i] = false;
    }
    mask
}

/// Differentiable [`info_nce`] over a `2N x d` node of unit rows.
pub fn info_nce_graph(g: &mut Graph, emb: VarId, n_pairs: usize, tau: f64) -> Result<VarId> {
    check_tau(tau)?;
    if n_pairs < 2 {
        return Err(Error::InvalidArg {
            what: format!("info_nce needs at least 2 pairs, got {n_pairs}"),
        });
    }
    let rows = 2 * n_pairs;
    debug_assert_eq!(g.value(emb).rows(), rows);
    let embt = g.transpose(emb)?;
    let gram = g.matmul(emb, embt)?;
    let s = g.affine(gram, 1.0 / tau, 0.0)?;
    let lse = g.masked_row_logsumexp(s, &offdiag_mask(rows))?;
    let pos_cols: Vec<usize> = (0..rows).map(|i| (i + n_pairs) % rows).collect();
    let pos = g.gather_per_row(s, &pos_cols)?;
    let diff = g.sub(lse, pos)?;
    g.mean(diff)
}

/// Differentiable supervised per-anchor machinery: returns the column of
/// anchor terms (meaningful where `contributing`) and the contributing mask.
fn supcon_terms_graph(
    g: &mut Graph,
    emb: VarId,
    labels: &[usize],
    tau: f64,
) -> Result<(VarId, Vec<bool>)> {
    let rows = g.value(emb).rows();
    let embt = g.transpose(emb)?;
    let gram = g.matmul(emb, embt)?;
    let s = g.affine(gram, 1.0 / tau, 0.0)?;
    let lse = g.masked_row_logsumexp(s, &offdiag_mask(rows))?;

    let mut pos_mask = vec![false; rows * rows];
    let mut inv_p = vec![0.0; rows];
    let mut contributing = vec![false; rows];
    for a in 0..rows {
        let count = (0..rows)
            .filter(|&j| j != a && labels[j] == labels[a])
            .count();
        if count > 0 {
            contributing[a] = true;
            inv_p[a] = 1.0 / count as f64;
            for j in 0..rows {
                if j != a && labels[j] == labels[a] {
                    pos_mask[a * rows + j] = true;
                }
            }
        }
    }
    let pos_sum = g.masked_row_sum(s, &pos_mask)?;
    let invp = g.constant(Tensor::new(&[rows, 1], inv_p));
    let mean_pos = g.mul(pos_sum, invp)?;
    let terms = g.sub(lse, mean_pos)?;
    Ok((terms, contributing))
}

/// Differentiable [`sup_con_rows`] over a `B x d` node of unit rows.
pub fn sup_con_graph(g: &mut Graph, emb: VarId, labels: &[usize], tau: f64) -> Result<VarId> {
    check_tau(tau)?;
    let rows = g.value(emb).rows();
    if rows < 2 || labels.len() != rows {
        return Err(Error::InvalidArg {
            what: format!("sup_con: {} labels for {rows} rows", labels.len()),
        });
    }
    let (terms, contributing) = supcon_terms_graph(g, emb, labels, tau)?;
    let n_contrib = contributing.iter().filter(|&&c| c).count();
    if n_contrib == 0 {
        return Err(Error::NoPositives);
    }
    let weights: Vec<f64> = contributing
        .iter()
        .map(|&c| if c { 1.0 / n_contrib as f64 } else { 0.0 })
        .collect();
    let w = g.constant(Tensor::new(&[rows, 1], weights));
    let weighted = g.mul(terms, w)?;
    g.sum(weighted)
}

/// Mean dimension-normalized KL over the rows of `(mu, log_var)` nodes:
/// `(1 / (2 d n)) * sum(exp(lv) + mu^2 - 1 - lv)`.
pub fn kl_mean_graph(g: &mut Graph, mu: VarId, log_var: VarId) -> Result<VarId> {
    let (n, d) = (g.value(mu).rows(), g.value(mu).cols());
    let elv = g.exp(log_var)?;
    let musq = g.mul(mu, mu)?;
    let a = g.add(elv, musq)?;
    let b = g.affine(log_var, 1.0, 1.0)?; // lv + 1
    let t = g.sub(a, b)?;
    let s = g.sum(t)?;
    g.affine(s, 1.0 / (2.0 * d as f64 * n as f64), 0.0)
}

/// Builds sphere-projected reparameterized samples for one view:
/// `z = normalize(repeat_rows(mu, m) + repeat_rows(sigma, m) .* eps)`.
/// `eps` must be an `(n m) x d` constant node.
pub(crate) fn sampled_embeddings_graph(
    g: &mut Graph,
    mu: VarId,
    log_var: VarId,
    m: usize,
    eps: VarId,
) -> Result<VarId> {
    let half_lv = g.affine(log_var, 0.5, 0.0)?;
    let sigma = g.exp(half_lv)?;
    let mu_rep = g.repeat_rows(mu, m)?;
    let sigma_rep = g.repeat_rows(sigma, m)?;
    let noise = g.mul(sigma_rep, eps)?;
    let u = g.add(mu_rep, noise)?;
    g.row_normalize(u)
}

/// Stacks one view's posteriors, draws its noise, and returns the node of
/// its `(n m) x d` sphere-projected samples.
fn build_view(
    g: &mut Graph,
    params: &[PosteriorParams],
    m: usize,
    prng: &mut Prng,
) -> Result<VarId> {
    let (mu_t, lv_t, sigma_t) = stack_params(params)?;
    let eps_t = draw_eps_checked(&mu_t, &sigma_t, m, prng)?;
    let mu = g.param(mu_t);
    let log_var = g.param(lv_t);
    let eps = g.constant(eps_t);
    sampled_embeddings_graph(g, mu, log_var, m, eps)
}

// ── Variational losses ──────────────────────────────────────────────────

fn check_views(
    params_view1: &[PosteriorParams],
    params_view2: &[PosteriorParams],
    m: usize,
) -> Result<()> {
    if params_view1.len() != params_view2.len() || params_view1.is_empty() {
        return Err(Error::InvalidArg {
            what: format!(
                "views must hold equal nonzero posterior counts, got {} and {}",
                params_view1.len(),
                params_view2.len()
            ),
        });
    }
    if m == 0 {
        return Err(Error::InvalidArg {
            what: "sample count m must be at least 1".to_string(),
        });
    }
    if params_view1.len() * m < 2 {
        return Err(Error::InvalidArg {
            what: "need at least 2 effective pairs (N * m >= 2)".to_string(),
        });
    }
    Ok(())
}

/// Variational self-supervised loss: the contrastive term is [`info_nce`]
/// over the enlarged batch of `m` sphere-projected samples per posterior per
/// view, and the regularizer is `beta` times the mean normalized KL over all
/// `2N` posteriors.
///
/// Noise is drawn view 1 first, then view 2, each in sample-major order, so
/// a fixed `prng` state fixes the loss exactly.
pub fn vcl_loss(
    params_view1: &[PosteriorParams],
    params_view2: &[PosteriorParams],
    tau: f64,
    beta: f64,
    m: usize,
    prng: &mut Prng,
) -> Result<CompositeLoss> {
    check_tau(tau)?;
    check_views(params_view1, params_view2, m)?;
    let mut g = Graph::new();
    let v1 = build_view(&mut g, params_view1, m, prng)?;
    let v2 = build_view(&mut g, params_view2, m, prng)?;
    let emb = g.vcat(v1, v2)?;
    let n_eff = params_view1.len() * m;
    let nce = info_nce_graph(&mut g, emb, n_eff, tau)?;

    let contrastive = collect_infonce_value(&g, emb, nce, n_eff, tau);
    let kl_mean = mean_kl(params_view1.iter().chain(params_view2.iter()));
    Ok(CompositeLoss {
        value: g.value(nce).item() + beta * kl_mean,
        contrastive,
        kl_mean,
        beta,
    })
}

/// One-directional variational loss: anchors are the view-1 sample rows
/// only (candidates still span both views), and only view-1 posteriors are
/// regularized.
///
/// With identical parameters and identical samples on both views, the
/// anchor terms coincide with the symmetric loss's, so the values agree.
pub fn vcl_loss_asym(
    params_view1: &[PosteriorParams],
    params_view2: &[PosteriorParams],
    tau: f64,
    beta: f64,
    m: usize,
    prng: &mut Prng,
) -> Result<CompositeLoss> {
    check_tau(tau)?;
    check_views(params_view1, params_view2, m)?;
    let mut g = Graph::new();
    let v1 = build_view(&mut g, params_view1, m, prng)?;
    let v2 = build_view(&mut g, params_view2, m, prng)?;
    let emb = g.vcat(v1, v2)?;
    let n_eff = params_view1.len() * m;
    let nce = info_nce_asym_graph(&mut g, emb, n_eff, tau)?;

    let rows = 2 * n_eff;
    let per_anchor: Vec<f64> = {
        let s = similarity_values(&g, emb, tau);
        (0..n_eff)
            .map(|i| anchor_term(&s, rows, i, (i + n_eff) % rows))
            .collect()
    };
    let kl_mean = mean_kl(params_view1.iter());
    Ok(CompositeLoss {
        value: g.value(nce).item() + beta * kl_mean,
        contrastive: LossValue {
            value: g.value(nce).item(),
            per_anchor: Some(per_anchor),
            skipped_anchors: 0,
        },
        kl_mean,
        beta,
    })
}

/// Differentiable one-directional variant of [`info_nce_graph`]: mean of
/// the first `n_pairs` anchor terms only.
pub fn info_nce_asym_graph(g: &mut Graph, emb: VarId, n_pairs: usize, tau: f64) -> Result<VarId> {
    check_tau(tau)?;
    if n_pairs < 2 {
        return Err(Error::InvalidArg {
            what: format!("info_nce needs at least 2 pairs, got {n_pairs}"),
        });
    }
    let rows = 2 * n_pairs;
    let embt = g.transpose(emb)?;
    let gram = g.matmul(emb, embt)?;
    let s = g.affine(gram, 1.0 / tau, 0.0)?;
    let lse = g.masked_row_logsumexp(s, &offdiag_mask(rows))?;
    let pos_cols: Vec<usize> = (0..rows).map(|i| (i + n_pairs) % rows).collect();
    let pos = g.gather_per_row(s, &pos_cols)?;
    let diff = g.sub(lse, pos)?;
    let weights: Vec<f64> = (0..rows)
        .map(|i| if i < n_pairs { 1.0 / n_pairs as f64 } else { 0.0 })
        .collect();
    let w = g.constant(Tensor::new(&[rows, 1], weights));
    let weighted = g.mul(diff, w)?;
    g.sum(weighted)
}

/// Variational supervised loss: supervised contrastive terms over the `2N`
/// sampled embeddings, averaged per view direction and then across the two
/// directions, plus `beta` times the mean normalized KL of all posteriors.
///
/// `labels` has one entry per sample (length `N`); both views of a sample
/// share it, so every anchor has at least one positive.
pub fn vsupcon_loss(
    params_view1: &[PosteriorParams],
    params_view2: &[PosteriorParams],
    labels: &[usize],
    tau: f64,
    beta: f64,
    prng: &mut Prng,
) -> Result<CompositeLoss> {
    check_tau(tau)?;
    check_views(params_view1, params_view2, 1)?;
    let n = params_view1.len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "vsupcon_loss",
            detail: format!("{} labels for {n} samples", labels.len()),
        });
    }
    let mut g = Graph::new();
    let v1 = build_view(&mut g, params_view1, 1, prng)?;
    let v2 = build_view(&mut g, params_view2, 1, prng)?;
    let emb = g.vcat(v1, v2)?;
    let full_labels: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
    let sup = vsupcon_sup_graph(&mut g, emb, &full_labels, n, tau)?;

    let s = similarity_values(&g, emb, tau);
    let (terms, contributing) = supcon_terms_values(&s, 2 * n, &full_labels);
    let per_anchor: Vec<f64> = terms
        .iter()
        .zip(contributing.iter())
        .filter(|(_, &c)| c)
        .map(|(&t, _)| t)
        .collect();
    let kl_mean = mean_kl(params_view1.iter().chain(params_view2.iter()));
    Ok(CompositeLoss {
        value: g.value(sup).item() + beta * kl_mean,
        contrastive: LossValue {
            value: g.value(sup).item(),
            skipped_anchors: contributing.iter().filter(|&&c| !c).count(),
            per_anchor: Some(per_anchor),
        },
        kl_mean,
        beta,
    })
}

/// Differentiable supervised term of the variational supervised loss: the
/// average of the two per-view anchor means, candidates spanning both views.
pub fn vsupcon_sup_graph(
    g: &mut Graph,
    emb: VarId,
    labels: &[usize],
    n_pairs: usize,
    tau: f64,
) -> Result<VarId> {
    let rows = 2 * n_pairs;
    if labels.len() != rows {
        return Err(Error::InvalidArg {
            what: format!("{} labels for {rows} rows", labels.len()),
        });
    }
    let (terms, contributing) = supcon_terms_graph(g, emb, labels, tau)?;
    let c1 = contributing[..n_pairs].iter().filter(|&&c| c).count();
    let c2 = contributing[n_pairs..].iter().filter(|&&c| c).count();
    if c1 == 0 || c2 == 0 {
        return Err(Error::NoPositives);
    }
    let weights: Vec<f64> = contributing
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if !c {
                0.0
            } else if i < n_pairs {
                0.5 / c1 as f64
            } else {
                0.5 / c2 as f64
            }
        })
        .collect();
    let w = g.constant(Tensor::new(&[rows, 1], weights));
    let weighted = g.mul(terms, w)?;
    g.sum(weighted)
}

/// Contrastive loss over posterior *parameters* instead of samples: each
/// posterior is represented by the l2-normalized concatenation
/// `[mu; sigma]`, and [`info_nce`] is applied to those feature rows with the
/// usual view pairing. No sampling is involved, so the loss is
/// deterministic in its inputs.
pub fn dist_nce(
    params_view1: &[PosteriorParams],
    params_view2: &[PosteriorParams],
    tau: f64,
) -> Result<LossValue> {
    check_tau(tau)?;
    check_views(params_view1, params_view2, 1)?;
    let mut g = Graph::new();
    let (mu1, lv1, _) = stack_params(params_view1)?;
    let (mu2, lv2, _) = stack_params(params_view2)?;
    let n = params_view1.len();
    let m1 = g.param(mu1);
    let l1 = g.param(lv1);
    let m2 = g.param(mu2);
    let l2 = g.param(lv2);
    let out = dist_nce_graph(&mut g, m1, l1, m2, l2, tau)?;

    let feat = param_features(params_view1, params_view2)?;
    let batch = EmbeddingBatch::new(feat, n)?;
    let mut reference = info_nce(&batch, tau)?;
    debug_assert!((reference.value - g.value(out).item()).abs() <= 1e-9);
    reference.value = g.value(out).item();
    Ok(reference)
}

/// Differentiable [`dist_nce`] from stacked `(mu, log_var)` nodes per view.
pub fn dist_nce_graph(
    g: &mut Graph,
    mu1: VarId,
    log_var1: VarId,
    mu2: VarId,
    log_var2: VarId,
    tau: f64,
) -> Result<VarId> {
    let n = g.value(mu1).rows();
    let feat = |g: &mut Graph, mu: VarId, lv: VarId| -> Result<VarId> {
        let half = g.affine(lv, 0.5, 0.0)?;
        let sigma = g.exp(half)?;
        let cat = g.hcat(mu, sigma)?;
        g.row_normalize(cat)
    };
    let z1 = feat(g, mu1, log_var1)?;
    let z2 = feat(g, mu2, log_var2)?;
    let emb = g.vcat(z1, z2)?;
    info_nce_graph(g, emb, n, tau)
}

/// Normalized `[mu; sigma]` feature rows for both views, stacked.
fn param_features(
    params_view1: &[PosteriorParams],
    params_view2: &[PosteriorParams],
) -> Result<Tensor> {
    let d = params_view1[0].dim();
    let n = params_view1.len();
    let mut rows = Vec::with_capacity(2 * n * 2 * d);
    for p in params_view1.iter().chain(params_view2.iter()) {
        let mut f = Vec::with_capacity(2 * d);
        f.extend_from_slice(p.mu());
        f.extend(p.sigma());
        let norm = l2_norm(&f);
        if norm < NORM_FLOOR {
            return Err(Error::DegenerateNorm {
                context: "dist_nce",
                row: rows.len() / (2 * d),
            });
        }
        rows.extend(f.into_iter().map(|v| v / norm));
    }
    Ok(Tensor::new(&[2 * n, 2 * d], rows))
}

// ── Value-level helpers shared by the plain paths ───────────────────────

fn mean_kl<'a>(params: impl Iterator<Item = &'a PosteriorParams>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in params {
        sum += kl_normalized(p);
        count += 1;
    }
    sum / count as f64
}

/// Dense similarity values of a graph embedding node (row-major `B x B`).
fn similarity_values(g: &Graph, emb: VarId, tau: f64) -> Vec<f64> {
    let e = g.value(emb);
    let rows = e.rows();
    let mut s = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut dot = 0.0;
            for (&a, &b) in e.row_slice(i).iter().zip(e.row_slice(j).iter()) {
                dot += a * b;
            }
            s[i * rows + j] = dot / tau;
        }
    }
    s
}

fn anchor_term(s: &[f64], rows: usize, i: usize, pos: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for j in 0..rows {
        if j != i && s[i * rows + j] > max {
            max = s[i * rows + j];
        }
    }
    let mut acc = 0.0;
    for j in 0..rows {
        if j != i {
            acc += (s[i * rows + j] - max).exp();
        }
    }
    max + acc.ln() - s[i * rows + pos]
}

fn supcon_terms_values(s: &[f64], rows: usize, labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let mut terms = vec![0.0; rows];
    let mut contributing = vec![false; rows];
    for a in 0..rows {
        let mut count = 0usize;
        let mut max = f64::NEG_INFINITY;
        for j in 0..rows {
            if j != a {
                if s[a * rows + j] > max {
                    max = s[a * rows + j];
                }
                if labels[j] == labels[a] {
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let mut acc = 0.0;
        let mut pos_sum = 0.0;
        for j in 0..rows {
            if j != a {
                acc += (s[a * rows + j] - max).exp();
                if labels[j] == labels[a] {
                    pos_sum += s[a * rows + j];
                }
            }
        }
        terms[a] = max + acc.ln() - pos_sum / count as f64;
        contributing[a] = true;
    }
    (terms, contributing)
}

/// Per-anchor decomposition of the symmetric contrastive value of a graph
/// batch, packaged as a [`LossValue`] whose `value` is the exact graph
/// output.
fn collect_infonce_value(
    g: &Graph,
    emb: VarId,
    nce: VarId,
    n_pairs: usize,
    tau: f64,
) -> LossValue {
    let rows = 2 * n_pairs;
    let s = similarity_values(g, emb, tau);
    let per_anchor: Vec<f64> = (0..rows)
        .map(|i| anchor_term(&s, rows, i, (i + n_pairs) % rows))
        .collect();
    LossValue {
        value: g.value(nce).item(),
        per_anchor: Some(per_anchor),
        skipped_anchors: 0,
    }
}
