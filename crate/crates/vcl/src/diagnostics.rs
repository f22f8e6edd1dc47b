//! Measurement toolkit for trained encoders: collapse spectra, mutual
//! information, probing, uncertainty regressions, and generalization gaps.
//!
//! **Covariance spectrum.** For embeddings `z_1..z_n` the centered
//! covariance is `C = (1/n) Σ (z_i − z̄)(z_i − z̄)ᵀ`. Its eigenvalues
//! (computed by cyclic Jacobi rotations; see [`symmetric_eigenvalues`])
//! diagnose dimensional collapse: mass concentrated on few directions means
//! the embedding occupies a low-dimensional subspace. The scalar summary is
//! the *effective rank* `exp(H(λ/Σλ))`, the exponential of the Shannon
//! entropy of the normalized spectrum — `d` for a perfectly isotropic cloud,
//! `1` for a line, `0` for a point.
//!
//! **Mutual information.** [`mixed_ksg_mi`] estimates `I(z; c)` between
//! continuous embeddings and discrete labels with a k-nearest-neighbor
//! estimator for mixed variables: for each point, `ρ_i` is the distance to
//! its `k`-th neighbor *within its own label class* (the joint-space
//! neighborhood, since a label mismatch puts a point infinitely far away in
//! the joint metric), `m_i` counts the points of **any** class strictly
//! inside that radius (plus the point itself), and
//!
//! ```text
//! Î = ψ(n) + ⟨ψ(k_i)⟩ − ⟨ψ(N_{c_i})⟩ − ⟨ψ(m_i)⟩
//! ```
//!
//! with `ψ` the digamma function, `N_c` the size of the point's label class,
//! and `⟨·⟩` averages over points. Exact ties (`ρ_i = 0`, duplicated
//! coordinates) fall back to counting the points at distance exactly `ρ_i`.
//!
//! **Probing.** [`linear_probe`] trains an affine softmax classifier on
//! frozen embeddings by full-batch gradient descent on the differentiation
//! graph and reports top-1/top-5/per-class accuracy.
//!
//! **Uncertainty.** [`uncertainty_regression`] regresses per-sample
//! posterior spread (`log det K = Σ_j log σ_j²` and `tr K = Σ_j σ_j²`)
//! against the entropy of per-sample soft label distributions by ordinary
//! least squares, exposing whether ambiguous inputs receive wider
//! posteriors.
//!
//! **Generalization.** [`kl_generalization_gap`] measures the difference
//! between the held-out and training means of the dimension-normalized KL
//! regularizer for an encoder fitted on the training split;
//! [`gap_trend`] repeats the experiment over growing training sizes and
//! seeds and fits `log |gap|` against `log N`. [`ood_dispersion_report`]
//! compares posterior-parameter dispersion between two sets of inputs.

use std::collections::HashSet;

use crate::data::Dataset;
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::posterior::{kl_normalized, log_det_cov, trace_cov, PosteriorParams};
use crate::prng::Prng;
use crate::tensor::{l2_norm, Tensor};

// ── Digamma ─────────────────────────────────────────────────────────────

/// Digamma `ψ(x) = d/dx ln Γ(x)` for `x > 0`: the recurrence
/// `ψ(x) = ψ(x + 1) − 1/x` lifts the argument to at least 10, where the
/// asymptotic series `ln x − 1/(2x) − Σ B_{2n}/(2n x^{2n})` is accurate to
/// about 1e-14.
pub(crate) fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma needs a positive argument, got {x}");
    let mut acc = 0.0;
    let mut y = x;
    while y < 10.0 {
        acc -= 1.0 / y;
        y += 1.0;
    }
    let u = 1.0 / (y * y);
    let tail = u * (1.0 / 12.0
        - u * (1.0 / 120.0 - u * (1.0 / 252.0 - u * (1.0 / 240.0 - u * (1.0 / 132.0)))));
    acc + y.ln() - 0.5 / y - tail
}

// ── Symmetric eigenvalues ───────────────────────────────────────────────

/// Frobenius norm of the off-diagonal part.
fn off_diagonal_norm(a: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += a[i * d + j] * a[i * d + j];
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations: sweeps of
/// 2x2 rotations `J(p, q, θ)ᵀ A J(p, q, θ)` annihilate each off-diagonal
/// entry in turn; every rotation shrinks the off-diagonal Frobenius norm, so
/// the iteration converges to a diagonal matrix holding the eigenvalues.
/// Stops when the off-diagonal norm drops to 1e-12 or after 100 sweeps
/// (orders of magnitude more than the handful needed at these sizes).
/// Returned unsorted; symmetry is required within 1e-9.
pub fn symmetric_eigenvalues(matrix: &Tensor) -> Result<Vec<f64>> {
    if !matrix.is_matrix() || matrix.rows() != matrix.cols() {
        return Err(Error::ShapeMismatch {
            op: "symmetric_eigenvalues",
            detail: format!("need a square matrix, got {:?}", matrix.shape()),
        });
    }
    let d = matrix.rows();
    let mut a = matrix.data().to_vec();
    for i in 0..d {
        for j in (i + 1)..d {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-9 {
                return Err(Error::InvalidArg {
                    what: format!(
                        "matrix is not symmetric: entries ({i},{j}) and ({j},{i}) differ by {}",
                        (a[i * d + j] - a[j * d + i]).abs()
                    ),
                });
            }
        }
    }
    const TOL: f64 = 1e-12;
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a, d) <= TOL {
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                // Symmetric 2x2 Schur decomposition: the smaller-angle root
                // keeps the rotation well conditioned. An overflowing theta
                // degrades gracefully to t = 0 (identity rotation) while
                // still zeroing the negligible entry.
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[p * d + k] = a[k * d + p];
                    a[k * d + q] = s * akp + c * akq;
                    a[q * d + k] = a[k * d + q];
                }
                a[p * d + p] -= t * apq;
                a[q * d + q] += t * apq;
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
            }
        }
    }
    Ok((0..d).map(|i| a[i * d + i]).collect())
}

// ── Covariance spectrum ─────────────────────────────────────────────────

/// Eigenvalue spectrum of the embedding covariance plus its effective rank.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues in descending order; round-off negatives above -1e-10
    /// are clamped to zero, so every entry is nonnegative.
    pub eigenvalues: Vec<f64>,
    /// `exp(H)` of the eigenvalue distribution normalized to sum 1; `0`
    /// when the spectrum sums to zero, exactly `d` when all eigenvalues
    /// are equal and positive.
    pub effective_rank: f64,
}

/// Centers the embeddings, forms `C = (1/n) Σ (z_i − z̄)(z_i − z̄)ᵀ`, and
/// returns its eigenvalues (descending) with the effective rank
/// `exp(H(λ/Σλ))`. Needs at least two rows.
pub fn covariance_spectrum(embeddings: &Tensor) -> Result<SpectrumReport> {
    if !embeddings.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "covariance_spectrum",
            detail: format!("need a matrix of embeddings, got {:?}", embeddings.shape()),
        });
    }
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 2 {
        return Err(Error::InvalidArg {
            what: format!("covariance needs at least 2 embeddings, got {n}"),
        });
    }
    if !embeddings.all_finite() {
        return Err(Error::InvalidArg {
            what: "embeddings contain non-finite values".to_string(),
        });
    }
    // Welford's running mean: exact when a column is constant, so
    // identical embeddings center to exactly zero.
    let mut mean = vec![0.0; d];
    for i in 0..n {
        let inv = 1.0 / (i + 1) as f64;
        for (j, &v) in embeddings.row_slice(i).iter().enumerate() {
            mean[j] += (v - mean[j]) * inv;
        }
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in embeddings.row_slice(i).iter().enumerate() {
            centered[j] = v - mean[j];
        }
        for j in 0..d {
            for k in j..d {
                cov[j * d + k] += centered[j] * centered[k];
            }
        }
    }
    for j in 0..d {
        for k in j..d {
            cov[j * d + k] /= n as f64;
            cov[k * d + j] = cov[j * d + k];
        }
    }
    let mut eig = symmetric_eigenvalues(&Tensor::new(&[d, d], cov))?;
    for v in &mut eig {
        if *v < -1e-10 {
            return Err(Error::InvalidArg {
                what: format!("covariance produced eigenvalue {v} below -1e-10"),
            });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    eig.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
    Ok(SpectrumReport {
        effective_rank: effective_rank(&eig, d),
        eigenvalues: eig,
    })
}

/// `exp` of the Shannon entropy of `λ/Σλ`. A zero-sum spectrum has rank 0;
/// an exactly flat positive spectrum has rank exactly `d`.
fn effective_rank(eigenvalues: &[f64], d: usize) -> f64 {
    let sum: f64 = eigenvalues.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in eigenvalues {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return d as f64;
    }
    let mut entropy = 0.0;
    for &v in eigenvalues {
        if v > 0.0 {
            let p = v / sum;
            entropy -= p * p.ln();
        }
    }
    entropy.exp().min(d as f64)
}

// ── Mixed-variable mutual information ───────────────────────────────────

/// k-nearest-neighbor estimate of `I(z; c)` in nats between continuous
/// rows `z` and discrete labels `c` (see the module docs for the formula).
/// Requires `1 ≤ k < n`. Points whose label class has fewer than `k + 1`
/// members fall back to the largest usable neighbor count (`N_c − 1`);
/// singleton-class points carry no within-class geometry and are excluded
/// from the average.
pub fn mixed_ksg_mi(z: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if !z.is_matrix() || z.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "mixed_ksg_mi",
            detail: format!("{:?} embeddings with {} labels", z.shape(), labels.len()),
        });
    }
    let n = z.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArg {
            what: format!("neighbor count k must satisfy 1 <= k < n = {n}, got {k}"),
        });
    }
    if !z.all_finite() {
        return Err(Error::InvalidArg {
            what: "embeddings contain non-finite values".to_string(),
        });
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut class_sizes = vec![0usize; n_classes];
    for &c in labels {
        class_sizes[c] += 1;
    }

    let dist2 = |i: usize, j: usize| -> f64 {
        z.row_slice(i)
            .iter()
            .zip(z.row_slice(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    let mut used = 0usize;
    let mut sum_psi_k = 0.0;
    let mut sum_psi_class = 0.0;
    let mut sum_psi_m = 0.0;
    let mut same_class = Vec::new();
    for i in 0..n {
        let nc = class_sizes[labels[i]];
        if nc < 2 {
            // A lone representative of its class: no within-class neighbor
            // exists, so the point contributes nothing.
            continue;
        }
        let ki = k.min(nc - 1);
        same_class.clear();
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                same_class.push(dist2(i, j));
            }
        }
        same_class.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let rho2 = same_class[ki - 1];
        let (kk, m) = if rho2 > 0.0 {
            // Points of any class strictly inside the radius, plus i itself.
            let mut m = 1usize;
            for j in 0..n {
                if j != i && dist2(i, j) < rho2 {
                    m += 1;
                }
            }
            (ki, m)
        } else {
            // Exact ties: the k-th within-class neighbor coincides with i.
            // Count the points at distance exactly rho = 0 instead.
            let mut kk = 0usize;
            let mut m = 1usize;
            for j in 0..n {
                if j != i && dist2(i, j) == 0.0 {
                    m += 1;
                    if labels[j] == labels[i] {
                        kk += 1;
                    }
                }
            }
            (kk, m)
        };
        used += 1;
        sum_psi_k += digamma(kk as f64);
        sum_psi_class += digamma(nc as f64);
        sum_psi_m += digamma(m as f64);
    }
    if used == 0 {
        return Err(Error::InvalidArg {
            what: "every label class is a singleton; the estimate is undefined".to_string(),
        });
    }
    let inv = 1.0 / used as f64;
    Ok(digamma(used as f64) + inv * (sum_psi_k - sum_psi_class - sum_psi_m))
}

// ── Linear probe ────────────────────────────────────────────────────────

/// Accuracy report of an affine softmax probe on frozen embeddings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    /// Fraction of test samples whose true class tops the logits.
    pub top1: f64,
    /// Fraction whose true class is among the five largest logits.
    pub top5: f64,
    /// Top-1 accuracy per class; `None` for classes with no test samples.
    pub per_class: Vec<Option<f64>>,
    /// Classes that appear in the test split but never in training; their
    /// samples are counted as errors unconditionally.
    pub unseen_test_classes: Vec<usize>,
}

/// Trains an affine map plus softmax cross-entropy on the frozen training
/// embeddings by `epochs` full-batch gradient-descent steps at rate `lr`
/// (weights and bias start at zero; the objective is convex), then scores
/// the test embeddings. Ties in the logits rank the lower class index
/// first.
pub fn linear_probe(
    train_embs: &Tensor,
    train_labels: &[usize],
    test_embs: &Tensor,
    test_labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<ProbeReport> {
    if !train_embs.is_matrix()
        || !test_embs.is_matrix()
        || train_embs.cols() != test_embs.cols()
        || train_embs.rows() != train_labels.len()
        || test_embs.rows() != test_labels.len()
    {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            detail: format!(
                "train {:?}/{} labels, test {:?}/{} labels",
                train_embs.shape(),
                train_labels.len(),
                test_embs.shape(),
                test_labels.len()
            ),
        });
    }
    if train_labels.is_empty() || test_labels.is_empty() {
        return Err(Error::InvalidArg {
            what: "linear_probe needs nonempty train and test splits".to_string(),
        });
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidArg {
            what: format!("learning rate must be positive, got {lr}"),
        });
    }
    let d = train_embs.cols();
    let n_classes = train_labels
        .iter()
        .chain(test_labels.iter())
        .max()
        .map(|&m| m + 1)
        .unwrap();
    let train_classes: HashSet<usize> = train_labels.iter().copied().collect();

    let mut weight = Tensor::zeros(&[d, n_classes]);
    let mut bias = Tensor::zeros(&[1, n_classes]);
    let all = vec![true; train_labels.len() * n_classes];
    for _ in 0..epochs {
        let mut g = Graph::new();
        let x = g.constant(train_embs.clone());
        let w = g.param(weight.clone());
        let b = g.param(bias.clone());
        let scores = g.matmul(x, w)?;
        let logits = g.add_row(scores, b)?;
        // Cross-entropy: mean over rows of lse(logits) - logit[label].
        let lse = g.masked_row_logsumexp(logits, &all)?;
        let picked = g.gather_per_row(logits, train_labels)?;
        let diff = g.sub(lse, picked)?;
        let loss = g.mean(diff)?;
        let grads = g.backward(loss)?;
        for (value, grad) in [(&mut weight, grads.wrt(w)), (&mut bias, grads.wrt(b))] {
            for (v, gr) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * gr;
            }
        }
    }

    // Score the test split with the trained parameters.
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    let mut class_hits = vec![0usize; n_classes];
    let mut class_counts = vec![0usize; n_classes];
    let mut ranked: Vec<usize> = Vec::new();
    let top_k = n_classes.min(5);
    for (i, &label) in test_labels.iter().enumerate() {
        class_counts[label] += 1;
        if !train_classes.contains(&label) {
            continue; // Never trained on: always an error.
        }
        let row = test_embs.row_slice(i);
        let logits: Vec<f64> = (0..n_classes)
            .map(|c| {
                bias.at(0, c)
                    + row
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| v * weight.at(j, c))
                        .sum::<f64>()
            })
            .collect();
        ranked.clear();
        ranked.extend(0..n_classes);
        ranked.sort_by(|&a, &b| {
            logits[b]
                .partial_cmp(&logits[a])
                .expect("logits are finite")
                .then(a.cmp(&b))
        });
        if ranked[0] == label {
            top1_hits += 1;
            class_hits[label] += 1;
        }
        if ranked[..top_k].contains(&label) {
            top5_hits += 1;
        }
    }
    let n_test = test_labels.len() as f64;
    let mut unseen: Vec<usize> = (0..n_classes)
        .filter(|c| class_counts[*c] > 0 && !train_classes.contains(c))
        .collect();
    unseen.sort_unstable();
    Ok(ProbeReport {
        top1: top1_hits as f64 / n_test,
        top5: top5_hits as f64 / n_test,
        per_class: (0..n_classes)
            .map(|c| {
                (class_counts[c] > 0).then(|| class_hits[c] as f64 / class_counts[c] as f64)
            })
            .collect(),
        unseen_test_classes: unseen,
    })
}

// ── Ordinary least squares ──────────────────────────────────────────────

/// Slope, intercept, and Pearson correlation of a least-squares line fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

/// Ordinary least squares of `y` on `x`: `slope = cov(x, y) / var(x)`,
/// `intercept = ȳ − slope · x̄`, `r = cov / (sd_x · sd_y)`. Errors when
/// `x` has zero variance (the slope is undefined); a constant `y` yields
/// slope 0 and, by convention, `r = 0`.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArg {
            what: format!(
                "least squares needs two equal-length samples of at least 2 points, got {} and {}",
                x.len(),
                y.len()
            ),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::InvalidArg {
            what: "regressor has zero variance; the slope is undefined".to_string(),
        });
    }
    let slope = sxy / sxx;
    let r = if syy == 0.0 {
        0.0
    } else {
        sxy / (sxx.sqrt() * syy.sqrt())
    };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

// ── Uncertainty regression ──────────────────────────────────────────────

/// Per-sample posterior spread statistics regressed against soft-label
/// entropy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UncertaintyReport {
    /// `log det K = Σ_j log σ_j²` per sample.
    pub log_det: Vec<f64>,
    /// `tr K = Σ_j σ_j²` per sample.
    pub trace: Vec<f64>,
    /// Soft-label entropy `H = −Σ_c p_c ln p_c` per sample.
    pub entropy: Vec<f64>,
    /// Least squares of `log_det` on `entropy`.
    pub log_det_fit: LineFit,
    /// Least squares of `trace` on `entropy`.
    pub trace_fit: LineFit,
    /// Mean `log_det` per class (class = soft-label argmax, ties to the
    /// lower index); `None` for classes with no samples.
    pub class_mean_log_det: Vec<Option<f64>>,
    /// Mean `trace` per class, same grouping.
    pub class_mean_trace: Vec<Option<f64>>,
}

/// Regresses posterior spread on label ambiguity: computes per-sample
/// `log det K`, `tr K`, and soft-label entropy, fits both spreads against
/// the entropy by ordinary least squares, and groups means by the
/// soft-label argmax class. Soft rows must be nonnegative and sum to 1
/// within 1e-6. Errors when the entropies have zero variance.
pub fn uncertainty_regression(
    params: &[PosteriorParams],
    soft_labels: &[Vec<f64>],
) -> Result<UncertaintyReport> {
    if params.len() != soft_labels.len() || params.len() < 2 {
        return Err(Error::InvalidArg {
            what: format!(
                "need matching posterior/soft-label lists of at least 2 samples, got {} and {}",
                params.len(),
                soft_labels.len()
            ),
        });
    }
    let n_classes = soft_labels[0].len();
    let mut entropy = Vec::with_capacity(params.len());
    let mut argmax = Vec::with_capacity(params.len());
    for (i, row) in soft_labels.iter().enumerate() {
        if row.len() != n_classes {
            return Err(Error::ShapeMismatch {
                op: "uncertainty_regression",
                detail: format!(
                    "soft-label row {i} has {} classes, expected {n_classes}",
                    row.len()
                ),
            });
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArg {
                what: format!("soft-label row {i} is not a probability vector (sum {sum})"),
            });
        }
        let mut h = 0.0;
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate() {
            if p > 0.0 {
                h -= p * p.ln();
            }
            if p > row[best] {
                best = c;
            }
        }
        entropy.push(h);
        argmax.push(best);
    }
    let log_det: Vec<f64> = params.iter().map(log_det_cov).collect();
    let trace: Vec<f64> = params.iter().map(trace_cov).collect();
    let log_det_fit = ols_fit(&entropy, &log_det)?;
    let trace_fit = ols_fit(&entropy, &trace)?;

    let mut sums_ld = vec![0.0; n_classes];
    let mut sums_tr = vec![0.0; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &c) in argmax.iter().enumerate() {
        sums_ld[c] += log_det[i];
        sums_tr[c] += trace[i];
        counts[c] += 1;
    }
    let class_mean = |sums: &[f64]| -> Vec<Option<f64>> {
        sums.iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    };
    Ok(UncertaintyReport {
        class_mean_log_det: class_mean(&sums_ld),
        class_mean_trace: class_mean(&sums_tr),
        log_det,
        trace,
        entropy,
        log_det_fit,
        trace_fit,
    })
}

// ── KL generalization gap ───────────────────────────────────────────────

/// Mean dimension-normalized KL of the encoder posteriors over a dataset.
pub fn mean_normalized_kl(encoder: &MlpEncoder, data: &Dataset) -> Result<f64> {
    let params = encoder.encode(&data.features)?;
    Ok(params.iter().map(kl_normalized).sum::<f64>() / params.len() as f64)
}

/// Held-out minus training mean of the normalized KL regularizer. No
/// disjointness is enforced here, so identical splits give exactly 0; the
/// repeated experiment in [`gap_trend`] is where overlapping splits are
/// rejected.
pub fn kl_generalization_gap(
    encoder: &MlpEncoder,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<f64> {
    Ok(mean_normalized_kl(encoder, heldout)? - mean_normalized_kl(encoder, train)?)
}

/// Gap measurements at one training-set size.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapPoint {
    /// Training-set size.
    pub n: usize,
    /// One gap per seed, in seed order.
    pub gaps: Vec<f64>,
    /// Median of `|gap|` over the seeds.
    pub median_abs_gap: f64,
}

/// The full size sweep plus the fitted power law.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapTrend {
    pub points: Vec<GapPoint>,
    /// Least-squares slope of `ln median|gap|` against `ln n`; NaN if some
    /// median gap is exactly zero.
    pub slope_log_log: f64,
}

fn row_bits(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Repeats the gap experiment across training sizes and seeds: for each
/// `n` in `ns` and each seed, draws `n` pool rows (a seeded shuffle), trains
/// an encoder via `train_fn(subset, seed)`, and measures
/// [`kl_generalization_gap`] against the fixed held-out set. Requires at
/// least 4 strictly increasing sizes (for the log-log fit), a held-out set
/// of at least `10 · max(ns)` rows (a stable population proxy), and held-out
/// rows bitwise disjoint from the pool.
pub fn gap_trend<F>(
    pool: &Dataset,
    heldout: &Dataset,
    ns: &[usize],
    seeds: &[u64],
    train_fn: F,
) -> Result<GapTrend>
where
    F: Fn(&Dataset, u64) -> Result<MlpEncoder>,
{
    if ns.len() < 4 || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::InvalidArg {
            what: format!("need at least 4 strictly increasing positive sizes, got {ns:?}"),
        });
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArg {
            what: "need at least one seed".to_string(),
        });
    }
    let max_n = *ns.last().unwrap();
    if pool.rows() < max_n {
        return Err(Error::InvalidArg {
            what: format!("pool has {} rows, need at least {max_n}", pool.rows()),
        });
    }
    if heldout.rows() < 10 * max_n {
        return Err(Error::InvalidArg {
            what: format!(
                "held-out set has {} rows; a stable population proxy needs at least {}",
                heldout.rows(),
                10 * max_n
            ),
        });
    }
    let pool_rows: HashSet<Vec<u64>> = (0..pool.rows())
        .map(|i| row_bits(pool.features.row_slice(i)))
        .collect();
    for i in 0..heldout.rows() {
        if pool_rows.contains(&row_bits(heldout.features.row_slice(i))) {
            return Err(Error::InvalidArg {
                what: format!("held-out row {i} also appears in the training pool"),
            });
        }
    }

    let mut points = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut gaps = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            // One shuffle per (size, seed) pins the subset independently of
            // the other grid points.
            let mut order: Vec<usize> = (0..pool.rows()).collect();
            Prng::new(seed).derive(n as u64).shuffle(&mut order);
            let subset = pool.subset(&order[..n])?;
            let encoder = train_fn(&subset, seed)?;
            gaps.push(kl_generalization_gap(&encoder, &subset, heldout)?);
        }
        let mut abs: Vec<f64> = gaps.iter().map(|g| g.abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).expect("gaps are finite"));
        let mid = abs.len() / 2;
        let median = if abs.len() % 2 == 1 {
            abs[mid]
        } else {
            0.5 * (abs[mid - 1] + abs[mid])
        };
        points.push(GapPoint {
            n,
            gaps,
            median_abs_gap: median,
        });
    }
    let slope = if points.iter().any(|p| p.median_abs_gap == 0.0) {
        f64::NAN
    } else {
        let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.median_abs_gap.ln()).collect();
        ols_fit(&xs, &ys)?.slope
    };
    Ok(GapTrend {
        points,
        slope_log_log: slope,
    })
}

// ── Dispersion of posterior parameters ──────────────────────────────────

/// Mean and population standard deviation of `‖μ‖`, `log det K`, and
/// `tr K` over one set of posteriors.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DispersionStats {
    pub mu_norm_mean: f64,
    pub mu_norm_std: f64,
    pub log_det_mean: f64,
    pub log_det_std: f64,
    pub trace_mean: f64,
    pub trace_std: f64,
}

/// Dispersion of two posterior sets plus out/in ratios of the standard
/// deviations (1 when both are zero).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OodReport {
    pub in_dist: DispersionStats,
    pub out_dist: DispersionStats,
    pub std_ratio_mu_norm: f64,
    pub std_ratio_log_det: f64,
    pub std_ratio_trace: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn dispersion(params: &[PosteriorParams]) -> DispersionStats {
    let mu_norms: Vec<f64> = params.iter().map(|p| l2_norm(p.mu())).collect();
    let log_dets: Vec<f64> = params.iter().map(log_det_cov).collect();
    let traces: Vec<f64> = params.iter().map(trace_cov).collect();
    let (mu_norm_mean, mu_norm_std) = mean_std(&mu_norms);
    let (log_det_mean, log_det_std) = mean_std(&log_dets);
    let (trace_mean, trace_std) = mean_std(&traces);
    DispersionStats {
        mu_norm_mean,
        mu_norm_std,
        log_det_mean,
        log_det_std,
        trace_mean,
        trace_std,
    }
}

fn std_ratio(out: f64, inside: f64) -> f64 {
    if out == inside {
        // Covers the identical-sets case, including two zero spreads.
        1.0
    } else if inside == 0.0 {
        f64::INFINITY
    } else {
        out / inside
    }
}

/// Compares posterior-parameter dispersion between an in-distribution set
/// and a second (out-of-distribution) set: per-set mean and standard
/// deviation of `‖μ‖`, `log det K`, `tr K`, plus out/in ratios of the
/// standard deviations. Both sets must be nonempty.
pub fn ood_dispersion_report(
    params_in: &[PosteriorParams],
    params_out: &[PosteriorParams],
) -> Result<OodReport> {
    if params_in.is_empty() || params_out.is_empty() {
        return Err(Error::InvalidArg {
            what: "both posterior sets must be nonempty".to_string(),
        });
    }
    let in_dist = dispersion(params_in);
    let out_dist = dispersion(params_out);
    Ok(OodReport {
        std_ratio_mu_norm: std_ratio(out_dist.mu_norm_std, in_dist.mu_norm_std),
        std_ratio_log_det: std_ratio(out_dist.log_det_std, in_dist.log_det_std),
        std_ratio_trace: std_ratio(out_dist.trace_std, in_dist.trace_std),
        in_dist,
        out_dist,
    })
}
