//! Release gate for the toolkit: one test per shipping criterion, each
//! asserting a quantitative property at a stated tolerance and printing the
//! measured values. All checks are seeded and deterministic.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use vcl::data::{gen_gaussian_mixture, AugmentOp, AugmentPolicy, Dataset, MixtureSpec};
use vcl::diagnostics::{
    covariance_spectrum, gap_trend, linear_probe, mixed_ksg_mi, uncertainty_regression,
};
use vcl::encoder::{Activation, EncoderConfig, MlpEncoder};
use vcl::graph::{grad_check_multi, Graph, VarId};
use vcl::losses::{
    dist_nce_graph, info_nce_graph, kl_mean_graph, sup_con_graph, vsupcon_sup_graph,
};
use vcl::optimal_critic::{exact_rhs, mc_infonce_optimal_critic, DiscreteJoint};
use vcl::posterior::{kl_gaussian_to_std, mc_kl_pn_to_uniform, PosteriorParams};
use vcl::train::{Method, OptimizerKind, TrainConfig, Trainer};
use vcl::{Prng, Result, Tensor};

// ── shared toy-data helpers ─────────────────────────────────────────────

fn mixture(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    noise_std: f64,
    seed: u64,
) -> Dataset {
    let spec = MixtureSpec {
        n_per_class,
        input_dim: dim,
        n_classes,
        separation,
        noise_std,
    };
    gen_gaussian_mixture(&spec, &mut Prng::new(seed)).unwrap()
}

fn encoder_config(input: usize, hidden: usize, latent: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim: input,
        hidden_dims: vec![hidden],
        latent_dim: latent,
        activation: Activation::Tanh,
        spectral_bounds: None,
    }
}

fn train_config(
    method: Method,
    beta: f64,
    epochs: usize,
    batch_size: usize,
    augment: AugmentPolicy,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        method,
        tau: 0.5,
        beta,
        m_samples: 1,
        epochs,
        batch_size,
        optimizer: OptimizerKind::SgdMomentum {
            lr: 0.05,
            momentum: 0.9,
        },
        cosine_decay: true,
        augment,
        seed,
        sigma_zero_limit: false,
    }
}

fn noise_augment(std: f64) -> AugmentPolicy {
    AugmentPolicy {
        ops: vec![AugmentOp::VectorNoise { std }],
    }
}

fn train_encoder(data: &Dataset, config: TrainConfig, enc: EncoderConfig) -> MlpEncoder {
    let mut trainer = Trainer::new(config, enc).unwrap();
    trainer.fit(data, None).unwrap();
    trainer.into_encoder()
}

/// Builds the sphere-projected reparameterized samples for one view from
/// its stacked posterior parameter nodes and a fixed noise constant:
/// `normalize(mu + exp(log_var / 2) * eps)`, each posterior repeated `m`
/// times.
fn sampled_view(
    g: &mut Graph,
    mu: VarId,
    log_var: VarId,
    m: usize,
    eps: &Tensor,
) -> Result<VarId> {
    let half = g.affine(log_var, 0.5, 0.0)?;
    let sigma = g.exp(half)?;
    let mu_rep = g.repeat_rows(mu, m)?;
    let sigma_rep = g.repeat_rows(sigma, m)?;
    let eps_c = g.constant(eps.clone());
    let noise = g.mul(sigma_rep, eps_c)?;
    let shifted = g.add(mu_rep, noise)?;
    g.row_normalize(shifted)
}

/// Mean dimension-normalized KL of both views plus weight `beta`, as a
/// graph node: `beta * (kl_mean(view1) + kl_mean(view2)) / 2`.
fn weighted_kl_node(
    g: &mut Graph,
    mu1: VarId,
    lv1: VarId,
    mu2: VarId,
    lv2: VarId,
    beta: f64,
) -> Result<VarId> {
    let k1 = kl_mean_graph(g, mu1, lv1)?;
    let k2 = kl_mean_graph(g, mu2, lv2)?;
    let sum = g.add(k1, k2)?;
    g.affine(sum, 0.5 * beta, 0.0)
}

// ── criterion 1: gradients ──────────────────────────────────────────────

/// Analytic gradients of every loss match central finite differences to
/// 1e-4 relative error over 100 random configurations each.
#[test]
fn criterion_01_loss_gradients_match_finite_differences() {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const CONFIGS: usize = 100;
    let mut prng = Prng::new(0x0A11_5EED);
    let mut worst = vec![0.0f64; 6];

    for trial in 0..CONFIGS {
        let n = 2 + (trial % 3); // pairs per view
        let d = 2 + (trial % 4);
        let m = 1 + (trial % 2); // reparameterization samples
        let tau = 0.3 + 1.2 * prng.uniform();
        let beta = 0.1 + 0.9 * prng.uniform();
        let base_labels: Vec<usize> = (0..n).map(|_| prng.index(3)).collect();
        let labels2: Vec<usize> = base_labels.iter().chain(base_labels.iter()).copied().collect();

        let raw = prng.gaussian_tensor(&[2 * n, d]);
        let mu1 = prng.gaussian_tensor(&[n, d]);
        let mu2 = prng.gaussian_tensor(&[n, d]);
        let lv_vals = |p: &mut Prng| -> Vec<f64> {
            (0..n * d).map(|_| -1.5 + 2.5 * p.uniform()).collect()
        };
        let lv1 = Tensor::new(&[n, d], lv_vals(&mut prng));
        let lv2 = Tensor::new(&[n, d], lv_vals(&mut prng));
        let eps1 = prng.gaussian_tensor(&[n * m, d]);
        let eps2 = prng.gaussian_tensor(&[n * m, d]);
        let eps1s = prng.gaussian_tensor(&[n, d]);
        let eps2s = prng.gaussian_tensor(&[n, d]);

        // Pairwise contrastive loss on normalized rows.
        let err = grad_check_multi(
            |g, ids| {
                let z = g.row_normalize(ids[0])?;
                info_nce_graph(g, z, n, tau)
            },
            &[raw.clone()],
            H,
        )
        .unwrap();
        worst[0] = worst[0].max(err);

        // Supervised contrastive loss on normalized rows.
        let err = grad_check_multi(
            |g, ids| {
                let z = g.row_normalize(ids[0])?;
                sup_con_graph(g, z, &labels2, tau)
            },
            &[raw.clone()],
            H,
        )
        .unwrap();
        worst[1] = worst[1].max(err);

        // Variational pairwise loss: contrastive over sampled embeddings
        // plus the weighted KL regularizer, differentiated end to end.
        let err = grad_check_multi(
            |g, ids| {
                let z1 = sampled_view(g, ids[0], ids[1], m, &eps1)?;
                let z2 = sampled_view(g, ids[2], ids[3], m, &eps2)?;
                let emb = g.vcat(z1, z2)?;
                let nce = info_nce_graph(g, emb, n * m, tau)?;
                let kl = weighted_kl_node(g, ids[0], ids[1], ids[2], ids[3], beta)?;
                g.add(nce, kl)
            },
            &[mu1.clone(), lv1.clone(), mu2.clone(), lv2.clone()],
            H,
        )
        .unwrap();
        worst[2] = worst[2].max(err);

        // Variational supervised loss (single sample per posterior).
        let err = grad_check_multi(
            |g, ids| {
                let z1 = sampled_view(g, ids[0], ids[1], 1, &eps1s)?;
                let z2 = sampled_view(g, ids[2], ids[3], 1, &eps2s)?;
                let emb = g.vcat(z1, z2)?;
                let sup = vsupcon_sup_graph(g, emb, &labels2, n, tau)?;
                let kl = weighted_kl_node(g, ids[0], ids[1], ids[2], ids[3], beta)?;
                g.add(sup, kl)
            },
            &[mu1.clone(), lv1.clone(), mu2.clone(), lv2.clone()],
            H,
        )
        .unwrap();
        worst[3] = worst[3].max(err);

        // Parameter-space contrastive loss (no sampling).
        let err = grad_check_multi(
            |g, ids| dist_nce_graph(g, ids[0], ids[1], ids[2], ids[3], tau),
            &[mu1.clone(), lv1.clone(), mu2.clone(), lv2.clone()],
            H,
        )
        .unwrap();
        worst[4] = worst[4].max(err);

        // KL regularizer alone.
        let err = grad_check_multi(
            |g, ids| kl_mean_graph(g, ids[0], ids[1]),
            &[mu1.clone(), lv1.clone()],
            H,
        )
        .unwrap();
        worst[5] = worst[5].max(err);
    }

    let names = [
        "pairwise", "supervised", "variational", "var-supervised", "param-space", "kl",
    ];
    for (name, &w) in names.iter().zip(&worst) {
        assert!(w <= TOL, "{name}: worst relative gradient error {w:.3e} exceeds {TOL:.0e}");
    }
    println!(
        "PASS criterion 1: worst relative gradient errors {:?} over {CONFIGS} configs each",
        worst
            .iter()
            .map(|w| format!("{w:.2e}"))
            .collect::<Vec<_>>()
    );
}

// ── criterion 2: closed-form KL vs Monte Carlo ──────────────────────────

/// The closed-form diagonal-Gaussian KL to the standard normal matches a
/// 1e6-sample Monte-Carlo estimate of `E_q[log q - log p]` within 0.01 on
/// 20 random parameter sets, and is exactly zero at the standard normal.
#[test]
fn criterion_02_closed_form_gaussian_kl_matches_monte_carlo() {
    const SAMPLES: usize = 1_000_000;
    let mut prng = Prng::new(0x2002);
    let mut worst = 0.0f64;

    for trial in 0..20 {
        let d = 2 + (trial % 5);
        let mu: Vec<f64> = (0..d).map(|_| -1.0 + 2.0 * prng.uniform()).collect();
        let log_var: Vec<f64> = (0..d).map(|_| -1.0 + 1.7 * prng.uniform()).collect();
        let params = PosteriorParams::new(mu.clone(), log_var.clone()).unwrap();
        let closed = kl_gaussian_to_std(&params);

        let sigma = params.sigma();
        let mut sum = 0.0;
        for _ in 0..SAMPLES {
            // log q(x) - log p(x) = (x^2 - eps^2 - log_var) / 2 summed
            // over dimensions, with x = mu + sigma * eps.
            let mut term = 0.0;
            for j in 0..d {
                let eps = prng.normal();
                let x = mu[j] + sigma[j] * eps;
                term += x * x - eps * eps - log_var[j];
            }
            sum += 0.5 * term;
        }
        let mc = sum / SAMPLES as f64;
        let diff = (closed - mc).abs();
        worst = worst.max(diff);
        assert!(
            diff <= 0.01,
            "trial {trial} (d={d}): closed {closed:.5} vs MC {mc:.5}, |diff| {diff:.5}"
        );
    }

    for d in [1, 2, 5, 16] {
        let zero = kl_gaussian_to_std(&PosteriorParams::standard(d));
        assert_eq!(zero, 0.0, "KL at the standard normal must be exactly zero (d={d})");
    }
    println!("PASS criterion 2: worst |closed - MC| = {worst:.5} over 20 params (tol 0.01)");
}

// ── criterion 3: projected KL bounded by Gaussian KL ────────────────────

/// In d=2 the binned Monte-Carlo estimate of the sphere-projected KL never
/// exceeds the closed-form Gaussian KL plus three standard errors plus the
/// plug-in bias bound, across 20 random parameter sets.
#[test]
fn criterion_03_projected_kl_obeys_gaussian_upper_bound() {
    let mut prng = Prng::new(0x3003);
    let mut max_ratio = f64::NEG_INFINITY;
    for trial in 0..20 {
        let mu: Vec<f64> = (0..2).map(|_| -1.5 + 3.0 * prng.uniform()).collect();
        let log_var: Vec<f64> = (0..2).map(|_| -1.5 + 2.0 * prng.uniform()).collect();
        let params = PosteriorParams::new(mu, log_var).unwrap();
        let upper = kl_gaussian_to_std(&params);
        let mc = mc_kl_pn_to_uniform(&params, 200_000, 64, &mut prng).unwrap();
        let allowance = 3.0 * (mc.std_error + mc.bias_bound);
        assert!(
            mc.estimate <= upper + allowance,
            "trial {trial}: projected KL {:.4} exceeds Gaussian bound {upper:.4} + {allowance:.4}",
            mc.estimate
        );
        max_ratio = max_ratio.max(mc.estimate / (upper + allowance));
    }
    println!(
        "PASS criterion 3: projected KL <= Gaussian KL + 3(SE + bias) on 20 params \
         (tightest estimate/bound ratio {max_ratio:.3})"
    );
}

// ── criterion 4: bound gap shrinks with batch size ──────────────────────

/// On the two-symbol benchmark joint, the Monte-Carlo contrastive bound at
/// N=1024 sits closer to the exact population limit than at N=4, and
/// within `3 SE + 2/N` of it (1e4 trials each).
#[test]
fn criterion_04_bound_gap_shrinks_with_batch_size() {
    let joint = DiscreteJoint::benchmark(2).unwrap();
    let exact = exact_rhs(&joint).unwrap();
    let root = Prng::new(0x4004);
    let (est_small, _se_small) = mc_infonce_optimal_critic(&joint, 4, 10_000, &root.derive(4)).unwrap();
    let (est_large, se_large) =
        mc_infonce_optimal_critic(&joint, 1024, 10_000, &root.derive(1024)).unwrap();
    let gap_small = (est_small - exact).abs();
    let gap_large = (est_large - exact).abs();
    assert!(
        gap_large < gap_small,
        "gap at N=1024 ({gap_large:.5}) should be below the gap at N=4 ({gap_small:.5})"
    );
    let allowance = 3.0 * se_large + 2.0 / 1024.0;
    assert!(
        gap_large <= allowance,
        "gap at N=1024 ({gap_large:.5}) exceeds 3 SE + 2/N = {allowance:.5}"
    );
    println!(
        "PASS criterion 4: exact {exact:.5}; gap N=4 {gap_small:.5} -> gap N=1024 {gap_large:.6} \
         (allowance {allowance:.5})"
    );
}

// ── criterion 5: zero-variance reduction ────────────────────────────────

/// With `beta = 0` and the zero-variance limit enabled, the variational
/// pairwise trainer reproduces the plain pairwise trainer's loss trace
/// within 1e-8 at every epoch of a 30-epoch run.
#[test]
fn criterion_05_zero_variance_limit_reproduces_plain_training() {
    let data = mixture(64, 4, 8, 4.0, 1.0, 13);
    let enc = encoder_config(8, 32, 8);
    let mut variational = train_config(Method::VSimClr, 0.0, 30, 64, noise_augment(0.5), 3);
    variational.sigma_zero_limit = true;
    let plain = train_config(Method::SimClr, 0.0, 30, 64, noise_augment(0.5), 3);

    let mut t1 = Trainer::new(variational, enc.clone()).unwrap();
    let out1 = t1.fit(&data, None).unwrap();
    let mut t2 = Trainer::new(plain, enc).unwrap();
    let out2 = t2.fit(&data, None).unwrap();

    assert_eq!(out1.records.len(), 30);
    assert_eq!(out2.records.len(), 30);
    let mut worst = 0.0f64;
    for (a, b) in out1.records.iter().zip(&out2.records) {
        let diff = (a.loss - b.loss).abs();
        worst = worst.max(diff);
        assert!(
            diff <= 1e-8,
            "epoch {}: variational {} vs plain {} differ by {diff:.3e}",
            a.epoch,
            a.loss,
            b.loss
        );
    }
    println!("PASS criterion 5: worst per-epoch loss difference {worst:.2e} over 30 epochs (tol 1e-8)");
}

// ── criterion 6: rank-collapse mitigation ───────────────────────────────

/// Under aggressive augmentation on a 4-class mixture, the variational
/// method's embedding effective rank is at least 1.2x the plain method's,
/// median over 5 seeds (16-dimensional embeddings).
#[test]
fn criterion_06_variational_training_mitigates_rank_collapse() {
    let data = mixture(128, 4, 8, 4.0, 1.0, 90);
    let augment = AugmentPolicy {
        ops: vec![
            AugmentOp::VectorNoise { std: 2.5 },
            AugmentOp::VectorDropout { rate: 0.3 },
        ],
    };
    let rank_of = |encoder: &MlpEncoder| -> f64 {
        let z = encoder.embed(&data.features).unwrap();
        covariance_spectrum(&z).unwrap().effective_rank
    };

    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let variational = train_encoder(
            &data,
            train_config(Method::VSimClr, 2.0, 40, 64, augment.clone(), seed),
            encoder_config(8, 32, 16),
        );
        let plain = train_encoder(
            &data,
            train_config(Method::SimClr, 0.0, 40, 64, augment.clone(), seed),
            encoder_config(8, 32, 16),
        );
        let (rv, rp) = (rank_of(&variational), rank_of(&plain));
        ratios.push(rv / rp);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[2];
    assert!(
        median >= 1.2,
        "median effective-rank ratio {median:.3} below 1.2 (per-seed {ratios:?})"
    );
    println!(
        "PASS criterion 6: median effective-rank ratio {median:.3} over 5 seeds \
         (sorted {:?})",
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
    );
}

// ── criterion 7: linear-probe quality ───────────────────────────────────

/// On a separable 4-class mixture (8 input dims, 2048 train / 512 test,
/// 100 epochs), the variational pairwise method reaches probe top-1 >= 0.90
/// and the variational supervised method >= 0.95.
#[test]
fn criterion_07_linear_probe_quality_on_separable_mixture() {
    let full = mixture(640, 4, 8, 4.0, 1.0, 41);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..4 {
        for i in 0..640 {
            if i < 512 {
                train_idx.push(c * 640 + i);
            } else {
                test_idx.push(c * 640 + i);
            }
        }
    }
    let train = full.subset(&train_idx).unwrap();
    let test = full.subset(&test_idx).unwrap();
    assert_eq!(train.rows(), 2048);
    assert_eq!(test.rows(), 512);

    let probe = |method: Method| -> f64 {
        let encoder = train_encoder(
            &train,
            train_config(method, 0.25, 100, 64, noise_augment(0.5), 7),
            encoder_config(8, 32, 8),
        );
        let ztr = encoder.embed(&train.features).unwrap();
        let zte = encoder.embed(&test.features).unwrap();
        linear_probe(&ztr, &train.labels, &zte, &test.labels, 300, 0.5)
            .unwrap()
            .top1
    };

    let pairwise = probe(Method::VSimClr);
    let supervised = probe(Method::VSupCon);
    assert!(pairwise >= 0.90, "variational pairwise top-1 {pairwise:.4} below 0.90");
    assert!(supervised >= 0.95, "variational supervised top-1 {supervised:.4} below 0.95");
    println!(
        "PASS criterion 7: probe top-1 pairwise {pairwise:.4} (>= 0.90), \
         supervised {supervised:.4} (>= 0.95)"
    );
}

// ── criterion 8: MI estimator sanity ────────────────────────────────────

/// The mixed-label MI estimator reads near zero under independence and
/// near ln 4 on four deterministic clusters (both within 0.05 nats).
#[test]
fn criterion_08_mi_estimator_sanity() {
    let mut prng = Prng::new(0x8008);
    let n = 4000;
    let z = prng.gaussian_tensor(&[n, 3]);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let independent = mixed_ksg_mi(&z, &labels, 5).unwrap();
    assert!(
        independent.abs() < 0.05,
        "independent MI should vanish, got {independent:.4}"
    );

    let mut cluster_prng = Prng::new(0x8009);
    let per_class = 500;
    let d = 4;
    let mut rows = Vec::with_capacity(4 * per_class * d);
    let mut cluster_labels = Vec::with_capacity(4 * per_class);
    for c in 0..4 {
        for _ in 0..per_class {
            for j in 0..d {
                let center = if j == c { 1.0 } else { 0.0 };
                rows.push(center + 0.01 * cluster_prng.normal());
            }
            cluster_labels.push(c);
        }
    }
    let clusters = Tensor::new(&[4 * per_class, d], rows);
    let clustered = mixed_ksg_mi(&clusters, &cluster_labels, 5).unwrap();
    let target = (4.0f64).ln();
    assert!(
        (clustered - target).abs() <= 0.05,
        "clustered MI {clustered:.4} not within 0.05 of ln 4 = {target:.4}"
    );
    println!(
        "PASS criterion 8: independent MI {independent:+.4}, clustered MI {clustered:.4} \
         vs ln 4 = {target:.4} (tol 0.05)"
    );
}

// ── criterion 9: KL generalization gap trend ────────────────────────────

/// The median absolute KL generalization gap over 10 seeds is
/// non-increasing across training-set sizes 64, 256, 1024, 4096. Every
/// training run gets the same optimizer-step budget so only the sample
/// size varies.
#[test]
fn criterion_09_kl_generalization_gap_shrinks_with_train_size() {
    // One mixture split per class block, so pool and held-out rows share
    // class centers and differ only by the draw.
    let full = mixture(11264, 4, 8, 4.0, 1.0, 50);
    let mut pool_idx = Vec::new();
    let mut held_idx = Vec::new();
    for c in 0..4 {
        for i in 0..11264 {
            if i < 1024 {
                pool_idx.push(c * 11264 + i);
            } else {
                held_idx.push(c * 11264 + i);
            }
        }
    }
    let pool = full.subset(&pool_idx).unwrap();
    let heldout = full.subset(&held_idx).unwrap();

    let ns = [64usize, 256, 1024, 4096];
    let seeds: Vec<u64> = (0..10).collect();
    let batch = 32usize;
    let target_steps = 256usize;
    let trend = gap_trend(&pool, &heldout, &ns, &seeds, |subset, seed| {
        let per_epoch = (subset.rows() / batch).max(1);
        let epochs = (target_steps / per_epoch).max(1);
        let config = train_config(Method::VSimClr, 0.25, epochs, batch, noise_augment(0.5), seed);
        let mut trainer = Trainer::new(config, encoder_config(8, 16, 4))?;
        trainer.fit(subset, None)?;
        Ok(trainer.into_encoder())
    })
    .unwrap();

    let medians: Vec<f64> = trend.points.iter().map(|p| p.median_abs_gap).collect();
    for w in medians.windows(2) {
        assert!(
            w[1] <= w[0],
            "median |gap| increased along the size sweep: {medians:?}"
        );
    }
    println!(
        "PASS criterion 9: median |gap| {:?} over sizes {ns:?} (log-log slope {:.2})",
        medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
        trend.slope_log_log
    );
}

// ── criterion 10: uncertainty regression ────────────────────────────────

/// The entropy-vs-log-determinant regression recovers an exactly linear
/// relation to 1e-10 and reports a negative slope with r < -0.5 on a noisy
/// anti-correlated construction.
#[test]
fn criterion_10_uncertainty_regression_recovers_slopes() {
    // Exact line: soft labels with varying confidence; each posterior's
    // log-determinant is set to exactly -2 * entropy + 1 by writing that
    // value into a single log-variance coordinate.
    let entropy_of = |row: &[f64]| -> f64 {
        let mut h = 0.0;
        for &v in row {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        h
    };
    let confidences = [0.4, 0.55, 0.7, 0.85, 0.95];
    let mut soft = Vec::new();
    let mut params = Vec::new();
    for &p in &confidences {
        let rest = (1.0 - p) / 2.0;
        let row = vec![p, rest, rest];
        let target = -2.0 * entropy_of(&row) + 1.0;
        soft.push(row);
        params.push(PosteriorParams::new(vec![0.1, -0.2], vec![target, 0.0]).unwrap());
    }
    let report = uncertainty_regression(&params, &soft).unwrap();
    let slope_err = (report.log_det_fit.slope - (-2.0)).abs();
    let intercept_err = (report.log_det_fit.intercept - 1.0).abs();
    assert!(
        slope_err <= 1e-10,
        "exact-line slope error {slope_err:.3e} exceeds 1e-10"
    );
    assert!(
        intercept_err <= 1e-10,
        "exact-line intercept error {intercept_err:.3e} exceeds 1e-10"
    );
    assert!((report.log_det_fit.r + 1.0).abs() <= 1e-10);

    // Noisy anti-correlated construction: higher label entropy comes with
    // lower log-determinant plus seeded noise.
    let mut prng = Prng::new(0xA00A);
    let mut noisy_soft = Vec::new();
    let mut noisy_params = Vec::new();
    for i in 0..40 {
        let p = 0.34 + 0.64 * (i as f64 / 39.0);
        let rest = (1.0 - p) / 2.0;
        let mut row = vec![rest; 3];
        row[i % 3] = p;
        let target = -1.5 * entropy_of(&row) + 0.25 * prng.normal();
        noisy_soft.push(row);
        noisy_params.push(PosteriorParams::new(vec![0.3, 0.0], vec![target, 0.0]).unwrap());
    }
    let noisy = uncertainty_regression(&noisy_params, &noisy_soft).unwrap();
    assert!(
        noisy.log_det_fit.slope < 0.0,
        "anti-correlated slope should be negative, got {:.4}",
        noisy.log_det_fit.slope
    );
    assert!(
        noisy.log_det_fit.r < -0.5,
        "anti-correlated r should be below -0.5, got {:.4}",
        noisy.log_det_fit.r
    );
    println!(
        "PASS criterion 10: exact-line slope error {slope_err:.1e}; noisy fit slope {:.3}, \
         r {:.3}",
        noisy.log_det_fit.slope, noisy.log_det_fit.r
    );
}

// ── criterion 11: CLI determinism ───────────────────────────────────────

struct CliRun {
    stdout: Vec<u8>,
    files: Vec<Vec<u8>>,
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcl"))
        .args(args)
        .output()
        .expect("binary should launch")
}

/// Runs one subcommand, captures stdout plus the named output files, then
/// deletes those files so a rerun starts clean.
fn capture(args: &[&str], outputs: &[&PathBuf]) -> CliRun {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let files = outputs
        .iter()
        .map(|p| {
            let bytes = fs::read(p).unwrap_or_else(|_| panic!("missing output {}", p.display()));
            fs::remove_file(p).unwrap();
            bytes
        })
        .collect();
    CliRun {
        stdout: out.stdout,
        files,
    }
}

fn assert_identical(name: &str, args: &[&str], outputs: &[&PathBuf]) {
    let first = capture(args, outputs);
    let second = capture(args, outputs);
    assert_eq!(first.stdout, second.stdout, "{name}: stdout differs between reruns");
    for (i, (a, b)) in first.files.iter().zip(&second.files).enumerate() {
        assert_eq!(a, b, "{name}: output file {i} differs between reruns");
    }
}

/// Every subcommand, run twice with identical argv, produces byte-identical
/// standard output and output files.
#[test]
fn criterion_11_cli_subcommands_are_deterministic() {
    let dir = std::env::temp_dir().join("vcl-acceptance-cli");
    fs::create_dir_all(&dir).unwrap();
    let p = |name: &str| dir.join(name);
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();

    // Fixtures (not themselves under test here).
    let data = p("data.csv");
    let test_data = p("test.csv");
    let ood_data = p("ood.csv");
    let ck = p("enc.ckpt");
    let soft = p("soft.csv");
    for (path, seed, per_class) in [(&data, "1", "24"), (&test_data, "2", "8"), (&ood_data, "9", "24")] {
        let out = cli(&[
            "synth", "--classes", "2", "--per-class", per_class, "--dim", "4", "--separation",
            "6", "--seed", seed, "--out", &s(path),
        ]);
        assert!(out.status.success());
    }
    let out = cli(&[
        "train", "--data", &s(&data), "--epochs", "2", "--batch-size", "16", "--hidden-dims",
        "16", "--latent-dim", "4", "--seed", "5", "--checkpoint", &s(&ck),
    ]);
    assert!(out.status.success());
    fs::write(&soft, "0.9,0.1\n0.6,0.4\n".repeat(24)).unwrap();

    // synth
    let synth_out = p("synth-out.csv");
    assert_identical(
        "synth",
        &[
            "synth", "--classes", "3", "--per-class", "6", "--dim", "5", "--seed", "21", "--out",
            &s(&synth_out),
        ],
        &[&synth_out],
    );

    // train
    let ck2 = p("enc2.ckpt");
    let metrics = p("metrics.jsonl");
    assert_identical(
        "train",
        &[
            "train", "--data", &s(&data), "--epochs", "2", "--batch-size", "16", "--hidden-dims",
            "16", "--latent-dim", "4", "--seed", "8", "--checkpoint", &s(&ck2), "--out",
            &s(&metrics),
        ],
        &[&ck2, &metrics],
    );

    // probe
    let probe_json = p("probe.json");
    assert_identical(
        "probe",
        &[
            "probe", "--data", &s(&data), "--test-data", &s(&test_data), "--checkpoint", &s(&ck),
            "--epochs", "120", "--out", &s(&probe_json),
        ],
        &[&probe_json],
    );

    // spectrum
    let spec_json = p("spectrum.json");
    let eig_csv = p("eig.csv");
    assert_identical(
        "spectrum",
        &[
            "spectrum", "--data", &s(&data), "--checkpoint", &s(&ck), "--csv", &s(&eig_csv),
            "--out", &s(&spec_json),
        ],
        &[&spec_json, &eig_csv],
    );

    // mi
    let mi_json = p("mi.json");
    assert_identical(
        "mi",
        &["mi", "--data", &s(&data), "--checkpoint", &s(&ck), "--k", "3", "--out", &s(&mi_json)],
        &[&mi_json],
    );

    // uncertainty
    let unc_json = p("uncertainty.json");
    assert_identical(
        "uncertainty",
        &[
            "uncertainty", "--data", &s(&data), "--checkpoint", &s(&ck), "--soft-labels",
            &s(&soft), "--out", &s(&unc_json),
        ],
        &[&unc_json],
    );

    // prop1
    let sweep_json = p("sweep.json");
    assert_identical(
        "prop1",
        &[
            "prop1", "--alphabet", "2", "--ns", "4,16,64", "--trials", "300", "--seed", "1",
            "--out", &s(&sweep_json),
        ],
        &[&sweep_json],
    );

    // gap (pool and held-out reuse the synth fixtures)
    let held = p("held.csv");
    let out = cli(&[
        "synth", "--classes", "2", "--per-class", "170", "--dim", "4", "--separation", "6",
        "--seed", "33", "--out", &s(&held),
    ]);
    assert!(out.status.success());
    let gap_json = p("gap.json");
    assert_identical(
        "gap",
        &[
            "gap", "--data", &s(&data), "--heldout", &s(&held), "--ns", "4,8,16,32",
            "--seed-count", "2", "--epochs", "1", "--batch-size", "4", "--hidden-dims", "8",
            "--latent-dim", "3", "--out", &s(&gap_json),
        ],
        &[&gap_json],
    );

    // ood
    let ood_json = p("ood.json");
    assert_identical(
        "ood",
        &[
            "ood", "--data", &s(&data), "--ood-data", &s(&ood_data), "--checkpoint", &s(&ck),
            "--out", &s(&ood_json),
        ],
        &[&ood_json],
    );

    println!("PASS criterion 11: all 9 subcommands byte-identical across reruns");
}
