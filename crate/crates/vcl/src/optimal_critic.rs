//! Bound-tightness verification on small discrete alphabets.
//!
//! With the likelihood-ratio critic `ψ⋆(z, z′) = log p(z′|z)/p(z′)` — the
//! critic that minimizes the contrastive objective — the InfoNCE value
//! satisfies
//!
//! ```text
//! −I_NCE + log N  →  E_{q(z) p(z′|z)}[ log p(z′|z) / p_marg(z′) ]   (N → ∞)
//! ```
//!
//! i.e. the bound becomes tight at the mutual information of the pair
//! distribution. On a finite alphabet both sides are computable: the
//! right-hand side by exact enumeration ([`exact_rhs`]), the left by Monte
//! Carlo over batches with one positive and `N − 1` marginal negatives
//! ([`mc_infonce_optimal_critic`]). [`convergence_check`] sweeps the batch
//! size and asserts the gap shrinks, turning the asymptotic statement into
//! a falsifiable test: the absolute gap at the largest `N` must not exceed
//! the gap at the smallest `N` by more than the combined Monte-Carlo noise
//! (3 standard errors) — the deterministic part of the gap is `O(1/N)` and
//! can only shrink.
//!
//! Sampling uses one derived random stream per trial, so results are
//! reproducible and independent of evaluation order.

use crate::error::{Error, Result};
use crate::prng::Prng;

// ── Pair distribution on a finite alphabet ──────────────────────────────

/// A joint distribution over anchor/partner symbol pairs, stored as the
/// anchor marginal `q(z)` and the row-stochastic conditional `p(z′|z)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscreteJoint {
    q: Vec<f64>,
    cond: Vec<Vec<f64>>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::InvalidArg {
            what: format!("{what} has negative or non-finite entries"),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArg {
            what: format!("{what} sums to {sum}, not 1"),
        });
    }
    Ok(())
}

impl DiscreteJoint {
    /// Validates and stores an anchor marginal plus a conditional matrix:
    /// `q` and every row of `cond` must be probability vectors (sum 1
    /// within 1e-12, entries nonnegative) over the same alphabet.
    pub fn new(q: Vec<f64>, cond: Vec<Vec<f64>>) -> Result<DiscreteJoint> {
        let k = q.len();
        if k == 0 || cond.len() != k || cond.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidArg {
                what: format!(
                    "need a length-K marginal with a K x K conditional, got {} and {}x{:?}",
                    k,
                    cond.len(),
                    cond.first().map(|r| r.len())
                ),
            });
        }
        check_distribution(&q, "anchor marginal")?;
        for (i, row) in cond.iter().enumerate() {
            check_distribution(row, &format!("conditional row {i}"))?;
        }
        Ok(DiscreteJoint { q, cond })
    }

    /// A well-separated test distribution: uniform anchors whose partner
    /// stays on the same symbol with probability 0.8 (0.9 for K = 2) and
    /// spreads the rest evenly. `K = 1` is the trivial single-symbol pair.
    pub fn benchmark(k: usize) -> Result<DiscreteJoint> {
        if k == 0 {
            return Err(Error::InvalidArg {
                what: "alphabet size must be positive".to_string(),
            });
        }
        let q = vec![1.0 / k as f64; k];
        let (stay, spread) = match k {
            1 => (1.0, 0.0),
            2 => (0.9, 0.1),
            _ => (0.8, 0.2 / (k - 1) as f64),
        };
        let cond = (0..k)
            .map(|z| {
                (0..k)
                    .map(|zp| if zp == z { stay } else { spread })
                    .collect()
            })
            .collect();
        DiscreteJoint::new(q, cond)
    }

    /// Alphabet size.
    pub fn alphabet(&self) -> usize {
        self.q.len()
    }

    /// Anchor marginal `q(z)`.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Conditional row `p(·|z)`.
    pub fn cond_row(&self, z: usize) -> &[f64] {
        &self.cond[z]
    }

    /// Partner marginal `p_marg(z′) = Σ_z q(z) p(z′|z)`.
    pub fn marginal(&self) -> Vec<f64> {
        let k = self.q.len();
        let mut marg = vec![0.0; k];
        for (z, row) in self.cond.iter().enumerate() {
            for (zp, &p) in row.iter().enumerate() {
                marg[zp] += self.q[z] * p;
            }
        }
        marg
    }
}

// ── Exact right-hand side ───────────────────────────────────────────────

/// The limit value by exact enumeration:
/// `Σ_{z,z′} q(z) p(z′|z) log(p(z′|z)/p_marg(z′))`, the mutual information
/// of the pair distribution. Zero-probability pairs contribute nothing; a
/// positive-probability pair whose partner has zero marginal mass is
/// impossible for a valid joint and reported as an error defensively.
pub fn exact_rhs(joint: &DiscreteJoint) -> Result<f64> {
    let marg = joint.marginal();
    let mut total = 0.0;
    for z in 0..joint.alphabet() {
        for (zp, &p_cond) in joint.cond_row(z).iter().enumerate() {
            let w = joint.q()[z] * p_cond;
            if w > 0.0 {
                if marg[zp] <= 0.0 {
                    return Err(Error::InvalidArg {
                        what: format!(
                            "pair ({z}, {zp}) has positive probability but zero marginal mass"
                        ),
                    });
                }
                total += w * (p_cond / marg[zp]).ln();
            }
        }
    }
    Ok(total)
}

// ── Monte-Carlo estimate with the likelihood-ratio critic ───────────────

/// Draws one index from a probability vector by inverse transform; never
/// returns a zero-probability index (cumulative rounding at the top end
/// falls back to the last positive entry).
fn sample_discrete(probs: &[f64], prng: &mut Prng) -> usize {
    let u = prng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// One batch's contrastive value under scores `s`, first entry positive:
/// `log N + s_1 − logsumexp(s)`. `−∞` scores (zero-probability negatives)
/// simply drop out of the sum.
fn infonce_value(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
    (scores.len() as f64).ln() + scores[0] - (max + sum.ln())
}

/// Monte-Carlo estimate of `−I_NCE + log N` under the likelihood-ratio
/// critic: each trial draws an anchor `z ~ q`, a positive `z′_1 ~ p(·|z)`,
/// and `N − 1` negatives from the partner marginal, then evaluates
/// `log N + s_1 − logsumexp(s)` with `s_j = log p(z′_j|z)/p_marg(z′_j)`.
/// Returns the mean over `trials` and its standard error (sample standard
/// deviation over `√trials`). Trial `t` uses the derived stream
/// `root.derive(t)`, so the result is reproducible and independent of
/// evaluation order. Requires `N ≥ 2` and `trials ≥ 100`.
pub fn mc_infonce_optimal_critic(
    joint: &DiscreteJoint,
    n: usize,
    trials: usize,
    root: &Prng,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::InvalidArg {
            what: format!("batch needs at least 2 candidates, got {n}"),
        });
    }
    if trials < 100 {
        return Err(Error::InvalidArg {
            what: format!("need at least 100 trials for a usable standard error, got {trials}"),
        });
    }
    let marg = joint.marginal();
    let mut values = Vec::with_capacity(trials);
    let mut scores = vec![0.0; n];
    for trial in 0..trials {
        let mut prng = root.derive(trial as u64);
        let z = sample_discrete(joint.q(), &mut prng);
        let row = joint.cond_row(z);
        for (j, slot) in scores.iter_mut().enumerate() {
            let zp = if j == 0 {
                sample_discrete(row, &mut prng)
            } else {
                sample_discrete(&marg, &mut prng)
            };
            if j == 0 && row[zp] <= 0.0 {
                return Err(Error::InvalidArg {
                    what: format!(
                        "positive pair ({z}, {zp}) drawn with zero conditional probability"
                    ),
                });
            }
            *slot = (row[zp] / marg[zp]).ln();
        }
        values.push(infonce_value(&scores));
    }
    let mean = values.iter().sum::<f64>() / trials as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (trials - 1) as f64;
    Ok((mean, (var / trials as f64).sqrt()))
}

// ── Batch-size sweep ────────────────────────────────────────────────────

/// One batch size of a convergence sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceRow {
    /// Batch size (positive plus negatives).
    pub n: usize,
    /// Monte-Carlo estimate of `−I_NCE + log N`.
    pub estimate: f64,
    /// Standard error of the estimate.
    pub std_error: f64,
    /// Enumerated limit value.
    pub exact: f64,
    /// `|estimate − exact|`.
    pub abs_gap: f64,
}

/// The full sweep, one row per batch size.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<ConvergenceRow>,
}

/// Runs [`mc_infonce_optimal_critic`] at each batch size in `ns` (strictly
/// increasing, at least 3 values) and compares against [`exact_rhs`]. The
/// run at batch size `n` uses the derived stream `root.derive(n)`. Fails
/// with [`Error::ConvergenceFailure`] when the absolute gap at the largest
/// size exceeds the gap at the smallest by more than 3 combined standard
/// errors: the deterministic part of the gap shrinks like `1/N`, so only
/// Monte-Carlo noise may push the comparison the other way.
pub fn convergence_check(
    joint: &DiscreteJoint,
    ns: &[usize],
    trials: usize,
    root: &Prng,
) -> Result<ConvergenceTrace> {
    if ns.len() < 3 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArg {
            what: format!("need at least 3 strictly increasing batch sizes, got {ns:?}"),
        });
    }
    let exact = exact_rhs(joint)?;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let (estimate, std_error) =
            mc_infonce_optimal_critic(joint, n, trials, &root.derive(n as u64))?;
        rows.push(ConvergenceRow {
            n,
            estimate,
            std_error,
            exact,
            abs_gap: (estimate - exact).abs(),
        });
    }
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    let allowance = 3.0 * (first.std_error + last.std_error);
    if last.abs_gap > first.abs_gap + allowance {
        return Err(Error::ConvergenceFailure {
            detail: format!(
                "gap grew from {:.6} at N = {} to {:.6} at N = {} (noise allowance {:.6})",
                first.abs_gap, first.n, last.abs_gap, last.n, allowance
            ),
        });
    }
    Ok(ConvergenceTrace { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k2_benchmark() -> DiscreteJoint {
        DiscreteJoint::benchmark(2).unwrap()
    }

    /// Uniform anchors with identical conditional rows: partner carries no
    /// information. Powers of two keep `q(z) · p` and the induced marginal
    /// bitwise equal to the row, so score vectors are exactly zero.
    fn independent_joint() -> DiscreteJoint {
        DiscreteJoint::new(
            vec![0.5, 0.5],
            vec![vec![0.25, 0.75], vec![0.25, 0.75]],
        )
        .unwrap()
    }

    // ── construction ────────────────────────────────────────────────

    #[test]
    fn malformed_joints_are_rejected() {
        assert!(DiscreteJoint::new(vec![], vec![]).is_err());
        assert!(DiscreteJoint::new(vec![0.6, 0.5], vec![vec![1.0, 0.0]; 2]).is_err());
        assert!(DiscreteJoint::new(vec![0.5, 0.5], vec![vec![0.9, 0.2]; 2]).is_err());
        assert!(DiscreteJoint::new(vec![0.5, 0.5], vec![vec![1.5, -0.5]; 2]).is_err());
        assert!(DiscreteJoint::new(vec![0.5, 0.5], vec![vec![1.0, 0.0]]).is_err());
        assert!(DiscreteJoint::new(vec![1.0], vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn benchmark_distributions_are_valid_for_many_alphabets() {
        for k in 1..=6 {
            let j = DiscreteJoint::benchmark(k).unwrap();
            assert_eq!(j.alphabet(), k);
            let marg = j.marginal();
            assert!((marg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(DiscreteJoint::benchmark(0).is_err());
    }

    // ── exact enumeration ───────────────────────────────────────────

    #[test]
    fn single_symbol_and_independence_have_zero_limit() {
        assert_eq!(exact_rhs(&DiscreteJoint::benchmark(1).unwrap()).unwrap(), 0.0);
        // Conditional equal to the marginal: every log-ratio is log 1.
        assert_eq!(exact_rhs(&independent_joint()).unwrap(), 0.0);
    }

    #[test]
    fn two_symbol_benchmark_matches_the_closed_form() {
        // Uniform anchors with a symmetric 0.9/0.1 channel: the partner
        // marginal is uniform, so the value is log 2 minus the binary
        // entropy of 0.1.
        let h_b = -(0.1f64.ln() * 0.1 + 0.9f64.ln() * 0.9);
        let expected = (2.0f64).ln() - h_b;
        assert!((expected - 0.368_064_207_168_497_05).abs() < 1e-15);
        let got = exact_rhs(&k2_benchmark()).unwrap();
        assert!((got - expected).abs() < 1e-12, "enumerated {got}");
    }

    #[test]
    fn enumeration_agrees_with_a_direct_joint_table() {
        // Independent oracle: build the full joint table p(z, z') and sum
        // p log(p / (row marginal x column marginal)).
        let joints = [
            k2_benchmark(),
            DiscreteJoint::benchmark(4).unwrap(),
            DiscreteJoint::new(
                vec![0.2, 0.3, 0.5],
                vec![
                    vec![0.7, 0.2, 0.1],
                    vec![0.1, 0.6, 0.3],
                    vec![0.25, 0.25, 0.5],
                ],
            )
            .unwrap(),
        ];
        for joint in &joints {
            let k = joint.alphabet();
            let mut table = vec![vec![0.0; k]; k];
            for z in 0..k {
                for zp in 0..k {
                    table[z][zp] = joint.q()[z] * joint.cond_row(z)[zp];
                }
            }
            let pz: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
            let pzp: Vec<f64> =
                (0..k).map(|zp| table.iter().map(|row| row[zp]).sum()).collect();
            let mut mi = 0.0;
            for z in 0..k {
                for zp in 0..k {
                    if table[z][zp] > 0.0 {
                        mi += table[z][zp] * (table[z][zp] / (pz[z] * pzp[zp])).ln();
                    }
                }
            }
            let got = exact_rhs(joint).unwrap();
            assert!((got - mi).abs() < 1e-12, "{got} vs direct table {mi}");
        }
    }

    // ── Monte Carlo ─────────────────────────────────────────────────

    #[test]
    fn single_symbol_gives_exactly_zero_every_trial() {
        let joint = DiscreteJoint::benchmark(1).unwrap();
        let (estimate, se) =
            mc_infonce_optimal_critic(&joint, 8, 200, &Prng::new(7)).unwrap();
        assert_eq!(estimate, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn independent_joint_gives_exactly_zero_every_trial() {
        // All scores are log 1 = 0 bitwise, so every trial evaluates to
        // log N - log N = 0 exactly -- not merely within noise.
        let (estimate, se) =
            mc_infonce_optimal_critic(&independent_joint(), 16, 300, &Prng::new(8)).unwrap();
        assert_eq!(estimate, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn estimate_approaches_the_enumerated_limit() {
        let joint = k2_benchmark();
        let exact = exact_rhs(&joint).unwrap();
        let (estimate, se) =
            mc_infonce_optimal_critic(&joint, 256, 2000, &Prng::new(9)).unwrap();
        // Tolerance couples the Monte-Carlo noise (3 SE) with the O(1/N)
        // deterministic bias of the finite-batch bound.
        let tol = 3.0 * se + 2.0 / 256.0;
        assert!(
            (estimate - exact).abs() <= tol,
            "estimate {estimate} vs exact {exact} (tol {tol})"
        );
    }

    #[test]
    fn estimates_are_reproducible_and_preconditions_hold() {
        let joint = k2_benchmark();
        let a = mc_infonce_optimal_critic(&joint, 32, 150, &Prng::new(10)).unwrap();
        let b = mc_infonce_optimal_critic(&joint, 32, 150, &Prng::new(10)).unwrap();
        assert_eq!(a, b);
        assert!(mc_infonce_optimal_critic(&joint, 1, 150, &Prng::new(10)).is_err());
        assert!(mc_infonce_optimal_critic(&joint, 32, 99, &Prng::new(10)).is_err());
    }

    #[test]
    fn batch_value_ignores_anchor_wide_score_shifts() {
        // Adding a constant to every score of a batch (anything that only
        // depends on the anchor) cancels between the positive term and the
        // logsumexp.
        let mut prng = Prng::new(11);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..8).map(|_| 2.0 * prng.normal()).collect();
            let alpha = 5.0 * prng.normal();
            let shifted: Vec<f64> = scores.iter().map(|s| s + alpha).collect();
            let a = infonce_value(&scores);
            let b = infonce_value(&shifted);
            assert!((a - b).abs() < 1e-9, "{a} vs {b} after shift {alpha}");
        }
    }

    // ── sweep ───────────────────────────────────────────────────────

    #[test]
    fn gap_shrinks_across_the_sweep() {
        let trace =
            convergence_check(&k2_benchmark(), &[4, 64, 1024], 1000, &Prng::new(12)).unwrap();
        assert_eq!(trace.rows.len(), 3);
        let first = &trace.rows[0];
        let last = &trace.rows[2];
        assert!(
            last.abs_gap <= first.abs_gap + 3.0 * (first.std_error + last.std_error)
        );
        // Deterministic rerun.
        let again =
            convergence_check(&k2_benchmark(), &[4, 64, 1024], 1000, &Prng::new(12)).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn deterministic_channel_sweeps_cleanly() {
        // p(z'|z) = delta(z' = z): the limit is log 2 and negatives score
        // -infinity, which the logsumexp absorbs.
        let joint = DiscreteJoint::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert!((exact_rhs(&joint).unwrap() - (2.0f64).ln()).abs() < 1e-15);
        let trace = convergence_check(&joint, &[4, 16, 64], 400, &Prng::new(13)).unwrap();
        for row in &trace.rows {
            assert!(row.estimate.is_finite());
            assert!(row.std_error.is_finite());
        }
    }

    #[test]
    fn independent_joint_sweeps_with_zero_gap() {
        let trace =
            convergence_check(&independent_joint(), &[2, 8, 32], 200, &Prng::new(14)).unwrap();
        for row in &trace.rows {
            assert_eq!(row.estimate, 0.0);
            assert_eq!(row.abs_gap, 0.0);
        }
    }

    #[test]
    fn sweep_rejects_bad_batch_lists() {
        let joint = k2_benchmark();
        assert!(convergence_check(&joint, &[4, 64], 200, &Prng::new(15)).is_err());
        assert!(convergence_check(&joint, &[4, 4, 64], 200, &Prng::new(15)).is_err());
        assert!(convergence_check(&joint, &[64, 4, 1024], 200, &Prng::new(15)).is_err());
    }

    // ── properties ──────────────────────────────────────────────────

    fn arbitrary_joint() -> impl Strategy<Value = DiscreteJoint> {
        (2usize..5).prop_flat_map(|k| {
            let entry = 0.05f64..1.0;
            (
                proptest::collection::vec(entry.clone(), k),
                proptest::collection::vec(proptest::collection::vec(entry, k), k),
            )
                .prop_map(move |(q_raw, cond_raw)| {
                    let qs: f64 = q_raw.iter().sum();
                    let q: Vec<f64> = q_raw.iter().map(|v| v / qs).collect();
                    let cond: Vec<Vec<f64>> = cond_raw
                        .iter()
                        .map(|row| {
                            let s: f64 = row.iter().sum();
                            row.iter().map(|v| v / s).collect()
                        })
                        .collect();
                    DiscreteJoint::new(q, cond).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn enumerated_limit_is_nonnegative(joint in arbitrary_joint()) {
            // It is a mutual information.
            prop_assert!(exact_rhs(&joint).unwrap() >= -1e-12);
        }

        #[test]
        fn estimates_never_exceed_log_n(joint in arbitrary_joint(), seed in 0u64..500) {
            // Per batch, s_1 <= logsumexp(s), so each value is at most log N
            // and so is the mean.
            let (estimate, _) =
                mc_infonce_optimal_critic(&joint, 8, 100, &Prng::new(seed)).unwrap();
            prop_assert!(estimate <= (8.0f64).ln() + 1e-12);
        }
    }
}
