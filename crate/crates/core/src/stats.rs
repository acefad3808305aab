//! Two-sample Kolmogorov-Smirnov test, chi-square test for homogeneity, and
//! the state-wise model equivalence check built from them.

use rand::seq::index::sample as sample_indices;
use serde::Serialize;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::num::Float;
use crate::timing::{label_stream, TimingModel};

/// Constant of the 95% rejection criterion for the two-sample KS test.
pub const KS_COEFF_95: f64 = 1.36;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("samples must be non-empty")]
    EmptySample,
    #[error("count vectors must share at least 2 categories")]
    TooFewCategories,
    #[error("all counts are zero")]
    AllZero,
    #[error("count vectors have different lengths")]
    LengthMismatch,
    #[error("negative argument: {0}")]
    NegativeArgument(f64),
    #[error("ks_samples must be at least 30, got {0}")]
    TooFewKsSamples(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsReport<F> {
    pub d_statistic: F,
    pub n: usize,
    pub m: usize,
    /// 1.36 * sqrt((n+m)/(n*m)); the authoritative 95% rejection rule.
    pub threshold: F,
    /// Asymptotic Kolmogorov-distribution tail, reported alongside.
    pub p_value: F,
    /// Decision by the threshold rule.
    pub reject: bool,
    /// Decision by p < 0.05, recorded for comparison near the boundary.
    pub reject_by_p: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Chi2Report {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelComparison<F> {
    pub ks: KsReport<F>,
    /// One homogeneity test per reference state, labeled.
    pub per_state: Vec<(char, Chi2Report)>,
    /// Reference states with no occurrences in the candidate corpus.
    pub missing_states: Vec<char>,
    pub alpha: f64,
    /// Per-state level after splitting alpha across the state family.
    pub per_state_alpha: f64,
    pub overall_equivalent: bool,
}

/// Exact two-sample KS statistic by merging the sorted samples and tracking
/// the largest gap between the two empirical CDFs.
pub fn ks_two_sample<F: Float>(a: &[F], b: &[F]) -> Result<KsReport<F>, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.partial_cmp(q).unwrap());
    y.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (x.len(), y.len());
    let (nf, mf) = (n as f64, m as f64);

    let mut i = 0usize;
    let mut j = 0usize;
    let mut d = 0f64;
    while i < n || j < m {
        // advance past one distinct value in both samples at once
        let v = match (x.get(i), y.get(j)) {
            (Some(&xv), Some(&yv)) => {
                if xv < yv {
                    xv
                } else {
                    yv
                }
            }
            (Some(&xv), None) => xv,
            (None, Some(&yv)) => yv,
            (None, None) => break,
        };
        while i < n && x[i] == v {
            i += 1;
        }
        while j < m && y[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / nf - j as f64 / mf).abs());
    }

    let threshold = KS_COEFF_95 * ((nf + mf) / (nf * mf)).sqrt();
    let lambda = d * (nf * mf / (nf + mf)).sqrt();
    let p = kolmogorov_sf(lambda)?;
    Ok(KsReport {
        d_statistic: F::from_f64_lossy(d),
        n,
        m,
        threshold: F::from_f64_lossy(threshold),
        p_value: F::from_f64_lossy(p),
        reject: d > threshold,
        reject_by_p: p < 0.05,
    })
}

/// Chi-square test that two count vectors come from one distribution over
/// the same categories. Categories empty in both populations are dropped
/// and the degrees of freedom reduced accordingly.
pub fn chi2_homogeneity(
    counts_p1: &[u64],
    counts_p2: &[u64],
    alpha: f64,
) -> Result<Chi2Report, StatsError> {
    if counts_p1.len() != counts_p2.len() {
        return Err(StatsError::LengthMismatch);
    }
    if counts_p1.len() < 2 {
        return Err(StatsError::TooFewCategories);
    }
    let n1: u64 = counts_p1.iter().sum();
    let n2: u64 = counts_p2.iter().sum();
    let n = n1 + n2;
    if n == 0 {
        return Err(StatsError::AllZero);
    }
    let mut statistic = 0f64;
    let mut categories = 0usize;
    for (&o1, &o2) in counts_p1.iter().zip(counts_p2) {
        let col = o1 + o2;
        if col == 0 {
            continue; // expected count zero in both populations
        }
        categories += 1;
        let e1 = n1 as f64 * col as f64 / n as f64;
        let e2 = n2 as f64 * col as f64 / n as f64;
        if e1 > 0.0 {
            statistic += (o1 as f64 - e1).powi(2) / e1;
        }
        if e2 > 0.0 {
            statistic += (o2 as f64 - e2).powi(2) / e2;
        }
    }
    let df = categories.saturating_sub(1);
    let p_value = if df == 0 { 1.0 } else { chi2_sf(statistic, df)? };
    Ok(Chi2Report {
        statistic,
        df,
        p_value,
        alpha,
        reject: p_value < alpha,
    })
}

/// Upper tail of the chi-square distribution: the regularized upper
/// incomplete gamma function at (df/2, x/2).
pub fn chi2_sf(x: f64, df: usize) -> Result<f64, StatsError> {
    if x < 0.0 {
        return Err(StatsError::NegativeArgument(x));
    }
    if df == 0 {
        return Err(StatsError::TooFewCategories);
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let p = statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0);
    Ok(p.clamp(0.0, 1.0))
}

/// Tail of the asymptotic Kolmogorov distribution:
/// 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2), truncated below 1e-10.
pub fn kolmogorov_sf(lambda: f64) -> Result<f64, StatsError> {
    if lambda < 0.0 {
        return Err(StatsError::NegativeArgument(lambda));
    }
    if lambda == 0.0 {
        return Ok(1.0);
    }
    let mut sum = 0f64;
    let mut sign = 1f64;
    for k in 1..=1000 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-10 {
            break;
        }
        sign = -sign;
    }
    Ok((2.0 * sum).clamp(0.0, 1.0))
}

fn subsample<F: Float>(corpus: &[F], k: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    if corpus.len() <= k {
        return corpus.to_vec();
    }
    sample_indices(rng, corpus.len(), k)
        .iter()
        .map(|i| corpus[i])
        .collect()
}

/// The model-equivalence procedure: a KS test on subsampled delay
/// distributions plus a per-state homogeneity test on successor counts,
/// labeling the candidate with the reference model's own bin map.
///
/// The family of per-state tests shares `alpha` (Bonferroni split), so the
/// comparison's overall false-rejection rate stays at the stated level.
pub fn compare_models<F: Float>(
    reference: &TimingModel<F>,
    candidate_corpus: &[F],
    alpha: f64,
    ks_samples: usize,
    seed: u64,
) -> Result<ModelComparison<F>, StatsError> {
    if ks_samples < 30 {
        return Err(StatsError::TooFewKsSamples(ks_samples));
    }
    if candidate_corpus.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference_corpus = reference.corpus();
    let ref_sub = subsample(&reference_corpus, ks_samples, &mut rng);
    let cand_sub = subsample(candidate_corpus, ks_samples, &mut rng);
    let ks = ks_two_sample(&ref_sub, &cand_sub)?;

    let states = reference.states();
    let per_state_alpha = alpha / states as f64;
    let stream = label_stream(candidate_corpus, &reference.bin_map);
    let mut cand_counts = vec![vec![0u64; states]; states];
    for w in stream.windows(2) {
        cand_counts[w[0]][w[1]] += 1;
    }
    let mut occupancy = vec![0u64; states];
    for &s in &stream {
        occupancy[s] += 1;
    }
    let missing_states: Vec<char> = (0..states)
        .filter(|&i| occupancy[i] == 0)
        .map(|i| reference.bin_map.labels[i])
        .collect();

    let mut per_state = Vec::with_capacity(states);
    let mut any_reject = false;
    for i in 0..states {
        let report = chi2_homogeneity(
            &reference.transition_counts[i],
            &cand_counts[i],
            per_state_alpha,
        )?;
        any_reject |= report.reject;
        per_state.push((reference.bin_map.labels[i], report));
    }

    let overall_equivalent = !ks.reject && !any_reject && missing_states.is_empty();
    Ok(ModelComparison {
        ks,
        per_state,
        missing_states,
        alpha,
        per_state_alpha,
        overall_equivalent,
    })
}
