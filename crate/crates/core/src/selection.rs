//! Rule selection by anomaly detection over note/rule similarity scores.
//!
//! Every (note variant, rule) pair gets a cosine score. A Gaussian is fitted
//! to the pooled scores and a rule is selected when the upper-tail
//! probability of its mean score falls below `alpha`: rules that are
//! unusually similar to the note stand out from the bulk of irrelevant ones.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use libm::erfc;

use crate::embedding::{EmbeddingCache, EmbeddingProvider, EmbeddingVector};
use crate::provider::ProviderError;
use crate::registry::{selection_text, Registry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub num_truncations: usize,
    pub retention_ratio: f64,
    pub rng_seed: u64,
    pub include_keywords: bool,
    pub sigma_floor: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 0.05,
            num_truncations: 10,
            retention_ratio: 0.7,
            rng_seed: 0,
            include_keywords: false,
            sigma_floor: 1e-9,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: &str| Err(SelectionError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.num_truncations < 1 {
            return bad("num_truncations must be at least 1");
        }
        if !(self.retention_ratio > 0.0 && self.retention_ratio <= 1.0) {
            return bad("retention_ratio must lie in (0, 1]");
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return bad("sigma_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectionError {
    #[error("note is empty")]
    EmptyNote,
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} scores, got {got}")]
    TooFewScores { needed: usize, got: usize },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SelectionError> {
    if a.dim() != b.dim() {
        return Err(SelectionError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SelectionError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Number of whitespace tokens kept for `retention_ratio`.
pub fn retained_tokens(token_count: usize, retention_ratio: f64) -> usize {
    // the small offset keeps products like 0.7 * 10 from rounding up
    let k = (retention_ratio * token_count as f64 - 1e-9).ceil() as usize;
    k.clamp(1, token_count)
}

/// Random contiguous span of the note's whitespace tokens, joined by single
/// spaces. With `retention_ratio == 1.0` the note is returned unchanged.
pub fn truncate_note<R: Rng + ?Sized>(
    note: &str,
    retention_ratio: f64,
    rng: &mut R,
) -> Result<String, SelectionError> {
    if !(retention_ratio > 0.0 && retention_ratio <= 1.0) {
        return Err(SelectionError::InvalidConfig(
            "retention_ratio must lie in (0, 1]".into(),
        ));
    }
    let tokens: Vec<&str> = note.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(SelectionError::EmptyNote);
    }
    if retention_ratio == 1.0 {
        return Ok(note.to_string());
    }
    let keep = retained_tokens(tokens.len(), retention_ratio);
    let start = rng.random_range(0..=tokens.len() - keep);
    Ok(tokens[start..start + keep].join(" "))
}

/// Sample mean and sample standard deviation (n - 1 denominator), the
/// latter floored at `sigma_floor`.
pub fn fit_gaussian(scores: &[f64], sigma_floor: f64) -> Result<(f64, f64), SelectionError> {
    let n = scores.len();
    if n < 2 {
        return Err(SelectionError::TooFewScores { needed: 2, got: n });
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let ss: f64 = scores.iter().map(|s| (s - mean) * (s - mean)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    Ok((mean, sd.max(sigma_floor)))
}

/// Standard normal upper-tail probability Q(z) = P(Z >= z).
pub fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrScores {
    /// One score per note variant; the first is the full note.
    pub scores: Vec<f64>,
    pub statistic: f64,
    pub zscore: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub per_cdr: BTreeMap<String, CdrScores>,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub alpha: f64,
    /// Selected rule ids, by descending statistic then ascending id. Empty
    /// means no applicable rule.
    pub selected: Vec<String>,
}

impl SimilarityProfile {
    /// Fit the pooled Gaussian to `scores` (rule id, per-variant scores) and
    /// flag the upper-tail anomalies.
    pub fn from_scores(
        scores: Vec<(String, Vec<f64>)>,
        alpha: f64,
        sigma_floor: f64,
    ) -> Result<Self, SelectionError> {
        let pooled: Vec<f64> = scores.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let (mu_hat, sigma_hat) = fit_gaussian(&pooled, sigma_floor)?;
        let mut per_cdr = BTreeMap::new();
        for (id, s) in scores {
            if s.is_empty() {
                return Err(SelectionError::TooFewScores { needed: 1, got: 0 });
            }
            let statistic = s.iter().sum::<f64>() / s.len() as f64;
            let zscore = (statistic - mu_hat) / sigma_hat;
            per_cdr.insert(
                id,
                CdrScores {
                    scores: s,
                    statistic,
                    zscore,
                    p_value: upper_tail(zscore),
                },
            );
        }
        let mut selected: Vec<(&String, f64)> = per_cdr
            .iter()
            .filter(|(_, c)| c.p_value < alpha)
            .map(|(id, c)| (id, c.statistic))
            .collect();
        selected.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let selected = selected.into_iter().map(|(id, _)| id.clone()).collect();
        Ok(SimilarityProfile {
            per_cdr,
            mu_hat,
            sigma_hat,
            alpha,
            selected,
        })
    }

    /// Every pooled score, rule by rule in id order.
    pub fn pooled_scores(&self) -> Vec<f64> {
        self.per_cdr
            .values()
            .flat_map(|c| c.scores.iter().copied())
            .collect()
    }
}

/// The full note followed by `num_truncations - 1` random truncations.
/// A truncation identical to an earlier variant is dropped, so duplicate
/// texts do not weigh twice in the pooled fit; with `retention_ratio` 1.0
/// the only variant is the note itself.
pub fn note_variants(note: &str, config: &SelectionConfig) -> Result<Vec<String>, SelectionError> {
    if note.trim().is_empty() {
        return Err(SelectionError::EmptyNote);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut variants = Vec::with_capacity(config.num_truncations);
    variants.push(note.to_string());
    for _ in 1..config.num_truncations {
        let v = truncate_note(note, config.retention_ratio, &mut rng)?;
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    Ok(variants)
}

/// Score `note` against every rule in the registry and select the
/// anomalously similar ones.
pub async fn select_cdrs(
    note: &str,
    registry: &Registry,
    config: &SelectionConfig,
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
) -> Result<SimilarityProfile, SelectionError> {
    config.validate()?;
    if registry.is_empty() {
        return Err(SelectionError::EmptyRegistry);
    }
    let variants = note_variants(note, config)?;
    let rule_texts: Vec<String> = registry
        .definitions()
        .iter()
        .map(|d| selection_text(d, config.include_keywords))
        .collect();

    let (note_vecs, rule_vecs) = futures::try_join!(
        async { Ok::<_, ProviderError>(provider.embed_batch(&variants).await?) },
        cache.embed_all(provider, &rule_texts),
    )?;
    if note_vecs.len() != variants.len() {
        return Err(ProviderError::Decode(format!(
            "sent {} texts, received {} embeddings",
            variants.len(),
            note_vecs.len()
        ))
        .into());
    }

    let mut scores = Vec::with_capacity(registry.len());
    for (def, rv) in registry.definitions().iter().zip(&rule_vecs) {
        let s = note_vecs
            .iter()
            .map(|nv| cosine_similarity(nv, rv))
            .collect::<Result<Vec<_>, _>>()?;
        scores.push((def.id.clone(), s));
    }
    SimilarityProfile::from_scores(scores, config.alpha, config.sigma_floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    /// Standard normal quantile at plotting position (k - 0.5) / n.
    pub theoretical: f64,
    /// k-th smallest score.
    pub sample: f64,
    /// `(sample - mu_hat) / sigma_hat`.
    pub standardized: f64,
}

/// Normal Q-Q diagnostics for a set of similarity scores.
pub fn qq_points(scores: &[f64]) -> Result<Vec<QqPoint>, SelectionError> {
    let n = scores.len();
    if n < 3 {
        return Err(SelectionError::TooFewScores { needed: 3, got: n });
    }
    let (mu, sigma) = fit_gaussian(scores, SelectionConfig::default().sigma_floor)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(k, sample)| QqPoint {
            theoretical: normal.inverse_cdf((k as f64 + 0.5) / n as f64),
            sample,
            standardized: (sample - mu) / sigma,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let expected = 0.974_631_846_197_076_3;
        let got = cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got}");
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(SelectionError::DimensionMismatch(1, 2))
        );
        assert_eq!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])),
            Err(SelectionError::ZeroVector)
        );
    }

    #[test]
    fn truncation_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let note = "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9";
        assert_eq!(truncate_note("  keep   spacing ", 1.0, &mut rng).unwrap(), "  keep   spacing ");
        for _ in 0..50 {
            let out = truncate_note(note, 0.5, &mut rng).unwrap();
            let toks: Vec<&str> = out.split(' ').collect();
            assert_eq!(toks.len(), 5);
            let first: usize = toks[0][1..].parse().unwrap();
            for (i, t) in toks.iter().enumerate() {
                assert_eq!(*t, format!("t{}", first + i));
            }
        }
        assert_eq!(truncate_note("   ", 0.5, &mut rng), Err(SelectionError::EmptyNote));
        assert!(truncate_note(note, 0.0, &mut rng).is_err());
    }

    #[test]
    fn truncation_is_seeded() {
        let note = (0..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..5).map(|_| truncate_note(&note, 0.3, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn retained_token_counts() {
        assert_eq!(retained_tokens(10, 0.7), 7);
        assert_eq!(retained_tokens(10, 0.5), 5);
        assert_eq!(retained_tokens(3, 0.1), 1);
        assert_eq!(retained_tokens(7, 0.5), 4);
        assert_eq!(retained_tokens(30, 0.7), 21);
        assert_eq!(retained_tokens(10, 1.0), 10);
    }

    #[test]
    fn gaussian_fit_examples() {
        assert_eq!(fit_gaussian(&[0.5, 0.5, 0.5], 1e-9).unwrap(), (0.5, 1e-9));
        let (m, s) = fit_gaussian(&[0.0, 1.0], 1e-9).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let (m, s) = fit_gaussian(&[0.2, 0.4, 0.6, 0.8], 1e-9).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        // sqrt(0.2 / 3)
        assert!((s - 0.258_198_889_747_161_1).abs() < 1e-12, "{s}");
        assert!(matches!(fit_gaussian(&[1.0], 1e-9), Err(SelectionError::TooFewScores { .. })));
    }

    #[test]
    fn upper_tail_values() {
        assert!((upper_tail(0.0) - 0.5).abs() < 1e-15);
        // Q(1.6448536269514722) = 0.05
        let q = upper_tail(1.644_853_626_951_472_2);
        assert!((q - 0.05).abs() < 1e-12, "{q:e}");
        assert!(upper_tail(8.0) < 1e-14);
    }

    #[test]
    fn flat_profile_selects_nothing() {
        let scores = (0..10).map(|i| (format!("r{i}"), vec![0.3; 4])).collect();
        let p = SimilarityProfile::from_scores(scores, 0.05, 1e-9).unwrap();
        assert!(p.selected.is_empty());
        assert_eq!(p.sigma_hat, 1e-9);
    }

    #[test]
    fn ties_break_by_id() {
        let mut scores: Vec<(String, Vec<f64>)> =
            (0..30).map(|i| (format!("r{i:02}"), vec![0.1 + 0.001 * (i % 3) as f64])).collect();
        scores.push(("zeta".into(), vec![0.9]));
        scores.push(("alpha".into(), vec![0.9]));
        let p = SimilarityProfile::from_scores(scores, 0.05, 1e-9).unwrap();
        assert_eq!(p.selected, vec!["alpha".to_string(), "zeta".to_string()]);
    }

    #[test]
    fn qq_theoretical_positions() {
        let pts = qq_points(&[1.0, 0.0, 0.5]).unwrap();
        // Phi^-1(1/6), Phi^-1(1/2), Phi^-1(5/6)
        let want = [-0.967_421_566_101_701_4, 0.0, 0.967_421_566_101_701_4];
        for (p, w) in pts.iter().zip(want) {
            assert!((p.theoretical - w).abs() < 1e-9, "{} vs {w}", p.theoretical);
        }
        assert_eq!(pts.iter().map(|p| p.sample).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert!(qq_points(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn qq_fixed_point() {
        let n = 25;
        let normal = Normal::standard();
        let scores: Vec<f64> = (0..n)
            .rev()
            .map(|k| normal.inverse_cdf((k as f64 + 0.5) / n as f64))
            .collect();
        for p in qq_points(&scores).unwrap() {
            assert!((p.sample - p.theoretical).abs() < 1e-9);
        }
    }
}
