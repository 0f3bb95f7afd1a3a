//! Pool-based pseudo-speaker generation.
//!
//! Given `x_o`, the `K` pool vectors farthest from it (cosine distance) are
//! found, `K*` of those are drawn uniformly without replacement, and their
//! mean becomes the pseudo-speaker embedding `x_p`.
//!
//! Determinism contract for whole corpora: each anonymization unit owns an
//! RNG stream `rng::stream(cfg.seed, tag)` where `tag` is `"utt:<id>"` at
//! utterance level and `"spk:<id>"` at speaker level. Units can therefore be
//! processed in any order or in parallel.

use std::cmp::Ordering;

use rand::Rng;

use crate::corpus::{Corpus, Pool};
use crate::embedding::{centroid_of, cosine_distance, l2_normalize, EmbeddingVector};
use crate::error::{Error, Result};
use crate::rng::{self, partial_shuffle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnonymizationLevel {
    /// One pseudo-speaker per utterance.
    Utterance,
    /// One pseudo-speaker per speaker, shared by all of its utterances.
    Speaker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnonymizerConfig {
    /// Size of the farthest-candidate set.
    pub k: usize,
    /// Number of candidates averaged.
    pub k_star: usize,
    pub level: AnonymizationLevel,
    /// Rescale the averaged vector to unit norm.
    pub renormalize: bool,
    pub seed: u64,
}

impl AnonymizerConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.k_star == 0 {
            return Err(Error::config("k_star", "must be positive"));
        }
        if self.k_star > self.k {
            return Err(Error::config(
                "k_star",
                format!("k_star ({}) must not exceed k ({})", self.k_star, self.k),
            ));
        }
        if self.k > pool_size {
            return Err(Error::config(
                "k",
                format!("k ({}) exceeds pool size ({pool_size})", self.k),
            ));
        }
        Ok(())
    }
}

/// Indices of the `k` pool vectors farthest from `x`, farthest first. Equal
/// distances keep ascending pool order.
pub fn farthest_k(x: &EmbeddingVector, pool: &Pool, k: usize) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(Error::config(
            "k",
            format!("k ({k}) exceeds pool size ({})", pool.len()),
        ));
    }
    let mut ranked = pool
        .vectors
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((i, cosine_distance(x, p)?)))
        .collect::<Result<Vec<(usize, f64)>>>()?;
    ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
    ranked.truncate(k);
    Ok(ranked.into_iter().map(|(i, _)| i).collect())
}

/// Anonymizes a single embedding.
///
/// The `K*` subset is `candidates[..K*]` after a partial Fisher-Yates shuffle
/// of the farthest-first candidate list.
pub fn pool_anonymize<R: Rng + ?Sized>(
    x_o: &EmbeddingVector,
    pool: &Pool,
    cfg: &AnonymizerConfig,
    rng: &mut R,
) -> Result<EmbeddingVector> {
    cfg.validate(pool.len())?;
    if x_o.norm() == 0.0 {
        return Err(Error::ZeroNorm("x_o"));
    }
    let mut candidates = farthest_k(x_o, pool, cfg.k)?;
    partial_shuffle(&mut candidates, cfg.k_star, rng);
    let mean = centroid_of(candidates[..cfg.k_star].iter().map(|&i| &pool.vectors[i]))?;
    if mean.norm() == 0.0 {
        return Err(Error::domain("pseudo-speaker centroid is the zero vector"));
    }
    if cfg.renormalize {
        l2_normalize(&mean)
    } else {
        Ok(mean)
    }
}

/// No-op anonymizer: `x_p = x_o` for every utterance, `x_a` cleared.
pub fn passthrough_corpus(corpus: &Corpus) -> Corpus {
    let mut out = corpus.clone();
    for u in &mut out.utterances {
        u.x_p = Some(u.x_o.clone());
        u.x_a = None;
    }
    out
}

/// Populates `x_p` for every utterance. Any existing `x_a` is cleared since
/// it no longer derives from the new `x_p`.
///
/// At speaker level the anonymizer input is the normalized centroid of all
/// of the speaker's `x_o` in this corpus.
pub fn anonymize_corpus(corpus: &Corpus, pool: &Pool, cfg: &AnonymizerConfig) -> Result<Corpus> {
    cfg.validate(pool.len())?;
    let mut out = corpus.clone();
    match cfg.level {
        AnonymizationLevel::Utterance => {
            for u in &mut out.utterances {
                let mut r = rng::stream(cfg.seed, &format!("utt:{}", u.utt));
                u.x_p = Some(pool_anonymize(&u.x_o, pool, cfg, &mut r)?);
                u.x_a = None;
            }
        }
        AnonymizationLevel::Speaker => {
            let mut assigned = Vec::new();
            for (spk, utts) in corpus.by_speaker() {
                let rep = l2_normalize(&centroid_of(utts.iter().map(|u| &u.x_o))?)?;
                let mut r = rng::stream(cfg.seed, &format!("spk:{spk}"));
                assigned.push((spk, pool_anonymize(&rep, pool, cfg, &mut r)?));
            }
            for u in &mut out.utterances {
                let x_p = assigned
                    .iter()
                    .find(|(s, _)| *s == u.spk)
                    .map(|(_, x)| x.clone())
                    .expect("every utterance's speaker was anonymized");
                u.x_p = Some(x_p);
                u.x_a = None;
            }
        }
    }
    Ok(out)
}
