//! Attacks on speaker-level anonymized embeddings.
//!
//! The defender anonymizes the evaluation corpus at speaker level and passes
//! it through the channel, publishing `x_a` for enrollment and trial
//! utterances. The attacker knows the anonymizer family and has the same
//! channel (the vocoder is public), but draws its own randomness. It holds
//! the original enrollment utterances of every claimed speaker and a
//! training corpus of speakers disjoint from the evaluation set.
//!
//! | attack | enrollment side | trial side |
//! |--------|-----------------|------------|
//! | unprotected | defender `x_o` | defender `x_o` |
//! | lazy-informed | attacker `x_a` | defender `x_a` |
//! | semi-informed | `f(attacker x_a)` | `f(defender x_a)` |
//! | drift reversal | attacker `x_p` | `g(defender x_a)` |
//!
//! `f` is a linear map trained with AAM-softmax on the attacker's
//! anonymized training speakers, starting from the identity. `g` is an MLP
//! trained to map the attacker's `x_a` back to `x_p` under the cosine loss.

use std::collections::{BTreeMap, BTreeSet};

use crate::anonymizer::{
    anonymize_corpus, passthrough_corpus, AnonymizationLevel, AnonymizerConfig,
};
use crate::channel::ChannelModel;
use crate::corpus::{Corpus, Domain, Pool, SpeakerId, TrialProtocol};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::evaluation::{
    score_domains, score_protocol, DomainView, EerResult, EmbeddingMap, TrialScores,
};
use crate::neuralnet::{train, AamClassifier, CosineRegression, HistoryRow, Mlp, TrainConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackKind {
    Unprotected,
    LazyInformed,
    SemiInformed,
    DriftReversal,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Unprotected,
        AttackKind::LazyInformed,
        AttackKind::SemiInformed,
        AttackKind::DriftReversal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Unprotected => "unprotected",
            AttackKind::LazyInformed => "lazy_informed",
            AttackKind::SemiInformed => "semi_informed",
            AttackKind::DriftReversal => "drift_reversal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Every seed an attack run depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackSeeds {
    pub defender_anonymizer: u64,
    pub defender_noise: u64,
    pub attacker_anonymizer: u64,
    pub attacker_noise: u64,
    /// Initial weights of the drift-reversal network.
    pub model_init: u64,
    /// Validation split and batch order.
    pub train_shuffle: u64,
}

/// Architecture and optimization settings of the learned attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedAttackConfig {
    pub train: TrainConfig,
    /// Hidden layer widths of the drift-reversal network, as multiples of the
    /// embedding dimension.
    pub hidden_factors: Vec<usize>,
    /// Standard deviation multiplier of the initial weights (`gain / sqrt(fan_in)`).
    pub init_gain: f64,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl Default for LearnedAttackConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden_factors: vec![4, 4],
            init_gain: 0.5,
            aam_margin: crate::neuralnet::DEFAULT_AAM_MARGIN,
            aam_scale: crate::neuralnet::DEFAULT_AAM_SCALE,
        }
    }
}

impl LearnedAttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden_factors.contains(&0) {
            return Err(Error::config("hidden_factors", "widths must be positive"));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::config("init_gain", "must be positive"));
        }
        if !(self.aam_margin.is_finite() && (0.0..std::f64::consts::PI).contains(&self.aam_margin))
        {
            return Err(Error::config("aam_margin", "must lie in [0, pi)"));
        }
        if !(self.aam_scale.is_finite() && self.aam_scale > 0.0) {
            return Err(Error::config("aam_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Inputs shared by all attacks. Corpora carry `x_o` only.
#[derive(Clone, Debug)]
pub struct AttackSetup {
    pub eval: Corpus,
    pub protocol: TrialProtocol,
    pub attacker_train: Corpus,
    pub pool: Pool,
    pub attacker_pool: Pool,
    /// Anonymizer family; `None` is the no-op anonymizer `x_p = x_o`. The
    /// level field is ignored since both parties anonymize per speaker.
    pub anonymizer: Option<AnonymizerConfig>,
    pub channel: ChannelModel,
    pub seeds: AttackSeeds,
    pub learned: LearnedAttackConfig,
    /// Digest of the configuration that produced this setup.
    pub config_digest: String,
}

/// Anonymized and channeled corpora derived from an [`AttackSetup`].
#[derive(Clone, Debug)]
pub struct AttackData {
    /// Evaluation corpus as published by the defender (`x_o`, `x_p`, `x_a`).
    pub defended: Corpus,
    /// Enrollment utterances re-anonymized by the attacker.
    pub attacker_enroll: Corpus,
    /// Attacker training corpus anonymized and channeled by the attacker.
    pub attacker_train: Corpus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub seeds: AttackSeeds,
    pub config_digest: String,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub eer: EerResult,
    pub scores: TrialScores,
    /// Training history of learned attacks.
    pub history: Option<Vec<HistoryRow>>,
    pub best_val_loss: Option<f64>,
    pub provenance: Provenance,
}

fn speaker_level(cfg: &AnonymizerConfig, seed: u64) -> AnonymizerConfig {
    AnonymizerConfig {
        level: AnonymizationLevel::Speaker,
        seed,
        ..cfg.clone()
    }
}

fn anonymize_and_channel(
    corpus: &Corpus,
    pool: &Pool,
    anonymizer: Option<&AnonymizerConfig>,
    anon_seed: u64,
    channel: &ChannelModel,
    noise_seed: u64,
) -> Result<Corpus> {
    let anonymized = match anonymizer {
        Some(cfg) => anonymize_corpus(corpus, pool, &speaker_level(cfg, anon_seed))?,
        None => passthrough_corpus(corpus),
    };
    channel.apply_to_corpus(&anonymized, noise_seed)
}

/// Fails if any speaker appears in both corpora.
pub fn check_disjoint(eval: &Corpus, attacker: &Corpus) -> Result<()> {
    let eval_ids: BTreeSet<SpeakerId> = eval.utterances.iter().map(|u| u.spk).collect();
    if let Some(u) = attacker
        .utterances
        .iter()
        .find(|u| eval_ids.contains(&u.spk))
    {
        return Err(Error::Protocol(format!(
            "speaker {} appears in both the evaluation and attacker training corpora",
            u.spk
        )));
    }
    Ok(())
}

/// Fails if the attacker's pseudo-speaker for some enrolled speaker equals
/// the defender's, which would mean the two parties shared randomness.
pub fn check_independent_randomness(data: &AttackData) -> Result<()> {
    for u in &data.attacker_enroll.utterances {
        let ours = u.x_p.as_ref();
        let theirs = data.defended.get(u.utt).and_then(|d| d.x_p.as_ref());
        if ours.is_some() && ours == theirs {
            return Err(Error::Protocol(format!(
                "attacker and defender pseudo-speakers coincide for utterance {}",
                u.utt
            )));
        }
    }
    Ok(())
}

impl AttackSetup {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            seeds: self.seeds,
            config_digest: self.config_digest.clone(),
        }
    }

    /// Runs both parties' anonymization and channel passes.
    pub fn prepare(&self) -> Result<AttackData> {
        check_disjoint(&self.eval, &self.attacker_train)?;
        let s = &self.seeds;
        let anon = self.anonymizer.as_ref();
        let defended = anonymize_and_channel(
            &self.eval,
            &self.pool,
            anon,
            s.defender_anonymizer,
            &self.channel,
            s.defender_noise,
        )?;
        let enroll = self.eval.subset(&self.protocol.enrollment_utterances())?;
        let attacker_enroll = anonymize_and_channel(
            &enroll,
            &self.attacker_pool,
            anon,
            s.attacker_anonymizer,
            &self.channel,
            s.attacker_noise,
        )?;
        let attacker_train = anonymize_and_channel(
            &self.attacker_train,
            &self.attacker_pool,
            anon,
            s.attacker_anonymizer,
            &self.channel,
            s.attacker_noise,
        )?;
        let data = AttackData {
            defended,
            attacker_enroll,
            attacker_train,
        };
        if anon.is_some() {
            check_independent_randomness(&data)?;
        }
        Ok(data)
    }

    fn result(
        &self,
        kind: AttackKind,
        scores: TrialScores,
        trained: Option<(Vec<HistoryRow>, f64)>,
    ) -> Result<AttackResult> {
        let (history, best_val_loss) = match trained {
            Some((h, v)) => (Some(h), Some(v)),
            None => (None, None),
        };
        Ok(AttackResult {
            kind,
            eer: scores.eer()?,
            scores,
            history,
            best_val_loss,
            provenance: self.provenance(),
        })
    }

    pub fn run(&self, kind: AttackKind, data: &AttackData) -> Result<AttackResult> {
        match kind {
            AttackKind::Unprotected => self.unprotected_reference(data),
            AttackKind::LazyInformed => self.lazy_informed(data),
            AttackKind::SemiInformed => self.semi_informed(data),
            AttackKind::DriftReversal => self.drift_reversal(data),
        }
    }

    /// Enrollment and trials both in the original domain.
    pub fn unprotected_reference(&self, data: &AttackData) -> Result<AttackResult> {
        let scores = score_domains(
            &self.protocol,
            &data.defended,
            Domain::Original,
            Domain::Original,
        )?;
        self.result(AttackKind::Unprotected, scores, None)
    }

    /// Attacker-anonymized enrollment against published trials, raw cosine scoring.
    pub fn lazy_informed(&self, data: &AttackData) -> Result<AttackResult> {
        let scores = score_protocol(
            &self.protocol,
            &DomainView::new(&data.attacker_enroll, Domain::Anonymized),
            &DomainView::new(&data.defended, Domain::Anonymized),
        )?;
        self.result(AttackKind::LazyInformed, scores, None)
    }

    /// Both sides mapped through a linear transform trained with AAM-softmax
    /// on the attacker's anonymized training speakers.
    pub fn semi_informed(&self, data: &AttackData) -> Result<AttackResult> {
        self.learned.validate()?;
        let labels: BTreeMap<SpeakerId, usize> = data
            .attacker_train
            .speaker_ids()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let samples: Vec<(Vec<f64>, usize)> = data
            .attacker_train
            .utterances
            .iter()
            .map(|u| Ok((anonymized(u)?.as_slice().to_vec(), labels[&u.spk])))
            .collect::<Result<_>>()?;
        let task = AamClassifier::imprinted(
            Mlp::identity(self.eval.dim),
            &samples,
            labels.len(),
            self.learned.aam_margin,
            self.learned.aam_scale,
        )?;
        let out = train(task, &samples, &self.train_config("semi_informed"))?;
        let model = &out.best.model;
        let enroll = map_domain(&data.attacker_enroll, Domain::Anonymized, model)?;
        let trials = map_domain(&data.defended, Domain::Anonymized, model)?;
        let scores = score_protocol(&self.protocol, &enroll, &trials)?;
        self.result(
            AttackKind::SemiInformed,
            scores,
            Some((out.history, out.best_val_loss)),
        )
    }

    /// Learns `g: x_a -> x_p` on the attacker's data, then scores the
    /// attacker's `x_p` enrollment models against `g(x_a)` of the trials.
    pub fn drift_reversal(&self, data: &AttackData) -> Result<AttackResult> {
        let (model, history, best_val_loss) = self.train_drift_reversal(data)?;
        let trials = map_domain(&data.defended, Domain::Anonymized, &model)?;
        let scores = score_protocol(
            &self.protocol,
            &DomainView::new(&data.attacker_enroll, Domain::PreVocoder),
            &trials,
        )?;
        self.result(
            AttackKind::DriftReversal,
            scores,
            Some((history, best_val_loss)),
        )
    }

    /// Trains the drift-reversal network and returns the best snapshot,
    /// its history and its validation loss.
    pub fn train_drift_reversal(&self, data: &AttackData) -> Result<(Mlp, Vec<HistoryRow>, f64)> {
        self.learned.validate()?;
        let m = self.eval.dim;
        let mut dims = vec![m];
        dims.extend(self.learned.hidden_factors.iter().map(|f| f * m));
        dims.push(m);
        let init = Mlp::random(
            &dims,
            self.learned.init_gain,
            &mut rng::seeded(self.seeds.model_init),
        )?;
        let samples: Vec<(Vec<f64>, Vec<f64>)> = data
            .attacker_train
            .utterances
            .iter()
            .map(|u| {
                let x_p = u.x_p.as_ref().ok_or_else(|| {
                    Error::Protocol(format!("utterance {} has no pre-vocoder embedding", u.utt))
                })?;
                Ok((anonymized(u)?.as_slice().to_vec(), x_p.as_slice().to_vec()))
            })
            .collect::<Result<_>>()?;
        let out = train(
            CosineRegression { model: init },
            &samples,
            &self.train_config("drift_reversal"),
        )?;
        Ok((out.best.model, out.history, out.best_val_loss))
    }

    fn train_config(&self, tag: &str) -> TrainConfig {
        TrainConfig {
            shuffle_seed: rng::derive_seed(self.seeds.train_shuffle, tag),
            ..self.learned.train.clone()
        }
    }
}

fn anonymized(u: &crate::corpus::UtteranceRecord) -> Result<&EmbeddingVector> {
    u.x_a
        .as_ref()
        .ok_or_else(|| Error::Protocol(format!("utterance {} has no anonymized embedding", u.utt)))
}

/// Applies `model` to one domain of every utterance.
pub fn map_domain(corpus: &Corpus, domain: Domain, model: &Mlp) -> Result<EmbeddingMap> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            let x = u.embedding(domain).ok_or_else(|| {
                Error::Protocol(format!(
                    "utterance {} has no {} embedding",
                    u.utt,
                    domain.tag()
                ))
            })?;
            let y = model.forward(x.as_slice())?;
            Ok((u.utt, EmbeddingVector::new(y.as_slice().to_vec())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelKind, ChannelSpec};
    use crate::corpus::{build_protocol, generate_corpus, generate_pool, CorpusConfig};
    use crate::neuralnet::AdamConfig;

    fn setup(
        kind: ChannelKind,
        lambda: f64,
        noise: f64,
        anonymize: bool,
        epochs: usize,
    ) -> AttackSetup {
        let dim = 8;
        let corpus = |n, first, seed| {
            generate_corpus(&CorpusConfig {
                n_speakers: n,
                utts_per_speaker: 8,
                dim,
                within_speaker_sigma: 0.2,
                seed,
                first_speaker_id: first,
            })
            .unwrap()
        };
        let eval = corpus(10, 0, 1);
        let protocol = build_protocol(&eval, 3, 4, 2).unwrap();
        let pool = generate_pool(200, dim, 3).unwrap();
        AttackSetup {
            eval,
            protocol,
            attacker_train: corpus(30, 10, 4),
            attacker_pool: pool.clone(),
            pool,
            anonymizer: anonymize.then_some(AnonymizerConfig {
                k: 40,
                k_star: 20,
                level: AnonymizationLevel::Speaker,
                renormalize: true,
                seed: 0,
            }),
            channel: ChannelModel::new(ChannelSpec {
                kind,
                lambda,
                noise_sigma: noise,
                hidden_width: 0,
                dim,
                seed: 5,
            })
            .unwrap(),
            seeds: AttackSeeds {
                defender_anonymizer: 10,
                defender_noise: 11,
                attacker_anonymizer: 12,
                attacker_noise: 13,
                model_init: 14,
                train_shuffle: 15,
            },
            learned: LearnedAttackConfig {
                train: TrainConfig {
                    epochs,
                    validate_every: 50,
                    adam: AdamConfig {
                        lr: 1e-3,
                        ..AdamConfig::default()
                    },
                    ..TrainConfig::default()
                },
                ..LearnedAttackConfig::default()
            },
            config_digest: "test".into(),
        }
    }

    #[test]
    fn attack_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(AttackKind::from_name(k.name()), Some(k));
        }
        assert_eq!(AttackKind::from_name("nope"), None);
    }

    #[test]
    fn overlapping_speakers_are_rejected() {
        let mut s = setup(ChannelKind::Identity, 0.0, 0.0, true, 0);
        s.attacker_train = s.eval.clone();
        assert!(matches!(s.prepare(), Err(Error::Protocol(_))));
    }

    #[test]
    fn attacker_pseudo_speakers_differ_from_defender() {
        let s = setup(ChannelKind::Attractor, 0.6, 0.05, true, 0);
        let data = s.prepare().unwrap();
        for u in &data.attacker_enroll.utterances {
            let d = data.defended.get(u.utt).unwrap();
            assert_ne!(u.x_p, d.x_p);
        }
        let mut shared = data.clone();
        for u in &mut shared.attacker_enroll.utterances {
            u.x_p = shared.defended.get(u.utt).unwrap().x_p.clone();
        }
        assert!(check_independent_randomness(&shared).is_err());
    }

    #[test]
    fn unprotected_matches_direct_scoring() {
        let s = setup(ChannelKind::Attractor, 0.6, 0.05, true, 0);
        let data = s.prepare().unwrap();
        let r = s.unprotected_reference(&data).unwrap();
        let direct =
            score_domains(&s.protocol, &s.eval, Domain::Original, Domain::Original).unwrap();
        assert_eq!(r.scores, direct);
        assert_eq!(r.eer, direct.eer().unwrap());
        assert_eq!(r.provenance.seeds, s.seeds);
    }

    #[test]
    fn zero_sigma_unprotected_is_perfect() {
        let mut s = setup(ChannelKind::Identity, 0.0, 0.0, true, 0);
        s.eval = generate_corpus(&CorpusConfig {
            n_speakers: 10,
            utts_per_speaker: 8,
            dim: 8,
            within_speaker_sigma: 0.0,
            seed: 1,
            first_speaker_id: 0,
        })
        .unwrap();
        let data = s.prepare().unwrap();
        assert_eq!(s.unprotected_reference(&data).unwrap().eer.eer, 0.0);
    }

    #[test]
    fn lazy_without_protection_equals_unprotected() {
        let s = setup(ChannelKind::Identity, 0.0, 0.0, false, 0);
        let data = s.prepare().unwrap();
        let lazy = s.lazy_informed(&data).unwrap();
        let base = s.unprotected_reference(&data).unwrap();
        assert_eq!(lazy.scores, base.scores);
    }

    #[test]
    fn semi_informed_without_training_equals_lazy() {
        let s = setup(ChannelKind::Attractor, 0.6, 0.05, true, 0);
        let data = s.prepare().unwrap();
        let semi = s.semi_informed(&data).unwrap();
        let lazy = s.lazy_informed(&data).unwrap();
        assert_eq!(semi.scores, lazy.scores);
        assert_eq!(semi.history.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn attacks_are_reproducible() {
        let s = setup(ChannelKind::Attractor, 0.6, 0.05, true, 1);
        let a = s.prepare().unwrap();
        let b = s.prepare().unwrap();
        for kind in AttackKind::ALL {
            let ra = s.run(kind, &a).unwrap();
            let rb = s.run(kind, &b).unwrap();
            assert_eq!(ra.scores, rb.scores, "{}", kind.name());
            assert_eq!(ra.history, rb.history);
        }
    }

    #[test]
    fn full_collapse_defeats_drift_reversal() {
        let s = setup(ChannelKind::Attractor, 1.0, 0.05, true, 1);
        let data = s.prepare().unwrap();
        let dr = s.drift_reversal(&data).unwrap();
        assert!((0.2..=0.8).contains(&dr.eer.eer), "{}", dr.eer.eer);
    }
}
