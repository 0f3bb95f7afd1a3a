//! Experiment configuration: JSON parsing, defaults, seed resolution and
//! validation.
//!
//! Every field is optional; missing fields take the defaults below. After
//! [`ExperimentConfig::resolve`] every per-channel seed is explicit, so the
//! serialized result reproduces the run by itself.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use driftlab_core::anonymizer::{AnonymizationLevel, AnonymizerConfig};
use driftlab_core::attacks::{AttackKind, LearnedAttackConfig};
use driftlab_core::channel::{ChannelKind, ChannelSpec};
use driftlab_core::corpus::CorpusConfig;
use driftlab_core::neuralnet::{AdamConfig, TrainConfig};
use driftlab_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub attacker_corpus: AttackerCorpusSection,
    pub pool: PoolSection,
    pub protocol: ProtocolSection,
    pub anonymizer: AnonymizerSection,
    pub channels: Vec<ChannelSection>,
    pub attacks: Vec<AttackName>,
    pub train: TrainSection,
    pub projection: ProjectionSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub dim: usize,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub within_speaker_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerCorpusSection {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub size: usize,
    /// Give the attacker its own pool instead of the defender's.
    pub disjoint_attacker_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub enroll_per_speaker: usize,
    pub nontarget_per_trial: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelName {
    Utterance,
    Speaker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizerSection {
    /// `false` replaces the anonymizer with `x_p = x_o`.
    pub enabled: bool,
    pub k: usize,
    pub k_star: usize,
    /// Level used for the per-domain tables and the projection. Attacks
    /// always anonymize per speaker.
    pub level: LevelName,
    pub renormalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKindName {
    Identity,
    Orthogonal,
    Attractor,
    RandomMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub name: String,
    pub kind: ChannelKindName,
    pub lambda: f64,
    pub noise_sigma: f64,
    pub hidden_width: usize,
    /// Parameter seed; derived from the master seed and `name` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    Unprotected,
    LazyInformed,
    SemiInformed,
    DriftReversal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub validate_every: usize,
    pub validation_fraction: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Hidden widths of the drift-reversal network as multiples of `dim`.
    pub hidden_factors: Vec<usize>,
    pub init_gain: f64,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    /// Number of evaluation speakers (lowest ids) whose utterances are projected.
    pub speakers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("driftlab_out"),
            corpus: CorpusSection::default(),
            attacker_corpus: AttackerCorpusSection::default(),
            pool: PoolSection::default(),
            protocol: ProtocolSection::default(),
            anonymizer: AnonymizerSection::default(),
            channels: vec![ChannelSection::default()],
            attacks: vec![
                AttackName::Unprotected,
                AttackName::LazyInformed,
                AttackName::SemiInformed,
                AttackName::DriftReversal,
            ],
            train: TrainSection::default(),
            projection: ProjectionSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            dim: 32,
            n_speakers: 40,
            utts_per_speaker: 20,
            within_speaker_sigma: 0.175,
        }
    }
}

impl Default for AttackerCorpusSection {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            utts_per_speaker: 20,
        }
    }
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            size: 1000,
            disjoint_attacker_pool: false,
        }
    }
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            enroll_per_speaker: 5,
            nontarget_per_trial: 10,
        }
    }
}

impl Default for AnonymizerSection {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 200,
            k_star: 100,
            level: LevelName::Utterance,
            renormalize: true,
        }
    }
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            name: "attractor".into(),
            kind: ChannelKindName::Attractor,
            lambda: 0.6,
            noise_sigma: 0.05,
            hidden_width: 128,
            seed: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let l = LearnedAttackConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            validate_every: t.validate_every,
            validation_fraction: t.validation_fraction,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            hidden_factors: l.hidden_factors,
            init_gain: l.init_gain,
            aam_margin: l.aam_margin,
            aam_scale: l.aam_scale,
        }
    }
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self { speakers: 5 }
    }
}

impl From<ChannelKindName> for ChannelKind {
    fn from(k: ChannelKindName) -> Self {
        match k {
            ChannelKindName::Identity => ChannelKind::Identity,
            ChannelKindName::Orthogonal => ChannelKind::Orthogonal,
            ChannelKindName::Attractor => ChannelKind::Attractor,
            ChannelKindName::RandomMlp => ChannelKind::RandomMlp,
        }
    }
}

impl From<AttackName> for AttackKind {
    fn from(a: AttackName) -> Self {
        match a {
            AttackName::Unprotected => AttackKind::Unprotected,
            AttackName::LazyInformed => AttackKind::LazyInformed,
            AttackName::SemiInformed => AttackKind::SemiInformed,
            AttackName::DriftReversal => AttackKind::DriftReversal,
        }
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

fn check_positive(field: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(invalid(field, "must be positive"));
    }
    Ok(())
}

fn check_finite_range(field: &str, v: f64, lo: f64, hi: f64, desc: &str) -> Result<(), CliError> {
    if !(v.is_finite() && v >= lo && v <= hi) {
        return Err(invalid(field, format!("must lie in {desc}, got {v}")));
    }
    Ok(())
}

/// Parses JSON text. Syntax and type errors carry line and column.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Reads, resolves and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
        path: path.display().to_string(),
        source: e,
    })?;
    let cfg = parse_config_str(&text)?.resolve();
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Stable tag used to derive this channel's seeds.
    fn channel_tag(name: &str) -> String {
        format!("channel:{name}")
    }

    /// Fills every derived seed.
    pub fn resolve(mut self) -> Self {
        let master = self.seed;
        for ch in &mut self.channels {
            if ch.seed.is_none() {
                ch.seed = Some(derive_seed(master, &Self::channel_tag(&ch.name)));
            }
        }
        self
    }

    /// Applies command-line overrides. Seeds derived from the previous
    /// master seed are dropped so that they follow the new one.
    pub fn with_overrides(mut self, seed: Option<u64>, output_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            if s != self.seed {
                let old = self.seed;
                for ch in &mut self.channels {
                    if ch.seed == Some(derive_seed(old, &Self::channel_tag(&ch.name))) {
                        ch.seed = None;
                    }
                }
                self.seed = s;
            }
        }
        if let Some(dir) = output_dir {
            self.output_dir = dir;
        }
        self.resolve()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.corpus;
        if c.dim < 2 {
            return Err(invalid("corpus.dim", "must be at least 2"));
        }
        if c.n_speakers < 2 {
            return Err(invalid("corpus.n_speakers", "must be at least 2"));
        }
        if !(c.within_speaker_sigma.is_finite() && c.within_speaker_sigma >= 0.0) {
            return Err(invalid(
                "corpus.within_speaker_sigma",
                "must be finite and non-negative",
            ));
        }
        let p = &self.protocol;
        check_positive("protocol.enroll_per_speaker", p.enroll_per_speaker)?;
        if c.utts_per_speaker <= p.enroll_per_speaker {
            return Err(invalid(
                "corpus.utts_per_speaker",
                format!(
                    "must exceed protocol.enroll_per_speaker ({}), got {}",
                    p.enroll_per_speaker, c.utts_per_speaker
                ),
            ));
        }
        if p.nontarget_per_trial >= c.n_speakers {
            return Err(invalid(
                "protocol.nontarget_per_trial",
                format!(
                    "must be below corpus.n_speakers ({}), got {}",
                    c.n_speakers, p.nontarget_per_trial
                ),
            ));
        }
        let a = &self.attacker_corpus;
        if a.n_speakers < 2 {
            return Err(invalid("attacker_corpus.n_speakers", "must be at least 2"));
        }
        check_positive("attacker_corpus.utts_per_speaker", a.utts_per_speaker)?;
        let total = (c.n_speakers as u64 + a.n_speakers as u64)
            * (c.utts_per_speaker.max(a.utts_per_speaker) as u64);
        if total > u32::MAX as u64 {
            return Err(invalid(
                "attacker_corpus.n_speakers",
                "utterance ids overflow u32",
            ));
        }
        check_positive("pool.size", self.pool.size)?;
        let an = &self.anonymizer;
        check_positive("anonymizer.k_star", an.k_star)?;
        if an.k_star > an.k {
            return Err(invalid(
                "anonymizer.k_star",
                format!(
                    "anonymizer.k_star ({}) must not exceed anonymizer.k ({})",
                    an.k_star, an.k
                ),
            ));
        }
        if an.k > self.pool.size {
            return Err(invalid(
                "anonymizer.k",
                format!(
                    "anonymizer.k ({}) must not exceed pool.size ({})",
                    an.k, self.pool.size
                ),
            ));
        }
        if self.channels.is_empty() {
            return Err(invalid("channels", "at least one channel is required"));
        }
        let mut names = BTreeSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            let field = |f: &str| format!("channels[{i}].{f}");
            if ch.name.is_empty()
                || ch.name.starts_with('.')
                || !ch
                    .name
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-' || ch == '.')
            {
                return Err(invalid(
                    field("name"),
                    "use letters, digits, `_`, `-` or `.` (not leading)",
                ));
            }
            if !names.insert(ch.name.as_str()) {
                return Err(invalid(
                    field("name"),
                    format!("duplicate channel name `{}`", ch.name),
                ));
            }
            check_finite_range(&field("lambda"), ch.lambda, 0.0, 1.0, "[0, 1]")?;
            check_finite_range(
                &field("noise_sigma"),
                ch.noise_sigma,
                0.0,
                f64::MAX,
                "[0, inf)",
            )?;
            if ch.kind == ChannelKindName::RandomMlp {
                check_positive(&field("hidden_width"), ch.hidden_width)?;
            }
        }
        let mut seen = BTreeSet::new();
        for (i, a) in self.attacks.iter().enumerate() {
            if !seen.insert(*a) {
                return Err(invalid(format!("attacks[{i}]"), "duplicate attack"));
            }
        }
        let t = &self.train;
        check_positive("train.batch_size", t.batch_size)?;
        check_positive("train.validate_every", t.validate_every)?;
        if !(t.validation_fraction > 0.0 && t.validation_fraction < 0.5) {
            return Err(invalid("train.validation_fraction", "must lie in (0, 0.5)"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) {
            return Err(invalid("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&t.beta2) {
            return Err(invalid("train.beta2", "must lie in [0, 1)"));
        }
        if !(t.eps.is_finite() && t.eps > 0.0) {
            return Err(invalid("train.eps", "must be positive"));
        }
        if t.hidden_factors.contains(&0) {
            return Err(invalid("train.hidden_factors", "entries must be positive"));
        }
        if !(t.init_gain.is_finite() && t.init_gain > 0.0) {
            return Err(invalid("train.init_gain", "must be positive"));
        }
        if !(0.0..std::f64::consts::PI).contains(&t.aam_margin) {
            return Err(invalid(
                "train.aam_margin",
                format!("must lie in [0, pi), got {}", t.aam_margin),
            ));
        }
        if !(t.aam_scale.is_finite() && t.aam_scale > 0.0) {
            return Err(invalid("train.aam_scale", "must be positive"));
        }
        let n_attacker = a.n_speakers * a.utts_per_speaker;
        let n_val = ((t.validation_fraction * n_attacker as f64).round() as usize).max(1);
        let needs_training = self
            .attacks
            .iter()
            .any(|a| matches!(a, AttackName::SemiInformed | AttackName::DriftReversal));
        if needs_training && n_attacker < n_val + t.batch_size {
            return Err(invalid(
                "attacker_corpus.n_speakers",
                format!(
                    "{n_attacker} training utterances leave less than one batch after validation"
                ),
            ));
        }
        if self.projection.speakers > c.n_speakers {
            return Err(invalid(
                "projection.speakers",
                format!("must not exceed corpus.n_speakers ({})", c.n_speakers),
            ));
        }
        Ok(())
    }

    /// Canonical JSON text (pretty, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn eval_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            n_speakers: self.corpus.n_speakers,
            utts_per_speaker: self.corpus.utts_per_speaker,
            dim: self.corpus.dim,
            within_speaker_sigma: self.corpus.within_speaker_sigma,
            seed: derive_seed(self.seed, "corpus:eval"),
            first_speaker_id: 0,
        }
    }

    /// Attacker speakers start right after the evaluation speakers.
    pub fn attacker_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            n_speakers: self.attacker_corpus.n_speakers,
            utts_per_speaker: self.attacker_corpus.utts_per_speaker,
            dim: self.corpus.dim,
            within_speaker_sigma: self.corpus.within_speaker_sigma,
            seed: derive_seed(self.seed, "corpus:attacker"),
            first_speaker_id: self.corpus.n_speakers as u32,
        }
    }

    pub fn anonymizer_config(&self, seed: u64) -> Option<AnonymizerConfig> {
        self.anonymizer.enabled.then_some(AnonymizerConfig {
            k: self.anonymizer.k,
            k_star: self.anonymizer.k_star,
            level: match self.anonymizer.level {
                LevelName::Utterance => AnonymizationLevel::Utterance,
                LevelName::Speaker => AnonymizationLevel::Speaker,
            },
            renormalize: self.anonymizer.renormalize,
            seed,
        })
    }

    pub fn channel_spec(&self, ch: &ChannelSection) -> ChannelSpec {
        ChannelSpec {
            kind: ch.kind.into(),
            lambda: ch.lambda,
            noise_sigma: ch.noise_sigma,
            hidden_width: ch.hidden_width,
            dim: self.corpus.dim,
            seed: ch
                .seed
                .unwrap_or_else(|| derive_seed(self.seed, &Self::channel_tag(&ch.name))),
        }
    }

    pub fn learned_attack_config(&self) -> LearnedAttackConfig {
        let t = &self.train;
        LearnedAttackConfig {
            train: TrainConfig {
                epochs: t.epochs,
                batch_size: t.batch_size,
                validate_every: t.validate_every,
                validation_fraction: t.validation_fraction,
                shuffle_seed: 0,
                adam: AdamConfig {
                    lr: t.lr,
                    beta1: t.beta1,
                    beta2: t.beta2,
                    eps: t.eps,
                },
            },
            hidden_factors: t.hidden_factors.clone(),
            init_gain: t.init_gain,
            aam_margin: t.aam_margin,
            aam_scale: t.aam_scale,
        }
    }
}
