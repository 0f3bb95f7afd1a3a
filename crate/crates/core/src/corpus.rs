//! Synthetic speakers, utterance embeddings, the external x-vector pool and
//! the enrollment/trial protocol.
//!
//! # CSV format
//!
//! Embedding tables are written with a header row
//! `utt_id,spk_id,x0,x1,...,x{m-1}` followed by one row per utterance. Pool
//! tables use `pool_id,x0,...`. Values are printed with Rust's shortest
//! round-trip formatting for `f64`, so reading a file back reproduces every
//! value bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use crate::embedding::{centroid_of, l2_normalize, EmbeddingVector};
use crate::error::{Error, Result};
use crate::rng::{self, partial_shuffle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpeakerId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UtteranceId(pub u32);

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UtteranceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The three embedding spaces an utterance passes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    /// `x_o`, extracted from the original utterance.
    Original,
    /// `x_p`, the anonymizer output fed to the vocoder.
    PreVocoder,
    /// `x_a`, extracted from the vocoder output.
    Anonymized,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Original, Domain::PreVocoder, Domain::Anonymized];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Original => "O",
            Domain::PreVocoder => "P",
            Domain::Anonymized => "A",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of within-speaker Gaussian noise.
    pub within_speaker_sigma: f64,
    pub seed: u64,
    /// Id of the first speaker. Lets two corpora use disjoint id ranges.
    pub first_speaker_id: u32,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::config("n_speakers", "must be at least 2"));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::config("utts_per_speaker", "must be at least 2"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if !(self.within_speaker_sigma >= 0.0 && self.within_speaker_sigma.is_finite()) {
            return Err(Error::config(
                "within_speaker_sigma",
                "must be finite and non-negative",
            ));
        }
        let total =
            (self.first_speaker_id as u64 + self.n_speakers as u64) * self.utts_per_speaker as u64;
        if total > u32::MAX as u64 {
            return Err(Error::config("n_speakers", "utterance ids overflow u32"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub id: SpeakerId,
    pub centroid: EmbeddingVector,
}

/// One utterance's embeddings across the three domains.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utt: UtteranceId,
    pub spk: SpeakerId,
    pub x_o: EmbeddingVector,
    pub x_p: Option<EmbeddingVector>,
    pub x_a: Option<EmbeddingVector>,
}

impl UtteranceRecord {
    pub fn embedding(&self, domain: Domain) -> Option<&EmbeddingVector> {
        match domain {
            Domain::Original => Some(&self.x_o),
            Domain::PreVocoder => self.x_p.as_ref(),
            Domain::Anonymized => self.x_a.as_ref(),
        }
    }
}

/// Speakers and their utterances. Utterances are stored in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub speakers: Vec<Speaker>,
    pub utterances: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn get(&self, utt: UtteranceId) -> Option<&UtteranceRecord> {
        self.utterances
            .binary_search_by_key(&utt, |u| u.utt)
            .ok()
            .map(|i| &self.utterances[i])
    }

    pub fn speaker_ids(&self) -> Vec<SpeakerId> {
        self.speakers.iter().map(|s| s.id).collect()
    }

    /// Utterances grouped by speaker, in id order.
    pub fn by_speaker(&self) -> BTreeMap<SpeakerId, Vec<&UtteranceRecord>> {
        let mut map: BTreeMap<SpeakerId, Vec<&UtteranceRecord>> = BTreeMap::new();
        for u in &self.utterances {
            map.entry(u.spk).or_default().push(u);
        }
        map
    }

    /// Sub-corpus holding only the listed utterances (and their speakers).
    pub fn subset(&self, utts: &[UtteranceId]) -> Result<Corpus> {
        let mut ids = utts.to_vec();
        ids.sort();
        ids.dedup();
        let mut utterances = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = self
                .get(id)
                .ok_or_else(|| Error::Protocol(format!("utterance {id} not in corpus")))?;
            utterances.push(rec.clone());
        }
        let mut speakers: Vec<Speaker> = self
            .speakers
            .iter()
            .filter(|s| utterances.iter().any(|u| u.spk == s.id))
            .cloned()
            .collect();
        speakers.sort_by_key(|s| s.id);
        Ok(Corpus {
            dim: self.dim,
            speakers,
            utterances,
        })
    }

    /// Rebuilds a corpus from `(utt, spk, x_o)` rows, e.g. read from CSV.
    /// Speaker centroids are the normalized means of their utterances.
    pub fn from_rows(rows: Vec<(UtteranceId, SpeakerId, EmbeddingVector)>) -> Result<Corpus> {
        let dim = rows
            .first()
            .map(|r| r.2.dim())
            .ok_or_else(|| Error::domain("corpus needs at least one utterance"))?;
        let mut utterances: Vec<UtteranceRecord> = rows
            .into_iter()
            .map(|(utt, spk, x_o)| UtteranceRecord {
                utt,
                spk,
                x_o,
                x_p: None,
                x_a: None,
            })
            .collect();
        utterances.sort_by_key(|u| u.utt);
        if utterances.windows(2).any(|w| w[0].utt == w[1].utt) {
            return Err(Error::Parse("duplicate utterance id".into()));
        }
        let mut grouped: BTreeMap<SpeakerId, Vec<&EmbeddingVector>> = BTreeMap::new();
        for u in &utterances {
            if u.x_o.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: u.x_o.dim(),
                });
            }
            grouped.entry(u.spk).or_default().push(&u.x_o);
        }
        let speakers = grouped
            .into_iter()
            .map(|(id, vs)| {
                Ok(Speaker {
                    id,
                    centroid: l2_normalize(&centroid_of(vs)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            dim,
            speakers,
            utterances,
        })
    }
}

/// Draws speaker centroids uniformly on the unit sphere and utterance
/// embeddings as `normalize(centroid + sigma * g)`, `g ~ N(0, I)`.
///
/// Draw order: for each speaker, its centroid, then one Gaussian vector per
/// utterance. With `sigma == 0` utterances are exact copies of the centroid.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.n_speakers {
        let id = SpeakerId(cfg.first_speaker_id + s as u32);
        let centroid = rng::unit_sphere(&mut rng, cfg.dim);
        for j in 0..cfg.utts_per_speaker {
            let g = rng::standard_normal_vec(&mut rng, cfg.dim);
            let x_o = if cfg.within_speaker_sigma == 0.0 {
                centroid.clone()
            } else {
                let raw: Vec<f64> = centroid
                    .as_slice()
                    .iter()
                    .zip(&g)
                    .map(|(c, n)| c + cfg.within_speaker_sigma * n)
                    .collect();
                l2_normalize(&EmbeddingVector::new(raw)?)?
            };
            utterances.push(UtteranceRecord {
                utt: UtteranceId(id.0 * cfg.utts_per_speaker as u32 + j as u32),
                spk: id,
                x_o,
                x_p: None,
                x_a: None,
            });
        }
        speakers.push(Speaker { id, centroid });
    }
    Ok(Corpus {
        dim: cfg.dim,
        speakers,
        utterances,
    })
}

/// External pool of unit-norm x-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub vectors: Vec<EmbeddingVector>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.dim())
    }
}

pub fn generate_pool(size: usize, dim: usize, seed: u64) -> Result<Pool> {
    if size == 0 {
        return Err(Error::config("pool.size", "must be positive"));
    }
    if dim == 0 {
        return Err(Error::config("dim", "must be positive"));
    }
    let mut rng = rng::seeded(seed);
    let vectors = (0..size).map(|_| rng::unit_sphere(&mut rng, dim)).collect();
    Ok(Pool { vectors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_spk: SpeakerId,
    pub utt: UtteranceId,
    pub is_target: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialProtocol {
    pub enroll: BTreeMap<SpeakerId, Vec<UtteranceId>>,
    pub trials: Vec<Trial>,
}

impl TrialProtocol {
    pub fn enrollment_utterances(&self) -> Vec<UtteranceId> {
        self.enroll.values().flatten().copied().collect()
    }

    pub fn trial_utterances(&self) -> Vec<UtteranceId> {
        let mut v: Vec<UtteranceId> = self.trials.iter().map(|t| t.utt).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn target_count(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn nontarget_count(&self) -> usize {
        self.trials.len() - self.target_count()
    }
}

/// The first `enroll_per_spk` utterances of each speaker (by id) enroll it;
/// every remaining utterance is a trial against its own speaker and against
/// `nontarget_per_trial_spk` distinct other speakers drawn with `seed`.
pub fn build_protocol(
    corpus: &Corpus,
    enroll_per_spk: usize,
    nontarget_per_trial_spk: usize,
    seed: u64,
) -> Result<TrialProtocol> {
    if enroll_per_spk == 0 {
        return Err(Error::config("enroll_per_spk", "must be at least 1"));
    }
    let speakers = corpus.speaker_ids();
    if nontarget_per_trial_spk >= speakers.len() {
        return Err(Error::config(
            "nontarget_per_trial_spk",
            format!(
                "needs {nontarget_per_trial_spk} other speakers but the corpus has {}",
                speakers.len()
            ),
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut enroll = BTreeMap::new();
    let mut trials = Vec::new();
    for (spk, utts) in corpus.by_speaker() {
        if utts.len() <= enroll_per_spk {
            return Err(Error::config(
                "enroll_per_spk",
                format!(
                    "speaker {spk} has {} utterances, need more than {enroll_per_spk}",
                    utts.len()
                ),
            ));
        }
        enroll.insert(spk, utts[..enroll_per_spk].iter().map(|u| u.utt).collect());
        let others: Vec<SpeakerId> = speakers.iter().copied().filter(|&s| s != spk).collect();
        for u in &utts[enroll_per_spk..] {
            trials.push(Trial {
                enroll_spk: spk,
                utt: u.utt,
                is_target: true,
            });
            let mut candidates = others.clone();
            partial_shuffle(&mut candidates, nontarget_per_trial_spk, &mut rng);
            for &other in &candidates[..nontarget_per_trial_spk] {
                trials.push(Trial {
                    enroll_spk: other,
                    utt: u.utt,
                    is_target: false,
                });
            }
        }
    }
    Ok(TrialProtocol { enroll, trials })
}

fn header(first: &[&str], dim: usize) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|i| format!("x{i}")))
        .collect()
}

/// Writes one domain of a corpus as `utt_id,spk_id,x0..`. Utterances missing
/// the requested domain are an error.
pub fn write_corpus_csv<W: Write>(corpus: &Corpus, domain: Domain, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(&["utt_id", "spk_id"], corpus.dim))?;
    for u in &corpus.utterances {
        let v = u.embedding(domain).ok_or_else(|| {
            Error::Protocol(format!(
                "utterance {} has no {} embedding",
                u.utt,
                domain.tag()
            ))
        })?;
        let mut row = vec![u.utt.to_string(), u.spk.to_string()];
        row.extend(v.as_slice().iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_csv<R: Read>(input: R) -> Result<Corpus> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Parse(format!("row {}: too few columns", line + 2)));
        }
        let parse_u32 = |s: &str| {
            s.parse::<u32>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
        };
        let utt = UtteranceId(parse_u32(&rec[0])?);
        let spk = SpeakerId(parse_u32(&rec[1])?);
        rows.push((utt, spk, parse_values(&rec, 2, line)?));
    }
    Corpus::from_rows(rows)
}

pub fn write_pool_csv<W: Write>(pool: &Pool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(&["pool_id"], pool.dim()))?;
    for (i, v) in pool.vectors.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(v.as_slice().iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pool_csv<R: Read>(input: R) -> Result<Pool> {
    let mut r = csv::Reader::from_reader(input);
    let mut vectors = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        vectors.push(parse_values(&rec, 1, line)?);
    }
    if vectors.is_empty() {
        return Err(Error::Parse("pool file has no rows".into()));
    }
    Ok(Pool { vectors })
}

fn parse_values(rec: &csv::StringRecord, skip: usize, line: usize) -> Result<EmbeddingVector> {
    let values = rec
        .iter()
        .skip(skip)
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingVector::new(values)
}
