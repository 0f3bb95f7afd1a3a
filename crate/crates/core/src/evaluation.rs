//! Scoring, equal error rates, drift statistics and 2-D projections.
//!
//! # EER convention
//!
//! A trial is accepted when its score is at least the threshold `t`, so
//! `FRR(t)` is the fraction of target scores below `t` and `FAR(t)` the
//! fraction of nontarget scores at or above `t`. Candidate thresholds are
//! the distinct scores plus `+inf`. The reported threshold minimizes
//! `|FRR - FAR|` (the smallest such threshold on ties) and the EER is
//! `(FAR + FRR) / 2` there. Comparisons are done on integer counts, so the
//! result is exact.
//!
//! # CSV outputs
//!
//! | file | columns |
//! |------|---------|
//! | scores | `enroll_spk,utt,is_target,score` (`is_target` is `1` or `0`) |
//! | drift report | `mean_target,std_target,mean_drift,std_drift` |
//! | EER table | `evaluation,eer_percent,threshold,n_target,n_nontarget` |
//! | projection | `x,y,domain,speaker` |

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::{Corpus, Domain, SpeakerId, Trial, TrialProtocol, UtteranceId};
use crate::embedding::{
    centroid_of, cosine_distance, cosine_similarity, l2_normalize, EmbeddingVector,
};
use crate::error::{Error, Result};

/// Target and nontarget similarity scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    /// Accept-if-at-least threshold; `+inf` when rejecting everything is optimal.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&s| s < t)
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let nt = scores.target.len();
    let nn = scores.nontarget.len();
    if nt == 0 {
        return Err(Error::domain("EER needs at least one target score"));
    }
    if nn == 0 {
        return Err(Error::domain("EER needs at least one nontarget score"));
    }
    if scores
        .target
        .iter()
        .chain(&scores.nontarget)
        .any(|s| s.is_nan())
    {
        return Err(Error::domain("scores contain NaN"));
    }
    let mut target = scores.target.clone();
    let mut nontarget = scores.nontarget.clone();
    target.sort_by(f64::total_cmp);
    nontarget.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = target.iter().chain(&nontarget).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);

    let mut best: Option<(u128, f64, usize, usize)> = None;
    for &t in &candidates {
        let fr = count_below(&target, t);
        let fa = nn - count_below(&nontarget, t);
        let gap = ((fr * nn) as i128 - (fa * nt) as i128).unsigned_abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, fr, fa));
        }
    }
    let (_, threshold, fr, fa) = best.expect("candidate list is never empty");
    let frr = fr as f64 / nt as f64;
    let far = fa as f64 / nn as f64;
    Ok(EerResult {
        eer: (far + frr) / 2.0,
        threshold,
        far,
        frr,
        n_target: nt,
        n_nontarget: nn,
    })
}

/// Speaker model: the normalized mean of its enrollment embeddings.
pub fn enrollment_model(embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    enrollment_model_of(embeddings.iter())
}

pub fn enrollment_model_of<'a, I>(embeddings: I) -> Result<EmbeddingVector>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    l2_normalize(&centroid_of(embeddings)?)
}

/// Where the scorer reads an utterance's embedding from.
pub trait EmbeddingSource {
    fn embedding(&self, utt: UtteranceId) -> Option<&EmbeddingVector>;
    fn describe(&self) -> String;
}

/// One domain of a corpus.
#[derive(Clone, Copy, Debug)]
pub struct DomainView<'a> {
    pub corpus: &'a Corpus,
    pub domain: Domain,
}

impl<'a> DomainView<'a> {
    pub fn new(corpus: &'a Corpus, domain: Domain) -> Self {
        Self { corpus, domain }
    }
}

impl EmbeddingSource for DomainView<'_> {
    fn embedding(&self, utt: UtteranceId) -> Option<&EmbeddingVector> {
        self.corpus.get(utt).and_then(|u| u.embedding(self.domain))
    }

    fn describe(&self) -> String {
        format!("domain {}", self.domain.tag())
    }
}

/// Arbitrary per-utterance embeddings, e.g. the output of a learned map.
pub type EmbeddingMap = BTreeMap<UtteranceId, EmbeddingVector>;

impl EmbeddingSource for EmbeddingMap {
    fn embedding(&self, utt: UtteranceId) -> Option<&EmbeddingVector> {
        self.get(&utt)
    }

    fn describe(&self) -> String {
        "custom embeddings".to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// Scores in protocol trial order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialScores {
    pub rows: Vec<ScoredTrial>,
}

impl TrialScores {
    pub fn score_set(&self) -> ScoreSet {
        let mut set = ScoreSet::default();
        for r in &self.rows {
            if r.trial.is_target {
                set.target.push(r.score);
            } else {
                set.nontarget.push(r.score);
            }
        }
        set
    }

    pub fn eer(&self) -> Result<EerResult> {
        compute_eer(&self.score_set())
    }
}

/// Scores every trial as the cosine similarity between the claimed
/// speaker's enrollment model (built from `enroll`) and the trial
/// utterance's embedding (read from `trial`).
pub fn score_protocol(
    protocol: &TrialProtocol,
    enroll: &dyn EmbeddingSource,
    trial: &dyn EmbeddingSource,
) -> Result<TrialScores> {
    let lookup = |src: &dyn EmbeddingSource, utt: UtteranceId| -> Result<EmbeddingVector> {
        src.embedding(utt).cloned().ok_or_else(|| {
            Error::Protocol(format!(
                "utterance {utt} has no embedding in {}",
                src.describe()
            ))
        })
    };
    let mut models: BTreeMap<SpeakerId, EmbeddingVector> = BTreeMap::new();
    for (spk, utts) in &protocol.enroll {
        let vs = utts
            .iter()
            .map(|&u| lookup(enroll, u))
            .collect::<Result<Vec<_>>>()?;
        models.insert(*spk, enrollment_model(&vs)?);
    }
    let mut rows = Vec::with_capacity(protocol.trials.len());
    for t in &protocol.trials {
        let model = models
            .get(&t.enroll_spk)
            .ok_or_else(|| Error::Protocol(format!("speaker {} is not enrolled", t.enroll_spk)))?;
        let x = lookup(trial, t.utt)?;
        rows.push(ScoredTrial {
            trial: *t,
            score: cosine_similarity(model, &x)?,
        });
    }
    Ok(TrialScores { rows })
}

/// Convenience wrapper scoring enrollment and trials in one domain each.
pub fn score_domains(
    protocol: &TrialProtocol,
    corpus: &Corpus,
    enroll: Domain,
    trial: Domain,
) -> Result<TrialScores> {
    score_protocol(
        protocol,
        &DomainView::new(corpus, enroll),
        &DomainView::new(corpus, trial),
    )
}

/// Target distance `d(x_o, x_p)` and vocoder drift `d(x_p, x_a)` aggregates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftReport {
    pub mean_target: f64,
    pub std_target: f64,
    pub mean_drift: f64,
    pub std_drift: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Means and population standard deviations over all utterances.
pub fn drift_target_stats(corpus: &Corpus) -> Result<DriftReport> {
    if corpus.utterances.is_empty() {
        return Err(Error::Protocol("corpus has no utterances".into()));
    }
    let mut target = Vec::with_capacity(corpus.utterances.len());
    let mut drift = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let missing = |d: Domain| {
            Error::Protocol(format!("utterance {} has no {} embedding", u.utt, d.tag()))
        };
        let x_p = u.x_p.as_ref().ok_or_else(|| missing(Domain::PreVocoder))?;
        let x_a = u.x_a.as_ref().ok_or_else(|| missing(Domain::Anonymized))?;
        target.push(cosine_distance(&u.x_o, x_p)?);
        drift.push(cosine_distance(x_p, x_a)?);
    }
    let (mean_target, std_target) = mean_std(&target);
    let (mean_drift, std_drift) = mean_std(&drift);
    Ok(DriftReport {
        mean_target,
        std_target,
        mean_drift,
        std_drift,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub domain: String,
    pub speaker: SpeakerId,
}

/// Relative eigenvalue size below which a principal axis counts as absent.
const RANK_TOLERANCE: f64 = 1e-12;

/// Projects mean-centered points onto the top two principal components of
/// their covariance. Each component is oriented so that its
/// largest-magnitude coordinate is positive (the first such coordinate when
/// several agree within `1e-9`). Axes whose eigenvalue is zero (relative to
/// the largest) give coordinate 0.
pub fn project_2d(points: &[(EmbeddingVector, String, SpeakerId)]) -> Result<Vec<ProjectedPoint>> {
    if points.len() < 3 {
        return Err(Error::domain("projection needs at least 3 points"));
    }
    let dim = points[0].0.dim();
    if dim < 2 {
        return Err(Error::domain("projection needs dimension at least 2"));
    }
    if let Some(p) = points.iter().find(|p| p.0.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.0.dim(),
        });
    }
    let n = points.len();
    let mean = centroid_of(points.iter().map(|p| &p.0))?;
    let centered = DMatrix::from_fn(n, dim, |i, j| points[i].0[j] - mean[j]);
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);

    let mut axes: Vec<Option<Vec<f64>>> = Vec::with_capacity(2);
    for &k in &order[..2] {
        let lambda = eig.eigenvalues[k];
        if top == 0.0 || lambda <= RANK_TOLERANCE * top {
            axes.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let max = v.iter().map(|c| c.abs()).fold(0.0, f64::max);
        let lead = v
            .iter()
            .position(|c| c.abs() >= max - 1e-9)
            .expect("nonempty vector");
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        axes.push(Some(v));
    }
    let coord = |i: usize, axis: &Option<Vec<f64>>| match axis {
        Some(v) => centered.row(i).iter().zip(v).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    Ok((0..n)
        .map(|i| ProjectedPoint {
            x: coord(i, &axes[0]),
            y: coord(i, &axes[1]),
            domain: points[i].1.clone(),
            speaker: points[i].2,
        })
        .collect())
}

pub fn write_scores_csv<W: Write>(scores: &TrialScores, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["enroll_spk", "utt", "is_target", "score"])?;
    for r in &scores.rows {
        w.write_record([
            r.trial.enroll_spk.to_string(),
            r.trial.utt.to_string(),
            if r.trial.is_target { "1" } else { "0" }.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "target" => Some(true),
        "0" | "false" | "nontarget" => Some(false),
        _ => None,
    }
}

/// Reads a scores CSV with the columns of [`write_scores_csv`]; `is_target`
/// may also be `true`/`false`. Columns are located by header name.
pub fn read_scores_csv<R: Read>(input: R) -> Result<TrialScores> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse(format!("missing column `{name}`")))
    };
    let (c_spk, c_utt, c_target, c_score) = (
        col("enroll_spk")?,
        col("utt")?,
        col("is_target")?,
        col("score")?,
    );
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let bad = |what: &str| {
            Error::Parse(format!(
                "line {line}: invalid {what} `{}`",
                field(match what {
                    "enroll_spk" => c_spk,
                    "utt" => c_utt,
                    "is_target" => c_target,
                    _ => c_score,
                })
            ))
        };
        let spk = field(c_spk).parse::<u32>().map_err(|_| bad("enroll_spk"))?;
        let utt = field(c_utt).parse::<u32>().map_err(|_| bad("utt"))?;
        let is_target = parse_flag(field(c_target)).ok_or_else(|| bad("is_target"))?;
        let score = field(c_score).parse::<f64>().map_err(|_| bad("score"))?;
        if score.is_nan() {
            return Err(bad("score"));
        }
        rows.push(ScoredTrial {
            trial: Trial {
                enroll_spk: SpeakerId(spk),
                utt: UtteranceId(utt),
                is_target,
            },
            score,
        });
    }
    Ok(TrialScores { rows })
}

pub fn write_drift_report_csv<W: Write>(report: &DriftReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mean_target", "std_target", "mean_drift", "std_drift"])?;
    w.write_record([
        report.mean_target.to_string(),
        report.std_target.to_string(),
        report.mean_drift.to_string(),
        report.std_drift.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// One row of an EER table: what was evaluated and the result.
#[derive(Clone, Debug, PartialEq)]
pub struct EerRow {
    pub evaluation: String,
    pub result: EerResult,
}

pub fn write_eer_table_csv<W: Write>(rows: &[EerRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "evaluation",
        "eer_percent",
        "threshold",
        "n_target",
        "n_nontarget",
    ])?;
    for r in rows {
        w.write_record([
            r.evaluation.clone(),
            (100.0 * r.result.eer).to_string(),
            r.result.threshold.to_string(),
            r.result.n_target.to_string(),
            r.result.n_nontarget.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_projection_csv<W: Write>(points: &[ProjectedPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "domain", "speaker"])?;
    for p in points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.domain.clone(),
            p.speaker.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelKind, ChannelModel, ChannelSpec};
    use crate::corpus::{build_protocol, generate_corpus, CorpusConfig, UtteranceRecord};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet {
            target: t.to_vec(),
            nontarget: n.to_vec(),
        }
    }

    /// Independent EER: evaluates the rates below every score, at every
    /// distinct score, at every midpoint and at +inf using floating-point
    /// rates, keeps the smallest candidate with the smallest gap, and reports
    /// the smallest distinct score at or above it as the threshold.
    fn brute_force_eer(s: &ScoreSet) -> (f64, f64, f64, f64) {
        let mut all: Vec<f64> = s.target.iter().chain(&s.nontarget).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut cands = vec![all[0] - 1.0];
        for (i, &v) in all.iter().enumerate() {
            cands.push(v);
            if i + 1 < all.len() {
                cands.push(0.5 * (v + all[i + 1]));
            }
        }
        cands.push(f64::INFINITY);
        let rates = |t: f64| {
            let frr = s.target.iter().filter(|&&x| x < t).count() as f64 / s.target.len() as f64;
            let far =
                s.nontarget.iter().filter(|&&x| x >= t).count() as f64 / s.nontarget.len() as f64;
            (frr, far)
        };
        let mut best = (f64::INFINITY, 0.0);
        for &t in &cands {
            let (frr, far) = rates(t);
            let gap = (frr - far).abs();
            if gap < best.0 - 1e-12 {
                best = (gap, t);
            }
        }
        let t = best.1;
        let threshold = all
            .iter()
            .copied()
            .find(|&v| v >= t)
            .unwrap_or(f64::INFINITY);
        let (frr, far) = rates(t);
        ((frr + far) / 2.0, threshold, frr, far)
    }

    #[test]
    fn eer_separated_is_zero() {
        let r = compute_eer(&set(&[0.9, 0.8], &[0.1, 0.3, 0.5])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!(r.threshold, 0.8);
    }

    #[test]
    fn eer_identical_multisets_is_half() {
        let s = [0.1, 0.4, 0.4, 0.9];
        assert_eq!(compute_eer(&set(&s, &s)).unwrap().eer, 0.5);
        assert_eq!(compute_eer(&set(&[0.3], &[0.3])).unwrap().eer, 0.5);
    }

    #[test]
    fn eer_hand_example() {
        let r = compute_eer(&set(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1])).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.threshold, 0.75);
        assert_eq!(r.far, 1.0 / 3.0);
        assert_eq!(r.frr, 1.0 / 3.0);
        assert_eq!((r.n_target, r.n_nontarget), (3, 3));
    }

    #[test]
    fn eer_fully_inverted_is_one() {
        let r = compute_eer(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap();
        assert_eq!(r.eer, 1.0);
    }

    #[test]
    fn eer_empty_class() {
        assert!(matches!(
            compute_eer(&set(&[], &[0.1])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            compute_eer(&set(&[0.1], &[])),
            Err(Error::Domain(_))
        ));
    }

    fn random_set(rng: &mut impl Rng) -> ScoreSet {
        let nt = rng.random_range(1..=1000);
        let nn = rng.random_range(1..=1000);
        // coarse grids force ties, fine grids give near-continuous scores
        let levels = [3u32, 10, 50, 1000, 1_000_000][rng.random_range(0..5)];
        let shift = rng.random_range(0.0..0.5);
        let mut draw = |bias: f64| (rng.random_range(0..levels) as f64 / levels as f64) + bias;
        ScoreSet {
            target: (0..nt).map(|_| draw(shift)).collect(),
            nontarget: (0..nn).map(|_| draw(0.0)).collect(),
        }
    }

    #[test]
    fn eer_matches_brute_force_on_random_sets() {
        let mut rng = seeded(2024);
        for case in 0..200 {
            let s = random_set(&mut rng);
            let r = compute_eer(&s).unwrap();
            let (eer, threshold, frr, far) = brute_force_eer(&s);
            assert_eq!(r.eer, eer, "case {case}");
            assert_eq!(r.threshold, threshold, "case {case}");
            assert_eq!((r.frr, r.far), (frr, far), "case {case}");
        }
    }

    proptest! {
        #[test]
        fn eer_invariant_under_increasing_maps(
            t in prop::collection::vec(-3.0f64..3.0, 1..60),
            n in prop::collection::vec(-3.0f64..3.0, 1..60),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            let base = compute_eer(&set(&t, &n)).unwrap();
            let map = |v: &f64| (a * v + b).exp();
            let tt: Vec<f64> = t.iter().map(map).collect();
            let nn: Vec<f64> = n.iter().map(map).collect();
            let mapped = compute_eer(&set(&tt, &nn)).unwrap();
            prop_assert_eq!(base.eer, mapped.eer);
            prop_assert_eq!((base.far, base.frr), (mapped.far, mapped.frr));
        }

        #[test]
        fn eer_gap_bounded_without_ties(
            t in prop::collection::btree_set(0u32..100_000, 1..80),
            n in prop::collection::btree_set(100_000u32..200_000, 1..80),
            shift in 0u32..200_000,
        ) {
            // disjoint integer sets shifted by a common offset never tie
            let t: Vec<f64> = t.iter().map(|&v| ((v + shift) % 200_000) as f64).collect();
            let n: Vec<f64> = n.iter().map(|&v| ((v + shift) % 200_000) as f64).collect();
            let r = compute_eer(&set(&t, &n)).unwrap();
            let bound = 1.0 / t.len().min(n.len()) as f64;
            prop_assert!((r.far - r.frr).abs() <= bound + 1e-15);
            prop_assert!((0.0..=1.0).contains(&r.eer));
        }
    }

    #[test]
    fn enrollment_model_examples() {
        let v = ev(&[3.0, 4.0]);
        let single = enrollment_model(std::slice::from_ref(&v)).unwrap();
        assert!((single[0] - 0.6).abs() < 1e-15 && (single[1] - 0.8).abs() < 1e-15);
        let twice = enrollment_model(&[v.clone(), v]).unwrap();
        assert_eq!(twice, single);
        let diag = enrollment_model(&[ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((diag[0] - h).abs() < 1e-15 && (diag[1] - h).abs() < 1e-15);
        assert!(enrollment_model(&[ev(&[1.0, 0.0]), ev(&[-1.0, 0.0])]).is_err());
    }

    fn record(utt: u32, spk: u32, x: &[f64]) -> UtteranceRecord {
        UtteranceRecord {
            utt: UtteranceId(utt),
            spk: SpeakerId(spk),
            x_o: ev(x),
            x_p: None,
            x_a: None,
        }
    }

    /// Speaker 0 enrolls on (1,0) and (0,1); speaker 1 on (-1,0).
    /// Trial utterances: 2 = (1,1) of speaker 0, 4 = (-1,1) of speaker 1.
    fn hand_corpus() -> (Corpus, TrialProtocol) {
        let corpus = Corpus::from_rows(
            [
                record(0, 0, &[1.0, 0.0]),
                record(1, 0, &[0.0, 1.0]),
                record(2, 0, &[1.0, 1.0]),
                record(3, 1, &[-1.0, 0.0]),
                record(4, 1, &[-1.0, 1.0]),
            ]
            .into_iter()
            .map(|r| (r.utt, r.spk, r.x_o))
            .collect(),
        )
        .unwrap();
        let protocol = TrialProtocol {
            enroll: [
                (SpeakerId(0), vec![UtteranceId(0), UtteranceId(1)]),
                (SpeakerId(1), vec![UtteranceId(3)]),
            ]
            .into_iter()
            .collect(),
            trials: vec![
                Trial {
                    enroll_spk: SpeakerId(0),
                    utt: UtteranceId(2),
                    is_target: true,
                },
                Trial {
                    enroll_spk: SpeakerId(1),
                    utt: UtteranceId(2),
                    is_target: false,
                },
                Trial {
                    enroll_spk: SpeakerId(1),
                    utt: UtteranceId(4),
                    is_target: true,
                },
                Trial {
                    enroll_spk: SpeakerId(0),
                    utt: UtteranceId(4),
                    is_target: false,
                },
            ],
        };
        (corpus, protocol)
    }

    #[test]
    fn hand_score_matrix() {
        let (corpus, protocol) = hand_corpus();
        let scores = score_domains(&protocol, &corpus, Domain::Original, Domain::Original).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // model 0 = (h, h), model 1 = (-1, 0)
        let expected = [1.0, -h, h, 0.0];
        for (row, want) in scores.rows.iter().zip(expected) {
            assert!((row.score - want).abs() < 1e-15, "{} vs {want}", row.score);
        }
        let eer = scores.eer().unwrap();
        assert_eq!(eer.eer, 0.0);
        assert!((eer.threshold - h).abs() < 1e-15);
    }

    #[test]
    fn missing_embedding_names_utterance() {
        let (corpus, protocol) = hand_corpus();
        let err =
            score_domains(&protocol, &corpus, Domain::Original, Domain::Anonymized).unwrap_err();
        assert!(
            matches!(&err, Error::Protocol(m) if m.contains("utterance 2")),
            "{err}"
        );
    }

    #[test]
    fn custom_map_scores() {
        let (corpus, protocol) = hand_corpus();
        let map: EmbeddingMap = corpus
            .utterances
            .iter()
            .map(|u| (u.utt, ev(&[0.0, 1.0])))
            .collect();
        let scores =
            score_protocol(&protocol, &DomainView::new(&corpus, Domain::Original), &map).unwrap();
        assert!((scores.rows[2].score - 0.0).abs() < 1e-15);
    }

    #[test]
    fn drift_stats_hand_corpus() {
        let mut corpus = Corpus::from_rows(vec![
            (UtteranceId(0), SpeakerId(0), ev(&[1.0, 0.0])),
            (UtteranceId(1), SpeakerId(0), ev(&[0.0, 1.0])),
            (UtteranceId(2), SpeakerId(1), ev(&[1.0, 0.0])),
        ])
        .unwrap();
        // targets: d((1,0),(0,1)) = 1, d((0,1),(0,1)) = 0, d((1,0),(-1,0)) = 2
        // drifts:  d((0,1),(0,1)) = 0, d((0,1),(1,0)) = 1, d((-1,0),(-1,0)) = 0
        let xp = [ev(&[0.0, 1.0]), ev(&[0.0, 1.0]), ev(&[-1.0, 0.0])];
        let xa = [ev(&[0.0, 1.0]), ev(&[1.0, 0.0]), ev(&[-1.0, 0.0])];
        for (i, u) in corpus.utterances.iter_mut().enumerate() {
            u.x_p = Some(xp[i].clone());
            u.x_a = Some(xa[i].clone());
        }
        let r = drift_target_stats(&corpus).unwrap();
        assert!((r.mean_target - 1.0).abs() < 1e-15);
        assert!((r.std_target - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r.mean_drift - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.std_drift - (2.0f64 / 9.0).sqrt()).abs() < 1e-15);
    }

    fn small_corpus(seed: u64) -> Corpus {
        generate_corpus(&CorpusConfig {
            n_speakers: 6,
            utts_per_speaker: 5,
            dim: 8,
            within_speaker_sigma: 0.2,
            seed,
            first_speaker_id: 0,
        })
        .unwrap()
    }

    #[test]
    fn drift_stats_identity_and_noop() {
        let mut corpus = small_corpus(1);
        for u in &mut corpus.utterances {
            u.x_p = Some(u.x_o.clone());
            u.x_a = Some(u.x_o.clone());
        }
        let r = drift_target_stats(&corpus).unwrap();
        assert_eq!((r.mean_target, r.mean_drift, r.std_drift), (0.0, 0.0, 0.0));
        corpus.utterances[0].x_a = None;
        assert!(matches!(
            drift_target_stats(&corpus),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn orthogonal_channel_preserves_scores() {
        let mut corpus = small_corpus(3);
        for u in &mut corpus.utterances {
            u.x_p = Some(u.x_o.clone());
        }
        let ch = ChannelModel::new(ChannelSpec {
            kind: ChannelKind::Orthogonal,
            lambda: 0.0,
            noise_sigma: 0.0,
            hidden_width: 0,
            dim: 8,
            seed: 5,
        })
        .unwrap();
        let corpus = ch.apply_to_corpus(&corpus, 0).unwrap();
        let protocol = build_protocol(&corpus, 2, 3, 9).unwrap();
        let p = score_domains(&protocol, &corpus, Domain::PreVocoder, Domain::PreVocoder).unwrap();
        let a = score_domains(&protocol, &corpus, Domain::Anonymized, Domain::Anonymized).unwrap();
        for (x, y) in p.rows.iter().zip(&a.rows) {
            assert!((x.score - y.score).abs() < 1e-10);
        }
        let (ep, ea) = (p.eer().unwrap(), a.eer().unwrap());
        assert_eq!(ep.eer, ea.eer);
    }

    fn tagged(vs: &[EmbeddingVector]) -> Vec<(EmbeddingVector, String, SpeakerId)> {
        vs.iter()
            .map(|v| (v.clone(), "O".to_string(), SpeakerId(0)))
            .collect()
    }

    #[test]
    fn projection_of_planar_points_preserves_distances() {
        let mut rng = seeded(4);
        let planar: Vec<(f64, f64)> = (0..12)
            .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
            .collect();
        let lifted: Vec<EmbeddingVector> = planar
            .iter()
            .map(|&(a, b)| ev(&[0.0, a, 0.0, b, 0.0]))
            .collect();
        let proj = project_2d(&tagged(&lifted)).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let d_in = ((planar[i].0 - planar[j].0).powi(2)
                    + (planar[i].1 - planar[j].1).powi(2))
                .sqrt();
                let d_out =
                    ((proj[i].x - proj[j].x).powi(2) + (proj[i].y - proj[j].y).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_of_identical_points_is_origin() {
        let v = ev(&[0.3, -0.2, 0.9]);
        let proj = project_2d(&tagged(&[v.clone(), v.clone(), v])).unwrap();
        assert!(proj.iter().all(|p| p.x == 0.0 && p.y == 0.0));
    }

    #[test]
    fn projection_hand_example() {
        // covariance eigenvectors (1,1,0)/sqrt2 (eigenvalue 1) and (1,-1,0)/sqrt2 (0.25)
        let pts = [
            ev(&[1.0, 1.0, 0.0]),
            ev(&[-1.0, -1.0, 0.0]),
            ev(&[0.5, -0.5, 0.0]),
            ev(&[-0.5, 0.5, 0.0]),
        ];
        let proj = project_2d(&tagged(&pts)).unwrap();
        let s = std::f64::consts::SQRT_2;
        let expected = [(s, 0.0), (-s, 0.0), (0.0, 1.0 / s), (0.0, -1.0 / s)];
        for (p, (x, y)) in proj.iter().zip(expected) {
            assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn projection_rank_one_has_zero_second_axis() {
        let pts = [
            ev(&[1.0, 2.0, 3.0]),
            ev(&[2.0, 4.0, 6.0]),
            ev(&[-1.0, -2.0, -3.0]),
        ];
        let proj = project_2d(&tagged(&pts)).unwrap();
        assert!(proj.iter().all(|p| p.y == 0.0));
        assert!(proj.iter().any(|p| p.x != 0.0));
    }

    #[test]
    fn projection_preconditions() {
        assert!(project_2d(&tagged(&[ev(&[1.0, 0.0]), ev(&[0.0, 1.0])])).is_err());
        assert!(project_2d(&tagged(&[ev(&[1.0]), ev(&[2.0]), ev(&[3.0])])).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let (corpus, protocol) = hand_corpus();
        let scores = score_domains(&protocol, &corpus, Domain::Original, Domain::Original).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).unwrap();
        assert!(buf.starts_with(b"enroll_spk,utt,is_target,score\n0,2,1,"));
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), scores);
        let alt = "utt,score,is_target,enroll_spk\n3,0.5,true,1\n";
        let parsed = read_scores_csv(alt.as_bytes()).unwrap();
        assert_eq!(parsed.rows[0].trial.enroll_spk, SpeakerId(1));
        assert!(
            read_scores_csv("enroll_spk,utt,is_target,score\n1,2,maybe,0.3\n".as_bytes()).is_err()
        );
    }

    #[test]
    fn table_writers_layout() {
        let mut buf = Vec::new();
        write_drift_report_csv(
            &DriftReport {
                mean_target: 1.25,
                std_target: 0.5,
                mean_drift: 0.75,
                std_drift: 0.125,
            },
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "mean_target,std_target,mean_drift,std_drift\n1.25,0.5,0.75,0.125\n"
        );
        let r = compute_eer(&set(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1])).unwrap();
        let mut buf = Vec::new();
        write_eer_table_csv(
            &[EerRow {
                evaluation: "O".into(),
                result: r,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "evaluation,eer_percent,threshold,n_target,n_nontarget\nO,33.33333333333333"
        ));
    }
}
