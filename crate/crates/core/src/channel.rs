//! Vocoder surrogate channels `v(x_p) = x_a`.
//!
//! A real vocoder re-synthesizes speech from content, prosody and `x_p`;
//! the embedding extracted from its output drifts away from `x_p`. Here that
//! effect is a frozen map on embeddings plus additive Gaussian noise, which
//! stands in for the dependence on content features:
//!
//! | kind         | `x_a` before normalization                 |
//! |--------------|--------------------------------------------|
//! | `identity`   | `x_p` (noise ignored)                      |
//! | `orthogonal` | `Q x_p + s g`                              |
//! | `attractor`  | `Q ((1 - l) x_p + l c) + s g`              |
//! | `random_mlp` | `W2 tanh(W1 x_p + b1) + b2 + s g`          |
//!
//! with `g ~ N(0, I)`, `s = noise_sigma`, `l = lambda`. All kinds except
//! identity normalize the result to unit length.
//!
//! # Parameter file
//!
//! [`write_params_csv`] stores the frozen parameters in long form with the
//! header `param,row,col,value`, one row per matrix entry (`Q`, `c`, `W1`,
//! `b1`, `W2`, `b2`; vectors use `col = 0`).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::corpus::Corpus;
use crate::embedding::{check_dims, l2_normalize, EmbeddingVector};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    Identity,
    Orthogonal,
    Attractor,
    RandomMlp,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Identity => "identity",
            ChannelKind::Orthogonal => "orthogonal",
            ChannelKind::Attractor => "attractor",
            ChannelKind::RandomMlp => "random_mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    /// Contraction weight toward the attractor, in `[0, 1]`.
    pub lambda: f64,
    pub noise_sigma: f64,
    /// Hidden width of the `random_mlp` kind.
    pub hidden_width: usize,
    pub dim: usize,
    pub seed: u64,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                "must be finite and non-negative",
            ));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.kind == ChannelKind::RandomMlp && self.hidden_width == 0 {
            return Err(Error::config(
                "hidden_width",
                "must be positive for random_mlp",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RandomMlp {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

/// A channel with its parameters frozen at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelModel {
    spec: ChannelSpec,
    q: Option<DMatrix<f64>>,
    attractor: Option<DVector<f64>>,
    mlp: Option<RandomMlp>,
}

/// Orthogonal factor of the QR decomposition of an `n x n` standard normal
/// matrix, with columns sign-flipped so that `R` has a nonnegative diagonal.
/// Entries are drawn row by row.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(n, n, &rng::standard_normal_vec(rng, n * n));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let v: Vec<f64> = rng::standard_normal_vec(rng, rows * cols)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    DMatrix::from_row_slice(rows, cols, &v)
}

impl ChannelModel {
    /// Builds the channel; all parameters are drawn from `rng::seeded(spec.seed)`.
    pub fn new(spec: ChannelSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::seeded(spec.seed);
        let m = spec.dim;
        let (q, attractor, mlp) = match spec.kind {
            ChannelKind::Identity => (None, None, None),
            ChannelKind::Orthogonal => (Some(random_orthogonal(m, &mut r)), None, None),
            ChannelKind::Attractor => {
                let q = random_orthogonal(m, &mut r);
                let c = rng::unit_sphere(&mut r, m);
                (
                    Some(q),
                    Some(DVector::from_column_slice(c.as_slice())),
                    None,
                )
            }
            ChannelKind::RandomMlp => {
                let h = spec.hidden_width;
                let s1 = 1.0 / (m as f64).sqrt();
                let s2 = 1.0 / (h as f64).sqrt();
                let w1 = gaussian_matrix(h, m, s1, &mut r);
                let b1 = DVector::from_vec(gaussian_matrix(h, 1, s1, &mut r).as_slice().to_vec());
                let w2 = gaussian_matrix(m, h, s2, &mut r);
                let b2 = DVector::from_vec(gaussian_matrix(m, 1, s2, &mut r).as_slice().to_vec());
                (None, None, Some(RandomMlp { w1, b1, w2, b2 }))
            }
        };
        Ok(Self {
            spec,
            q,
            attractor,
            mlp,
        })
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn rotation(&self) -> Option<&DMatrix<f64>> {
        self.q.as_ref()
    }

    pub fn attractor(&self) -> Option<&DVector<f64>> {
        self.attractor.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.q.as_ref().map_or(0, |q| q.len())
            + self.attractor.as_ref().map_or(0, |c| c.len())
            + self
                .mlp
                .as_ref()
                .map_or(0, |p| p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len())
    }

    /// Maps `x_p` to `x_a`. Noise (when `noise_sigma > 0`) is drawn from `rng`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        x_p: &EmbeddingVector,
        rng: &mut R,
    ) -> Result<EmbeddingVector> {
        check_dims(self.spec.dim, x_p.dim())?;
        let x = DVector::from_column_slice(x_p.as_slice());
        let mut y = match self.spec.kind {
            ChannelKind::Identity => return Ok(x_p.clone()),
            ChannelKind::Orthogonal => self.q.as_ref().expect("orthogonal has Q") * &x,
            ChannelKind::Attractor => {
                let c = self.attractor.as_ref().expect("attractor has c");
                let l = self.spec.lambda;
                let mixed = x * (1.0 - l) + c * l;
                self.q.as_ref().expect("attractor has Q") * mixed
            }
            ChannelKind::RandomMlp => {
                let p = self.mlp.as_ref().expect("random_mlp has weights");
                let h = (&p.w1 * &x + &p.b1).map(f64::tanh);
                &p.w2 * h + &p.b2
            }
        };
        if self.spec.noise_sigma > 0.0 {
            let g = rng::standard_normal_vec(rng, self.spec.dim);
            for (yi, gi) in y.iter_mut().zip(g) {
                *yi += self.spec.noise_sigma * gi;
            }
        }
        let raw = EmbeddingVector::new(y.as_slice().to_vec())?;
        l2_normalize(&raw).map_err(|_| Error::domain("channel output collapsed to zero"))
    }

    /// Populates `x_a` for every utterance from its `x_p`. Utterance `u` draws
    /// its noise from `rng::stream(noise_seed, "utt:<u>")`.
    pub fn apply_to_corpus(&self, corpus: &Corpus, noise_seed: u64) -> Result<Corpus> {
        let mut out = corpus.clone();
        for u in &mut out.utterances {
            let x_p = u.x_p.as_ref().ok_or_else(|| {
                Error::Protocol(format!("utterance {} has no pre-vocoder embedding", u.utt))
            })?;
            let mut r = rng::stream(noise_seed, &format!("utt:{}", u.utt));
            u.x_a = Some(self.apply(x_p, &mut r)?);
        }
        Ok(out)
    }

    fn named_params(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut out = Vec::new();
        if let Some(q) = &self.q {
            out.push(("Q", q));
        }
        if let Some(p) = &self.mlp {
            out.push(("W1", &p.w1));
            out.push(("W2", &p.w2));
        }
        out
    }

    fn named_vectors(&self) -> Vec<(&'static str, &DVector<f64>)> {
        let mut out = Vec::new();
        if let Some(c) = &self.attractor {
            out.push(("c", c));
        }
        if let Some(p) = &self.mlp {
            out.push(("b1", &p.b1));
            out.push(("b2", &p.b2));
        }
        out
    }
}

pub fn make_channel(spec: ChannelSpec) -> Result<ChannelModel> {
    ChannelModel::new(spec)
}

pub fn write_params_csv<W: Write>(ch: &ChannelModel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["param", "row", "col", "value"])?;
    for (name, m) in ch.named_params() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_record([
                    name.to_string(),
                    i.to_string(),
                    j.to_string(),
                    m[(i, j)].to_string(),
                ])?;
            }
        }
    }
    for (name, v) in ch.named_vectors() {
        for (i, x) in v.iter().enumerate() {
            w.write_record([
                name.to_string(),
                i.to_string(),
                "0".to_string(),
                x.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a channel from `spec` and a parameter file written by
/// [`write_params_csv`]. Parameters in the file replace the seeded ones.
pub fn read_params_csv<R: Read>(spec: ChannelSpec, input: R) -> Result<ChannelModel> {
    let mut ch = ChannelModel::new(spec)?;
    let mut r = csv::Reader::from_reader(input);
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| Error::Parse(format!("row {}: {msg}", line + 2));
        if rec.len() != 4 {
            return Err(bad("expected 4 columns".into()));
        }
        let i: usize = rec[1].parse().map_err(|e| bad(format!("{e}")))?;
        let j: usize = rec[2].parse().map_err(|e| bad(format!("{e}")))?;
        let v: f64 = rec[3].parse().map_err(|e| bad(format!("{e}")))?;
        let slot: Option<&mut f64> = match &rec[0] {
            "Q" => ch.q.as_mut().and_then(|q| q.get_mut((i, j))),
            "c" => ch.attractor.as_mut().and_then(|c| c.get_mut(i)),
            "W1" => ch.mlp.as_mut().and_then(|p| p.w1.get_mut((i, j))),
            "W2" => ch.mlp.as_mut().and_then(|p| p.w2.get_mut((i, j))),
            "b1" => ch.mlp.as_mut().and_then(|p| p.b1.get_mut(i)),
            "b2" => ch.mlp.as_mut().and_then(|p| p.b2.get_mut(i)),
            other => return Err(bad(format!("unknown parameter `{other}`"))),
        };
        *slot.ok_or_else(|| bad(format!("index ({i}, {j}) out of range for `{}`", &rec[0])))? = v;
    }
    Ok(ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::embedding::cosine_distance;
    use crate::rng::seeded;

    fn spec(kind: ChannelKind, lambda: f64, noise: f64, dim: usize) -> ChannelSpec {
        ChannelSpec {
            kind,
            lambda,
            noise_sigma: noise,
            hidden_width: 16,
            dim,
            seed: 17,
        }
    }

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identity_has_no_parameters_and_zero_drift() {
        let ch = ChannelModel::new(spec(ChannelKind::Identity, 0.0, 0.3, 3)).unwrap();
        assert_eq!(ch.parameter_count(), 0);
        let x = ev(&[0.6, 0.0, 0.8]);
        let y = ch.apply(&x, &mut seeded(0)).unwrap();
        assert_eq!(y, x);
        assert_eq!(cosine_distance(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_factor_is_orthogonal_and_reproducible() {
        let a = ChannelModel::new(spec(ChannelKind::Orthogonal, 0.0, 0.0, 32)).unwrap();
        let b = ChannelModel::new(spec(ChannelKind::Orthogonal, 0.0, 0.0, 32)).unwrap();
        assert_eq!(a.rotation(), b.rotation());
        let q = a.rotation().unwrap();
        let err = (q.transpose() * q - DMatrix::<f64>::identity(32, 32))
            .abs()
            .max();
        assert!(err < 1e-10, "max |Q^T Q - I| = {err}");
    }

    #[test]
    fn qr_sign_convention_gives_nonnegative_r_diagonal() {
        let mut r1 = seeded(4);
        let mut r2 = seeded(4);
        let q = random_orthogonal(6, &mut r1);
        let a = DMatrix::from_row_slice(6, 6, &rng::standard_normal_vec(&mut r2, 36));
        let r = q.transpose() * a;
        for j in 0..6 {
            assert!(r[(j, j)] >= 0.0);
            for i in j + 1..6 {
                assert!(r[(i, j)].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quarter_turn_rotation_drift_is_one() {
        let mut ch = ChannelModel::new(spec(ChannelKind::Orthogonal, 0.0, 0.0, 2)).unwrap();
        ch.q = Some(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        let x = ev(&[1.0, 0.0]);
        let y = ch.apply(&x, &mut seeded(0)).unwrap();
        assert_eq!(y, ev(&[0.0, 1.0]));
        assert_eq!(cosine_distance(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn full_collapse_ignores_input() {
        let ch = ChannelModel::new(spec(ChannelKind::Attractor, 1.0, 0.0, 8)).unwrap();
        let c = EmbeddingVector::new(ch.attractor().unwrap().as_slice().to_vec()).unwrap();
        let qc = l2_normalize(
            &EmbeddingVector::new(
                (ch.rotation().unwrap() * ch.attractor().unwrap())
                    .as_slice()
                    .to_vec(),
            )
            .unwrap(),
        )
        .unwrap();
        let mut r = seeded(1);
        for _ in 0..5 {
            let x = rng::unit_sphere(&mut r, 8);
            let y = ch.apply(&x, &mut r).unwrap();
            for i in 0..8 {
                assert!((y[i] - qc[i]).abs() < 1e-12);
            }
        }
        assert!((c.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_channel_preserves_pairwise_distance() {
        let ch = ChannelModel::new(spec(ChannelKind::Orthogonal, 0.0, 0.0, 16)).unwrap();
        let mut r = seeded(2);
        for _ in 0..20 {
            let x = rng::unit_sphere(&mut r, 16);
            let y = rng::unit_sphere(&mut r, 16);
            let d0 = cosine_distance(&x, &y).unwrap();
            let d1 = cosine_distance(
                &ch.apply(&x, &mut r).unwrap(),
                &ch.apply(&y, &mut r).unwrap(),
            )
            .unwrap();
            assert!((d0 - d1).abs() < 1e-10);
        }
    }

    fn mean_drift(ch: &ChannelModel, corpus: &Corpus) -> f64 {
        let out = ch.apply_to_corpus(corpus, 3).unwrap();
        out.utterances
            .iter()
            .map(|u| cosine_distance(u.x_p.as_ref().unwrap(), u.x_a.as_ref().unwrap()).unwrap())
            .sum::<f64>()
            / out.utterances.len() as f64
    }

    #[test]
    fn attractor_contraction_grows_with_lambda() {
        let mut corpus = generate_corpus(&CorpusConfig {
            n_speakers: 10,
            utts_per_speaker: 4,
            dim: 16,
            within_speaker_sigma: 0.2,
            seed: 1,
            first_speaker_id: 0,
        })
        .unwrap();
        for u in &mut corpus.utterances {
            u.x_p = Some(u.x_o.clone());
        }
        // The rotation contributes a lambda-independent part of the raw drift,
        // so monotonicity is checked on the contraction: d(Q x_p, x_a).
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let channels: Vec<ChannelModel> = grid
            .iter()
            .map(|&l| ChannelModel::new(spec(ChannelKind::Attractor, l, 0.0, 16)).unwrap())
            .collect();
        let q = channels[0].rotation().unwrap().clone();
        for u in &corpus.utterances {
            let x = u.x_o.clone();
            let qx = EmbeddingVector::new(
                (&q * DVector::from_column_slice(x.as_slice()))
                    .as_slice()
                    .to_vec(),
            )
            .unwrap();
            let d: Vec<f64> = channels
                .iter()
                .map(|ch| cosine_distance(&qx, &ch.apply(&x, &mut seeded(0)).unwrap()).unwrap())
                .collect();
            assert!(d.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{d:?}");
        }
        let drifts: Vec<f64> = channels.iter().map(|ch| mean_drift(ch, &corpus)).collect();
        assert!(drifts.iter().all(|d| (0.0..=2.0).contains(d)));
    }

    #[test]
    fn noise_depends_on_stream_only() {
        let ch = ChannelModel::new(spec(ChannelKind::Attractor, 0.5, 0.1, 8)).unwrap();
        let x = rng::unit_sphere(&mut seeded(0), 8);
        let a = ch.apply(&x, &mut seeded(1)).unwrap();
        let b = ch.apply(&x, &mut seeded(1)).unwrap();
        let c = ch.apply(&x, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_and_inputs() {
        assert!(ChannelModel::new(spec(ChannelKind::Attractor, 1.5, 0.0, 4)).is_err());
        assert!(ChannelModel::new(spec(ChannelKind::Attractor, 0.5, -1.0, 4)).is_err());
        let ch = ChannelModel::new(spec(ChannelKind::Orthogonal, 0.0, 0.0, 4)).unwrap();
        assert!(matches!(
            ch.apply(&ev(&[1.0, 0.0]), &mut seeded(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parameter_file_round_trips() {
        for kind in [
            ChannelKind::Identity,
            ChannelKind::Orthogonal,
            ChannelKind::Attractor,
            ChannelKind::RandomMlp,
        ] {
            let s = spec(kind, 0.3, 0.0, 5);
            let ch = ChannelModel::new(s.clone()).unwrap();
            let mut buf = Vec::new();
            write_params_csv(&ch, &mut buf).unwrap();
            let mut other = s.clone();
            other.seed = 999;
            let back = read_params_csv(other, buf.as_slice()).unwrap();
            assert_eq!(back.q, ch.q);
            assert_eq!(back.attractor, ch.attractor);
            assert_eq!(back.mlp, ch.mlp);
        }
    }
}
