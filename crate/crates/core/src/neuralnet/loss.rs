use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance `1 - cos(y, target)` and its gradient with respect to `y`.
pub fn cosine_loss_and_grad(y: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: y.len(),
        });
    }
    let ny = norm(y);
    let nt = norm(target);
    if ny == 0.0 || !ny.is_finite() {
        return Err(Error::ZeroNorm("y"));
    }
    if nt == 0.0 || !nt.is_finite() {
        return Err(Error::ZeroNorm("target"));
    }
    let cos = y.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / (ny * nt);
    let grad = y
        .iter()
        .zip(target)
        .map(|(yi, ti)| -(ti / nt - cos * yi / ny) / ny)
        .collect();
    Ok((1.0 - cos, grad))
}

/// Classification head for additive angular margin softmax. Column `j` of
/// `weights` is the (unit-norm) direction of class `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AamHead {
    pub weights: DMatrix<f64>,
    pub margin: f64,
    pub scale: f64,
}

pub const DEFAULT_AAM_MARGIN: f64 = 0.2;
pub const DEFAULT_AAM_SCALE: f64 = 30.0;

/// Loss value and gradients of [`aam_loss_and_grad`].
#[derive(Clone, Debug)]
pub struct AamGrad {
    pub loss: f64,
    pub d_embedding: Vec<f64>,
    pub d_weights: DMatrix<f64>,
}

impl AamHead {
    /// Builds a head from raw class directions (one per column), normalizing each.
    pub fn new(weights: DMatrix<f64>, margin: f64, scale: f64) -> Result<Self> {
        if weights.ncols() == 0 || weights.nrows() == 0 {
            return Err(Error::domain(
                "AAM head needs at least one class and one dimension",
            ));
        }
        if !(0.0..std::f64::consts::PI).contains(&margin) {
            return Err(Error::config("aam_margin", "must lie in [0, pi)"));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config("aam_scale", "must be positive"));
        }
        let mut head = Self {
            weights,
            margin,
            scale,
        };
        head.renormalize()?;
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Rescales every class column to unit norm.
    pub fn renormalize(&mut self) -> Result<()> {
        for (j, mut col) in self.weights.column_iter_mut().enumerate() {
            let n = col.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::domain(format!(
                    "AAM class column {j} has zero or non-finite norm"
                )));
            }
            col /= n;
        }
        Ok(())
    }

    /// `scale * cos(theta + margin)` as a function of `c = cos(theta)`, with
    /// the usual linear continuation `c - margin * sin(margin)` once
    /// `theta + margin` would pass `pi`. Returns the value and its derivative.
    fn margin_logit(&self, c: f64) -> (f64, f64) {
        if self.margin == 0.0 {
            return (c, 1.0);
        }
        let (sm, cm) = self.margin.sin_cos();
        if c > (std::f64::consts::PI - self.margin).cos() {
            let s = (1.0 - c * c).max(0.0).sqrt();
            let ds = if s > 1e-12 { -c / s } else { 0.0 };
            (c * cm - s * sm, cm - ds * sm)
        } else {
            (c - self.margin * sm, 1.0)
        }
    }
}

/// AAM-softmax cross-entropy for one embedding. Logits are
/// `scale * cos(theta_j)` for `j != label` and `scale * cos(theta_label + margin)`
/// for the true class, where `theta_j` is the angle between the embedding and
/// class column `j`.
pub fn aam_loss_and_grad(embedding: &[f64], head: &AamHead, label: usize) -> Result<AamGrad> {
    let n_classes = head.num_classes();
    if label >= n_classes {
        return Err(Error::domain(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    if embedding.len() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: embedding.len(),
        });
    }
    let ne = norm(embedding);
    if ne == 0.0 || !ne.is_finite() {
        return Err(Error::ZeroNorm("embedding"));
    }
    let e = DVector::from_iterator(embedding.len(), embedding.iter().map(|v| v / ne));
    let col_norms: Vec<f64> = head.weights.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = col_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::domain(format!("AAM class column {j} has zero norm")));
    }
    let w_hat = DMatrix::from_fn(head.dim(), n_classes, |i, j| {
        head.weights[(i, j)] / col_norms[j]
    });

    let cos: Vec<f64> = w_hat
        .tr_mul(&e)
        .iter()
        .map(|c| c.clamp(-1.0, 1.0))
        .collect();
    let (phi, dphi) = head.margin_logit(cos[label]);
    let logits: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(j, &c)| head.scale * if j == label { phi } else { c })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let loss = max + sum_exp.ln() - logits[label];

    // dL/dcos_j
    let g: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let p = (z - max).exp() / sum_exp;
            if j == label {
                head.scale * (p - 1.0) * dphi
            } else {
                head.scale * p
            }
        })
        .collect();
    let g = DVector::from_vec(g);

    let d_e = &w_hat * &g;
    let d_embedding = (&d_e - &e * e.dot(&d_e)) / ne;

    let mut d_weights = DMatrix::zeros(head.dim(), n_classes);
    for j in 0..n_classes {
        let w = w_hat.column(j);
        let d_w_hat = &e * g[j];
        let proj = w.dot(&d_w_hat);
        let col = (d_w_hat - w * proj) / col_norms[j];
        d_weights.set_column(j, &col);
    }

    Ok(AamGrad {
        loss,
        d_embedding: d_embedding.as_slice().to_vec(),
        d_weights,
    })
}
