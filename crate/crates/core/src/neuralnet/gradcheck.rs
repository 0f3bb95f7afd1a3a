use nalgebra::DMatrix;

use crate::error::Result;
use crate::rng::{self, standard_normal_vec};

use super::loss::{
    aam_loss_and_grad, cosine_loss_and_grad, AamHead, DEFAULT_AAM_MARGIN, DEFAULT_AAM_SCALE,
};
use super::mlp::Mlp;

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-6;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
/// With `h = 1e-6` a central difference carries roundoff of roughly
/// `1e-16 * |loss| / h`, about `1e-9` for AAM losses near 30, so gradient
/// entries smaller than the floor are judged on absolute error.
pub const FLOOR: f64 = 1e-4;

/// Pass threshold for [`GradcheckReport::passed`].
pub const TOLERANCE: f64 = 1e-4;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, FLOOR)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub check: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn worst(&self, check: &str) -> Option<f64> {
        self.cases
            .iter()
            .filter(|c| c.check == check)
            .map(|c| c.max_rel_error)
            .reduce(f64::max)
    }

    pub fn checks(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = self.cases.iter().map(|c| c.check).collect();
        names.dedup();
        names
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < TOLERANCE)
    }
}

/// Cosine loss on a random pair in `R^5`.
pub fn check_cosine(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck:cosine");
    let y = standard_normal_vec(&mut r, 5);
    let t = standard_normal_vec(&mut r, 5);
    let (_, g) = cosine_loss_and_grad(&y, &t)?;
    let fd = central_difference(
        |v| cosine_loss_and_grad(v, &t).map(|o| o.0).unwrap_or(f64::NAN),
        &y,
        STEP,
    );
    Ok(max_relative_error(&g, &fd))
}

/// AAM-softmax with default margin and scale on a random 8-dim, 6-class
/// instance; checks both the embedding and head gradients.
pub fn check_aam(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck:aam");
    let (dim, classes) = (8, 6);
    let w = DMatrix::from_vec(dim, classes, standard_normal_vec(&mut r, dim * classes));
    let head = AamHead::new(w, DEFAULT_AAM_MARGIN, DEFAULT_AAM_SCALE)?;
    let e = standard_normal_vec(&mut r, dim);
    let label = (seed as usize) % classes;
    let out = aam_loss_and_grad(&e, &head, label)?;
    let loss_at = |emb: &[f64], h: &AamHead| {
        aam_loss_and_grad(emb, h, label)
            .map(|o| o.loss)
            .unwrap_or(f64::NAN)
    };
    let fd_e = central_difference(|v| loss_at(v, &head), &e, STEP);
    let fd_w = central_difference(
        |v| {
            let mut h = head.clone();
            h.weights.copy_from_slice(v);
            loss_at(&e, &h)
        },
        head.weights.as_slice(),
        STEP,
    );
    Ok(max_relative_error(&out.d_embedding, &fd_e)
        .max(max_relative_error(out.d_weights.as_slice(), &fd_w)))
}

/// Full backprop through a random 32-16-32 network under the cosine loss,
/// over every weight and bias.
pub fn check_mlp(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck:mlp");
    let mut net = Mlp::random(&[32, 16, 32], 1.0, &mut r)?;
    // nonzero biases so their gradients are exercised too
    let flat: Vec<f64> = net
        .flat_params()
        .into_iter()
        .zip(standard_normal_vec(&mut r, net.num_params()))
        .map(|(p, b)| p + 0.1 * b)
        .collect();
    net.set_flat_params(&flat)?;
    let x = standard_normal_vec(&mut r, 32);
    let t = standard_normal_vec(&mut r, 32);
    let trace = net.forward_trace(&x)?;
    let (_, dy) = cosine_loss_and_grad(trace.output.as_slice(), &t)?;
    let (grads, _) = net.backward(&trace, &dy)?;
    let analytic = grads.flat_params();
    let theta = net.flat_params();
    let fd = central_difference(
        |p| {
            net.set_flat_params(p).expect("same shape");
            net.forward(&x)
                .ok()
                .and_then(|y| cosine_loss_and_grad(y.as_slice(), &t).ok())
                .map(|o| o.0)
                .unwrap_or(f64::NAN)
        },
        &theta,
        STEP,
    );
    Ok(max_relative_error(&analytic, &fd))
}

/// Runs every check for seeds `0..n_seeds`.
pub fn run_suite(n_seeds: u64) -> Result<GradcheckReport> {
    type Check = fn(u64) -> Result<f64>;
    let checks: [(&'static str, Check); 3] = [
        ("cosine", check_cosine),
        ("aam_softmax", check_aam),
        ("mlp_backprop", check_mlp),
    ];
    let mut cases = Vec::new();
    for (name, f) in checks {
        for seed in 0..n_seeds {
            cases.push(GradcheckCase {
                check: name,
                seed,
                max_rel_error: f(seed)?,
            });
        }
    }
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|v| v[0].powi(3) + 2.0 * v[1], &[1.5, -4.0], 1e-4);
        assert!((g[0] - 6.75).abs() < 1e-7);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!((max_relative_error(&[1e-9], &[0.0]) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn suite_passes_over_twenty_seeds() {
        let report = run_suite(20).unwrap();
        assert_eq!(report.cases.len(), 60);
        assert_eq!(
            report.checks(),
            vec!["cosine", "aam_softmax", "mlp_backprop"]
        );
        for check in report.checks() {
            let worst = report.worst(check).unwrap();
            assert!(worst < TOLERANCE, "{check}: {worst}");
        }
        assert!(report.passed());
    }
}
