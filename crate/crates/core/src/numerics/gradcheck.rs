//! Central finite-difference verification of tape gradients.

use super::params::{Bound, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per parameter; larger tensors are sampled evenly.
    pub max_coords: usize,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Additional floor as a fraction of the largest reverse-mode gradient
    /// over all parameters, for coordinates whose true gradient is zero.
    pub floor_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-5,
            max_coords: 16,
            floor: 1e-6,
            floor_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub frozen: bool,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Largest |reverse-mode gradient| over the probed coordinates.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

fn evaluate<F>(f: &F, params: &ParameterSet) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind_const(&tape)?;
    let v = f(&tape, &bound)
        .map_err(|e| Error::Evaluation(format!("objective failed: {e}")))?
        .item();
    if !v.is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    Ok(v)
}

fn probe_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        let mut idx: Vec<usize> = (0..max).map(|i| i * numel / max + (i * 7919) % (numel / max).max(1)).collect();
        idx.dedup();
        idx
    }
}

/// Compares reverse-mode gradients of `f` at `params` against
/// `(f(p + eps) - f(p - eps)) / (2 eps)` coordinate by coordinate.
/// Frozen parameters are reported with gradient exactly zero and not probed.
pub fn grad_check<F>(f: F, params: &ParameterSet, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Validation("grad_check eps must be positive".into()));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape)?;
    let loss = f(&tape, &bound).map_err(|e| Error::Evaluation(format!("objective failed: {e}")))?;
    if !loss.item().is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    let scale = params
        .iter()
        .filter_map(|(n, _)| grads.get(n))
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = cfg.floor.max(cfg.floor_scale * scale);

    let mut report = Vec::new();
    for (name, value) in params.iter() {
        if params.is_frozen(name) {
            report.push(ParamCheck {
                name: name.clone(),
                frozen: true,
                coords_checked: 0,
                max_rel_err: 0.0,
                max_abs_grad: grads.get(name).map_or(0.0, |g| g.data().iter().fold(0.0, |m, v| m.max(v.abs()))),
            });
            continue;
        }
        let analytic = grads.get(name).cloned();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let idx = probe_indices(value.numel(), cfg.max_coords);
        for &i in &idx {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += cfg.eps;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= cfg.eps;
            let numeric = (evaluate(&f, &plus)? - evaluate(&f, &minus)?) / (2.0 * cfg.eps);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            max_abs = max_abs.max(a.abs());
        }
        report.push(ParamCheck {
            name: name.clone(),
            frozen: false,
            coords_checked: idx.len(),
            max_rel_err: max_rel,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, shapes: &[(&str, &[usize])]) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        for (n, s) in shapes {
            p.insert(*n, Tensor::randn(s, 1.0, &mut rng)).unwrap();
        }
        p
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let p = params(1, &[("x", &[3, 4])]);
        let r = grad_check(|_, b| b.get("x")?.square()?.sum(), &p, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-8, "{r:?}");
    }

    #[test]
    fn frozen_parameter_reports_zero() {
        let mut p = params(2, &[("x", &[3]), ("y", &[3])]);
        p.freeze("y").unwrap();
        let r = grad_check(
            |_, b| b.get("x")?.mul(b.get("y")?)?.sum(),
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        let y = r.params.iter().find(|c| c.name == "y").unwrap();
        assert!(y.frozen);
        assert_eq!(y.max_abs_grad, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_objective_is_an_evaluation_error() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::zeros(&[2])).unwrap();
        let r = grad_check(|_, b| b.get("x")?.ln()?.sum(), &p, &GradCheckConfig::default());
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn non_positive_eps_rejected() {
        let p = params(3, &[("x", &[1])]);
        let cfg = GradCheckConfig {
            eps: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|_, b| b.get("x")?.sum(), &p, &cfg).is_err());
    }
}
