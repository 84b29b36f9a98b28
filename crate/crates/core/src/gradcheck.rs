//! Central-difference gradient checking against the autodiff tape.

use crate::error::{Error, Result};
use crate::graph::{Fault, Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; tensors at most this large are checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Backward-pass fault applied to the analytic side only.
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            coords_per_tensor: 6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|analytic − numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the tape gradient of the scalar built by `loss` with respect to the
/// parameters in `vars` (every parameter when `vars` is `None`).
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    vars: Option<&[Var]>,
    loss: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = loss(&mut g)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new(store);
    g.inject_fault(cfg.fault);
    let out = loss(&mut g)?;
    let grads = g.backward(out)?;

    let all: Vec<Var> = (0..store.len()).map(Var).collect();
    let vars = vars.unwrap_or(&all);
    let mut rng = Rng::new(cfg.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &v in vars {
        let n = store.get(v).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            (0..cfg.coords_per_tensor).map(|_| rng.below(n)).collect()
        };
        let analytic = grads.get_or_zeros(v, store.get(v).shape());
        for c in coords {
            let orig = store.get(v).data()[c];
            probe.get_mut(v).data_mut()[c] = orig + cfg.eps;
            let hi = eval(&probe)?;
            probe.get_mut(v).data_mut()[c] = orig - cfg.eps;
            let lo = eval(&probe)?;
            probe.get_mut(v).data_mut()[c] = orig;
            let numeric = (hi - lo) / (2.0 * cfg.eps);
            let err = relative_error(analytic.data()[c], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.names()[v.0].clone(), c));
                }
            }
        }
    }
    Ok(report)
}

/// Checks a hand-supplied gradient function against central differences of `f`
/// at `x` over every coordinate.
pub fn grad_check_fn(
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    let analytic = grad(x);
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        if !(hi.is_finite() && lo.is_finite()) {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        worst = worst.max(relative_error(analytic[i], (hi - lo) / (2.0 * eps)));
    }
    Ok(worst)
}

/// `Σ out ⊙ R` for a fixed random `R`: a generic scalar probe of a tensor output.
pub fn probe_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let r = g.constant(crate::tensor::Tensor::new(&shape, r)?);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}
