use crate::error::{Error, Result};

use super::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per named tensor, in parameter order.
    pub per_param: Vec<(String, f64)>,
    /// Coordinates probed with a reduced step because the full step changed
    /// the activation pattern.
    pub shrunk: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `loss_and_grad` against the
/// five-point central difference with step `eps`, one scalar parameter at a
/// time. The fourth-order stencil allows steps large enough that roundoff
/// does not swamp very small gradients.
pub fn grad_check<F>(params: &ParamSet<f64>, eps: f64, tol: f64, mut loss_and_grad: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    grad_check_piecewise(params, eps, tol, 0, |p| {
        let (l, g) = loss_and_grad(p)?;
        Ok((l, g, 0))
    })
}

/// Like [`grad_check`] for piecewise-smooth losses. The closure also returns
/// a fingerprint of the active linear piece (ReLU signs, argmax choices,
/// clamps). When a probe lands on a different piece than the base point the
/// step is divided by 10, up to `max_shrink` times; the last probe is
/// compared regardless, so a straddled kink still counts against the result.
pub fn grad_check_piecewise<F>(
    params: &ParamSet<f64>,
    eps: f64,
    tol: f64,
    max_shrink: usize,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>, u64)>,
{
    let (_, analytic, base) = eval(params)?;
    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut shrunk = 0;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Missing(format!("gradient for {name}")))?
            .clone();
        let mut worst = 0.0f64;
        for idx in 0..grad.len() {
            let a = grad.data()[idx];
            if !a.is_finite() {
                return Err(Error::NonFiniteGradient(format!("{name}[{idx}]")));
            }
            let orig = probe.get(&name).unwrap().data()[idx];
            let mut h = eps;
            let mut numeric;
            let mut tries = 0;
            loop {
                let mut f = [0.0; 4];
                let mut same_piece = true;
                for (k, step) in [h, -h, 2.0 * h, -2.0 * h].into_iter().enumerate() {
                    probe.get_mut(&name).unwrap().data_mut()[idx] = orig + step;
                    let (loss, _, pattern) = eval(&probe)?;
                    f[k] = loss;
                    same_piece &= pattern == base;
                }
                numeric = (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h);
                if same_piece || tries == max_shrink {
                    break;
                }
                tries += 1;
                h /= 10.0;
            }
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig;
            if tries > 0 {
                shrunk += 1;
            }
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient(format!("{name}[{idx}] (numeric)")));
            }
            worst = worst.max(relative_error(a, numeric));
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradCheckReport {
        max_rel_err,
        per_param,
        shrunk,
        tol,
        passed: max_rel_err <= tol,
    })
}
