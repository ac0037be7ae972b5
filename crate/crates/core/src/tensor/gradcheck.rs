//! Central finite-difference verification of graph gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            tol: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compare autograd gradients of the scalar function `f` against central
/// differences at `inputs`.
///
/// The error for one coordinate is `|analytic - numeric| / max(|analytic|,
/// |numeric|, floor)` where `floor` is 1% of the largest gradient magnitude
/// seen across all inputs, so entries that are numerically zero do not
/// dominate the report.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval_scalar(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes: Vec<(usize, usize, f64)> = Vec::new();
    for (ii, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[c] += opts.step;
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[c] -= opts.step;
            let (gp, _, op) = eval_scalar(&f, &plus, false)?;
            let (gm, _, om) = eval_scalar(&f, &minus, false)?;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * opts.step);
            probes.push((ii, c, numeric));
        }
    }

    let scale = probes
        .iter()
        .map(|&(ii, c, num)| analytic[ii][c].abs().max(num.abs()))
        .fold(0.0f64, f64::max);
    let floor = (0.01 * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: probes.len(),
        worst: None,
        tol: opts.tol,
    };
    for (ii, c, numeric) in probes {
        let a = analytic[ii][c];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        if !a.is_finite() || !numeric.is_finite() {
            report.max_rel_err = f64::INFINITY;
            report.worst = Some((ii, c));
            continue;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((ii, c));
        }
    }
    Ok(report)
}
