//! Central finite-difference verification of analytic gradients.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Result, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per input tensor.
    pub max_coords: usize,
    /// Relative error bound `|a−n| / max(|a|,|n|,1e-8)`.
    pub tolerance: f64,
    /// Coordinates whose absolute difference is below this count as exact;
    /// this is the rounding floor of the central difference itself.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 64,
            tolerance: 1e-4,
            abs_floor: 1e-9,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// (input index, flat coordinate) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[ArrayD<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars);
    let v = out.value();
    if v.len() != 1 {
        return Err(AutodiffError::NonScalar(v.shape().to_vec()));
    }
    Ok(v.iter().copied().next().unwrap_or(0.0))
}

/// Compares the tape's gradient of the scalar `f(inputs)` against central
/// differences on up to `max_coords` random coordinates of each input.
pub fn grad_check<F>(f: F, inputs: &[ArrayD<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    for (i, x) in inputs.iter().enumerate() {
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                what: "input",
                input: i,
                index,
            });
        }
    }
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars);
    if !out.scalar().is_finite() {
        return Err(AutodiffError::NonFinite {
            what: "output",
            input: 0,
            index: 0,
        });
    }
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
        pass: true,
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        if let Some(index) = analytic.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                what: "analytic gradient",
                input: i,
                index,
            });
        }
        let n = x.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let a_flat: Vec<f64> = analytic.iter().copied().collect();
        for c in coords {
            let mut probe: Vec<ArrayD<f64>> = inputs.to_vec();
            let orig = probe[i].as_slice().expect("standard layout")[c];
            probe[i].as_slice_mut().expect("standard layout")[c] = orig + opts.step;
            let fp = eval(&f, &probe)?;
            probe[i].as_slice_mut().expect("standard layout")[c] = orig - opts.step;
            let fm = eval(&f, &probe)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(AutodiffError::NonFinite {
                    what: "perturbed output",
                    input: i,
                    index: c,
                });
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = a_flat[c];
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs <= opts.abs_floor {
                continue;
            }
            let rel = relative_error(a, numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, c));
            }
            if rel > opts.tolerance {
                report.pass = false;
            }
        }
    }
    Ok(report)
}
