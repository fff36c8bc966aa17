//! Central-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Coordinates checked per parameter tensor; smaller tensors are checked exhaustively.
    pub samples_per_param: usize,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-6, samples_per_param: 16, floor: 1e-3, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares supplied analytic gradients against central differences of `value`.
pub fn compare_gradients<F>(
    analytic: &[Tensor<f64>],
    params: &[Tensor<f64>],
    value: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= opts.samples_per_param {
            (0..p.len()).collect()
        } else {
            sample(&mut rng, p.len(), opts.samples_per_param).into_vec()
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let plus = value(&work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let minus = value(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[c];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Mismatch { param: pi, coord: c, analytic: a, numeric, rel_error: err });
            }
        }
    }
    Ok(report)
}

/// Gradient of a scalar tape function with respect to each parameter tensor.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.value(root).item();
    tape.backward(root)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Checks a deterministic scalar tape function `f(tape, params)`.
pub fn gradient_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(&f, params)?;
    compare_gradients(&analytic, params, |ps| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    }, opts)
}
