use rand::seq::index::sample;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Central finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    #[default]
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error `O(h⁴)`.
    /// Allows a larger step, which keeps rounding error small when the
    /// loss is a deep composition.
    FourPoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    pub stencil: Stencil,
    /// Lower bound on the error denominator. Coordinates whose gradients
    /// are smaller than this are effectively judged by absolute error.
    pub floor: f64,
    /// Coordinates checked per tensor; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Negative-control hook, see [`Tape::inject_backward_fault`].
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            stencil: Stencil::TwoPoint,
            floor: 1e-8,
            max_coords: Some(100),
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub max_relative_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// One entry per input tensor, in input order.
    pub per_tensor: Vec<TensorCheck>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    /// Index of the tensor with the largest error.
    pub fn worst_tensor(&self) -> Option<usize> {
        self.per_tensor
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.max_relative_error.total_cmp(&b.1.max_relative_error))
            .map(|(i, _)| i)
    }
}

fn evaluate<F>(params: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
    let loss = f(&tape, &vars)?;
    let v = tape.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences.
///
/// The error for a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    tape.inject_backward_fault(opts.fault);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.clone().tracked())).collect();
    let loss = f(&tape, &vars)?;
    let lv = tape.scalar(loss)?;
    if !lv.is_finite() {
        return Err(Error::Domain(format!("loss evaluated to {lv}")));
    }
    let grads = tape.backward(loss)?;

    let mut rng = RngState::new(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    for (ti, var) in vars.iter().enumerate() {
        let numel = params[ti].numel();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut check = TensorCheck {
            max_relative_error: 0.0,
            worst_coord: 0,
            coords_checked: coords.len(),
        };
        for &c in &coords {
            let orig = work[ti].data()[c];
            let mut at = |offset: f64| -> Result<f64> {
                work[ti].data_mut()[c] = orig + offset;
                evaluate(&work, &f)
            };
            let h = opts.eps;
            let numeric = match opts.stencil {
                Stencil::TwoPoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FourPoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            work[ti].data_mut()[c] = orig;
            let a = analytic[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > check.max_relative_error {
                check.max_relative_error = err;
                check.worst_coord = c;
            }
        }
        per_tensor.push(check);
    }
    let max_relative_error = per_tensor.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_relative_error,
    })
}
