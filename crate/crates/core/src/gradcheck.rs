//! Central finite-difference gradient checking in double precision.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator. Gradients far below it are
/// compared absolutely, where central differences are dominated by rounding.
pub const NORM_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

fn eval<F>(inputs: &[(String, Tensor<f64>)], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let mut b = Bound::new(&tape);
    for (name, t) in inputs {
        b.insert(name, tape.constant(t.clone()));
    }
    let out = f(&b)?;
    scalar_of(out)
}

fn scalar_of(v: Var<'_, f64>) -> Result<f64> {
    let val = v.value();
    if val.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", val.shape())));
    }
    Ok(val.item())
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// For each input at most `coords` entries are probed (all of them when the
/// input is small). The reported error per input is
/// `||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, NORM_FLOOR)` (L2 over the
/// probed entries).
pub fn gradcheck<F>(inputs: &[(String, Tensor<f64>)], coords: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    gradcheck_with_step(inputs, coords, seed, FD_STEP, f)
}

/// [`gradcheck`] with an explicit difference step. A smaller step makes it
/// less likely that a perturbation crosses a rectifier kink; a larger one
/// keeps rounding noise down when the output is large.
pub fn gradcheck_with_step<F>(inputs: &[(String, Tensor<f64>)], coords: usize, seed: u64, step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("difference step must be positive, got {step}")));
    }
    let tape = Tape::<f64>::new();
    let mut bound = Bound::new(&tape);
    let mut vars = Vec::new();
    for (name, t) in inputs {
        let v = tape.param(t.clone());
        bound.insert(name, v);
        vars.push(v);
    }
    let out = f(&bound)?;
    scalar_of(out)?;
    let grads = tape.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (idx, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zero(vars[idx]);
        let picks: Vec<usize> =
            if t.len() <= coords { (0..t.len()).collect() } else { (0..coords).map(|_| rng.gen_range(0..t.len())).collect() };
        let mut diff = 0.0;
        let mut a_norm = 0.0;
        let mut n_norm = 0.0;
        for &i in &picks {
            let mut plus = inputs.to_vec();
            plus[idx].1.data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[idx].1.data_mut()[i] -= step;
            let numeric = (eval(&plus, &f)? - eval(&minus, &f)?) / (2.0 * step);
            let a = analytic.data()[i];
            diff += (a - numeric) * (a - numeric);
            a_norm += a * a;
            n_norm += numeric * numeric;
        }
        let denom = a_norm.sqrt().max(n_norm.sqrt()).max(NORM_FLOOR);
        let rel_err = diff.sqrt() / denom;
        report.inputs.push(InputCheck { name: name.clone(), checked: picks.len(), rel_err, analytic_norm: a_norm.sqrt() });
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
