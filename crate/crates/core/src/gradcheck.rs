//! Central finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale, so that
/// entries that are zero up to rounding do not produce huge ratios.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks `f` at `x` (single input).
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T, tol: T) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
        tol,
    )
}

/// Checks the gradient of the scalar `f(xs)` with respect to every element
/// of every input.
pub fn grad_check_many<T, F>(f: F, xs: &[Tensor<T>], eps: T, tol: T) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map_or_else(|| vec![T::zero(); x.len()], <[T]>::to_vec)
        })
        .collect();

    let again = eval(xs)?;
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(Error::NonDeterministic {
            first: base.as_f64(),
            second: again.as_f64(),
        });
    }

    let two_eps = eps + eps;
    let floor = T::lit(REL_FLOOR);
    let mut worst = None;
    let mut max_err = T::zero();
    let mut checked = 0;
    let mut probe: Vec<Tensor<T>> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        // probe[i] is rewritten in place, so index rather than iterate.
        #[allow(clippy::needless_range_loop)]
        for j in 0..x.len() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / two_eps;
            let a = analytic[i][j];
            let scale = a.abs().max(numeric.abs()).max(floor);
            let err = (a - numeric).abs() / scale;
            if err > max_err || err.is_nan() {
                max_err = err;
                worst = Some((i, j));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err.as_f64(),
        worst,
        checked,
        tol: tol.as_f64(),
        passed: max_err <= tol,
    })
}

fn scalar_of<T: Real>(tape: &Tape<T>, v: Var) -> Result<T> {
    let val = tape.value(v);
    if val.len() != 1 {
        return Err(Error::Tensor(format!(
            "gradient check needs a scalar function, got shape {:?}",
            val.shape()
        )));
    }
    Ok(val.item())
}
