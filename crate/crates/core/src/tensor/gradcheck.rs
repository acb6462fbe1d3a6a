use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the relative error of the whole gradient,
/// `‖analytic − fd‖ / (‖analytic‖ + ‖fd‖ + 1e-12)`.
///
/// A per-coordinate ratio is not used: coordinates whose gradient is many
/// orders below the loss value are dominated by finite-difference round-off.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_gradcheck`]; the norms run over every
/// coordinate of every input.
pub fn finite_diff_gradcheck_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Param(format!("gradcheck step {h} outside [1e-7, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("gradcheck function must be scalar".into()));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        Ok(v.item())
    };

    let mut work: Vec<Tensor> = xs.to_vec();
    let (mut diff, mut norm_a, mut norm_fd) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..xs.len() {
        for k in 0..xs[t].len() {
            let orig = xs[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[t].data()[k];
            diff += (a - fd) * (a - fd);
            norm_a += a * a;
            norm_fd += fd * fd;
        }
    }
    Ok(diff.sqrt() / (norm_a.sqrt() + norm_fd.sqrt() + 1e-12))
}
