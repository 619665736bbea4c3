use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// Largest relative discrepancy between the tape gradient of `f` at `point`
/// and a central finite difference with step `h`, over every coordinate.
///
/// The per-coordinate error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", "finite-difference step must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.variable(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.variable(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_tensor(v).into_values()).collect();

    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let errors = par::map_indexed(coords.len(), |c| -> Result<f64> {
        let (t, i) = coords[c];
        let mut pts = points.to_vec();
        let x0 = points[t].values()[i];
        pts[t].values_mut()[i] = x0 + h;
        let fp = eval(&pts)?;
        pts[t].values_mut()[i] = x0 - h;
        let fm = eval(&pts)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check evaluation of tensor {t}"),
                index: i,
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        Ok((analytic[t][i] - numeric).abs() / numeric.abs().max(1.0))
    });
    let mut worst = 0.0f64;
    for e in errors {
        worst = worst.max(e?);
    }
    Ok(worst)
}
