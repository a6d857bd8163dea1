//! Central finite-difference gradient checking at 64-bit precision.

use super::grid::ValueGrid;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<Fun>(params: &[ValueGrid<f64>], f: &mut Fun, with_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    Fun: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let leaf = ValueGrid::from_parts(p.shape().to_vec(), p.data().to_vec());
            tape.leaf(if with_grad { leaf.with_grad() } else { leaf })
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.check()?;
    Ok((tape, vars, loss))
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `h` for every coordinate of every parameter.
///
/// `f` receives one leaf per entry of `params` and must build a scalar loss.
pub fn grad_check<Fun>(params: &mut [ValueGrid<f64>], mut f: Fun, h: f64) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(params, &mut f, true)?;
    let base = tape.value(loss).item();
    let (_, _, again) = evaluate(params, &mut f, false).map(|(t, v, l)| {
        let x = t.value(l).item();
        (t, v, x)
    })?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic { a: base, b: again });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).expect("leaf gradient").to_vec()).collect();
    drop(tape);

    let mut report = GradCheckReport::default();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let plus = evaluate(params, &mut f, false)?;
            let plus = plus.0.value(plus.2).item();
            params[p].data_mut()[i] = orig - h;
            let minus = evaluate(params, &mut f, false)?;
            let minus = minus.0.value(minus.2).item();
            params[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            report.entries.push(GradCheckEntry {
                param: p,
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(report)
}
