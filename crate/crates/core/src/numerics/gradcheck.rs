//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, DvpError, Result};
use crate::transformer::{GradMode, Graph, ParamStore};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub passed: bool,
}

fn eval<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if track { tape.param(p.clone()) } else { tape.constant(p.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(invalid("grad_check: function must return a scalar"));
    }
    if !value.data()[0].is_finite() {
        return Err(DvpError::NonFinite { op: "grad_check" });
    }
    Ok((tape, vars, out))
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `h` on every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("grad_check: step must be positive"));
    }
    let (tape, vars, out) = eval(&f, params, true)?;
    let grads = tape.backward(out)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].len()]);
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = scalar(&f, &work)?;
            work[pi].data_mut()[c] = orig - h;
            let minus = scalar(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = rel_err(analytic[c], numeric);
            coordinates += 1;
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = f64::max(rel, max_rel_err);
                worst = Some((pi, c));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, coordinates, passed: max_rel_err < tol })
}

/// Like [`grad_check`], but over every tracked tensor of a parameter store;
/// `f` builds the scalar from a graph bound to that store.
pub fn grad_check_store<F>(store: &ParamStore, mode: GradMode, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("grad_check: step must be positive"));
    }
    let value = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, GradMode::None);
        let out = f(&mut g)?;
        let v = g.tape.value(out);
        if v.len() != 1 || !v.data()[0].is_finite() {
            return Err(invalid("grad_check: function must return a finite scalar"));
        }
        Ok(v.data()[0])
    };
    let grads = {
        let mut g = Graph::new(store, mode);
        let out = f(&mut g)?;
        g.param_grads(out)?
    };
    let mut work = store.clone();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    for (idx, analytic) in &grads.entries {
        for (c, &a) in analytic.iter().enumerate() {
            let orig = work.by_index(*idx).1.data()[c];
            work.by_index_mut(*idx).1.data_mut()[c] = orig + h;
            let plus = value(&work)?;
            work.by_index_mut(*idx).1.data_mut()[c] = orig - h;
            let minus = value(&work)?;
            work.by_index_mut(*idx).1.data_mut()[c] = orig;
            let rel = rel_err(a, (plus - minus) / (2.0 * h));
            coordinates += 1;
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = f64::max(rel, max_rel_err);
                worst = Some((*idx, c));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, coordinates, passed: max_rel_err < tol })
}

fn scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = eval(f, params, false)?;
    Ok(tape.value(out).data()[0])
}
