use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over elements of |analytic − numeric| / max(1, |analytic|).
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(p+eps) − f(p−eps)) / 2eps`, element by element,
/// for every parameter in `params`. Each element is also probed at `eps/10`
/// and the smaller error kept: a relu kink inside the wider step spoils only
/// that step, while a wrong gradient stays wrong at both.
pub fn check_gradients<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let entries: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|&id| (0..store.get(id).tensor.len()).map(move |i| (id, i)))
        .collect();
    check_gradient_entries(store, &entries, eps, f)
}

/// Like [`check_gradients`] but only for the listed `(parameter, flat index)`
/// entries, for models too large to probe exhaustively.
pub fn check_gradient_entries<F>(store: &mut ParamStore, entries: &[(ParamId, usize)], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("gradient-check eps {eps} outside (0, 1e-3]")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::dim("check_gradients", v.shape(), &[1]));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic: Vec<f64> = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {}", g.scalar(out))));
        }
        let grads = g.backward(out)?;
        entries
            .iter()
            .map(|&(id, i)| {
                let n = store.get(id).tensor.len();
                if i >= n {
                    return Err(Error::Input(format!("entry {i} out of range for `{}` ({n})", store.get(id).name)));
                }
                Ok(grads.param(id).map_or(0.0, |g| g[i]))
            })
            .collect::<Result<_>>()?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for (&(id, i), &a) in entries.iter().zip(&analytic) {
        if !a.is_finite() {
            return Err(Error::Numeric(format!("non-finite analytic gradient for `{}`", store.get(id).name)));
        }
        let orig = store.get(id).tensor.data()[i];
        let mut numeric = f64::NAN;
        for h in [eps, eps / 10.0] {
            store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let n = (plus? - minus?) / (2.0 * h);
            if numeric.is_nan() || (a - n).abs() < (a - numeric).abs() {
                numeric = n;
            }
        }
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel;
            report.worst_param = store.get(id).name.clone();
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
