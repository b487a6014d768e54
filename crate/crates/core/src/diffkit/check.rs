use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor so that near-zero gradients are compared in
/// absolute terms.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(θ+eps) - f(θ-eps)) / 2eps` over every parameter scalar.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?.accumulate(&mut work);
    }
    let analytic = work.flat_grad();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let v = f(&mut g)?;
        Ok(g.scalar(v))
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (i, &ga) in analytic.iter().enumerate() {
        let orig = *work.scalar_mut(i);
        *work.scalar_mut(i) = orig + eps;
        let fp = eval(&work)?;
        *work.scalar_mut(i) = orig - eps;
        let fm = eval(&work)?;
        *work.scalar_mut(i) = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let r = rel_err(ga, fd);
        report.max_abs_err = report.max_abs_err.max((ga - fd).abs());
        if r > report.max_rel_err {
            report.max_rel_err = r;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Gradient of the scalar built by `f`, flattened in parameter order.
pub fn gradient<F>(store: &ParamStore, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let value = g.scalar(loss);
    g.backward(loss)?.accumulate(&mut work);
    Ok((value, work.flat_grad()))
}
