use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares autodiff gradients of `f` against central differences.
///
/// `f` builds a scalar loss from leaf variables holding `params` (one leaf
/// per tensor, in order). Returns the largest entrywise
/// `|g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-6)` over all parameter
/// entries.
pub fn finite_difference_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!("{first} != {second}")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).expect("leaf gradient").data().to_vec();
        for (j, &ga) in analytic.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
