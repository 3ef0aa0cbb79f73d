use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives the graph and one leaf per entry of `params` and must
/// return a scalar loss. Returns the maximum over every parameter element of
/// `|autodiff − fd| / max(1e-8, |fd|)`.
pub fn grad_check<F>(params: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
