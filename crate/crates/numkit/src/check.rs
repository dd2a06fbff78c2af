//! Derivative checks and the gradient-norm penalty.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest relative error between reverse-mode gradients and central
/// differences, `|analytic - numeric| / (|analytic| + 1e-12)`, taken over
/// every entry of every parameter.
///
/// `loss_fn` records a scalar loss from leaf parameters. `h` should lie in
/// `[1e-7, 1e-3]`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    debug_assert!((1e-7..=1e-3).contains(&h), "step {h} outside [1e-7, 1e-3]");
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = loss_fn(&g, &vars)?;
        g.grad(loss, &vars, false)?
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        loss_fn(&g, &vars)?.value().scalar_value()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + 1e-12);
            if !rel.is_finite() {
                return Err(NumError::NonFinite("finite_diff_check"));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Records `sum_k ||d s / d wrt_k||_F^2` as a differentiable node.
///
/// The first-order gradients are recorded on the graph, so the returned
/// node can be differentiated again with [`Graph::grad`].
pub fn grad_norm_penalty<'g>(graph: &'g Graph, s: Var<'g>, wrt: &[Var<'g>]) -> Result<Var<'g>> {
    let grads = graph.grad(s, wrt, true)?;
    let mut total: Option<Var<'g>> = None;
    for d in grads {
        let sq = d.mul(d).sum();
        total = Some(match total {
            Some(t) => t.add(sq),
            None => sq,
        });
    }
    Ok(total.unwrap_or_else(|| graph.scalar(0.0)))
}

/// Penalty `||grad_A f||_F^2` and its exact derivative with respect to
/// `a`, through nested reverse mode.
pub fn grad_norm_grad<F>(scalar_fn: F, a: &Tensor) -> Result<(f64, Tensor)>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let av = g.param(a.clone());
    let s = scalar_fn(&g, av)?;
    if s.shape() != [1, 1] {
        return Err(NumError::Contract("scalar_fn must return a 1x1 node".into()));
    }
    let penalty = grad_norm_penalty(&g, s, &[av])?;
    let d = g.grad(penalty, &[av], false)?;
    Ok((penalty.value().scalar_value()?, (*d[0].value()).clone()))
}
