//! Composite differentiable operations built from the graph primitives.
//!
//! Each composite is twice differentiable except where noted, because its
//! pieces are.

use crate::error::{NumError, Result};
use crate::graph::{check_same_rows, Var};
use crate::tensor::{check_targets, Tensor};

fn row_max(x: &Tensor) -> Tensor {
    let maxes: Vec<f64> = (0..x.rows())
        .map(|r| x.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::column_vector(&maxes)
}

/// `z - max(z)` per row, with the max held constant.
fn shifted<'g>(z: Var<'g>) -> Var<'g> {
    let cols = z.shape()[1];
    let m = z.graph().constant(row_max(&z.value()));
    z.sub(m.broadcast_cols(cols))
}

/// Row-wise softmax.
pub fn softmax_rows<'g>(z: Var<'g>) -> Var<'g> {
    let cols = z.shape()[1];
    let e = shifted(z).exp();
    let inv = e.sum_rows().powf(-1.0);
    e.mul(inv.broadcast_cols(cols))
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<'g>(z: Var<'g>) -> Var<'g> {
    let cols = z.shape()[1];
    let s = shifted(z);
    let lse = s.exp().sum_rows().ln();
    s.sub(lse.broadcast_cols(cols))
}

/// Mean negative log-likelihood over unmasked positions.
pub fn cross_entropy<'g>(logits: Var<'g>, targets: &[usize], mask: &[bool]) -> Result<Var<'g>> {
    check_targets("cross_entropy", &logits.value(), targets, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NumError::EmptySelection("cross_entropy: every position masked"));
    }
    let picked = log_softmax_rows(logits).pick_cols(targets);
    Ok(masked_mean(picked, mask)?.neg())
}

/// Mean of an `m×1` column over the rows where `mask` is true.
pub fn masked_mean<'g>(column: Var<'g>, mask: &[bool]) -> Result<Var<'g>> {
    check_same_rows("masked_mean", column.shape(), mask.len())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NumError::EmptySelection("masked_mean: every position masked"));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let w = column.graph().constant(Tensor::column_vector(&weights));
    Ok(column.mul(w).sum().scale(1.0 / count as f64))
}

/// Layer normalization over each row with learned gain and bias (`1×n`).
pub fn layer_norm<'g>(x: Var<'g>, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Var<'g> {
    let [rows, cols] = x.shape();
    let inv_n = 1.0 / cols as f64;
    let mean = x.sum_rows().scale(inv_n);
    let centered = x.sub(mean.broadcast_cols(cols));
    let var = centered.mul(centered).sum_rows().scale(inv_n);
    let eps = x.graph().constant(Tensor::full(rows, 1, eps));
    let inv_std = var.add(eps).powf(-0.5);
    centered
        .mul(inv_std.broadcast_cols(cols))
        .mul(gain.broadcast_rows(rows))
        .add(bias.broadcast_rows(rows))
}

/// GELU, tanh approximation.
pub fn gelu<'g>(x: Var<'g>) -> Var<'g> {
    let [r, c] = x.shape();
    let g = x.graph();
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let cube = x.mul(x).mul(x);
    let inner = x.add(cube.scale(0.044715)).scale(k).tanh();
    let one = g.constant(Tensor::ones(r, c));
    x.mul(one.add(inner)).scale(0.5)
}

/// Multiplies every element of `x` by the `1×1` node `s`.
pub fn scale_by<'g>(x: Var<'g>, s: Var<'g>) -> Var<'g> {
    let [r, c] = x.shape();
    x.mul(s.broadcast_all(r, c))
}

/// Multiplies row `i` of `x` by entry `i` of the `m×1` column `w`.
pub fn scale_rows<'g>(x: Var<'g>, w: Var<'g>) -> Var<'g> {
    let c = x.shape()[1];
    x.mul(w.broadcast_cols(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn graph_softmax_matches_kernel() {
        let g = Graph::new();
        let z = Tensor::from_rows(&[[0.3, -1.0, 2.0], [5.0, 5.0, 5.0]]).unwrap();
        let p = softmax_rows(g.constant(z.clone()));
        assert!(p.value().max_abs_diff(&z.softmax_rows()).unwrap() < 1e-15);
        for r in 0..2 {
            let s: f64 = p.value().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_cross_entropy_matches_kernel() {
        let g = Graph::new();
        let z = Tensor::from_rows(&[[0.3, -1.0, 2.0], [1.0, 0.0, 0.5]]).unwrap();
        let ce = cross_entropy(g.constant(z.clone()), &[2, 0], &[true, false]).unwrap();
        let k = crate::tensor::cross_entropy(&z, &[2, 0], &[true, false]).unwrap();
        assert!((ce.value().scalar_value().unwrap() - k).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap());
        let gain = g.constant(Tensor::ones(1, 4));
        let bias = g.constant(Tensor::zeros(1, 4));
        let y = layer_norm(x, gain, bias, 0.0).value();
        assert!(y.sum().abs() < 1e-12);
        assert!((y.frobenius_norm_sq() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_reference_points() {
        let g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[0.0, 1.0, -1.0]));
        let y = gelu(x).value();
        assert_eq!(y.get(0, 0), 0.0);
        assert!((y.get(0, 1) - 0.841192).abs() < 1e-5);
        assert!((y.get(0, 2) + 0.158808).abs() < 1e-5);
    }
}
