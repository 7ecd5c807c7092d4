//! Collectives over emulated ranks. Contributions are combined in ascending
//! rank order and, when a format is given, rounded after every pairwise step.

use serde::{Deserialize, Serialize};

use crate::tensor::{quantize_scalar, FloatFormat, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Sum,
    Avg,
}

fn same_shapes(parts: &[Tensor]) -> Result<(), TensorError> {
    let Some(first) = parts.first() else {
        return Err(TensorError::InvalidShape(vec![]));
    };
    for p in &parts[1..] {
        if p.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch { left: first.shape().to_vec(), right: p.shape().to_vec() });
        }
    }
    Ok(())
}

fn round(x: f64, fmt: Option<FloatFormat>) -> f64 {
    fmt.map_or(x, |f| quantize_scalar(x, f))
}

/// Result every rank receives; one part per rank.
pub fn all_reduce(parts: &[Tensor], op: ReduceOp, fmt: Option<FloatFormat>) -> Result<Tensor, TensorError> {
    same_shapes(parts)?;
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a = round(*a + b, fmt);
        }
    }
    if op == ReduceOp::Avg {
        let n = parts.len() as f64;
        acc = acc.map(|x| round(x / n, fmt));
    }
    Ok(acc)
}

/// Concatenation of the parts along `dim` (0 or 1) in the given order.
pub fn all_gather(parts: &[Tensor], dim: usize) -> Result<Tensor, TensorError> {
    match dim {
        0 => Tensor::concat_rows(parts),
        1 => Tensor::concat_cols(parts),
        _ => Err(TensorError::OutOfBounds(format!("gather dim {dim}"))),
    }
}

/// All-reduce followed by an even row split; element `r` goes to rank `r`.
pub fn reduce_scatter(parts: &[Tensor], op: ReduceOp, fmt: Option<FloatFormat>) -> Result<Vec<Tensor>, TensorError> {
    let full = all_reduce(parts, op, fmt)?;
    let n = parts.len();
    if full.rows() % n != 0 {
        return Err(TensorError::InvalidShape(full.shape().to_vec()));
    }
    let q = full.rows() / n;
    Ok((0..n).map(|r| full.rows_range(r * q, (r + 1) * q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_examples() {
        let parts = [Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(all_reduce(&parts, ReduceOp::Sum, None).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(all_reduce(&parts, ReduceOp::Avg, None).unwrap().data(), &[2.0, 3.0]);
        let bad = [Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0, 2.0])];
        assert!(matches!(all_reduce(&bad, ReduceOp::Sum, None), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn pairwise_rounding_is_order_dependent() {
        // 1 + e rounds back to 1 in BF16 at each step; summing the small terms first keeps them.
        let e = 3.0 * 2f64.powi(-10);
        let big_first = [Tensor::vector(vec![1.0]), Tensor::vector(vec![e]), Tensor::vector(vec![e])];
        let small_first = [Tensor::vector(vec![e]), Tensor::vector(vec![e]), Tensor::vector(vec![1.0])];
        let a = all_reduce(&big_first, ReduceOp::Sum, Some(FloatFormat::Bf16)).unwrap();
        let b = all_reduce(&small_first, ReduceOp::Sum, Some(FloatFormat::Bf16)).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(b.data(), &[1.0 + 2f64.powi(-7)]);
    }

    #[test]
    fn gather_and_scatter() {
        let a = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let g = all_gather(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = reduce_scatter(&[a, b], ReduceOp::Sum, None).unwrap();
        assert_eq!(s[0].data(), &[4.0]);
        assert_eq!(s[1].data(), &[6.0]);
    }
}
