//! Graph-free versions of the basic numeric operations.

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!("axis {axis} for shape {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data()[at(k)];
            }
            kernels::softmax_in_place(&mut buf);
            for (k, &b) in buf.iter().enumerate() {
                out.data_mut()[at(k)] = b;
            }
        }
    }
    Ok(out)
}

/// Mean of `-log softmax(logits[i])[targets[i]]` over positions whose target is not `ignore_id`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize], ignore_id: Option<usize>) -> Result<T> {
    if logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if Some(t) == ignore_id {
            continue;
        }
        if t >= logits.cols() {
            return Err(Error::ShapeMismatch(format!("target {t} >= {} classes", logits.cols())));
        }
        let row = logits.row(i);
        total = total + kernels::log_sum_exp(row) - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    Ok(total / T::from_usize(count).unwrap())
}
