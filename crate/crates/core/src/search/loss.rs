//! Node-classification losses and metrics over a node mask.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Labels;
use crate::tensor::sigmoid;
use crate::{Tape, Tensor, Var};

fn masked(mask: &[bool], what: &str) -> Result<Vec<usize>> {
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Invalid(format!("{what}: empty mask")));
    }
    Ok(idx)
}

fn check_rows(rows: usize, cols: usize, labels: &Labels, mask: &[bool]) -> Result<()> {
    let n = match labels {
        Labels::Single(l) => l.len(),
        Labels::Multi(l) => l.len(),
    };
    if rows != n || mask.len() != n {
        return Err(Error::Invalid(format!(
            "{rows} logit rows, {n} labels and {} mask entries",
            mask.len()
        )));
    }
    if let Labels::Multi(l) = labels {
        if l.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid(format!(
                "multi-label rows must have {cols} entries"
            )));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy (single-label) or mean elementwise sigmoid
/// binary cross-entropy (multi-label) over the masked nodes.
pub fn compute_loss(tape: &mut Tape, logits: Var, labels: &Labels, mask: &[bool]) -> Result<Var> {
    let (rows, cols) = (tape.value(logits).rows(), tape.value(logits).cols());
    check_rows(rows, cols, labels, mask)?;
    let idx = masked(mask, "loss")?;
    let m = idx.len();
    let picked = tape.gather_rows(logits, Arc::from(idx.clone()))?;
    match labels {
        Labels::Single(l) => {
            let mut onehot = Tensor::zeros(&[m, cols]);
            for (r, &i) in idx.iter().enumerate() {
                if l[i] >= cols {
                    return Err(Error::Invalid(format!(
                        "label {} of node {i} >= {cols} classes",
                        l[i]
                    )));
                }
                onehot.data_mut()[r * cols + l[i]] = 1.0;
            }
            let lsm = tape.log_softmax_rows(picked);
            let y = tape.constant(onehot);
            let ll = tape.mul(lsm, y)?;
            let total = tape.sum(ll);
            Ok(tape.scale(total, -1.0 / m as f64))
        }
        Labels::Multi(l) => {
            let data = idx
                .iter()
                .flat_map(|&i| l[i].iter().map(|&b| b as f64))
                .collect();
            let y = tape.constant(Tensor::matrix(m, cols, data)?);
            let sp = tape.softplus(picked);
            let yx = tape.mul(y, picked)?;
            let bce = tape.sub(sp, yx)?;
            Ok(tape.mean(bce))
        }
    }
}

/// Accuracy (single-label) or micro-F1 at threshold 0.5 (multi-label).
/// With no positive predictions and no positive labels F1 is 1.
pub fn evaluate(logits: &Tensor, labels: &Labels, mask: &[bool]) -> Result<f64> {
    check_rows(logits.rows(), logits.cols(), labels, mask)?;
    let idx = masked(mask, "metric")?;
    match labels {
        Labels::Single(l) => {
            let correct = idx
                .iter()
                .filter(|&&i| crate::tensor::argmax(logits.row(i)) == l[i])
                .count();
            Ok(correct as f64 / idx.len() as f64)
        }
        Labels::Multi(l) => {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for &i in &idx {
                for (&x, &y) in logits.row(i).iter().zip(&l[i]) {
                    match (sigmoid(x) > 0.5, y == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            Ok(micro_f1(tp, fp, fn_))
        }
    }
}

pub fn micro_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}
