use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Per-example loss `0.5 * ||y - t||^2`.
    Mse,
}

/// Supervision for a batch. Class labels are given per trailing-axis row, so a
/// `(B, T, C)` logit batch needs `B*T` labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    /// Gathers the targets of the listed examples; `rows_per_example` is `T`
    /// for sequence batches and 1 otherwise.
    pub fn select(&self, indices: &[usize], rows_per_example: usize) -> Result<Targets> {
        match self {
            Targets::Classes(labels) => {
                let mut out = Vec::with_capacity(indices.len() * rows_per_example);
                for &i in indices {
                    let start = i * rows_per_example;
                    let end = start + rows_per_example;
                    if end > labels.len() {
                        return Err(Error::Input(format!("label index {i} out of range")));
                    }
                    out.extend_from_slice(&labels[start..end]);
                }
                Ok(Targets::Classes(out))
            }
            Targets::Values(t) => Ok(Targets::Values(t.select(indices)?)),
        }
    }

    pub fn slice(&self, start: usize, end: usize, rows_per_example: usize) -> Result<Targets> {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx, rows_per_example)
    }
}

/// Mean per-example loss and the gradient of the *summed* loss with respect to
/// the logits, so each example's row of `dlogits` is its own un-averaged
/// gradient.
pub fn loss(logits: &Tensor, targets: &Targets, kind: LossKind) -> Result<(f64, Tensor)> {
    let batch = logits.batch() as f64;
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            let classes = logits.width();
            if labels.len() != logits.rows() {
                return Err(Error::dim(
                    "cross-entropy loss",
                    format!("{} labels for {} logit rows", labels.len(), logits.rows()),
                ));
            }
            let mut grad = vec![0.0; logits.len()];
            let mut total = 0.0;
            for (r, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
                if label >= classes {
                    return Err(Error::Input(format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                total += log_z - row[label];
                let g = &mut grad[r * classes..(r + 1) * classes];
                for (gi, &v) in g.iter_mut().zip(row) {
                    *gi = (v - log_z).exp();
                }
                g[label] -= 1.0;
            }
            Ok((total / batch, Tensor::new(logits.shape().to_vec(), grad)?))
        }
        (LossKind::Mse, Targets::Values(target)) => {
            if target.shape() != logits.shape() {
                return Err(Error::dim(
                    "mse loss",
                    format!("target {:?} vs logits {:?}", target.shape(), logits.shape()),
                ));
            }
            let grad: Vec<f64> = logits
                .data()
                .iter()
                .zip(target.data())
                .map(|(y, t)| y - t)
                .collect();
            let total: f64 = grad.iter().map(|d| 0.5 * d * d).sum();
            Ok((total / batch, Tensor::new(logits.shape().to_vec(), grad)?))
        }
        (kind, _) => Err(Error::Input(format!(
            "targets do not match loss kind {kind:?}"
        ))),
    }
}
