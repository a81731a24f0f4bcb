use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Scalar loss with its gradient with respect to the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    ensure!(
        t.is_finite(),
        NonFinite,
        "{what} contains non-finite entries"
    );
    Ok(())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-wise softmax of a `[B, C]` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    check_finite(logits, "logits")?;
    let mut out = Tensor::zeros(&[logits.rows(), logits.cols()]);
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), out.row_mut(r));
    }
    Ok(out)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    ensure!(
        labels.len() == logits.rows(),
        Dimension,
        "{} labels for {} rows",
        labels.len(),
        logits.rows()
    );
    let c = logits.cols();
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(crate::Error::Domain(format!(
            "label {bad} outside [0, {c})"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
/// Gradient: `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    check_labels(logits, labels)?;
    check_finite(logits, "logits")?;
    let b = logits.rows();
    let mut grad = Tensor::zeros(&[b, logits.cols()]);
    if b == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        let g = grad.row_mut(r);
        softmax_row(row, g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= b as f64);
    }
    Ok(LossGrad {
        loss: total / b as f64,
        grad,
    })
}

/// Mean over all entries of `(prediction - target)^2`.
pub fn mean_squared_error(prediction: &Tensor, target: &Tensor) -> Result<LossGrad> {
    ensure!(
        prediction.shape() == target.shape(),
        Dimension,
        "prediction {:?} vs target {:?}",
        prediction.shape(),
        target.shape()
    );
    let n = prediction.len();
    let mut grad = Tensor::zeros(prediction.shape());
    if n == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let mut total = 0.0;
    for ((g, p), t) in grad
        .data_mut()
        .iter_mut()
        .zip(prediction.data())
        .zip(target.data())
    {
        let d = p - t;
        total += d * d;
        *g = 2.0 * d / n as f64;
    }
    Ok(LossGrad {
        loss: total / n as f64,
        grad,
    })
}
