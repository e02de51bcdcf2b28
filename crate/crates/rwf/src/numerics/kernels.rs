//! Elementwise and row-wise kernels: softmax, layer norm, cross-entropy, GELU.
//!
//! Softmax subtracts the per-row max and cross-entropy goes through
//! log-sum-exp, so extreme logits never overflow.

use crate::error::{Result, RwfError};
use crate::numerics::matrix::Matrix;

/// Which class logits participate in a softmax / argmax. Masked-out classes
/// behave as if their logits were -inf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    allowed: Vec<bool>,
}

impl ClassMask {
    pub fn all(num_classes: usize) -> Self {
        ClassMask {
            allowed: vec![true; num_classes],
        }
    }

    pub fn from_classes(classes: &[usize], num_classes: usize) -> Self {
        let mut allowed = vec![false; num_classes];
        for &c in classes {
            assert!(c < num_classes, "class {c} out of range {num_classes}");
            allowed[c] = true;
        }
        ClassMask { allowed }
    }

    pub fn num_classes(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_allowed(&self, class: usize) -> bool {
        self.allowed.get(class).copied().unwrap_or(false)
    }

    pub fn allowed_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed
            .iter()
            .enumerate()
            .filter_map(|(c, &ok)| ok.then_some(c))
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&ok| ok).count()
    }
}

/// log(sum(exp(v))) over the allowed entries, stabilized by max subtraction.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax of `scale * scores`.
pub fn row_softmax(scores: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) {
        return Err(RwfError::InvalidArgument(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    if !scores.is_finite() {
        return Err(RwfError::NonFinite("row_softmax input".into()));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let max = row
            .iter()
            .map(|v| v * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v * scale - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Backprop through a row-wise softmax: given the softmax output `probs` and
/// the gradient w.r.t. it, returns the gradient w.r.t. the (scaled) scores.
pub fn row_softmax_backward(probs: &Matrix, grad_out: &Matrix) -> Matrix {
    assert_eq!(probs.rows(), grad_out.rows());
    assert_eq!(probs.cols(), grad_out.cols());
    let mut grad_in = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad_out.row(i);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let out = grad_in.row_mut(i);
        for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
            *o = pi * (gi - dot);
        }
    }
    grad_in
}

/// Per-row state needed to backprop through a layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized pre-affine activations (x - mean) / sqrt(var + eps).
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization followed by the affine transform.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    Ok(layer_norm_cached(x, gain, bias, eps)?.0)
}

pub fn layer_norm_cached(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(RwfError::Shape(format!(
            "layer_norm gain/bias lengths {}/{} vs {} cols",
            gain.len(),
            bias.len(),
            x.cols()
        )));
    }
    if !(eps > 0.0) {
        return Err(RwfError::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let d = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for j in 0..x.cols() {
            let xhat = (row[j] - mean) * istd;
            normalized.set(i, j, xhat);
            out.set(i, j, gain[j] * xhat + bias[j]);
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Backprop through `layer_norm`. Returns (d_input, d_gain, d_bias);
/// the gain/bias gradients are summed over rows.
pub fn layer_norm_backward(
    grad_out: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let rows = grad_out.rows();
    let cols = grad_out.cols();
    let d = cols as f64;
    let mut grad_in = Matrix::zeros(rows, cols);
    let mut d_gain = vec![0.0; cols];
    let mut d_bias = vec![0.0; cols];
    for i in 0..rows {
        let g = grad_out.row(i);
        let xhat = cache.normalized.row(i);
        let istd = cache.inv_std[i];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cols {
            d_gain[j] += g[j] * xhat[j];
            d_bias[j] += g[j];
            let dxhat = g[j] * gain[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[j];
        }
        let out = grad_in.row_mut(i);
        for j in 0..cols {
            let dxhat = g[j] * gain[j];
            out[j] = istd * (dxhat - sum_dxhat / d - xhat[j] * sum_dxhat_xhat / d);
        }
    }
    (grad_in, d_gain, d_bias)
}

const GELU_COEFF: f64 = 0.044715;

fn gelu_inner(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEFF * x * x * x)
}

/// GELU activation (tanh form); smooth everywhere, which keeps central
/// finite differences clean in the gradient checks.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = gelu_inner(x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = (2.0 / std::f64::consts::PI).sqrt() * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * du
}

/// Mean negative log-likelihood of `labels` under the masked softmax of
/// each logits row. Labels must point at unmasked classes.
pub fn cross_entropy(logits: &Matrix, labels: &[usize], mask: &ClassMask) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels, mask)?.0)
}

/// Cross-entropy plus the gradient w.r.t. the logits (already divided by the
/// batch size). Masked-out classes receive exactly zero gradient.
pub fn cross_entropy_with_grad(
    logits: &Matrix,
    labels: &[usize],
    mask: &ClassMask,
) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(RwfError::Shape(format!(
            "{} logits rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.cols() != mask.num_classes() {
        return Err(RwfError::Shape(format!(
            "{} logit columns vs {}-class mask",
            logits.cols(),
            mask.num_classes()
        )));
    }
    if !logits.is_finite() {
        return Err(RwfError::NonFinite("cross_entropy logits".into()));
    }
    let batch = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &label) in labels.iter().enumerate() {
        if !mask.is_allowed(label) {
            return Err(RwfError::InvalidArgument(format!(
                "label {label} is masked out"
            )));
        }
        let row = logits.row(i);
        let max = mask
            .allowed_classes()
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = mask.allowed_classes().map(|c| (row[c] - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for c in mask.allowed_classes() {
            let p = (row[c] - max).exp() / sum;
            g[c] = (p - if c == label { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn softmax_equal_scores_is_uniform() {
        let scores = Matrix::from_rows(&[vec![3.0; 5]]).unwrap();
        for scale in [0.1, 1.0, 25.0] {
            let p = row_softmax(&scores, scale).unwrap();
            for &v in p.data() {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_form_two_way() {
        let scores = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = row_softmax(&scores, 1.0).unwrap();
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((p.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let scores = Matrix::from_rows(&[vec![1000.0, 999.0]]).unwrap();
        let p = row_softmax(&scores, 1.0).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) + p.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let scores = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(row_softmax(&scores, 1.0).is_err());
    }

    #[test]
    fn softmax_shift_invariance_fuzz() {
        let mut rng = RngStream::new(11);
        for _ in 0..1000 {
            let magnitude = if rng.uniform() < 0.2 { 1e4 } else { 3.0 };
            let scores = rng.normal_matrix(2, 6, magnitude);
            let shift = rng.normal() * magnitude;
            let shifted = scores.map(|v| v + shift);
            let a = row_softmax(&scores, 0.7).unwrap();
            let b = row_softmax(&shifted, 0.7).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9);
            for i in 0..a.rows() {
                let sum: f64 = a.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(a.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::from_rows(&[vec![5.0; 4]]).unwrap();
        let out = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let out = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((out.get(0, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = RngStream::new(5);
        let x = rng.normal_matrix(6, 32, 2.5);
        let out = layer_norm(&x, &[1.0; 32], &[0.0; 32], 1e-10).unwrap();
        for i in 0..out.rows() {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn layer_norm_length_mismatch_is_error() {
        let x = Matrix::zeros(1, 4);
        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 4], 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let logits = Matrix::from_rows(&[vec![0.4; 6], vec![0.4; 6]]).unwrap();
        let mask = ClassMask::from_classes(&[0, 2, 4], 6);
        let loss = cross_entropy(&logits, &[0, 2], &mask).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_gap_drives_loss_to_zero() {
        let mut last = f64::INFINITY;
        for gap in [2.0, 8.0, 32.0] {
            let logits = Matrix::from_rows(&[vec![gap, 0.0, 0.0]]).unwrap();
            let loss = cross_entropy(&logits, &[0], &ClassMask::all(3)).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_two_step_oracle() {
        let mut rng = RngStream::new(77);
        let logits = rng.normal_matrix(4, 6, 2.0);
        let labels = [1usize, 0, 5, 3];
        let mask = ClassMask::all(6);
        let fast = cross_entropy(&logits, &labels, &mask).unwrap();
        // Oracle: explicit softmax then log, no log-sum-exp shortcut.
        let mut oracle = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            oracle += -(exps[label] / sum).ln();
        }
        oracle /= labels.len() as f64;
        assert!((fast - oracle).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_masked_label() {
        let logits = Matrix::zeros(1, 4);
        let mask = ClassMask::from_classes(&[0, 1], 4);
        assert!(cross_entropy(&logits, &[3], &mask).is_err());
    }

    #[test]
    fn masked_classes_get_zero_gradient() {
        let mut rng = RngStream::new(13);
        let logits = rng.normal_matrix(3, 5, 1.0);
        let mask = ClassMask::from_classes(&[1, 2], 5);
        let (_, grad) = cross_entropy_with_grad(&logits, &[1, 2, 1], &mask).unwrap();
        for i in 0..3 {
            for c in [0usize, 3, 4] {
                assert_eq!(grad.get(i, c), 0.0);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let eps = 1e-6;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_derivative(x) - numeric).abs() < 1e-8);
        }
    }
}
