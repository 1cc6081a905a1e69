//! Row-wise building blocks: layer normalization, dropout masks and the
//! masked cross-entropy objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::TokenId;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::params::LayerNormParams;
use super::LmError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalized rows and inverse standard deviations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_row<T: Scalar>(x: &[T], p: &LayerNormParams<T>, xhat: &mut [T], out: &mut [T]) -> T {
    let d = T::of_usize(x.len());
    let mean = x.iter().copied().sum::<T>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    for c in 0..x.len() {
        xhat[c] = (x[c] - mean) * inv;
        out[c] = xhat[c] * p.gain.as_slice()[c] + p.bias.as_slice()[c];
    }
    inv
}

pub fn layer_norm<T: Scalar>(x: &Matrix<T>, p: &LayerNormParams<T>) -> (Matrix<T>, NormCache<T>) {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let mut hrow = vec![T::zero(); d];
        inv_std.push(layer_norm_row(x.row(t), p, &mut hrow, out.row_mut(t)));
        xhat.row_mut(t).copy_from_slice(&hrow);
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates gain and bias gradients into `grads`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    p: &LayerNormParams<T>,
    dout: &Matrix<T>,
    grads: &mut LayerNormParams<T>,
) -> Matrix<T> {
    let (n, d) = dout.shape();
    let df = T::of_usize(d);
    let mut dx = Matrix::zeros(n, d);
    let gain = p.gain.as_slice();
    for t in 0..n {
        let (xh, g) = (cache.xhat.row(t), dout.row(t));
        let mut dxhat = vec![T::zero(); d];
        for c in 0..d {
            grads.gain.as_mut_slice()[c] += g[c] * xh[c];
            grads.bias.as_mut_slice()[c] += g[c];
            dxhat[c] = g[c] * gain[c];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / df;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / df;
        let inv = cache.inv_std[t];
        for (c, o) in dx.row_mut(t).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

/// Inverted-dropout mask (`0` or `1 / (1 - p)`), reproducible from `seed`.
pub fn dropout_mask<T: Scalar>(seed: u64, rows: usize, cols: usize, p: f64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - p));
    Matrix::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < p { T::zero() } else { keep })
}

/// Mean of `-log softmax(logits_t)[target_t]` over positions whose target is
/// not `ignore`. Returns the summed loss, the count, and (optionally) the
/// gradient of the *sum* with respect to the logits.
pub fn cross_entropy_sum<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[TokenId],
    ignore: Option<TokenId>,
    want_grad: bool,
) -> Result<(f64, usize, Option<Matrix<T>>), LmError> {
    if logits.rows() != targets.len() {
        return Err(LmError::Shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = want_grad.then(|| Matrix::zeros(logits.rows(), logits.cols()));
    for (t, &y) in targets.iter().enumerate() {
        if Some(y) == ignore {
            continue;
        }
        let y = usize::from(y);
        if y >= logits.cols() {
            return Err(LmError::InvalidToken(y as TokenId));
        }
        let row = logits.row(t);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let z: T = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + z.ln();
        total += (lse - row[y]).as_f64();
        count += 1;
        if let Some(g) = grad.as_mut() {
            for (gc, &x) in g.row_mut(t).iter_mut().zip(row) {
                *gc = (x - lse).exp();
            }
            g[(t, y)] -= T::one();
        }
    }
    Ok((total, count, grad))
}

/// Masked mean cross-entropy; `EmptyBatch` when every position is masked.
pub fn nll_loss<T: Scalar>(logits: &Matrix<T>, targets: &[TokenId], ignore: Option<TokenId>) -> Result<f64, LmError> {
    let (total, count, _) = cross_entropy_sum(logits, targets, ignore, false)?;
    if count == 0 {
        return Err(LmError::EmptyBatch);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PAD;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Matrix::<f64>::zeros(3, 260);
        let loss = nll_loss(&logits, &[1, 2, 3], None).unwrap();
        assert!((loss - 260f64.ln()).abs() < 1e-12);
        assert!((loss - 5.5607).abs() < 1e-4);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let mut logits = Matrix::<f64>::zeros(1, 260);
        logits[(0, 7)] = 20.0;
        // margin 20 over 259 rivals leaves ln(1 + 259 e^-20) ~= 5.3e-7
        let loss = nll_loss(&logits, &[7], None).unwrap();
        let exact = (1.0 + 259.0 * (-20f64).exp()).ln();
        assert!((loss - exact).abs() < 1e-6 * exact);
        logits[(0, 7)] = 40.0;
        assert!(nll_loss(&logits, &[7], None).unwrap() < 1e-8);
    }

    #[test]
    fn two_position_hand_value() {
        let mut logits = Matrix::<f64>::zeros(2, 260);
        logits[(0, 0)] = 2f64.ln();
        logits[(1, 5)] = -1.0;
        // row 0: p(0) = 2/261; row 1: p(5) = e^-1 / (259 + e^-1)
        let expect = (-(2.0f64 / 261.0).ln() - ((-1f64).exp() / (259.0 + (-1f64).exp())).ln()) / 2.0;
        let loss = nll_loss(&logits, &[0, 5], None).unwrap();
        assert!((loss - expect).abs() < 1e-13);
    }

    #[test]
    fn pad_targets_are_masked() {
        let logits = Matrix::<f64>::zeros(2, 260);
        assert!(matches!(nll_loss(&logits, &[PAD, PAD], Some(PAD)), Err(LmError::EmptyBatch)));
        let (_, count, _) = cross_entropy_sum(&logits, &[PAD, 3], Some(PAD), false).unwrap();
        assert_eq!(count, 1);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 5.0, 10.0]]);
        let (y, _) = layer_norm(&x, &LayerNormParams::<f64>::new(4));
        for t in 0..2 {
            let m: f64 = y.row(t).iter().sum::<f64>() / 4.0;
            let v: f64 = y.row(t).iter().map(|a| a * a).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_mask_is_reproducible() {
        let a = dropout_mask::<f64>(9, 4, 8, 0.5);
        assert_eq!(a, dropout_mask(9, 4, 8, 0.5));
        assert!(a.as_slice().iter().all(|&x| x == 0.0 || x == 2.0));
        assert!(dropout_mask::<f64>(9, 4, 8, 0.0).as_slice().iter().all(|&x| x == 1.0));
    }
}
