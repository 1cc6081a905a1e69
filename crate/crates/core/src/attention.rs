//! Attention mechanisms used by the language model, each with its analytic
//! backward pass.
//!
//! * [`vaswani_attention`]: scaled dot-product softmax attention (reference).
//! * [`kernel_attention_oracle`]: direct O(N^2) kernelized attention.
//! * [`linear_attention`]: the same kernelized attention as one left-to-right
//!   scan over prefix sums, O(N d^2) time and O(d^2) state.
//! * [`local_attention`]: causal softmax attention over a trailing window.
//! * [`token_shift`], [`reversible_forward`]/[`reversible_inverse`] and
//!   [`glu_ffn`]: the remaining block components.

use crate::scalar::{swish, swish_grad, Scalar};
use crate::tensor::{dot, Matrix, Op};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("non-finite value in {0}")]
    NumericDomain(&'static str),
    #[error("normalizer of row {row} is below the guard")]
    DegenerateNormalizer { row: usize },
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("decay {0} outside (0, 1)")]
    InvalidDecay(f64),
    #[error("window must be at least 1")]
    InvalidWindow,
}

/// Positive feature map for kernelized attention.
pub trait FeatureMap<T: Scalar>: Sync {
    fn apply(&self, x: T) -> T;
    fn derivative(&self, x: T) -> T;
}

/// `elu(x) + 1`, strictly positive for finite `x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct EluPlusOne;

impl<T: Scalar> FeatureMap<T> for EluPlusOne {
    fn apply(&self, x: T) -> T {
        if x > T::zero() {
            x + T::one()
        } else {
            x.exp()
        }
    }

    fn derivative(&self, x: T) -> T {
        if x > T::zero() {
            T::one()
        } else {
            x.exp()
        }
    }
}

/// `phi(x) = x`; only meaningful on strictly positive inputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct PositiveIdentity;

impl<T: Scalar> FeatureMap<T> for PositiveIdentity {
    fn apply(&self, x: T) -> T {
        x
    }

    fn derivative(&self, _x: T) -> T {
        T::one()
    }
}

/// Normalizer guard used by the language model's linear heads.
pub const LINEAR_ATTENTION_EPS: f64 = 1e-6;
/// Smallest normalizer the direct kernel oracle accepts.
pub const ORACLE_MIN_NORMALIZER: f64 = 1e-12;

/// Q, K, V (N x d each; V may have its own width) and the causal flag.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs<'a, T> {
    pub q: &'a Matrix<T>,
    pub k: &'a Matrix<T>,
    pub v: &'a Matrix<T>,
    pub causal: bool,
}

impl<'a, T: Scalar> AttentionInputs<'a, T> {
    pub fn new(q: &'a Matrix<T>, k: &'a Matrix<T>, v: &'a Matrix<T>, causal: bool) -> Self {
        Self { q, k, v, causal }
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let n = self.q.rows();
        if self.k.rows() != n || self.v.rows() != n {
            return Err(AttentionError::ShapeError(format!("sequence lengths differ: q {} k {} v {}", n, self.k.rows(), self.v.rows())));
        }
        if self.q.cols() != self.k.cols() || self.q.cols() == 0 {
            return Err(AttentionError::ShapeError(format!("q/k widths {} and {}", self.q.cols(), self.k.cols())));
        }
        for (m, name) in [(self.q, "q"), (self.k, "k"), (self.v, "v")] {
            if !m.is_finite() {
                return Err(AttentionError::NumericDomain(name));
            }
        }
        Ok(())
    }

    fn len(&self) -> usize {
        self.q.rows()
    }
}

/// Gradients with respect to Q, K and V.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

/// Key range visible from row `i`.
fn key_range(i: usize, n: usize, causal: bool, window: Option<usize>) -> std::ops::Range<usize> {
    let end = if causal { i + 1 } else { n };
    let start = match window {
        Some(w) => (i + 1).saturating_sub(w),
        None => 0,
    };
    start..end
}

/// Softmax weights of row `i` over `range`.
fn softmax_row<T: Scalar>(inp: &AttentionInputs<'_, T>, i: usize, range: std::ops::Range<usize>, scale: T) -> Vec<T> {
    let qi = inp.q.row(i);
    let mut w: Vec<T> = range.map(|j| dot(qi, inp.k.row(j)) * scale).collect();
    let m = w.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for x in &mut w {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in &mut w {
        *x /= z;
    }
    w
}

fn softmax_attention<T: Scalar>(inp: &AttentionInputs<'_, T>, window: Option<usize>) -> Result<Matrix<T>, AttentionError> {
    inp.validate()?;
    let n = inp.len();
    let dv = inp.v.cols();
    let scale = T::one() / T::of_usize(inp.q.cols()).sqrt();
    let mut out = Matrix::zeros(n, dv);
    for i in 0..n {
        let range = key_range(i, n, inp.causal, window);
        let w = softmax_row(inp, i, range.clone(), scale);
        let row = out.row_mut(i);
        for (j, &p) in range.zip(&w) {
            for (o, &x) in row.iter_mut().zip(inp.v.row(j)) {
                *o += p * x;
            }
        }
    }
    Ok(out)
}

fn softmax_attention_backward<T: Scalar>(
    inp: &AttentionInputs<'_, T>,
    window: Option<usize>,
    grad: &Matrix<T>,
) -> Result<AttentionGrads<T>, AttentionError> {
    inp.validate()?;
    let n = inp.len();
    let scale = T::one() / T::of_usize(inp.q.cols()).sqrt();
    let mut dq = Matrix::zeros(n, inp.q.cols());
    let mut dk = Matrix::zeros(n, inp.k.cols());
    let mut dv = Matrix::zeros(n, inp.v.cols());
    for i in 0..n {
        let range = key_range(i, n, inp.causal, window);
        let w = softmax_row(inp, i, range.clone(), scale);
        let gi = grad.row(i);
        let dp: Vec<T> = range.clone().map(|j| dot(gi, inp.v.row(j))).collect();
        let mean: T = w.iter().zip(&dp).map(|(&p, &d)| p * d).sum();
        for ((j, &p), &d) in range.zip(&w).zip(&dp) {
            for (a, &g) in dv.row_mut(j).iter_mut().zip(gi) {
                *a += p * g;
            }
            let ds = p * (d - mean) * scale;
            for (a, &x) in dq.row_mut(i).iter_mut().zip(inp.k.row(j)) {
                *a += ds * x;
            }
            for (a, &x) in dk.row_mut(j).iter_mut().zip(inp.q.row(i)) {
                *a += ds * x;
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

/// `softmax(Q K^T / sqrt(d)) V`, rows masked to `j <= i` when causal.
pub fn vaswani_attention<T: Scalar>(inputs: &AttentionInputs<'_, T>) -> Result<Matrix<T>, AttentionError> {
    softmax_attention(inputs, None)
}

pub fn vaswani_attention_backward<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    grad: &Matrix<T>,
) -> Result<AttentionGrads<T>, AttentionError> {
    softmax_attention_backward(inputs, None, grad)
}

/// Causal softmax attention restricted to keys `i - window + 1 ..= i`. The
/// `causal` flag of `inputs` is ignored.
pub fn local_attention<T: Scalar>(inputs: &AttentionInputs<'_, T>, window: usize) -> Result<Matrix<T>, AttentionError> {
    if window == 0 {
        return Err(AttentionError::InvalidWindow);
    }
    softmax_attention(&AttentionInputs { causal: true, ..*inputs }, Some(window))
}

pub fn local_attention_backward<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    window: usize,
    grad: &Matrix<T>,
) -> Result<AttentionGrads<T>, AttentionError> {
    if window == 0 {
        return Err(AttentionError::InvalidWindow);
    }
    softmax_attention_backward(&AttentionInputs { causal: true, ..*inputs }, Some(window), grad)
}

fn feature_rows<T: Scalar>(m: &Matrix<T>, phi: &dyn FeatureMap<T>) -> Matrix<T> {
    m.map(|x| phi.apply(x))
}

/// Direct evaluation of `sum_j phi(q_i).phi(k_j) v_j / sum_j phi(q_i).phi(k_j)`.
pub fn kernel_attention_oracle<T: Scalar>(inputs: &AttentionInputs<'_, T>, phi: &dyn FeatureMap<T>) -> Result<Matrix<T>, AttentionError> {
    inputs.validate()?;
    let n = inputs.len();
    let fq = feature_rows(inputs.q, phi);
    let fk = feature_rows(inputs.k, phi);
    let mut out = Matrix::zeros(n, inputs.v.cols());
    for i in 0..n {
        let mut den = T::zero();
        for j in key_range(i, n, inputs.causal, None) {
            let s = dot(fq.row(i), fk.row(j));
            den += s;
            for (o, &x) in out.row_mut(i).iter_mut().zip(inputs.v.row(j)) {
                *o += s * x;
            }
        }
        if !(den >= T::of(ORACLE_MIN_NORMALIZER)) {
            return Err(AttentionError::DegenerateNormalizer { row: i });
        }
        out.row_mut(i).iter_mut().for_each(|o| *o /= den);
    }
    Ok(out)
}

/// Running prefix sums of a linear-attention scan.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttentionState<T> {
    /// `sum_j phi(k_j) v_j^T`, `d_k x d_v`.
    pub s: Matrix<T>,
    /// `sum_j phi(k_j)`.
    pub z: Vec<T>,
}

impl<T: Scalar> LinearAttentionState<T> {
    pub fn new(dk: usize, dv: usize) -> Self {
        Self { s: Matrix::zeros(dk, dv), z: vec![T::zero(); dk] }
    }

    /// Adds one key/value pair (already feature-mapped key).
    pub fn update(&mut self, fk: &[T], v: &[T]) {
        for (a, &kx) in fk.iter().enumerate() {
            self.z[a] += kx;
            for (s, &vx) in self.s.row_mut(a).iter_mut().zip(v) {
                *s += kx * vx;
            }
        }
    }

    /// `(phi(q)^T S) / (phi(q)^T z + eps)` into `out`; returns the normalizer.
    pub fn read(&self, fq: &[T], eps: T, out: &mut [T]) -> T {
        out.iter_mut().for_each(|o| *o = T::zero());
        for (a, &qx) in fq.iter().enumerate() {
            for (o, &s) in out.iter_mut().zip(self.s.row(a)) {
                *o += qx * s;
            }
        }
        let den = dot(fq, &self.z) + eps;
        out.iter_mut().for_each(|o| *o /= den);
        den
    }
}

/// Kernelized attention as a single left-to-right scan (`Q (K V)` order).
pub fn linear_attention<T: Scalar>(inputs: &AttentionInputs<'_, T>, phi: &dyn FeatureMap<T>, eps: T) -> Result<Matrix<T>, AttentionError> {
    inputs.validate()?;
    let n = inputs.len();
    let (dk, dv) = (inputs.k.cols(), inputs.v.cols());
    let fq = feature_rows(inputs.q, phi);
    let fk = feature_rows(inputs.k, phi);
    let mut state = LinearAttentionState::new(dk, dv);
    let mut out = Matrix::zeros(n, dv);
    if !inputs.causal {
        for j in 0..n {
            state.update(fk.row(j), inputs.v.row(j));
        }
    }
    for i in 0..n {
        if inputs.causal {
            state.update(fk.row(i), inputs.v.row(i));
        }
        let den = state.read(fq.row(i), eps, out.row_mut(i));
        if !(den > T::zero()) || !den.is_finite() {
            return Err(AttentionError::DegenerateNormalizer { row: i });
        }
    }
    Ok(out)
}

/// Backward pass of [`linear_attention`]: a forward scan for `dQ` and a
/// reverse scan for `dK`, `dV`, both in O(N d^2) with O(d^2) state.
pub fn linear_attention_backward<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    phi: &dyn FeatureMap<T>,
    eps: T,
    grad: &Matrix<T>,
) -> Result<AttentionGrads<T>, AttentionError> {
    inputs.validate()?;
    let n = inputs.len();
    let (dk, dvw) = (inputs.k.cols(), inputs.v.cols());
    let fq = feature_rows(inputs.q, phi);
    let fk = feature_rows(inputs.k, phi);

    // Per-row upstream signals: dnum_i = g_i / den_i and dden_i = -(g_i . out_i) / den_i.
    let mut dnum = Matrix::zeros(n, dvw);
    let mut dden = vec![T::zero(); n];
    let mut dfq = Matrix::zeros(n, dk);
    let mut state = LinearAttentionState::new(dk, dvw);
    if !inputs.causal {
        for j in 0..n {
            state.update(fk.row(j), inputs.v.row(j));
        }
    }
    let mut out_row = vec![T::zero(); dvw];
    for i in 0..n {
        if inputs.causal {
            state.update(fk.row(i), inputs.v.row(i));
        }
        let den = state.read(fq.row(i), eps, &mut out_row);
        let gi = grad.row(i);
        for (d, &g) in dnum.row_mut(i).iter_mut().zip(gi) {
            *d = g / den;
        }
        dden[i] = -dot(gi, &out_row) / den;
        // dphi(q_i) = S_i dnum_i + z_i dden_i
        for a in 0..dk {
            dfq[(i, a)] = dot(state.s.row(a), dnum.row(i)) + state.z[a] * dden[i];
        }
    }

    // Reverse scan: G_S = sum_{i >= j} phi(q_i) dnum_i^T, G_z = sum_{i >= j} phi(q_i) dden_i.
    let mut gs = Matrix::<T>::zeros(dk, dvw);
    let mut gz = vec![T::zero(); dk];
    let add_row = |gs: &mut Matrix<T>, gz: &mut [T], i: usize| {
        for a in 0..dk {
            let qa = fq[(i, a)];
            gz[a] += qa * dden[i];
            for (s, &d) in gs.row_mut(a).iter_mut().zip(dnum.row(i)) {
                *s += qa * d;
            }
        }
    };
    if !inputs.causal {
        for i in 0..n {
            add_row(&mut gs, &mut gz, i);
        }
    }
    let mut dfk = Matrix::zeros(n, dk);
    let mut dv = Matrix::zeros(n, dvw);
    for j in (0..n).rev() {
        if inputs.causal {
            add_row(&mut gs, &mut gz, j);
        }
        for a in 0..dk {
            dfk[(j, a)] = dot(gs.row(a), inputs.v.row(j)) + gz[a];
        }
        for a in 0..dk {
            let ka = fk[(j, a)];
            for (o, &s) in dv.row_mut(j).iter_mut().zip(gs.row(a)) {
                *o += ka * s;
            }
        }
    }
    let dq = Matrix::from_fn(n, dk, |i, a| dfq[(i, a)] * phi.derivative(inputs.q[(i, a)]));
    let dkm = Matrix::from_fn(n, dk, |j, a| dfk[(j, a)] * phi.derivative(inputs.k[(j, a)]));
    Ok(AttentionGrads { dq, dk: dkm, dv })
}

/// Half-channel token shift: row `t` keeps its first `D/2` channels and takes
/// the last `D/2` channels of row `t - 1` (zeros for `t = 0`).
pub fn token_shift<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>, AttentionError> {
    let d = x.cols();
    if !d.is_multiple_of(2) {
        return Err(AttentionError::ShapeError(format!("token shift needs an even width, got {d}")));
    }
    let h = d / 2;
    let mut out = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        out.row_mut(t)[..h].copy_from_slice(&x.row(t)[..h]);
        if t > 0 {
            out.row_mut(t)[h..].copy_from_slice(&x.row(t - 1)[h..]);
        }
    }
    Ok(out)
}

pub fn token_shift_backward<T: Scalar>(grad: &Matrix<T>) -> Result<Matrix<T>, AttentionError> {
    let d = grad.cols();
    if !d.is_multiple_of(2) {
        return Err(AttentionError::ShapeError(format!("token shift needs an even width, got {d}")));
    }
    let h = d / 2;
    let n = grad.rows();
    let mut out = Matrix::zeros(n, d);
    for t in 0..n {
        out.row_mut(t)[..h].copy_from_slice(&grad.row(t)[..h]);
        if t + 1 < n {
            out.row_mut(t)[h..].copy_from_slice(&grad.row(t + 1)[h..]);
        }
    }
    Ok(out)
}

/// `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`.
pub fn reversible_forward<T, F, G>(x1: &Matrix<T>, x2: &Matrix<T>, f: F, g: G) -> (Matrix<T>, Matrix<T>)
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> Matrix<T>,
    G: Fn(&Matrix<T>) -> Matrix<T>,
{
    let y1 = x1.add(&f(x2));
    let y2 = x2.add(&g(&y1));
    (y1, y2)
}

/// `x2 = y2 - G(y1)`, `x1 = y1 - F(x2)`.
pub fn reversible_inverse<T, F, G>(y1: &Matrix<T>, y2: &Matrix<T>, f: F, g: G) -> (Matrix<T>, Matrix<T>)
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> Matrix<T>,
    G: Fn(&Matrix<T>) -> Matrix<T>,
{
    let x2 = y2.sub(&g(y1));
    let x1 = y1.sub(&f(&x2));
    (x1, x2)
}

/// Weights of the gated feed-forward sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct GluParams<T> {
    /// `D x F`
    pub w_gate: Matrix<T>,
    /// `D x F`
    pub w_value: Matrix<T>,
    /// `F x D'`
    pub w_out: Matrix<T>,
}

impl<T: Scalar> GluParams<T> {
    fn check(&self, x: &Matrix<T>) -> Result<(), AttentionError> {
        let ok = self.w_gate.rows() == x.cols() && self.w_value.shape() == self.w_gate.shape() && self.w_out.rows() == self.w_gate.cols();
        if ok {
            Ok(())
        } else {
            Err(AttentionError::ShapeError(format!(
                "glu weights {:?}/{:?}/{:?} for input width {}",
                self.w_gate.shape(),
                self.w_value.shape(),
                self.w_out.shape(),
                x.cols()
            )))
        }
    }
}

/// Intermediate activations of one GLU evaluation.
#[derive(Clone, Debug)]
pub struct GluCache<T> {
    pub gate_pre: Matrix<T>,
    pub value: Matrix<T>,
    pub hidden: Matrix<T>,
}

/// `(swish(X W_g) * (X W_v)) W_o`, row-wise.
pub fn glu_ffn<T: Scalar>(x: &Matrix<T>, params: &GluParams<T>) -> Result<Matrix<T>, AttentionError> {
    glu_forward(x, params).map(|(y, _)| y)
}

pub fn glu_forward<T: Scalar>(x: &Matrix<T>, p: &GluParams<T>) -> Result<(Matrix<T>, GluCache<T>), AttentionError> {
    p.check(x)?;
    let gate_pre = x.matmul(&p.w_gate);
    let value = x.matmul(&p.w_value);
    let hidden = Matrix::from_fn(x.rows(), gate_pre.cols(), |i, j| swish(gate_pre[(i, j)]) * value[(i, j)]);
    let y = hidden.matmul(&p.w_out);
    Ok((y, GluCache { gate_pre, value, hidden }))
}

/// Returns `dX` and the three weight gradients.
pub fn glu_backward<T: Scalar>(x: &Matrix<T>, p: &GluParams<T>, cache: &GluCache<T>, grad: &Matrix<T>) -> (Matrix<T>, GluParams<T>) {
    let w_out = cache.hidden.matmul_op(Op::T, grad, Op::N);
    let dh = grad.matmul_op(Op::N, &p.w_out, Op::T);
    let dgate = Matrix::from_fn(dh.rows(), dh.cols(), |i, j| dh[(i, j)] * cache.value[(i, j)] * swish_grad(cache.gate_pre[(i, j)]));
    let dval = Matrix::from_fn(dh.rows(), dh.cols(), |i, j| dh[(i, j)] * swish(cache.gate_pre[(i, j)]));
    let w_gate = x.matmul_op(Op::T, &dgate, Op::N);
    let w_value = x.matmul_op(Op::T, &dval, Op::N);
    let mut dx = dgate.matmul_op(Op::N, &p.w_gate, Op::T);
    crate::tensor::gemm(T::one(), &dval, Op::N, &p.w_value, Op::T, T::one(), &mut dx);
    (dx, GluParams { w_gate, w_value, w_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) -> bool {
        a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn single_row_returns_value_row() {
        let q = Matrix::from_rows(&[vec![0.3, -0.1]]);
        let k = Matrix::from_rows(&[vec![1.2, 0.4]]);
        let v = Matrix::from_rows(&[vec![5.0, -2.0, 1.0]]);
        let inp = AttentionInputs::new(&q, &k, &v, true);
        assert!(close(&vaswani_attention(&inp).unwrap(), &v, 1e-15));
        assert!(close(&kernel_attention_oracle(&inp, &EluPlusOne).unwrap(), &v, 1e-15));
        assert!(close(&linear_attention(&inp, &EluPlusOne, 1e-12).unwrap(), &v, 1e-9));
        assert!(close(&local_attention(&inp, 3).unwrap(), &v, 1e-15));
    }

    #[test]
    fn zero_queries_give_running_means() {
        let n = 4;
        let q = Matrix::zeros(n, 2);
        let v = Matrix::from_fn(n, 2, |i, j| (i * 3 + j) as f64);
        let out = vaswani_attention(&AttentionInputs::new(&q, &q, &v, true)).unwrap();
        for i in 0..n {
            for c in 0..2 {
                let mean = (0..=i).map(|j| v[(j, c)]).sum::<f64>() / (i + 1) as f64;
                assert!((out[(i, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_oracle_with_positive_identity_is_weighted_average() {
        let q: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.5], vec![2.0, 1.0]]);
        let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.5], vec![0.5, 3.0]]);
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        let out = kernel_attention_oracle(&AttentionInputs::new(&q, &k, &v, true), &PositiveIdentity).unwrap();
        // row 2: sims = [3, 4.5, 4] -> (3*[1,0] + 4.5*[0,1] + 4*[2,2]) / 11.5
        assert!((out[(2, 0)] - 11.0 / 11.5).abs() < 1e-14);
        assert!((out[(2, 1)] - 12.5 / 11.5).abs() < 1e-14);
        // row 1: sims = [1, 1.25]
        assert!((out[(1, 0)] - 1.0 / 2.25).abs() < 1e-14);
        let full = kernel_attention_oracle(&AttentionInputs::new(&q, &k, &v, false), &PositiveIdentity).unwrap();
        assert_eq!(full.row(2), out.row(2));
    }

    #[test]
    fn linear_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for causal in [true, false] {
            let (q, k, v) = (rand_matrix(&mut rng, 20, 5), rand_matrix(&mut rng, 20, 5), rand_matrix(&mut rng, 20, 3));
            let inp = AttentionInputs::new(&q, &k, &v, causal);
            let a = linear_attention(&inp, &EluPlusOne, 1e-6).unwrap();
            let b = kernel_attention_oracle(&inp, &EluPlusOne).unwrap();
            assert!(close(&a, &b, 1e-5));
        }
    }

    #[test]
    fn local_window_one_is_identity_on_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_matrix(&mut rng, 6, 4), rand_matrix(&mut rng, 6, 4), rand_matrix(&mut rng, 6, 4));
        let out = local_attention(&AttentionInputs::new(&q, &k, &v, true), 1).unwrap();
        assert!(close(&out, &v, 1e-15));
    }

    #[test]
    fn wide_window_equals_causal_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (rand_matrix(&mut rng, 9, 4), rand_matrix(&mut rng, 9, 4), rand_matrix(&mut rng, 9, 2));
        let inp = AttentionInputs::new(&q, &k, &v, true);
        assert!(close(&local_attention(&inp, 9).unwrap(), &vaswani_attention(&inp).unwrap(), 1e-12));
        assert!(close(&local_attention(&inp, 50).unwrap(), &vaswani_attention(&inp).unwrap(), 1e-12));
    }

    #[test]
    fn window_two_matches_brute_force_masked_softmax() {
        let q = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6]]);
        let k = Matrix::from_rows(&[vec![0.7, 0.1], vec![0.2, -0.2], vec![-0.4, 0.9]]);
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]);
        let out = local_attention(&AttentionInputs::new(&q, &k, &v, true), 2).unwrap();
        let s = |i: usize, j: usize| (q[(i, 0)] * k[(j, 0)] + q[(i, 1)] * k[(j, 1)]) / 2f64.sqrt();
        let row2 = ((s(2, 1)).exp() * 2.0 + (s(2, 2)).exp() * 4.0) / (s(2, 1).exp() + s(2, 2).exp());
        let row1 = ((s(1, 0)).exp() * 1.0 + (s(1, 1)).exp() * 2.0) / (s(1, 0).exp() + s(1, 1).exp());
        assert!((out[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((out[(1, 0)] - row1).abs() < 1e-14);
        assert!((out[(2, 0)] - row2).abs() < 1e-14);
    }

    #[test]
    fn token_shift_rules() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let y = token_shift(&x).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(y.row(1), &[5.0, 6.0, 3.0, 4.0]);
        assert_eq!(&y.row(1)[2..], &x.row(0)[2..]);
        let c = Matrix::filled(4, 2, 3.0);
        let yc = token_shift(&c).unwrap();
        assert_eq!(yc.row(0), &[3.0, 0.0]);
        for t in 1..4 {
            assert_eq!(yc.row(t), &[3.0, 3.0]);
        }
        assert!(matches!(token_shift(&Matrix::<f64>::zeros(2, 3)), Err(AttentionError::ShapeError(_))));
    }

    #[test]
    fn reversible_block_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x1, x2) = (rand_matrix(&mut rng, 4, 8), rand_matrix(&mut rng, 4, 8));
        let (wf, wg) = (rand_matrix(&mut rng, 8, 8), rand_matrix(&mut rng, 8, 8));
        let f = |x: &Matrix<f64>| x.matmul(&wf).map(f64::tanh);
        let g = |x: &Matrix<f64>| x.matmul(&wg);
        let (y1, y2) = reversible_forward(&x1, &x2, f, g);
        let (r1, r2) = reversible_inverse(&y1, &y2, f, g);
        assert!(close(&r1, &x1, 1e-10) && close(&r2, &x2, 1e-10));
        let (z1, z2) = reversible_forward(&r1, &r2, f, g);
        assert!(close(&z1, &y1, 1e-10) && close(&z2, &y2, 1e-10));
        let zero = |x: &Matrix<f64>| Matrix::zeros(x.rows(), x.cols());
        assert_eq!(reversible_forward(&x1, &x2, zero, zero), (x1.clone(), x2.clone()));
    }

    #[test]
    fn glu_closed_gate_and_hand_value() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let p = GluParams {
            w_gate: Matrix::zeros(2, 2),
            w_value: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            w_out: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        assert_eq!(glu_ffn(&x, &p).unwrap().as_slice(), &[0.0, 0.0]);
        let p = GluParams { w_gate: p.w_value.clone(), ..p };
        let y = glu_ffn(&x, &p).unwrap();
        let sw = |v: f64| v / (1.0 + (-v).exp());
        assert!((y[(0, 0)] - sw(1.0) * 1.0).abs() < 1e-15);
        assert!((y[(0, 1)] - sw(-2.0) * -2.0).abs() < 1e-15);
        let mut p2 = p.clone();
        p2.w_out.scale(3.0);
        let y2 = glu_ffn(&x, &p2).unwrap();
        assert!((y2[(0, 1)] - 3.0 * y[(0, 1)]).abs() < 1e-15);
    }
}
