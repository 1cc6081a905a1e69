//! Alternative sequence mixers: an RWKV-style weighted key-value average and
//! RetNet-style retention. Each has two evaluation forms that must agree.

use crate::attention::AttentionError;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, Op};

fn check_same_rows<T: Scalar>(ms: &[(&Matrix<T>, &'static str)]) -> Result<(), AttentionError> {
    let n = ms[0].0.rows();
    for (m, name) in ms {
        if m.rows() != n {
            return Err(AttentionError::ShapeError(format!("{name} has {} rows, expected {n}", m.rows())));
        }
        if !m.is_finite() {
            return Err(AttentionError::NumericDomain(name));
        }
    }
    Ok(())
}

/// Per-channel nonnegative decay rates.
#[derive(Clone, Debug, PartialEq)]
pub struct RwkvParams<T> {
    pub w: Vec<T>,
}

impl<T: Scalar> RwkvParams<T> {
    pub fn new(w: Vec<T>) -> Result<Self, AttentionError> {
        if w.iter().any(|x| !x.is_finite() || *x < T::zero()) {
            return Err(AttentionError::NumericDomain("rwkv decay"));
        }
        Ok(Self { w })
    }
}

fn check_rwkv<T: Scalar>(k: &Matrix<T>, v: &Matrix<T>, p: &RwkvParams<T>) -> Result<(), AttentionError> {
    check_same_rows(&[(k, "k"), (v, "v")])?;
    if k.cols() != v.cols() || p.w.len() != k.cols() {
        return Err(AttentionError::ShapeError(format!("rwkv widths: k {} v {} w {}", k.cols(), v.cols(), p.w.len())));
    }
    Ok(())
}

fn distance(i: usize, j: usize) -> usize {
    i.abs_diff(j)
}

/// Normalized weights `p_ij` of row `i` for channel `c`, over `0..=i` when
/// causal (all `j` otherwise, with decay on `|i - j|`).
fn rwkv_row_weights<T: Scalar>(k: &Matrix<T>, w: T, c: usize, i: usize, causal: bool, out: &mut Vec<T>) {
    let end = if causal { i + 1 } else { k.rows() };
    out.clear();
    out.extend((0..end).map(|j| k[(j, c)] - T::of_usize(distance(i, j)) * w));
    let m = out.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for x in out.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in out.iter_mut() {
        *x /= z;
    }
}

/// Mixing weights of row `i`: an `end x d` matrix whose columns each sum to 1.
pub fn rwkv_weights<T: Scalar>(k: &Matrix<T>, params: &RwkvParams<T>, causal: bool, i: usize) -> Result<Matrix<T>, AttentionError> {
    check_rwkv(k, k, params)?;
    let end = if causal { i + 1 } else { k.rows() };
    let mut out = Matrix::zeros(end, k.cols());
    let mut buf = Vec::new();
    for c in 0..k.cols() {
        rwkv_row_weights(k, params.w[c], c, i, causal, &mut buf);
        for (j, &p) in buf.iter().enumerate() {
            out[(j, c)] = p;
        }
    }
    Ok(out)
}

/// Direct O(N^2) summation of `sum_j e^{-(i-j)w + k_j} v_j / sum_j e^{-(i-j)w + k_j}`.
pub fn rwkv_attention_direct<T: Scalar>(
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &RwkvParams<T>,
    causal: bool,
) -> Result<Matrix<T>, AttentionError> {
    check_rwkv(k, v, params)?;
    let (n, d) = k.shape();
    let mut out = Matrix::zeros(n, d);
    let mut buf = Vec::new();
    for i in 0..n {
        for c in 0..d {
            rwkv_row_weights(k, params.w[c], c, i, causal, &mut buf);
            out[(i, c)] = buf.iter().enumerate().map(|(j, &p)| p * v[(j, c)]).sum();
        }
    }
    Ok(out)
}

/// Max-shifted running numerator and denominator for one direction of the scan.
#[derive(Clone, Debug, PartialEq)]
pub struct RwkvState<T> {
    pub num: Vec<T>,
    pub den: Vec<T>,
    /// Log-scale shared by `num` and `den`, per channel.
    pub max: Vec<T>,
}

impl<T: Scalar> RwkvState<T> {
    pub fn new(d: usize) -> Self {
        Self { num: vec![T::zero(); d], den: vec![T::zero(); d], max: vec![T::neg_infinity(); d] }
    }

    /// Decays the stored terms by one step and adds `(k, v)`.
    pub fn push(&mut self, k: &[T], v: &[T], w: &[T]) {
        for c in 0..self.num.len() {
            let decayed = self.max[c] - w[c];
            let m = decayed.max(k[c]);
            let a = (decayed - m).exp();
            let b = (k[c] - m).exp();
            self.num[c] = self.num[c] * a + v[c] * b;
            self.den[c] = self.den[c] * a + b;
            self.max[c] = m;
        }
    }

    /// Decays the stored terms by one step without adding anything.
    pub fn decay(&mut self, w: &[T]) {
        for c in 0..self.max.len() {
            self.max[c] -= w[c];
        }
    }

    pub fn read(&self, out: &mut [T]) {
        for c in 0..out.len() {
            out[c] = self.num[c] / self.den[c];
        }
    }

    /// Ratio of the summed contents of two states.
    fn read_combined(&self, other: &Self, out: &mut [T]) {
        for c in 0..out.len() {
            if other.max[c] == T::neg_infinity() {
                out[c] = self.num[c] / self.den[c];
                continue;
            }
            let m = self.max[c].max(other.max[c]);
            let a = (self.max[c] - m).exp();
            let b = (other.max[c] - m).exp();
            out[c] = (self.num[c] * a + other.num[c] * b) / (self.den[c] * a + other.den[c] * b);
        }
    }
}

/// Linear-time evaluation by a stabilized recurrence. Non-causal mode adds a
/// reverse scan over the strictly later positions.
pub fn rwkv_attention<T: Scalar>(k: &Matrix<T>, v: &Matrix<T>, params: &RwkvParams<T>, causal: bool) -> Result<Matrix<T>, AttentionError> {
    check_rwkv(k, v, params)?;
    let (n, d) = k.shape();
    let mut out = Matrix::zeros(n, d);
    let mut fwd = RwkvState::new(d);
    for i in 0..n {
        fwd.push(k.row(i), v.row(i), &params.w);
        fwd.read(out.row_mut(i));
    }
    if !causal {
        let mut fwd = RwkvState::new(d);
        let mut later: Vec<RwkvState<T>> = Vec::with_capacity(n);
        let mut bwd = RwkvState::new(d);
        for i in (0..n).rev() {
            // state over j > i, already decayed to distance j - i
            let mut s = bwd.clone();
            s.decay(&params.w);
            later.push(s);
            bwd.push(k.row(i), v.row(i), &params.w);
        }
        later.reverse();
        for i in 0..n {
            fwd.push(k.row(i), v.row(i), &params.w);
            fwd.read_combined(&later[i], out.row_mut(i));
        }
    }
    if !out.is_finite() {
        return Err(AttentionError::NumericDomain("rwkv output"));
    }
    Ok(out)
}

/// Gradients of [`rwkv_attention`]: `(dK, dV, dw)`.
pub fn rwkv_backward<T: Scalar>(
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &RwkvParams<T>,
    causal: bool,
    grad: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Vec<T>), AttentionError> {
    check_rwkv(k, v, params)?;
    let (n, d) = k.shape();
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dw = vec![T::zero(); d];
    let mut buf = Vec::new();
    for i in 0..n {
        for c in 0..d {
            rwkv_row_weights(k, params.w[c], c, i, causal, &mut buf);
            let g = grad[(i, c)];
            let o: T = buf.iter().enumerate().map(|(j, &p)| p * v[(j, c)]).sum();
            for (j, &p) in buf.iter().enumerate() {
                dv[(j, c)] += p * g;
                let s = p * (v[(j, c)] - o) * g;
                dk[(j, c)] += s;
                dw[c] -= s * T::of_usize(distance(i, j));
            }
        }
    }
    Ok((dk, dv, dw))
}

/// Decay and rotation of one retention head.
#[derive(Clone, Debug, PartialEq)]
pub struct RetNetParams<T> {
    pub gamma: T,
    /// One angle per channel pair (`d / 2` entries).
    pub theta: Vec<T>,
}

impl<T: Scalar> RetNetParams<T> {
    pub fn new(gamma: T, theta: Vec<T>) -> Result<Self, AttentionError> {
        if !(gamma > T::zero() && gamma < T::one()) {
            return Err(AttentionError::InvalidDecay(gamma.as_f64()));
        }
        Ok(Self { gamma, theta })
    }

    /// `gamma = 1 - 2^(-5-head)`, `theta_c = 10000^(-2c/d)`.
    pub fn standard(head: usize, head_dim: usize) -> Self {
        Self { gamma: T::of(1.0 - 2f64.powi(-5 - head as i32)), theta: standard_theta(head_dim) }
    }
}

pub fn standard_theta<T: Scalar>(head_dim: usize) -> Vec<T> {
    (0..head_dim / 2).map(|c| T::of(10000f64.powf(-2.0 * c as f64 / head_dim as f64))).collect()
}

/// Rotates channel pairs of row `t` by `(offset + t) * theta` (or its
/// negative when `inverse`).
pub fn rotate<T: Scalar>(x: &Matrix<T>, theta: &[T], offset: usize, inverse: bool) -> Matrix<T> {
    let mut out = x.clone();
    for t in 0..x.rows() {
        rotate_row(out.row_mut(t), theta, offset + t, inverse);
    }
    out
}

pub fn rotate_row<T: Scalar>(row: &mut [T], theta: &[T], pos: usize, inverse: bool) {
    let p = T::of_usize(pos);
    for (c, &th) in theta.iter().enumerate() {
        let (a, b) = (2 * c, 2 * c + 1);
        if b >= row.len() {
            break;
        }
        let ang = if inverse { -(p * th) } else { p * th };
        let (s, co) = ang.sin_cos();
        let (x, y) = (row[a], row[b]);
        row[a] = x * co - y * s;
        row[b] = x * s + y * co;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetentionMode {
    Parallel,
    Recurrent,
}

fn check_retention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<(), AttentionError> {
    check_same_rows(&[(q, "q"), (k, "k"), (v, "v")])?;
    if q.cols() != k.cols() || !q.cols().is_multiple_of(2) {
        return Err(AttentionError::ShapeError(format!("retention q/k widths {} and {}", q.cols(), k.cols())));
    }
    Ok(())
}

/// `D_ij = gamma^(i-j)` for `i >= j`, else 0.
pub fn decay_mask<T: Scalar>(n: usize, gamma: T) -> Matrix<T> {
    Matrix::from_fn(n, n, |i, j| if i >= j { gamma.powi((i - j) as i32) } else { T::zero() })
}

/// Retention `(Q~ K~^T . D) V` with rotated `Q~`, `K~`.
pub fn retnet_retention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &RetNetParams<T>,
    mode: RetentionMode,
) -> Result<Matrix<T>, AttentionError> {
    check_retention(q, k, v)?;
    RetNetParams::new(params.gamma, Vec::new())?;
    match mode {
        RetentionMode::Parallel => {
            let (qr, kr) = (rotate(q, &params.theta, 0, false), rotate(k, &params.theta, 0, false));
            let a = qr.matmul_op(Op::N, &kr, Op::T).hadamard(&decay_mask(q.rows(), params.gamma));
            Ok(a.matmul(v))
        }
        RetentionMode::Recurrent => {
            let mut state = RetentionState::new(q.cols(), v.cols());
            let mut out = Matrix::zeros(q.rows(), v.cols());
            for t in 0..q.rows() {
                state.step(q.row(t), k.row(t), v.row(t), params, out.row_mut(t));
            }
            Ok(out)
        }
    }
}

/// The `gamma -> 0` limit, where only the diagonal of `D` survives.
pub fn retnet_diagonal_limit<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, theta: &[T]) -> Result<Matrix<T>, AttentionError> {
    check_retention(q, k, v)?;
    let (qr, kr) = (rotate(q, theta, 0, false), rotate(k, theta, 0, false));
    Ok(Matrix::from_fn(v.rows(), v.cols(), |i, c| crate::tensor::dot(qr.row(i), kr.row(i)) * v[(i, c)]))
}

/// Recurrent retention state `S_t = gamma S_{t-1} + k~_t^T v_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionState<T> {
    pub s: Matrix<T>,
    pub pos: usize,
    qbuf: Vec<T>,
    kbuf: Vec<T>,
}

impl<T: Scalar> RetentionState<T> {
    pub fn new(dk: usize, dv: usize) -> Self {
        Self { s: Matrix::zeros(dk, dv), pos: 0, qbuf: vec![T::zero(); dk], kbuf: vec![T::zero(); dk] }
    }

    pub fn step(&mut self, q: &[T], k: &[T], v: &[T], params: &RetNetParams<T>, out: &mut [T]) {
        self.qbuf.copy_from_slice(q);
        self.kbuf.copy_from_slice(k);
        rotate_row(&mut self.qbuf, &params.theta, self.pos, false);
        rotate_row(&mut self.kbuf, &params.theta, self.pos, false);
        self.s.scale(params.gamma);
        for (a, &kx) in self.kbuf.iter().enumerate() {
            for (s, &vx) in self.s.row_mut(a).iter_mut().zip(v) {
                *s += kx * vx;
            }
        }
        out.iter_mut().for_each(|o| *o = T::zero());
        for (a, &qx) in self.qbuf.iter().enumerate() {
            for (o, &s) in out.iter_mut().zip(self.s.row(a)) {
                *o += qx * s;
            }
        }
        self.pos += 1;
    }
}

/// Gradients of parallel retention: `(dQ, dK, dV)`.
pub fn retnet_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &RetNetParams<T>,
    grad: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), AttentionError> {
    check_retention(q, k, v)?;
    let n = q.rows();
    let (qr, kr) = (rotate(q, &params.theta, 0, false), rotate(k, &params.theta, 0, false));
    let mask = decay_mask(n, params.gamma);
    let a = qr.matmul_op(Op::N, &kr, Op::T).hadamard(&mask);
    let dv = a.matmul_op(Op::T, grad, Op::N);
    let da = grad.matmul_op(Op::N, v, Op::T).hadamard(&mask);
    let dqr = da.matmul(&kr);
    let mut dkr = Matrix::zeros(n, k.cols());
    gemm(T::one(), &da, Op::T, &qr, Op::N, T::zero(), &mut dkr);
    Ok((rotate(&dqr, &params.theta, 0, true), rotate(&dkr, &params.theta, 0, true), dv))
}
