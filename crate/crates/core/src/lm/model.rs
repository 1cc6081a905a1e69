//! Forward and backward passes of the full model.
//!
//! ```text
//! ids -> embed + pos -> [proj_in] -> (x1 = x2 = h)
//!     -> depth x { y1 = x1 + F(x2), y2 = x2 + G(y1) }
//!     -> (x1 + x2) / 2 -> norm -> head -> logits
//! F(x) = dropout(mix(token_shift(norm(x))) W_o)
//! G(x) = dropout(glu(token_shift(norm(x))))
//! ```

use crate::alt::{retnet_backward, retnet_retention, rwkv_attention, rwkv_backward, RetNetParams, RetentionMode, RwkvParams};
use crate::attention::{
    glu_backward, glu_forward, linear_attention, linear_attention_backward, local_attention, local_attention_backward, token_shift,
    token_shift_backward, vaswani_attention, vaswani_attention_backward, AttentionInputs, EluPlusOne, GluCache, LINEAR_ATTENTION_EPS,
};
use crate::codec::{TokenId, VOCAB_SIZE};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, Op};

use super::config::{Mechanism, ModelConfig};
use super::layers::{cross_entropy_sum, dropout_mask, layer_norm, layer_norm_backward, NormCache};
use super::params::{LayerParams, ModelParams};
use super::LmError;

/// How layer inputs are obtained during backprop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackpropMode {
    /// Reconstruct each layer's inputs from its outputs.
    Reversible,
    /// Keep every layer's inputs and intermediates from the forward pass.
    Stored,
}

/// One training sequence: predict `targets[t]` from `inputs[..=t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    /// Target id excluded from the loss.
    pub ignore: Option<TokenId>,
}

impl TrainExample {
    /// Next-token example from a window: inputs `w[..L-1]`, targets `w[1..]`.
    pub fn from_window(window: &[TokenId]) -> Self {
        let n = window.len().saturating_sub(1);
        Self { inputs: window[..n].to_vec(), targets: window[1..].to_vec(), ignore: Some(crate::codec::PAD) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dropout seed of one sublayer; the backward recompute reuses it.
#[derive(Clone, Copy, Debug)]
struct Dropout {
    seed: u64,
    p: f64,
}

impl Dropout {
    fn for_sublayer(ctx: Option<Dropout>, layer: usize, which: u64) -> Option<Dropout> {
        ctx.map(|d| Dropout { seed: splitmix(d.seed ^ splitmix(layer as u64 * 2 + which)), p: d.p })
    }

    fn mask<T: Scalar>(self, rows: usize, cols: usize) -> Matrix<T> {
        dropout_mask(self.seed, rows, cols, self.p)
    }
}

#[derive(Clone, Debug)]
struct AttnCache<T> {
    norm: NormCache<T>,
    shifted: Matrix<T>,
    q: Option<Matrix<T>>,
    k: Matrix<T>,
    v: Matrix<T>,
    mixed: Matrix<T>,
    mask: Option<Matrix<T>>,
}

#[derive(Clone, Debug)]
struct FfnCache<T> {
    norm: NormCache<T>,
    shifted: Matrix<T>,
    glu: GluCache<T>,
    mask: Option<Matrix<T>>,
}

struct LayerRecord<T> {
    attn: AttnCache<T>,
    ffn: FfnCache<T>,
}

fn rwkv_rates<T: Scalar>(lp: &LayerParams<T>) -> Result<RwkvParams<T>, LmError> {
    let raw = lp.decay.as_ref().ok_or_else(|| LmError::Shape("rwkv layer without decay".into()))?;
    Ok(RwkvParams::new(raw.as_slice().iter().map(|x| x.exp()).collect())?)
}

fn retention_key_scale<T: Scalar>(hd: usize) -> T {
    T::one() / T::of_usize(hd).sqrt()
}

/// Sequence mixing over the concatenated heads.
fn mix_forward<T: Scalar>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    q: Option<&Matrix<T>>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>, LmError> {
    if cfg.mechanism == Mechanism::Rwkv {
        return Ok(rwkv_attention(k, v, &rwkv_rates(lp)?, true)?);
    }
    let q = q.ok_or_else(|| LmError::Shape("missing query projection".into()))?;
    let hd = cfg.head_dim;
    let mut out = Matrix::zeros(k.rows(), cfg.inner_dim());
    for h in 0..cfg.num_heads {
        let (qh, mut kh, vh) = (q.cols_slice(h * hd, hd), k.cols_slice(h * hd, hd), v.cols_slice(h * hd, hd));
        let o = match cfg.mechanism {
            Mechanism::Linear if h < cfg.local_heads => local_attention(&AttentionInputs::new(&qh, &kh, &vh, true), cfg.local_window)?,
            Mechanism::Linear => linear_attention(&AttentionInputs::new(&qh, &kh, &vh, true), &EluPlusOne, T::of(LINEAR_ATTENTION_EPS))?,
            Mechanism::VaswaniSmall => vaswani_attention(&AttentionInputs::new(&qh, &kh, &vh, true))?,
            Mechanism::Retnet => {
                kh.scale(retention_key_scale(hd));
                retnet_retention(&qh, &kh, &vh, &RetNetParams::standard(h, hd), RetentionMode::Parallel)?
            }
            Mechanism::Rwkv => unreachable!(),
        };
        out.set_cols(h * hd, &o);
    }
    Ok(out)
}

struct MixGrads<T> {
    dq: Option<Matrix<T>>,
    dk: Matrix<T>,
    dv: Matrix<T>,
    ddecay: Option<Matrix<T>>,
}

fn mix_backward<T: Scalar>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    q: Option<&Matrix<T>>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    grad: &Matrix<T>,
) -> Result<MixGrads<T>, LmError> {
    if cfg.mechanism == Mechanism::Rwkv {
        let rates = rwkv_rates(lp)?;
        let (dk, dv, dw) = rwkv_backward(k, v, &rates, true, grad)?;
        let ddecay = Matrix::from_vec(1, dw.len(), dw.iter().zip(&rates.w).map(|(&g, &w)| g * w).collect());
        return Ok(MixGrads { dq: None, dk, dv, ddecay: Some(ddecay) });
    }
    let q = q.ok_or_else(|| LmError::Shape("missing query projection".into()))?;
    let hd = cfg.head_dim;
    let n = k.rows();
    let (mut dq, mut dk, mut dv) =
        (Matrix::zeros(n, cfg.inner_dim()), Matrix::zeros(n, cfg.inner_dim()), Matrix::zeros(n, cfg.inner_dim()));
    for h in 0..cfg.num_heads {
        let (qh, mut kh, vh) = (q.cols_slice(h * hd, hd), k.cols_slice(h * hd, hd), v.cols_slice(h * hd, hd));
        let gh = grad.cols_slice(h * hd, hd);
        let (gq, gk, gv) = match cfg.mechanism {
            Mechanism::Linear if h < cfg.local_heads => {
                let g = local_attention_backward(&AttentionInputs::new(&qh, &kh, &vh, true), cfg.local_window, &gh)?;
                (g.dq, g.dk, g.dv)
            }
            Mechanism::Linear => {
                let g =
                    linear_attention_backward(&AttentionInputs::new(&qh, &kh, &vh, true), &EluPlusOne, T::of(LINEAR_ATTENTION_EPS), &gh)?;
                (g.dq, g.dk, g.dv)
            }
            Mechanism::VaswaniSmall => {
                let g = vaswani_attention_backward(&AttentionInputs::new(&qh, &kh, &vh, true), &gh)?;
                (g.dq, g.dk, g.dv)
            }
            Mechanism::Retnet => {
                let s = retention_key_scale(hd);
                kh.scale(s);
                let (gq, mut gk, gv) = retnet_backward(&qh, &kh, &vh, &RetNetParams::standard(h, hd), &gh)?;
                gk.scale(s);
                (gq, gk, gv)
            }
            Mechanism::Rwkv => unreachable!(),
        };
        dq.set_cols(h * hd, &gq);
        dk.set_cols(h * hd, &gk);
        dv.set_cols(h * hd, &gv);
    }
    Ok(MixGrads { dq: Some(dq), dk, dv, ddecay: None })
}

fn attn_forward<T: Scalar>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    x: &Matrix<T>,
    drop: Option<Dropout>,
) -> Result<(Matrix<T>, AttnCache<T>), LmError> {
    let (h, norm) = layer_norm(x, &lp.attn_norm);
    let shifted = token_shift(&h)?;
    let q = lp.wq.as_ref().map(|w| shifted.matmul(w));
    let k = shifted.matmul(&lp.wk);
    let v = shifted.matmul(&lp.wv);
    let mixed = mix_forward(cfg, lp, q.as_ref(), &k, &v)?;
    let mut out = mixed.matmul(&lp.wo);
    let mask = drop.map(|d| d.mask(out.rows(), out.cols()));
    if let Some(m) = &mask {
        out = out.hadamard(m);
    }
    Ok((out, AttnCache { norm, shifted, q, k, v, mixed, mask }))
}

fn attn_backward<T: Scalar>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    c: &AttnCache<T>,
    dout: &Matrix<T>,
    g: &mut LayerParams<T>,
) -> Result<Matrix<T>, LmError> {
    let d = match &c.mask {
        Some(m) => dout.hadamard(m),
        None => dout.clone(),
    };
    gemm(T::one(), &c.mixed, Op::T, &d, Op::N, T::one(), &mut g.wo);
    let dmixed = d.matmul_op(Op::N, &lp.wo, Op::T);
    let mg = mix_backward(cfg, lp, c.q.as_ref(), &c.k, &c.v, &dmixed)?;
    let mut ds = Matrix::zeros(c.shifted.rows(), c.shifted.cols());
    if let (Some(dq), Some(wq), Some(gq)) = (&mg.dq, &lp.wq, g.wq.as_mut()) {
        gemm(T::one(), &c.shifted, Op::T, dq, Op::N, T::one(), gq);
        gemm(T::one(), dq, Op::N, wq, Op::T, T::one(), &mut ds);
    }
    gemm(T::one(), &c.shifted, Op::T, &mg.dk, Op::N, T::one(), &mut g.wk);
    gemm(T::one(), &mg.dk, Op::N, &lp.wk, Op::T, T::one(), &mut ds);
    gemm(T::one(), &c.shifted, Op::T, &mg.dv, Op::N, T::one(), &mut g.wv);
    gemm(T::one(), &mg.dv, Op::N, &lp.wv, Op::T, T::one(), &mut ds);
    if let (Some(dd), Some(gd)) = (&mg.ddecay, g.decay.as_mut()) {
        gd.axpy(T::one(), dd);
    }
    let dh = token_shift_backward(&ds)?;
    Ok(layer_norm_backward(&c.norm, &lp.attn_norm, &dh, &mut g.attn_norm))
}

fn ffn_forward<T: Scalar>(lp: &LayerParams<T>, x: &Matrix<T>, drop: Option<Dropout>) -> Result<(Matrix<T>, FfnCache<T>), LmError> {
    let (h, norm) = layer_norm(x, &lp.ffn_norm);
    let shifted = token_shift(&h)?;
    let (mut out, glu) = glu_forward(&shifted, &lp.glu)?;
    let mask = drop.map(|d| d.mask(out.rows(), out.cols()));
    if let Some(m) = &mask {
        out = out.hadamard(m);
    }
    Ok((out, FfnCache { norm, shifted, glu, mask }))
}

fn ffn_backward<T: Scalar>(lp: &LayerParams<T>, c: &FfnCache<T>, dout: &Matrix<T>, g: &mut LayerParams<T>) -> Result<Matrix<T>, LmError> {
    let d = match &c.mask {
        Some(m) => dout.hadamard(m),
        None => dout.clone(),
    };
    let (ds, gg) = glu_backward(&c.shifted, &lp.glu, &c.glu, &d);
    g.glu.w_gate.axpy(T::one(), &gg.w_gate);
    g.glu.w_value.axpy(T::one(), &gg.w_value);
    g.glu.w_out.axpy(T::one(), &gg.w_out);
    let dh = token_shift_backward(&ds)?;
    Ok(layer_norm_backward(&c.norm, &lp.ffn_norm, &dh, &mut g.ffn_norm))
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardRecord<T> {
    ids: Vec<TokenId>,
    emb: Matrix<T>,
    /// Per-layer intermediates; empty in reversible mode.
    stored: Vec<LayerRecord<T>>,
    y1: Matrix<T>,
    y2: Matrix<T>,
    final_norm: NormCache<T>,
    hf: Matrix<T>,
    pub logits: Matrix<T>,
    dropout: Option<Dropout>,
}

impl<T> ForwardRecord<T> {
    /// Number of layers whose intermediates were kept; zero when reversible.
    pub fn stored_layers(&self) -> usize {
        self.stored.len()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self, LmError> {
        config.validate()?;
        let expect = ModelParams::<T>::init(&config, 0);
        let shapes = |p: &ModelParams<T>| p.named().into_iter().map(|(n, m)| (n, m.shape())).collect::<Vec<_>>();
        if shapes(&expect) != shapes(&params) {
            return Err(LmError::Shape("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), LmError> {
        if ids.is_empty() {
            return Err(LmError::Shape("empty input".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(LmError::WindowOverflow { len: ids.len(), max_len: self.config.max_len });
        }
        if let Some(&bad) = ids.iter().find(|&&t| usize::from(t) >= VOCAB_SIZE) {
            return Err(LmError::InvalidToken(bad));
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId]) -> (Matrix<T>, Matrix<T>) {
        let p = &self.params;
        let e = self.config.embed_dim;
        let mut emb = Matrix::zeros(ids.len(), e);
        for (t, &id) in ids.iter().enumerate() {
            let row = emb.row_mut(t);
            for ((o, &a), &b) in row.iter_mut().zip(p.embed.row(usize::from(id))).zip(p.pos.row(t)) {
                *o = a + b;
            }
        }
        let h = match &p.proj_in {
            Some(w) => emb.matmul(w),
            None => emb.clone(),
        };
        (emb, h)
    }

    fn head(&self, y1: &Matrix<T>, y2: &Matrix<T>) -> (NormCache<T>, Matrix<T>, Matrix<T>) {
        let mut mid = y1.add(y2);
        mid.scale(T::of(0.5));
        let (hf, cache) = layer_norm(&mid, &self.params.final_norm);
        let mut logits = Matrix::zeros(hf.rows(), VOCAB_SIZE);
        for t in 0..logits.rows() {
            logits.row_mut(t).copy_from_slice(self.params.head_b.as_slice());
        }
        gemm(T::one(), &hf, Op::N, &self.params.head_w, Op::N, T::one(), &mut logits);
        (cache, hf, logits)
    }

    /// Logits (`T x 260`) with dropout disabled.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Matrix<T>, LmError> {
        Ok(self.forward_record(ids, BackpropMode::Reversible, None)?.logits)
    }

    fn forward_record(&self, ids: &[TokenId], mode: BackpropMode, dropout: Option<Dropout>) -> Result<ForwardRecord<T>, LmError> {
        self.check_ids(ids)?;
        let (emb, h) = self.embed(ids);
        let (mut x1, mut x2) = (h.clone(), h);
        let mut stored = Vec::new();
        for (l, lp) in self.params.layers.iter().enumerate() {
            let (f, attn) = attn_forward(&self.config, lp, &x2, Dropout::for_sublayer(dropout, l, 0))?;
            let y1 = x1.add(&f);
            let (g, ffn) = ffn_forward(lp, &y1, Dropout::for_sublayer(dropout, l, 1))?;
            let y2 = x2.add(&g);
            if mode == BackpropMode::Stored {
                stored.push(LayerRecord { attn, ffn });
            }
            x1 = y1;
            x2 = y2;
        }
        let (final_norm, hf, logits) = self.head(&x1, &x2);
        if !logits.is_finite() {
            return Err(LmError::NonFinite("logits"));
        }
        Ok(ForwardRecord { ids: ids.to_vec(), emb, stored, y1: x1, y2: x2, final_norm, hf, logits, dropout })
    }

    /// Coupling of layer `l` without dropout: `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`.
    pub fn layer_forward(&self, l: usize, x1: &Matrix<T>, x2: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>), LmError> {
        let lp = self.layer(l)?;
        let y1 = x1.add(&attn_forward(&self.config, lp, x2, None)?.0);
        let y2 = x2.add(&ffn_forward(lp, &y1, None)?.0);
        Ok((y1, y2))
    }

    /// Recovers the inputs of [`Model::layer_forward`] from its outputs.
    pub fn layer_inverse(&self, l: usize, y1: &Matrix<T>, y2: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>), LmError> {
        let lp = self.layer(l)?;
        let x2 = y2.sub(&ffn_forward(lp, y1, None)?.0);
        let x1 = y1.sub(&attn_forward(&self.config, lp, &x2, None)?.0);
        Ok((x1, x2))
    }

    fn layer(&self, l: usize) -> Result<&LayerParams<T>, LmError> {
        self.params.layers.get(l).ok_or_else(|| LmError::InvalidConfig(format!("layer {l} of {}", self.params.layers.len())))
    }

    /// Accumulates parameter gradients of `sum_t <dlogits_t, logits_t>` into `grads`.
    fn backward(&self, rec: ForwardRecord<T>, dlogits: &Matrix<T>, grads: &mut ModelParams<T>) -> Result<(), LmError> {
        let p = &self.params;
        gemm(T::one(), &rec.hf, Op::T, dlogits, Op::N, T::one(), &mut grads.head_w);
        for t in 0..dlogits.rows() {
            for (g, &d) in grads.head_b.as_mut_slice().iter_mut().zip(dlogits.row(t)) {
                *g += d;
            }
        }
        let dhf = dlogits.matmul_op(Op::N, &p.head_w, Op::T);
        let mut dmid = layer_norm_backward(&rec.final_norm, &p.final_norm, &dhf, &mut grads.final_norm);
        dmid.scale(T::of(0.5));
        let (mut dy1, mut dy2) = (dmid.clone(), dmid);
        let (mut y1, mut y2) = (rec.y1, rec.y2);
        let mut stored = rec.stored;
        for l in (0..p.layers.len()).rev() {
            let lp = &p.layers[l];
            let gl = &mut grads.layers[l];
            let (attn, ffn, x1, x2) = match stored.pop() {
                Some(r) => (r.attn, r.ffn, None, None),
                None => {
                    // reconstruct x2 = y2 - G(y1), then x1 = y1 - F(x2)
                    let (g, ffn) = ffn_forward(lp, &y1, Dropout::for_sublayer(rec.dropout, l, 1))?;
                    let x2 = y2.sub(&g);
                    let (f, attn) = attn_forward(&self.config, lp, &x2, Dropout::for_sublayer(rec.dropout, l, 0))?;
                    let x1 = y1.sub(&f);
                    (attn, ffn, Some(x1), Some(x2))
                }
            };
            let dz1 = dy1.add(&ffn_backward(lp, &ffn, &dy2, gl)?);
            let dx2 = dy2.add(&attn_backward(&self.config, lp, &attn, &dz1, gl)?);
            dy1 = dz1;
            dy2 = dx2;
            if let (Some(a), Some(b)) = (x1, x2) {
                y1 = a;
                y2 = b;
            }
        }
        let dh = dy1.add(&dy2);
        let de = match &p.proj_in {
            Some(w) => {
                gemm(T::one(), &rec.emb, Op::T, &dh, Op::N, T::one(), grads.proj_in.as_mut().expect("matching shapes"));
                dh.matmul_op(Op::N, w, Op::T)
            }
            None => dh,
        };
        for (t, &id) in rec.ids.iter().enumerate() {
            for (g, &d) in grads.embed.row_mut(usize::from(id)).iter_mut().zip(de.row(t)) {
                *g += d;
            }
            for (g, &d) in grads.pos.row_mut(t).iter_mut().zip(de.row(t)) {
                *g += d;
            }
        }
        Ok(())
    }

    /// Mean masked cross-entropy over the batch and its parameter gradient.
    /// `dropout_seed` enables dropout at the configured rate.
    pub fn loss_and_grad(
        &self,
        batch: &[TrainExample],
        mode: BackpropMode,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, ModelParams<T>), LmError> {
        let dropout = match dropout_seed {
            Some(s) if self.config.dropout > 0.0 => Some(Dropout { seed: s, p: self.config.dropout }),
            _ => None,
        };
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        let mut count = 0;
        let mut records = Vec::with_capacity(batch.len());
        for (b, ex) in batch.iter().enumerate() {
            if ex.inputs.len() != ex.targets.len() {
                return Err(LmError::Shape("inputs and targets differ in length".into()));
            }
            let d = dropout.map(|d| Dropout { seed: splitmix(d.seed ^ b as u64), p: d.p });
            let rec = self.forward_record(&ex.inputs, mode, d)?;
            let (s, c, g) = cross_entropy_sum(&rec.logits, &ex.targets, ex.ignore, true)?;
            total += s;
            count += c;
            records.push((rec, g.expect("requested")));
        }
        if count == 0 {
            return Err(LmError::EmptyBatch);
        }
        let scale = T::of(1.0 / count as f64);
        for (rec, mut g) in records {
            g.scale(scale);
            self.backward(rec, &g, &mut grads)?;
        }
        Ok((total / count as f64, grads))
    }

    /// Mean loss without gradients (dropout off).
    pub fn loss(&self, batch: &[TrainExample]) -> Result<f64, LmError> {
        let mut total = 0.0;
        let mut count = 0;
        for ex in batch {
            let logits = self.forward(&ex.inputs)?;
            let (s, c, _) = cross_entropy_sum(&logits, &ex.targets, ex.ignore, false)?;
            total += s;
            count += c;
        }
        if count == 0 {
            return Err(LmError::EmptyBatch);
        }
        Ok(total / count as f64)
    }

    /// Fraction of unmasked targets that are the argmax prediction.
    pub fn accuracy(&self, examples: &[TrainExample]) -> Result<(usize, usize), LmError> {
        let mut hit = 0;
        let mut total = 0;
        for ex in examples {
            let logits = self.forward(&ex.inputs)?;
            for (t, &y) in ex.targets.iter().enumerate() {
                if Some(y) == ex.ignore {
                    continue;
                }
                total += 1;
                if argmax(logits.row(t)) == usize::from(y) {
                    hit += 1;
                }
            }
        }
        Ok((hit, total))
    }

    /// Record of a forward pass, for checking what training keeps in memory.
    pub fn trace(&self, ids: &[TokenId], mode: BackpropMode) -> Result<ForwardRecord<T>, LmError> {
        self.forward_record(ids, mode, None)
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(mech: Mechanism) -> Model<f64> {
        let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::tiny(8, 2, 32) }.with_mechanism(mech);
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn single_token_gives_finite_logits() {
        for m in [Mechanism::Linear, Mechanism::Rwkv, Mechanism::Retnet, Mechanism::VaswaniSmall] {
            let logits = toy(m).forward(&[256]).unwrap();
            assert_eq!(logits.shape(), (1, 260));
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn window_overflow_and_bad_ids() {
        let m = toy(Mechanism::Linear);
        assert!(matches!(m.forward(&[1; 33]), Err(LmError::WindowOverflow { len: 33, max_len: 32 })));
        assert!(matches!(m.forward(&[1, 300]), Err(LmError::InvalidToken(300))));
    }

    #[test]
    fn forward_is_deterministic_and_causal() {
        for mech in [Mechanism::Linear, Mechanism::Rwkv, Mechanism::Retnet, Mechanism::VaswaniSmall] {
            let m = toy(mech);
            let ids: Vec<TokenId> = (0..20).map(|i| (i * 37 % 256) as TokenId).collect();
            let a = m.forward(&ids).unwrap();
            assert_eq!(a, m.forward(&ids).unwrap());
            let mut longer = ids.clone();
            longer.push(257);
            let b = m.forward(&longer).unwrap();
            assert_eq!(a.as_slice(), &b.as_slice()[..a.len()], "{mech}");
        }
    }

    #[test]
    fn reversible_and_stored_gradients_agree() {
        let mut cfg = ModelConfig::tiny(8, 3, 32);
        cfg.dropout = 0.2;
        let m = Model::<f64>::new(cfg, 5).unwrap();
        let ex = TrainExample::from_window(&(0..16).map(|i| (i * 11 % 256) as TokenId).collect::<Vec<_>>());
        let (la, ga) = m.loss_and_grad(std::slice::from_ref(&ex), BackpropMode::Reversible, Some(3)).unwrap();
        let (lb, gb) = m.loss_and_grad(std::slice::from_ref(&ex), BackpropMode::Stored, Some(3)).unwrap();
        assert_eq!(la, lb);
        for (a, b) in ga.tensors().iter().zip(gb.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
        assert_eq!(m.trace(&ex.inputs, BackpropMode::Reversible).unwrap().stored_layers(), 0);
        assert_eq!(m.trace(&ex.inputs, BackpropMode::Stored).unwrap().stored_layers(), 3);
    }
}
