//! Token-at-a-time evaluation with per-layer recurrent state.
//!
//! Each step costs O(depth * (d^2 + window * d)) for the linear mechanism
//! instead of re-running the whole prefix. The logits match
//! [`Model::forward`] on the same prefix up to rounding.

use std::collections::VecDeque;

use crate::alt::{RetNetParams, RetentionState, RwkvState};
use crate::attention::{EluPlusOne, FeatureMap, LinearAttentionState, LINEAR_ATTENTION_EPS};
use crate::codec::{TokenId, VOCAB_SIZE};
use crate::scalar::{swish, Scalar};
use crate::tensor::{dot, Matrix};

use super::config::Mechanism;
use super::layers::layer_norm_row;
use super::model::Model;
use super::params::LayerParams;
use super::LmError;

#[derive(Clone, Debug)]
enum HeadState<T> {
    Window { window: usize, keys: VecDeque<Vec<T>>, values: VecDeque<Vec<T>> },
    Linear(LinearAttentionState<T>),
    Retention(RetentionState<T>, RetNetParams<T>),
}

#[derive(Clone, Debug)]
struct LayerState<T> {
    attn_prev: Vec<T>,
    ffn_prev: Vec<T>,
    heads: Vec<HeadState<T>>,
    rwkv: Option<RwkvState<T>>,
}

/// Recurrent state of every layer after consuming [`DecodeSession::tokens`].
#[derive(Clone, Debug)]
pub struct DecodeSession<T> {
    layers: Vec<LayerState<T>>,
    tokens: Vec<TokenId>,
}

fn vecmat<T: Scalar>(x: &[T], w: &Matrix<T>) -> Vec<T> {
    Matrix::from_vec(1, x.len(), x.to_vec()).matmul(w).into_vec()
}

fn shifted_row<T: Scalar>(cur: &[T], prev: &[T]) -> Vec<T> {
    let h = cur.len() / 2;
    cur[..h].iter().chain(&prev[h..]).copied().collect()
}

fn softmax_read<T: Scalar>(q: &[T], keys: &VecDeque<Vec<T>>, values: &VecDeque<Vec<T>>, out: &mut [T]) {
    let scale = T::one() / T::of_usize(q.len()).sqrt();
    let scores: Vec<T> = keys.iter().map(|k| dot(q, k) * scale).collect();
    let m = scores.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let w: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: T = w.iter().copied().sum();
    out.iter_mut().for_each(|o| *o = T::zero());
    for (p, v) in w.iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += *p / z * x;
        }
    }
}

impl<T: Scalar> DecodeSession<T> {
    pub fn new(model: &Model<T>) -> Self {
        let cfg = &model.config;
        let d = cfg.model_dim;
        let layers = model
            .params
            .layers
            .iter()
            .map(|_| {
                let heads = match cfg.mechanism {
                    Mechanism::Rwkv => Vec::new(),
                    _ => (0..cfg.num_heads)
                        .map(|h| match cfg.mechanism {
                            Mechanism::Linear if h < cfg.local_heads => {
                                HeadState::Window { window: cfg.local_window, keys: VecDeque::new(), values: VecDeque::new() }
                            }
                            Mechanism::Linear => HeadState::Linear(LinearAttentionState::new(cfg.head_dim, cfg.head_dim)),
                            Mechanism::VaswaniSmall => {
                                HeadState::Window { window: usize::MAX, keys: VecDeque::new(), values: VecDeque::new() }
                            }
                            _ => HeadState::Retention(
                                RetentionState::new(cfg.head_dim, cfg.head_dim),
                                RetNetParams::standard(h, cfg.head_dim),
                            ),
                        })
                        .collect(),
                };
                LayerState {
                    attn_prev: vec![T::zero(); d],
                    ffn_prev: vec![T::zero(); d],
                    heads,
                    rwkv: (cfg.mechanism == Mechanism::Rwkv).then(|| RwkvState::new(cfg.inner_dim())),
                }
            })
            .collect();
        Self { layers, tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Consumes `prefix` and returns the logits after its last token.
    pub fn prime(model: &Model<T>, prefix: &[TokenId]) -> Result<(Self, Vec<T>), LmError> {
        let mut s = Self::new(model);
        let mut logits = Vec::new();
        for &t in prefix {
            logits = s.step(model, t)?;
        }
        Ok((s, logits))
    }

    fn mix(&mut self, model: &Model<T>, l: usize, lp: &LayerParams<T>, x: &[T]) -> Result<Vec<T>, LmError> {
        let cfg = &model.config;
        let st = &mut self.layers[l];
        let d = x.len();
        let mut ln = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        layer_norm_row(x, &lp.attn_norm, &mut xhat, &mut ln);
        let s = shifted_row(&ln, &st.attn_prev);
        st.attn_prev = ln;
        let k = vecmat(&s, &lp.wk);
        let v = vecmat(&s, &lp.wv);
        let mut mixed = vec![T::zero(); cfg.inner_dim()];
        if let Some(rw) = st.rwkv.as_mut() {
            let w: Vec<T> = lp.decay.as_ref().expect("rwkv decay").as_slice().iter().map(|x| x.exp()).collect();
            rw.push(&k, &v, &w);
            rw.read(&mut mixed);
        } else {
            let q = vecmat(&s, lp.wq.as_ref().expect("query projection"));
            let hd = cfg.head_dim;
            for (h, head) in st.heads.iter_mut().enumerate() {
                let r = h * hd..(h + 1) * hd;
                let (qh, kh, vh) = (&q[r.clone()], &k[r.clone()], &v[r.clone()]);
                let out = &mut mixed[r];
                match head {
                    HeadState::Window { window, keys, values } => {
                        keys.push_back(kh.to_vec());
                        values.push_back(vh.to_vec());
                        if keys.len() > *window {
                            keys.pop_front();
                            values.pop_front();
                        }
                        softmax_read(qh, keys, values, out);
                    }
                    HeadState::Linear(state) => {
                        let fk: Vec<T> = kh.iter().map(|&a| EluPlusOne.apply(a)).collect();
                        let fq: Vec<T> = qh.iter().map(|&a| EluPlusOne.apply(a)).collect();
                        state.update(&fk, vh);
                        state.read(&fq, T::of(LINEAR_ATTENTION_EPS), out);
                    }
                    HeadState::Retention(state, params) => {
                        let scale = T::one() / T::of_usize(hd).sqrt();
                        let ks: Vec<T> = kh.iter().map(|&a| a * scale).collect();
                        state.step(qh, &ks, vh, params, out);
                    }
                }
            }
        }
        Ok(vecmat(&mixed, &lp.wo))
    }

    fn ffn(&mut self, l: usize, lp: &LayerParams<T>, x: &[T]) -> Vec<T> {
        let st = &mut self.layers[l];
        let d = x.len();
        let mut ln = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        layer_norm_row(x, &lp.ffn_norm, &mut xhat, &mut ln);
        let s = shifted_row(&ln, &st.ffn_prev);
        st.ffn_prev = ln;
        let gate = vecmat(&s, &lp.glu.w_gate);
        let val = vecmat(&s, &lp.glu.w_value);
        let hidden: Vec<T> = gate.iter().zip(&val).map(|(&g, &v)| swish(g) * v).collect();
        vecmat(&hidden, &lp.glu.w_out)
    }

    /// Appends one token and returns the 260 logits predicting the next.
    pub fn step(&mut self, model: &Model<T>, token: TokenId) -> Result<Vec<T>, LmError> {
        let cfg = &model.config;
        let t = self.tokens.len();
        if t >= cfg.max_len {
            return Err(LmError::WindowOverflow { len: t + 1, max_len: cfg.max_len });
        }
        if usize::from(token) >= VOCAB_SIZE {
            return Err(LmError::InvalidToken(token));
        }
        let p = &model.params;
        let emb: Vec<T> = p.embed.row(usize::from(token)).iter().zip(p.pos.row(t)).map(|(&a, &b)| a + b).collect();
        let h = match &p.proj_in {
            Some(w) => vecmat(&emb, w),
            None => emb,
        };
        let (mut x1, mut x2) = (h.clone(), h);
        for (l, lp) in p.layers.iter().enumerate() {
            let f = self.mix(model, l, lp, &x2)?;
            let y1: Vec<T> = x1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
            let g = self.ffn(l, lp, &y1);
            let y2: Vec<T> = x2.iter().zip(&g).map(|(&a, &b)| a + b).collect();
            x1 = y1;
            x2 = y2;
        }
        let mid: Vec<T> = x1.iter().zip(&x2).map(|(&a, &b)| (a + b) * T::of(0.5)).collect();
        let mut hf = vec![T::zero(); mid.len()];
        let mut xhat = vec![T::zero(); mid.len()];
        layer_norm_row(&mid, &p.final_norm, &mut xhat, &mut hf);
        let mut logits = vecmat(&hf, &p.head_w);
        for (o, &b) in logits.iter_mut().zip(p.head_b.as_slice()) {
            *o += b;
        }
        self.tokens.push(token);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(LmError::NonFinite("logits"));
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    #[test]
    fn incremental_logits_match_full_forward() {
        for mech in [Mechanism::Linear, Mechanism::Rwkv, Mechanism::Retnet, Mechanism::VaswaniSmall] {
            let cfg = ModelConfig { embed_dim: 6, ..ModelConfig::tiny(8, 2, 40) }.with_mechanism(mech);
            let model = Model::<f64>::new(cfg, 2).unwrap();
            let ids: Vec<TokenId> = (0..30).map(|i| ((i * 53 + 7) % 258) as TokenId).collect();
            let full = model.forward(&ids).unwrap();
            let mut s = DecodeSession::new(&model);
            for (t, &id) in ids.iter().enumerate() {
                let row = s.step(&model, id).unwrap();
                for (a, b) in row.iter().zip(full.row(t)) {
                    assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{mech} t={t}: {a} vs {b}");
                }
            }
            assert_eq!(s.tokens(), &ids[..]);
        }
    }

    #[test]
    fn session_refuses_to_overflow() {
        let model = Model::<f64>::new(ModelConfig::tiny(8, 1, 3), 0).unwrap();
        let (mut s, _) = DecodeSession::prime(&model, &[1, 2, 3]).unwrap();
        assert!(matches!(s.step(&model, 4), Err(LmError::WindowOverflow { .. })));
    }
}
