//! Parameter tensors of the language model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::GluParams;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::{Mechanism, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    /// `1 x D`
    pub gain: Matrix<T>,
    /// `1 x D`
    pub bias: Matrix<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(d: usize) -> Self {
        Self { gain: Matrix::filled(1, d, T::one()), bias: Matrix::zeros(1, d) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: LayerNormParams<T>,
    /// `D x I`; absent for the RWKV mixer, which has no queries.
    pub wq: Option<Matrix<T>>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    /// `I x D`
    pub wo: Matrix<T>,
    /// `1 x I` log decay rates (`w = exp(raw)`), RWKV only.
    pub decay: Option<Matrix<T>>,
    pub ffn_norm: LayerNormParams<T>,
    pub glu: GluParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `V x E`
    pub embed: Matrix<T>,
    /// `max_len x E` learned absolute positions.
    pub pos: Matrix<T>,
    /// `E x D`, present when `embed_dim != model_dim`.
    pub proj_in: Option<Matrix<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: LayerNormParams<T>,
    /// `D x V`
    pub head_w: Matrix<T>,
    /// `1 x V`
    pub head_b: Matrix<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-a..a)))
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform `+-1/sqrt(fan_in)` weights, unit norms, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, d, i, f) = (cfg.vocab_size, cfg.embed_dim, cfg.model_dim, cfg.inner_dim(), cfg.ffn_dim);
        let embed = uniform(&mut rng, v, e, e);
        let pos = uniform(&mut rng, cfg.max_len, e, e);
        let proj_in = (e != d).then(|| uniform(&mut rng, e, d, e));
        let layers = (0..cfg.depth)
            .map(|_| {
                let rwkv = cfg.mechanism == Mechanism::Rwkv;
                LayerParams {
                    attn_norm: LayerNormParams::new(d),
                    wq: (!rwkv).then(|| uniform(&mut rng, d, i, d)),
                    wk: uniform(&mut rng, d, i, d),
                    wv: uniform(&mut rng, d, i, d),
                    wo: uniform(&mut rng, i, d, i),
                    // rates spread over [e^-3, e^0]
                    decay: rwkv.then(|| Matrix::from_fn(1, i, |_, c| T::of(-3.0 + 3.0 * c as f64 / i.max(2) as f64))),
                    ffn_norm: LayerNormParams::new(d),
                    glu: GluParams {
                        w_gate: uniform(&mut rng, d, f, d),
                        w_value: uniform(&mut rng, d, f, d),
                        w_out: uniform(&mut rng, f, d, f),
                    },
                }
            })
            .collect();
        Self {
            embed,
            pos,
            proj_in,
            layers,
            final_norm: LayerNormParams::new(d),
            head_w: uniform(&mut rng, d, v, d),
            head_b: Matrix::zeros(1, v),
        }
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        if let Some(p) = &self.proj_in {
            out.push(("proj_in".into(), p));
        }
        for (l, lp) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            out.push((n("attn_norm.gain"), &lp.attn_norm.gain));
            out.push((n("attn_norm.bias"), &lp.attn_norm.bias));
            if let Some(q) = &lp.wq {
                out.push((n("wq"), q));
            }
            out.push((n("wk"), &lp.wk));
            out.push((n("wv"), &lp.wv));
            out.push((n("wo"), &lp.wo));
            if let Some(w) = &lp.decay {
                out.push((n("decay"), w));
            }
            out.push((n("ffn_norm.gain"), &lp.ffn_norm.gain));
            out.push((n("ffn_norm.bias"), &lp.ffn_norm.bias));
            out.push((n("w_gate"), &lp.glu.w_gate));
            out.push((n("w_value"), &lp.glu.w_value));
            out.push((n("w_out"), &lp.glu.w_out));
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        if let Some(p) = &mut self.proj_in {
            out.push(p);
        }
        for lp in &mut self.layers {
            out.push(&mut lp.attn_norm.gain);
            out.push(&mut lp.attn_norm.bias);
            if let Some(q) = &mut lp.wq {
                out.push(q);
            }
            out.push(&mut lp.wk);
            out.push(&mut lp.wv);
            out.push(&mut lp.wo);
            if let Some(w) = &mut lp.decay {
                out.push(w);
            }
            out.push(&mut lp.ffn_norm.gain);
            out.push(&mut lp.ffn_norm.bias);
            out.push(&mut lp.glu.w_gate);
            out.push(&mut lp.glu.w_value);
            out.push(&mut lp.glu.w_out);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let ln = |p: &LayerNormParams<T>| LayerNormParams { gain: p.gain.cast(), bias: p.bias.cast() };
        ModelParams {
            embed: self.embed.cast(),
            pos: self.pos.cast(),
            proj_in: self.proj_in.as_ref().map(|m| m.cast()),
            layers: self
                .layers
                .iter()
                .map(|lp| LayerParams {
                    attn_norm: ln(&lp.attn_norm),
                    wq: lp.wq.as_ref().map(|m| m.cast()),
                    wk: lp.wk.cast(),
                    wv: lp.wv.cast(),
                    wo: lp.wo.cast(),
                    decay: lp.decay.as_ref().map(|m| m.cast()),
                    ffn_norm: ln(&lp.ffn_norm),
                    glu: GluParams { w_gate: lp.glu.w_gate.cast(), w_value: lp.glu.w_value.cast(), w_out: lp.glu.w_out.cast() },
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::desk();
        let a = ModelParams::<f64>::init(&cfg, 3);
        assert_eq!(a, ModelParams::init(&cfg, 3));
        assert_ne!(a, ModelParams::init(&cfg, 4));
        assert_eq!(a.embed.shape(), (260, 64));
        assert_eq!(a.pos.shape(), (512, 64));
        assert!(a.proj_in.is_none());
        assert_eq!(a.layers.len(), 2);
        assert_eq!(a.head_w.shape(), (64, 260));
        let bound = 1.0 / 8.0;
        assert!(a.layers[0].wk.as_slice().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn names_and_mut_views_line_up() {
        let cfg = ModelConfig { embed_dim: 32, ..ModelConfig::desk() }.with_mechanism(Mechanism::Rwkv);
        let mut p = ModelParams::<f32>::init(&cfg, 0);
        let shapes: Vec<_> = p.named().iter().map(|(_, m)| m.shape()).collect();
        let mut_shapes: Vec<_> = p.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        let names: Vec<_> = p.named().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"proj_in".to_string()));
        assert!(names.contains(&"layers.1.decay".to_string()));
        assert!(!names.contains(&"layers.0.wq".to_string()));
    }
}
