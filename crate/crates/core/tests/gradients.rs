//! Central finite differences against every analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traffic_lm::alt::{retnet_backward, retnet_retention, rwkv_attention, rwkv_backward, RetNetParams, RetentionMode, RwkvParams};
use traffic_lm::attention::*;
use traffic_lm::codec::TokenId;
use traffic_lm::lm::{BackpropMode, Mechanism, Model, ModelConfig, TrainExample};
use traffic_lm::tensor::dot;
use traffic_lm::Matrix64;

const H: f64 = 1e-5;
/// Central differences at this step carry ~1e-10 absolute round-off, so
/// gradients below the floor are compared in absolute terms.
const FLOOR: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix64 {
    Matrix64::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Max relative error of `analytic` against central differences of `f` at `x`.
fn check(x: &Matrix64, analytic: &Matrix64, f: impl Fn(&Matrix64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[idx] += H;
        let mut xm = x.clone();
        xm.as_mut_slice()[idx] -= H;
        let n = (f(&xp) - f(&xm)) / (2.0 * H);
        worst = worst.max(rel_err(analytic.as_slice()[idx], n));
    }
    worst
}

fn project(out: &Matrix64, r: &Matrix64) -> f64 {
    dot(out.as_slice(), r.as_slice())
}

type Mech = fn(&Matrix64, &Matrix64, &Matrix64) -> Matrix64;
type MechGrad = fn(&Matrix64, &Matrix64, &Matrix64, &Matrix64) -> AttentionGrads<f64>;

fn check_qkv(seed: u64, n: usize, d: usize, fwd: Mech, bwd: MechGrad) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, k, v) = (rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, n, d));
    let r = rand_matrix(&mut rng, n, d);
    let g = bwd(&q, &k, &v, &r);
    let eq = check(&q, &g.dq, |x| project(&fwd(x, &k, &v), &r));
    let ek = check(&k, &g.dk, |x| project(&fwd(&q, x, &v), &r));
    let ev = check(&v, &g.dv, |x| project(&fwd(&q, &k, x), &r));
    eq.max(ek).max(ev)
}

#[test]
fn softmax_attention_gradients() {
    for causal in [true, false] {
        let fwd: Mech = if causal {
            |q, k, v| vaswani_attention(&AttentionInputs::new(q, k, v, true)).unwrap()
        } else {
            |q, k, v| vaswani_attention(&AttentionInputs::new(q, k, v, false)).unwrap()
        };
        let bwd: MechGrad = if causal {
            |q, k, v, g| vaswani_attention_backward(&AttentionInputs::new(q, k, v, true), g).unwrap()
        } else {
            |q, k, v, g| vaswani_attention_backward(&AttentionInputs::new(q, k, v, false), g).unwrap()
        };
        let e = check_qkv(1, 7, 4, fwd, bwd);
        assert!(e < 1e-4, "causal={causal}: {e}");
    }
}

#[test]
fn local_attention_gradients() {
    let e = check_qkv(
        2,
        9,
        4,
        |q, k, v| local_attention(&AttentionInputs::new(q, k, v, true), 3).unwrap(),
        |q, k, v, g| local_attention_backward(&AttentionInputs::new(q, k, v, true), 3, g).unwrap(),
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn linear_attention_gradients() {
    let e = check_qkv(
        3,
        10,
        4,
        |q, k, v| linear_attention(&AttentionInputs::new(q, k, v, true), &EluPlusOne, 1e-6).unwrap(),
        |q, k, v, g| linear_attention_backward(&AttentionInputs::new(q, k, v, true), &EluPlusOne, 1e-6, g).unwrap(),
    );
    assert!(e < 1e-4, "causal: {e}");
    let e = check_qkv(
        4,
        10,
        4,
        |q, k, v| linear_attention(&AttentionInputs::new(q, k, v, false), &EluPlusOne, 1e-6).unwrap(),
        |q, k, v, g| linear_attention_backward(&AttentionInputs::new(q, k, v, false), &EluPlusOne, 1e-6, g).unwrap(),
    );
    assert!(e < 1e-4, "non-causal: {e}");
}

#[test]
fn retention_gradients() {
    let e = check_qkv(
        5,
        8,
        4,
        |q, k, v| retnet_retention(q, k, v, &RetNetParams::standard(0, 4), RetentionMode::Parallel).unwrap(),
        |q, k, v, g| {
            let (dq, dk, dv) = retnet_backward(q, k, v, &RetNetParams::standard(0, 4), g).unwrap();
            AttentionGrads { dq, dk, dv }
        },
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn rwkv_gradients() {
    for causal in [true, false] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (k, v, r) = (rand_matrix(&mut rng, 8, 3), rand_matrix(&mut rng, 8, 3), rand_matrix(&mut rng, 8, 3));
        let w = Matrix64::from_vec(1, 3, vec![0.1, 0.7, 1.5]);
        let rates = |w: &Matrix64| RwkvParams::new(w.as_slice().to_vec()).unwrap();
        let (dk, dv, dw) = rwkv_backward(&k, &v, &rates(&w), causal, &r).unwrap();
        let f = |k: &Matrix64, v: &Matrix64, w: &Matrix64| project(&rwkv_attention(k, v, &rates(w), causal).unwrap(), &r);
        let e = check(&k, &dk, |x| f(x, &v, &w))
            .max(check(&v, &dv, |x| f(&k, x, &w)))
            .max(check(&w, &Matrix64::from_vec(1, 3, dw), |x| f(&k, &v, x)));
        assert!(e < 1e-4, "causal={causal}: {e}");
    }
}

#[test]
fn glu_and_token_shift_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_matrix(&mut rng, 5, 4);
    let p = GluParams { w_gate: rand_matrix(&mut rng, 4, 6), w_value: rand_matrix(&mut rng, 4, 6), w_out: rand_matrix(&mut rng, 6, 4) };
    let r = rand_matrix(&mut rng, 5, 4);
    let (_, cache) = glu_forward(&x, &p).unwrap();
    let (dx, g) = glu_backward(&x, &p, &cache, &r);
    let f = |x: &Matrix64, p: &GluParams<f64>| project(&glu_ffn(x, p).unwrap(), &r);
    let mut e = check(&x, &dx, |x| f(x, &p));
    e = e.max(check(&p.w_gate, &g.w_gate, |w| f(&x, &GluParams { w_gate: w.clone(), ..p.clone() })));
    e = e.max(check(&p.w_value, &g.w_value, |w| f(&x, &GluParams { w_value: w.clone(), ..p.clone() })));
    e = e.max(check(&p.w_out, &g.w_out, |w| f(&x, &GluParams { w_out: w.clone(), ..p.clone() })));
    assert!(e < 1e-4, "{e}");
    let dshift = token_shift_backward(&r).unwrap();
    assert!(check(&x, &dshift, |x| project(&token_shift(x).unwrap(), &r)) < 1e-8);
}

/// Worst relative error over every parameter of a small model.
pub fn full_model_error(mech: Mechanism, seed: u64) -> f64 {
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::tiny(8, 1, 8) }.with_mechanism(mech);
    let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
    let ids: Vec<TokenId> = vec![256, 3, 0, 17, 200, 257, 5];
    let ex = TrainExample::from_window(&ids);
    let batch = [ex];
    let (_, grads) = model.loss_and_grad(&batch, BackpropMode::Reversible, None).unwrap();
    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|m| m.as_slice().to_vec()).collect();
    let count = analytic.len();
    for ti in 0..count {
        for idx in 0..analytic[ti].len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.tensors_mut()[ti].as_mut_slice()[idx] += delta;
                m.loss(&batch).unwrap()
            };
            let n = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[ti][idx], n));
        }
    }
    worst
}

#[test]
fn full_model_gradients_all_mechanisms() {
    for mech in [Mechanism::Linear, Mechanism::Rwkv, Mechanism::Retnet, Mechanism::VaswaniSmall] {
        let e = full_model_error(mech, 21);
        assert!(e < 1e-4, "{mech}: {e}");
    }
}
