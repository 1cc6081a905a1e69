//! Sliding windows, the Adam optimizer and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::TokenId;
use crate::scalar::Scalar;

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::model::{BackpropMode, Model, TrainExample};
use super::params::ModelParams;
use super::LmError;

/// Windows of at most `max_len` tokens starting at `0, stride, 2*stride, ...`
/// until one reaches the end of its stream. Each flow is its own stream
/// unless `pack_flows` concatenates them.
pub fn make_windows<S: AsRef<[TokenId]>>(flows: &[S], max_len: usize, stride: usize, pack_flows: bool) -> Vec<Vec<TokenId>> {
    assert!(max_len >= 1 && (1..=max_len).contains(&stride), "stride must lie in [1, max_len]");
    let mut out = Vec::new();
    let mut cut = |s: &[TokenId]| {
        let mut start = 0;
        while start < s.len() {
            let end = (start + max_len).min(s.len());
            out.push(s[start..end].to_vec());
            if end == s.len() {
                break;
            }
            start += stride;
        }
    };
    if pack_flows {
        let all: Vec<TokenId> = flows.iter().flat_map(|f| f.as_ref().iter().copied()).collect();
        cut(&all);
    } else {
        for f in flows {
            cut(f.as_ref());
        }
    }
    out
}

/// Next-token examples for a model with the given `max_len`.
pub fn windows_to_examples(windows: &[Vec<TokenId>]) -> Vec<TrainExample> {
    windows.iter().filter(|w| w.len() >= 2).map(|w| TrainExample::from_window(w)).collect()
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: ModelParams<T>,
    v: ModelParams<T>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let gs = grads.tensors();
        for (((p, m), v), g) in params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(gs) {
            let (p, m, v, g) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice(), g.as_slice());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Optimizer updates applied.
    pub steps_run: usize,
    /// Batch loss before each update, `(step, loss)` with steps from 1.
    pub losses: Vec<(usize, f64)>,
    /// `(step, accuracy)` at each evaluation.
    pub accuracy: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub reached_target: bool,
}

impl TrainReport {
    pub fn write_loss_csv(&self, path: &Path) -> Result<(), LmError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,loss")?;
        for (s, l) in &self.losses {
            writeln!(w, "{s},{l}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.tgck";

/// Fraction of correct argmax next-token predictions.
pub fn accuracy<T: Scalar>(model: &Model<T>, examples: &[TrainExample]) -> Result<f64, LmError> {
    let (hit, total) = model.accuracy(examples)?;
    if total == 0 {
        return Err(LmError::EmptyBatch);
    }
    Ok(hit as f64 / total as f64)
}

/// Trains `model` in place with Adam on shuffled mini-batches.
///
/// With `out_dir`, writes `loss.csv`, periodic `ckpt-<step>.tgck` files and a
/// final `model.tgck`. A non-finite loss or gradient restores the parameters
/// that produced the last finite loss and returns `DivergenceDetected`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    mode: BackpropMode,
    out_dir: Option<&Path>,
) -> Result<TrainReport, LmError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(LmError::NoWindows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(&model.params, cfg);
    let mut report = TrainReport::default();
    let mut last_good = model.params.clone();
    let save = |model: &Model<T>, name: String, step: usize, report: &mut TrainReport| -> Result<(), LmError> {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            save_checkpoint(&path, model, step, cfg.seed)?;
            report.checkpoints.push(path);
        }
        Ok(())
    };
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(examples[order.pop().expect("refilled")].clone());
        }
        let result = model.loss_and_grad(&batch, mode, Some(cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9)));
        let diverged = match &result {
            Ok((loss, grads)) => !loss.is_finite() || !grads.is_finite(),
            Err(e) => e.is_numeric(),
        };
        if diverged {
            model.params = last_good;
            let good = report.steps_run.saturating_sub(1);
            let checkpoint = out_dir.map(|d| d.join(FINAL_CHECKPOINT));
            if let Some(path) = &checkpoint {
                save_checkpoint(path, model, good, cfg.seed)?;
                report.write_loss_csv(&path.with_file_name(LOSS_CSV))?;
            }
            return Err(LmError::DivergenceDetected { step, last_good_step: good, checkpoint });
        }
        let (loss, grads) = result?;
        report.losses.push((step, loss));
        last_good = model.params.clone();
        adam.step(&mut model.params, &grads);
        report.steps_run = step;
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            save(model, format!("ckpt-{step}.tgck"), step, &mut report)?;
        }
        if let Some(target) = cfg.target_accuracy {
            if cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.steps) {
                let acc = accuracy(model, examples)?;
                report.accuracy.push((step, acc));
                if acc >= target {
                    report.reached_target = true;
                    break;
                }
            }
        }
    }
    save(model, FINAL_CHECKPOINT.to_string(), report.steps_run, &mut report)?;
    if let Some(dir) = out_dir {
        report.write_loss_csv(&dir.join(LOSS_CSV))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    #[test]
    fn disjoint_windows() {
        let s: Vec<TokenId> = (1..=10).collect();
        let w = make_windows(&[s], 4, 4, false);
        assert_eq!(w, vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10]]);
    }

    #[test]
    fn overlapping_windows_cover_everything() {
        let s: Vec<TokenId> = (1..=10).collect();
        let w = make_windows(&[s], 4, 2, false);
        for tok in 1..=10u16 {
            let n = w.iter().filter(|x| x.contains(&tok)).count();
            assert!(n >= 1);
            if (3..=8).contains(&tok) {
                assert_eq!(n, 2, "token {tok}");
            }
        }
    }

    #[test]
    fn windows_respect_flow_boundaries_unless_packed() {
        let a: Vec<TokenId> = vec![256, 1, 2, 3, 4, 257];
        let b: Vec<TokenId> = vec![256, 5, 6, 7, 8, 257];
        let plain = make_windows(&[a.clone(), b.clone()], 8, 8, false);
        assert_eq!(plain, vec![a.clone(), b.clone()]);
        let packed = make_windows(&[a, b], 8, 8, true);
        assert_eq!(packed[0], vec![256, 1, 2, 3, 4, 257, 256, 5]);
        assert_eq!(packed[1], vec![6, 7, 8, 257]);
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(8, 1, 16), 0).unwrap();
        let before = model.params.clone();
        let ex = windows_to_examples(&[vec![256, 1, 2, 257]]);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let r = train(&mut model, &ex, &cfg, BackpropMode::Reversible, None).unwrap();
        assert_eq!(r.steps_run, 0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn divergence_restores_last_good_parameters() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(8, 1, 16), 0).unwrap();
        let ex = windows_to_examples(&[vec![256, 1, 2, 257]]);
        let cfg = TrainConfig { steps: 50, learning_rate: 1e300, batch_size: 1, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        match train(&mut model, &ex, &cfg, BackpropMode::Reversible, Some(dir.path())) {
            Err(LmError::DivergenceDetected { checkpoint, .. }) => {
                assert!(model.params.is_finite());
                assert!(model.forward(&[256, 1]).unwrap().is_finite());
                assert!(checkpoint.unwrap().exists());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let ex = windows_to_examples(&[vec![256, 1, 2, 3, 257], vec![256, 9, 8, 257]]);
        let cfg = TrainConfig { steps: 6, batch_size: 2, checkpoint_interval: 3, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut a = Model::<f64>::new(ModelConfig::tiny(8, 1, 16), 0).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &ex, &cfg, BackpropMode::Reversible, Some(dir.path())).unwrap();
        let rb = train(&mut b, &ex, &cfg, BackpropMode::Reversible, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.losses, rb.losses);
        assert!(ra.losses.last().unwrap().1 < ra.losses[0].1);
        assert!(dir.path().join("ckpt-3.tgck").exists());
        assert!(dir.path().join("model.tgck").exists());
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("step,loss\n1,"));
        assert_eq!(csv.lines().count(), 7);
    }
}
