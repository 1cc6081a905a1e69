//! Flow classification by fine-tuning the language model to emit a class
//! code after `[CLS] ‖ flow`.
//!
//! Class indices are written as `width` big-endian base-260 digits drawn from
//! the whole vocabulary. Prediction decodes those digits greedily, restricted
//! to codes of existing classes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{TokenId, CLS, VOCAB_SIZE};
use crate::lm::{argmax, train, BackpropMode, DecodeSession, LmError, Model, TrainConfig, TrainExample, TrainReport};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("class {index} does not fit in {width} label token(s)")]
    LabelOverflow { index: usize, width: usize },
    #[error("max_len {max_len} cannot hold [CLS], one flow token and {width} label token(s)")]
    WindowTooSmall { max_len: usize, width: usize },
    #[error("flow has no tokens")]
    EmptyFlow,
    #[error("no predictions to score")]
    EmptyBatch,
    #[error("{0} set is empty")]
    EmptyClass(&'static str),
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("invalid label code: {0}")]
    InvalidCode(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Target id that the loss skips; outside the vocabulary so that every real
/// id (PAD included) can serve as a label digit.
pub const MASKED_TARGET: TokenId = TokenId::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCode {
    pub ids: Vec<TokenId>,
}

impl LabelCode {
    pub fn width(&self) -> usize {
        self.ids.len()
    }
}

fn capacity(width: usize) -> Option<usize> {
    VOCAB_SIZE.checked_pow(u32::try_from(width).ok()?)
}

pub fn encode_label(index: usize, width: usize) -> Result<LabelCode, ClassifyError> {
    if width == 0 || capacity(width).is_some_and(|c| index >= c) {
        return Err(ClassifyError::LabelOverflow { index, width });
    }
    let mut ids = vec![0; width];
    let mut rest = index;
    for d in ids.iter_mut().rev() {
        *d = (rest % VOCAB_SIZE) as TokenId;
        rest /= VOCAB_SIZE;
    }
    Ok(LabelCode { ids })
}

pub fn decode_label(code: &LabelCode) -> Result<usize, ClassifyError> {
    code.ids.iter().try_fold(0usize, |acc, &d| {
        if usize::from(d) >= VOCAB_SIZE {
            return Err(ClassifyError::InvalidCode(format!("digit {d}")));
        }
        acc.checked_mul(VOCAB_SIZE)
            .and_then(|a| a.checked_add(usize::from(d)))
            .ok_or_else(|| ClassifyError::InvalidCode("value overflows usize".into()))
    })
}

/// Flow tokens that fit in front of a `width`-token label under `max_len`.
pub fn flow_budget(max_len: usize, width: usize) -> Result<usize, ClassifyError> {
    match max_len.checked_sub(1 + width) {
        Some(b) if b >= 1 => Ok(b),
        _ => Err(ClassifyError::WindowTooSmall { max_len, width }),
    }
}

/// `[CLS] ‖ flow[..max_len-1-width] ‖ label` and a mask marking label slots.
pub fn build_finetune_example(flow: &[TokenId], code: &LabelCode, max_len: usize) -> Result<(Vec<TokenId>, Vec<bool>), ClassifyError> {
    let budget = flow_budget(max_len, code.width())?;
    if flow.is_empty() {
        return Err(ClassifyError::EmptyFlow);
    }
    let body = &flow[..flow.len().min(budget)];
    let mut ids = Vec::with_capacity(body.len() + 1 + code.width());
    ids.push(CLS);
    ids.extend_from_slice(body);
    ids.extend_from_slice(&code.ids);
    let mut mask = vec![false; ids.len()];
    mask[ids.len() - code.width()..].iter_mut().for_each(|m| *m = true);
    Ok((ids, mask))
}

/// Next-token example whose loss only counts the masked positions.
pub fn masked_example(ids: &[TokenId], mask: &[bool]) -> TrainExample {
    let n = ids.len() - 1;
    let targets = (1..=n).map(|t| if mask[t] { ids[t] } else { MASKED_TARGET }).collect();
    TrainExample { inputs: ids[..n].to_vec(), targets, ignore: Some(MASKED_TARGET) }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledFlow {
    pub tokens: Vec<TokenId>,
    pub class_index: usize,
}

/// Label geometry shared by fine-tuning and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub width: usize,
    pub num_classes: usize,
    pub max_len: usize,
}

impl LabelSpace {
    pub fn new(width: usize, num_classes: usize, max_len: usize) -> Result<Self, ClassifyError> {
        if num_classes == 0 {
            return Err(ClassifyError::EmptyClass("class"));
        }
        encode_label(num_classes - 1, width)?;
        flow_budget(max_len, width)?;
        Ok(Self { width, num_classes, max_len })
    }

    pub fn examples(&self, flows: &[LabeledFlow]) -> Result<Vec<TrainExample>, ClassifyError> {
        flows
            .iter()
            .map(|f| {
                if f.class_index >= self.num_classes {
                    return Err(ClassifyError::LabelOverflow { index: f.class_index, width: self.width });
                }
                let (ids, mask) = build_finetune_example(&f.tokens, &encode_label(f.class_index, self.width)?, self.max_len)?;
                Ok(masked_example(&ids, &mask))
            })
            .collect()
    }

    /// Digits `d` such that `prefix ‖ d` starts the code of some class.
    fn allowed(&self, prefix: usize, pos: usize) -> usize {
        let below = capacity(self.width - pos - 1).expect("validated width");
        // smallest index with this prefix and digit d is (prefix*260 + d) * below
        let base = prefix * VOCAB_SIZE;
        let limit = self.num_classes.div_ceil(below);
        limit.saturating_sub(base).min(VOCAB_SIZE)
    }
}

/// Fine-tunes every parameter with the loss restricted to label positions.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    flows: &[LabeledFlow],
    space: &LabelSpace,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, ClassifyError> {
    if space.max_len > model.config.max_len {
        return Err(ClassifyError::Lm(LmError::WindowOverflow { len: space.max_len, max_len: model.config.max_len }));
    }
    let examples = space.examples(flows)?;
    Ok(train(model, &examples, cfg, BackpropMode::Reversible, out_dir)?)
}

/// Greedy constrained decode of the class code after `[CLS] ‖ flow`.
pub fn predict<T: Scalar>(model: &Model<T>, flow: &[TokenId], space: &LabelSpace) -> Result<usize, ClassifyError> {
    let budget = flow_budget(space.max_len, space.width)?;
    if flow.is_empty() {
        return Err(ClassifyError::EmptyFlow);
    }
    let mut ctx = Vec::with_capacity(budget + 1);
    ctx.push(CLS);
    ctx.extend_from_slice(&flow[..flow.len().min(budget)]);
    let (mut session, mut logits) = DecodeSession::prime(model, &ctx)?;
    let mut value = 0usize;
    for pos in 0..space.width {
        let n = space.allowed(value, pos);
        let digit = argmax(&logits[..n]);
        value = value * VOCAB_SIZE + digit;
        if pos + 1 < space.width {
            logits = session.step(model, digit as TokenId)?;
        }
    }
    Ok(value)
}

pub fn predict_all<T: Scalar>(model: &Model<T>, flows: &[Vec<TokenId>], space: &LabelSpace) -> Result<Vec<usize>, ClassifyError> {
    flows.par_iter().map(|f| predict(model, f, space)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

/// Macro F1 over the classes that occur among the labels or predictions.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> Result<F1Report, ClassifyError> {
    if predictions.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(ClassifyError::EmptyBatch);
    }
    let mut classes: Vec<usize> = labels.iter().chain(predictions).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScore> = classes
        .iter()
        .map(|&c| {
            let tp = predictions.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
            let predicted = predictions.iter().filter(|&&p| p == c).count();
            let support = labels.iter().filter(|&&l| l == c).count();
            let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
            // F1 = 2tp / (predicted + actual), zero when both are empty
            ClassScore { class: c, precision, recall, f1: ratio(2 * tp, predicted + support), support }
        })
        .collect();
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(F1Report {
        accuracy: hits as f64 / labels.len() as f64,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64,
        per_class,
    })
}

/// Stratified split: from each class, `round(test_fraction * n)` members
/// (at least one when the class has two or more) go to the test side.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let mut k = (test_fraction * members.len() as f64).round() as usize;
        if members.len() >= 2 {
            k = k.clamp(1, members.len() - 1);
        }
        te.extend_from_slice(&members[..k]);
        tr.extend_from_slice(&members[k..]);
    }
    tr.sort_unstable();
    te.sort_unstable();
    (tr, te)
}

/// Fine-tunes a copy of `pretrained` on the training split and scores the
/// held-out split.
pub fn train_and_score<T: Scalar>(
    pretrained: &Model<T>,
    flows: &[LabeledFlow],
    train_idx: &[usize],
    test_idx: &[usize],
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<F1Report, ClassifyError> {
    let mut model = pretrained.clone();
    let train_set: Vec<LabeledFlow> = train_idx.iter().map(|&i| flows[i].clone()).collect();
    finetune(&mut model, &train_set, space, cfg, None)?;
    let test_tokens: Vec<Vec<TokenId>> = test_idx.iter().map(|&i| flows[i].tokens.clone()).collect();
    let labels: Vec<usize> = test_idx.iter().map(|&i| flows[i].class_index).collect();
    macro_f1(&predict_all(&model, &test_tokens, space)?, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminateConfig {
    pub train: TrainConfig,
    pub max_len: usize,
    pub seeds: usize,
    pub test_fraction: f64,
}

impl Default for DiscriminateConfig {
    fn default() -> Self {
        Self { train: TrainConfig { steps: 200, ..TrainConfig::default() }, max_len: 256, seeds: 10, test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    pub pairs: usize,
    pub formatted: String,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4}(±{std:.4})")
}

/// Removes token sequences present on both sides, keeping each shared
/// sequence on one side only (alternately real, generated). Identical inputs
/// under both labels cannot be learned and would leak across the split.
pub fn disjoin_sides(real: &[Vec<TokenId>], generated: &[Vec<TokenId>]) -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    use std::collections::{HashMap, HashSet};
    let real_set: HashSet<&[TokenId]> = real.iter().map(|f| f.as_slice()).collect();
    let gen_set: HashSet<&[TokenId]> = generated.iter().map(|f| f.as_slice()).collect();
    let mut owner: HashMap<&[TokenId], bool> = HashMap::new();
    let mut next_real = true;
    for f in real {
        if gen_set.contains(f.as_slice()) && !owner.contains_key(f.as_slice()) {
            owner.insert(f.as_slice(), next_real);
            next_real = !next_real;
        }
    }
    let keep_real = real.iter().filter(|f| owner.get(f.as_slice()).copied().unwrap_or(true)).cloned().collect();
    let keep_gen = generated.iter().filter(|f| !real_set.contains(f.as_slice()) || !owner[f.as_slice()]).cloned().collect();
    (keep_real, keep_gen)
}

/// Real (class 0) versus generated (class 1). Sequences shared by both sides
/// are disjoined, the larger side is subsampled to the size of the smaller,
/// and for each seed a copy of `pretrained` is fine-tuned on a stratified
/// 80/20 split. Reports held-out macro F1 as mean ± std over seeds.
pub fn discriminate<T: Scalar>(
    pretrained: &Model<T>,
    real: &[Vec<TokenId>],
    generated: &[Vec<TokenId>],
    cfg: &DiscriminateConfig,
) -> Result<DiscriminationReport, ClassifyError> {
    let (real, generated) = disjoin_sides(real, generated);
    if real.is_empty() {
        return Err(ClassifyError::EmptyClass("real"));
    }
    if generated.is_empty() {
        return Err(ClassifyError::EmptyClass("generated"));
    }
    let space = LabelSpace::new(1, 2, cfg.max_len.min(pretrained.config.max_len))?;
    let pairs = real.len().min(generated.len());
    let mut scores = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let seed = cfg.train.seed.wrapping_add(s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flows = Vec::with_capacity(2 * pairs);
        for (side, class) in [(&real, 0), (&generated, 1)] {
            let mut idx: Vec<usize> = (0..side.len()).collect();
            idx.shuffle(&mut rng);
            flows.extend(idx[..pairs].iter().map(|&i| LabeledFlow { tokens: side[i].clone(), class_index: class }));
        }
        let labels: Vec<usize> = flows.iter().map(|f| f.class_index).collect();
        let (tr, te) = stratified_split(&labels, cfg.test_fraction, seed);
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        scores.push(train_and_score(pretrained, &flows, &tr, &te, &space, &tc)?.macro_f1);
    }
    let (mean, std) = mean_std(&scores);
    Ok(DiscriminationReport { formatted: format_mean_std(mean, std), scores, mean, std, pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub max_len: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Held-out macro F1 as a function of the classification window, each point
/// fine-tuned from the same pretrained weights on the same stratified split.
pub fn window_sweep<T: Scalar>(
    pretrained: &Model<T>,
    flows: &[LabeledFlow],
    num_classes: usize,
    lengths: &[usize],
    cfg: &TrainConfig,
    test_fraction: f64,
) -> Result<Vec<SweepPoint>, ClassifyError> {
    let labels: Vec<usize> = flows.iter().map(|f| f.class_index).collect();
    let (tr, te) = stratified_split(&labels, test_fraction, cfg.seed);
    lengths
        .iter()
        .map(|&max_len| {
            let space = LabelSpace::new(1, num_classes, max_len)?;
            let r = train_and_score(pretrained, flows, &tr, &te, &space, cfg)?;
            Ok(SweepPoint { max_len, macro_f1: r.macro_f1, accuracy: r.accuracy })
        })
        .collect()
}
