//! Losses, batch sampling and the SGD training loop.
//!
//! A step draws `m` labeled singletons and `n` must-link pairs, shuffles
//! them together and minimizes
//! `L = (1/m) sum CE + (gamma/n) sum (1 - <p_i, p_j>)`.
//! With no constraints the second term vanishes and the run is exactly the
//! supervised one; unsupervised mode keeps only the second term and drops
//! `gamma`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{self, ArchConfig, ClassifierError, ClassifierParams};
use crate::evaluation;
use crate::math;
use crate::par;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("mode mismatch: {0}")]
    ModeMismatch(&'static str),
    #[error("labeled item without a label")]
    MissingLabel,
    #[error("constraint item carries labels")]
    UnexpectedLabel,
    #[error("empty constraint set")]
    EmptyPairSet,
    #[error("no labeled items")]
    EmptyLabels,
    #[error("sample index {index} out of range ({len} samples)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainMode {
    Supervised,
    Semi,
    Unsupervised,
    FineTune,
}

impl TrainMode {
    pub const fn as_str(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Semi => "semi",
            TrainMode::Unsupervised => "unsupervised",
            TrainMode::FineTune => "fine_tune",
        }
    }

    pub const fn uses_labels(self) -> bool {
        !matches!(self, TrainMode::Unsupervised)
    }

    pub const fn uses_constraints(self) -> bool {
        !matches!(self, TrainMode::Supervised)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown training mode {0:?}")]
pub struct ParseModeError(pub String);

impl FromStr for TrainMode {
    type Err = ParseModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "semi" => Ok(TrainMode::Semi),
            "unsupervised" => Ok(TrainMode::Unsupervised),
            "fine_tune" | "fine-tune" => Ok(TrainMode::FineTune),
            _ => Err(ParseModeError(s.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub gamma: f64,
    /// Labeled items per step.
    pub m: usize,
    /// Constraint pairs per step.
    pub n: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_steps: usize,
    pub loss_stop: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            m: 8,
            n: 40,
            learning_rate: 0.01,
            momentum: 0.9,
            max_steps: 2000,
            loss_stop: 1e-4,
            seed: 1,
            mode: TrainMode::Semi,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::InvalidConfig("gamma must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must lie in [0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(TrainError::InvalidConfig("max_steps must be positive"));
        }
        if !(self.loss_stop >= 0.0) {
            return Err(TrainError::InvalidConfig("loss_stop must be non-negative"));
        }
        Ok(())
    }

    /// Constraint pairs per labeled item.
    pub fn ratio(&self) -> Option<f64> {
        (self.m > 0).then(|| self.n as f64 / self.m as f64)
    }

    /// Weight on each constraint penalty before averaging.
    pub fn constraint_weight(&self) -> f64 {
        if self.mode == TrainMode::Unsupervised {
            1.0
        } else {
            self.gamma
        }
    }
}

/// One element of a step: a labeled item (`xi == 0`) or a must-link pair
/// (`xi == 1`). Labeled singletons use `i == j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub xi: u8,
    pub i: usize,
    pub j: usize,
    pub y_i: Option<usize>,
    pub y_j: Option<usize>,
}

impl BatchItem {
    pub const fn labeled(i: usize, y: usize) -> Self {
        Self { xi: 0, i, j: i, y_i: Some(y), y_j: Some(y) }
    }

    pub const fn labeled_pair(i: usize, y_i: usize, j: usize, y_j: usize) -> Self {
        Self { xi: 0, i, j, y_i: Some(y_i), y_j: Some(y_j) }
    }

    pub const fn constraint(i: usize, j: usize) -> Self {
        Self { xi: 1, i, j, y_i: None, y_j: None }
    }

    pub fn is_constraint(&self) -> bool {
        self.xi == 1
    }

    pub fn validate(&self, samples: usize, classes: usize) -> Result<(), TrainError> {
        for index in [self.i, self.j] {
            if index >= samples {
                return Err(TrainError::IndexOutOfRange { index, len: samples });
            }
        }
        match self.xi {
            1 if self.y_i.is_some() || self.y_j.is_some() => Err(TrainError::UnexpectedLabel),
            1 => Ok(()),
            0 => {
                for y in [self.y_i, self.y_j] {
                    match y {
                        None => return Err(TrainError::MissingLabel),
                        Some(label) if label >= classes => return Err(TrainError::LabelOutOfRange { label, classes }),
                        Some(_) => {}
                    }
                }
                Ok(())
            }
            _ => Err(TrainError::InvalidConfig("xi must be 0 or 1")),
        }
    }
}

/// Mean negative log-likelihood of the true classes.
pub fn supervised_loss(probs: &[&[f64]], labels: &[Option<usize>]) -> Result<f64, TrainError> {
    if probs.len() != labels.len() {
        return Err(TrainError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(TrainError::EmptyLabels);
    }
    let mut sum = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        let y = y.ok_or(TrainError::MissingLabel)?;
        let py = *p.get(y).ok_or(TrainError::LabelOutOfRange { label: y, classes: p.len() })?;
        sum -= math::ln(py);
    }
    Ok(sum / probs.len() as f64)
}

/// Probability that two independent draws from `p` and `q` differ.
pub fn constraint_penalty(p: &[f64], q: &[f64]) -> f64 {
    1.0 - p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
}

/// The same quantity written as `sum over l != k of p_l q_k`.
pub fn constraint_penalty_double_sum(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (l, a) in p.iter().enumerate() {
        for (k, b) in q.iter().enumerate() {
            if l != k {
                s += a * b;
            }
        }
    }
    s
}

pub fn constraint_loss(pairs: &[(&[f64], &[f64])], gamma: f64) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairSet);
    }
    let sum: f64 = pairs.iter().map(|(p, q)| constraint_penalty(p, q)).sum();
    Ok(gamma * sum / pairs.len() as f64)
}

/// Per-item loss given the two probability vectors.
pub fn pair_item_loss_from_probs(item: &BatchItem, p_i: &[f64], p_j: &[f64], gamma: f64) -> Result<f64, TrainError> {
    item.validate(usize::MAX, p_i.len().min(p_j.len()))?;
    if item.is_constraint() {
        Ok(gamma * 0.5 * constraint_penalty(p_i, p_j))
    } else {
        let (yi, yj) = (item.y_i.unwrap_or(0), item.y_j.unwrap_or(0));
        Ok(-0.5 * (math::ln(p_i[yi]) + math::ln(p_j[yj])))
    }
}

pub fn pair_item_loss(item: &BatchItem, params: &ClassifierParams, inputs: &[Vec<f64>], gamma: f64) -> Result<f64, TrainError> {
    item.validate(inputs.len(), params.arch.classes)?;
    let p_i = classifier::forward(params, &inputs[item.i])?;
    let p_j = classifier::forward(params, &inputs[item.j])?;
    pair_item_loss_from_probs(item, p_i.as_slice(), p_j.as_slice(), gamma)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_l: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Step objective and its exact gradient.
///
/// `constraint_weight` is gamma, or 1 in unsupervised mode.
pub fn step_objective(
    params: &ClassifierParams,
    inputs: &[Vec<f64>],
    items: &[BatchItem],
    constraint_weight: f64,
) -> Result<(LossParts, Vec<f64>), TrainError> {
    let classes = params.arch.classes;
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    let (mut m, mut n) = (0usize, 0usize);
    for item in items {
        item.validate(inputs.len(), classes)?;
        if item.is_constraint() {
            n += 1;
        } else {
            m += 1;
        }
        for idx in [item.i, item.j] {
            slots.entry(idx).or_insert_with(|| {
                order.push(idx);
                order.len() - 1
            });
        }
    }

    let caches = par::map(&order, |&idx| classifier::forward_cached(params, &inputs[idx]));
    let caches = caches.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut grad_logits = vec![vec![0.0; classes]; order.len()];

    let (mut sum_l, mut sum_c) = (0.0, 0.0);
    for item in items {
        let (si, sj) = (slots[&item.i], slots[&item.j]);
        if item.is_constraint() {
            let (pi, pj) = (caches[si].probs.as_slice(), caches[sj].probs.as_slice());
            sum_c += constraint_penalty(pi, pj);
            let scale = -constraint_weight / n as f64;
            let gi: Vec<f64> = pj.iter().map(|q| scale * q).collect();
            let gj: Vec<f64> = pi.iter().map(|p| scale * p).collect();
            let zi = classifier::logits_grad_from_probs(pi, &gi);
            let zj = classifier::logits_grad_from_probs(pj, &gj);
            add_into(&mut grad_logits[si], &zi);
            add_into(&mut grad_logits[sj], &zj);
        } else {
            let mut item_loss = 0.0;
            for (slot, y) in [(si, item.y_i), (sj, item.y_j)] {
                let y = y.unwrap_or(0);
                let cache = &caches[slot];
                item_loss += classifier::log_sum_exp(&cache.logits) - cache.logits[y];
                let scale = 0.5 / m as f64;
                let g = &mut grad_logits[slot];
                for (k, p) in cache.probs.as_slice().iter().enumerate() {
                    g[k] += scale * (p - if k == y { 1.0 } else { 0.0 });
                }
            }
            sum_l += 0.5 * item_loss;
        }
    }

    let l_l = if m > 0 { sum_l / m as f64 } else { 0.0 };
    let l_c = if n > 0 { constraint_weight * sum_c / n as f64 } else { 0.0 };
    let total = if n > 0 { l_l + l_c } else { l_l };

    let slots_idx: Vec<usize> = (0..order.len()).collect();
    let partials = par::map(&slots_idx, |&s| {
        let mut g = vec![0.0; params.values.len()];
        classifier::backward(params, &caches[s], &grad_logits[s], &mut g).map(|_| g)
    });
    let mut grad = vec![0.0; params.values.len()];
    for g in partials {
        add_into(&mut grad, &g?);
    }
    Ok((LossParts { l_l, l_c, total }, grad))
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Endless stream of shuffled steps. Labeled items and constraint pairs
/// are drawn without replacement from their own seeded streams, so the
/// labeled draw does not depend on the constraint set.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: Vec<(usize, usize)>,
    constraints: Vec<(usize, usize)>,
    m: usize,
    n: usize,
    lab_rng: ChaCha8Rng,
    con_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    lab_order: Vec<usize>,
    lab_pos: usize,
    con_order: Vec<usize>,
    con_pos: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn draw(order: &mut Vec<usize>, pos: &mut usize, rng: &mut ChaCha8Rng) -> usize {
    if *pos >= order.len() {
        order.shuffle(rng);
        *pos = 0;
    }
    *pos += 1;
    order[*pos - 1]
}

/// Checks the mode against the available data and sets up the sampler.
pub fn make_batches(labeled: &[(usize, usize)], constraints: &[(usize, usize)], cfg: &TrainConfig) -> Result<BatchSampler, TrainError> {
    cfg.validate()?;
    let mode = cfg.mode;
    if mode.uses_labels() {
        if labeled.is_empty() {
            return Err(TrainError::ModeMismatch(match mode {
                TrainMode::Supervised => "supervised mode needs labeled samples",
                TrainMode::FineTune => "fine_tune mode needs anchor labels",
                _ => "no labeled samples; constraint-only training requires unsupervised mode",
            }));
        }
        if cfg.m == 0 {
            return Err(TrainError::InvalidConfig("m must be positive when labels are used"));
        }
    }
    if mode == TrainMode::Unsupervised {
        if constraints.is_empty() {
            return Err(TrainError::ModeMismatch("unsupervised mode needs constraints"));
        }
        if cfg.n == 0 {
            return Err(TrainError::InvalidConfig("n must be positive in unsupervised mode"));
        }
    }
    let labeled = if mode.uses_labels() { labeled.to_vec() } else { Vec::new() };
    let constraints = if mode.uses_constraints() { constraints.to_vec() } else { Vec::new() };
    let m = if labeled.is_empty() { 0 } else { cfg.m };
    let n = if constraints.is_empty() { 0 } else { cfg.n };
    Ok(BatchSampler {
        lab_order: (0..labeled.len()).collect(),
        lab_pos: usize::MAX,
        con_order: (0..constraints.len()).collect(),
        con_pos: usize::MAX,
        labeled,
        constraints,
        m,
        n,
        lab_rng: stream(cfg.seed, 1),
        con_rng: stream(cfg.seed, 2),
        mix_rng: stream(cfg.seed, 3),
    })
}

impl BatchSampler {
    pub fn next_batch(&mut self) -> Vec<BatchItem> {
        let mut items = Vec::with_capacity(self.m + self.n);
        for _ in 0..self.m {
            let k = draw(&mut self.lab_order, &mut self.lab_pos, &mut self.lab_rng);
            let (i, y) = self.labeled[k];
            items.push(BatchItem::labeled(i, y));
        }
        for _ in 0..self.n {
            let k = draw(&mut self.con_order, &mut self.con_pos, &mut self.con_rng);
            let (i, j) = self.constraints[k];
            items.push(BatchItem::constraint(i, j));
        }
        items.shuffle(&mut self.mix_rng);
        items
    }

    /// Steps needed to pass once over the larger of the two sets.
    pub fn epoch_steps(&self) -> usize {
        let lab = if self.m > 0 { self.labeled.len().div_ceil(self.m) } else { 0 };
        let con = if self.n > 0 { self.constraints.len().div_ceil(self.n) } else { 0 };
        lab.max(con).max(1)
    }

    pub fn items_per_step(&self) -> (usize, usize) {
        (self.m, self.n)
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Vec<BatchItem>> {
        Some(self.next_batch())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub step: usize,
    pub l_l: f64,
    pub l_c: f64,
    pub total: f64,
    pub mode: TrainMode,
}

/// Samples as network inputs plus the two supervision sets, both given as
/// indices into `inputs`.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub inputs: &'a [Vec<f64>],
    /// `(input index, class index)`.
    pub labeled: &'a [(usize, usize)],
    /// Must-link pairs of input indices.
    pub constraints: &'a [(usize, usize)],
}

#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub inputs: &'a [Vec<f64>],
    pub truths: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ClassifierParams,
    pub validation_macro_f: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub history: Vec<LossReport>,
    pub checkpoints: Vec<Checkpoint>,
    /// Index of the checkpoint with the best validation macro F.
    pub best: Option<usize>,
    /// Stopped because the epoch-mean loss fell below `loss_stop`.
    pub converged: bool,
}

impl TrainOutcome {
    /// Best checkpoint on validation when available, else the final params.
    pub fn selected(&self) -> &ClassifierParams {
        match self.best {
            Some(b) => &self.checkpoints[b].params,
            None => &self.params,
        }
    }
}

/// Keeps at most `per_class` labeled items of each class, chosen by a
/// seeded shuffle. Output is sorted by input index.
pub fn subsample_per_class(labeled: &[(usize, usize)], per_class: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut items = labeled.to_vec();
    items.sort_unstable();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out: Vec<(usize, usize)> = items
        .into_iter()
        .filter(|&(_, y)| {
            let n = taken.entry(y).or_default();
            *n += 1;
            *n <= per_class
        })
        .collect();
    out.sort_unstable();
    out
}

/// Argmax class of every input.
pub fn predict(params: &ClassifierParams, inputs: &[Vec<f64>]) -> Result<Vec<usize>, TrainError> {
    par::map(inputs, |x| classifier::forward(params, x).map(|p| p.argmax()))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(TrainError::from)
}

fn validation_score(params: &ClassifierParams, v: &Validation<'_>) -> Result<f64, TrainError> {
    let preds = predict(params, v.inputs)?;
    let report = evaluation::evaluate(&preds, v.truths, params.arch.classes).map_err(|_| TrainError::LengthMismatch(preds.len(), v.truths.len()))?;
    Ok(report.macro_f)
}

pub fn train(
    data: TrainData<'_>,
    cfg: &TrainConfig,
    arch: &ArchConfig,
    initial: Option<&ClassifierParams>,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let mut sampler = make_batches(data.labeled, data.constraints, cfg)?;
    if matches!(cfg.mode, TrainMode::Unsupervised | TrainMode::FineTune) && initial.is_none() {
        return Err(TrainError::ModeMismatch("this mode starts from pretrained params"));
    }
    let mut params = match initial {
        Some(p) => {
            if p.arch != *arch {
                return Err(TrainError::InvalidConfig("initial params do not match the architecture"));
            }
            p.clone()
        }
        None => ClassifierParams::init(cfg.seed, arch)?,
    };
    for &(i, y) in data.labeled {
        BatchItem::labeled(i, y).validate(data.inputs.len(), arch.classes)?;
    }
    for &(i, j) in data.constraints {
        BatchItem::constraint(i, j).validate(data.inputs.len(), arch.classes)?;
    }
    if let Some(v) = &validation {
        if v.inputs.len() != v.truths.len() {
            return Err(TrainError::LengthMismatch(v.inputs.len(), v.truths.len()));
        }
    }

    let weight = cfg.constraint_weight();
    let epoch = sampler.epoch_steps();
    let mut velocity = vec![0.0; params.values.len()];
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut converged = false;
    let mut epoch_sum = 0.0;

    for step in 1..=cfg.max_steps {
        let batch = sampler.next_batch();
        let (parts, grad) = step_objective(&params, data.inputs, &batch, weight)?;
        if !parts.total.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        for ((v, g), w) in velocity.iter_mut().zip(&grad).zip(params.values.iter_mut()) {
            *v = cfg.momentum * *v + g;
            *w -= cfg.learning_rate * *v;
        }
        history.push(LossReport { step, l_l: parts.l_l, l_c: parts.l_c, total: parts.total, mode: cfg.mode });

        epoch_sum += parts.total;
        if step % epoch == 0 {
            converged = epoch_sum / (epoch as f64) < cfg.loss_stop;
            epoch_sum = 0.0;
        }
        let last = converged || step == cfg.max_steps;
        if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            let score = validation.as_ref().map(|v| validation_score(&params, v)).transpose()?;
            checkpoints.push(Checkpoint { step, params: params.clone(), validation_macro_f: score });
        }
        if converged {
            break;
        }
    }

    let mut best: Option<usize> = None;
    for (k, c) in checkpoints.iter().enumerate() {
        if let Some(f) = c.validation_macro_f {
            if best.is_none_or(|b| f > checkpoints[b].validation_macro_f.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(k);
            }
        }
    }
    Ok(TrainOutcome { params, history, checkpoints, best, converged })
}
