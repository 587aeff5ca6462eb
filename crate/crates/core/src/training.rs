//! Optimization loop with pluggable objectives.
//!
//! Objectives turn a batch of logits into an [`UpdateDirective`]: a loss
//! value plus `d loss / d logits`, already signed (an ascent directive
//! carries the negated cross-entropy gradient). The trainer backpropagates
//! the directive and takes one SGD step on the non-frozen parameters.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::data::{augment_batch, AugmentationPolicy, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model_zoo::{Checkpoint, InitSnapshot, Model};
use crate::nn::{sigmoid, Adam, HasParams, Mlp, Sgd};
use crate::tensor::{argmax, log_softmax_rows, softmax_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Ce,
    Relaxloss,
    Advreg,
}

impl ObjectiveKind {
    pub fn id(&self) -> &'static str {
        match self {
            ObjectiveKind::Ce => "ce",
            ObjectiveKind::Relaxloss => "relaxloss",
            ObjectiveKind::Advreg => "advreg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Defense strength: the loss threshold for RelaxLoss, the regularizer
    /// weight for Adv-Reg. Ignored by plain cross-entropy.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Attack-network updates per classifier step (Adv-Reg only).
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_k() -> usize {
    3
}

impl ObjectiveSpec {
    pub fn ce() -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Ce,
            alpha: default_alpha(),
            k: default_k(),
        }
    }

    pub fn relaxloss(alpha: f64) -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Relaxloss,
            alpha,
            k: default_k(),
        }
    }

    pub fn advreg(alpha: f64, k: usize) -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Advreg,
            alpha,
            k,
        }
    }

    /// Default search range for `alpha`, per defense.
    pub fn alpha_range(kind: ObjectiveKind) -> Option<(f64, f64)> {
        match kind {
            ObjectiveKind::Ce => None,
            ObjectiveKind::Relaxloss => Some((1.0, 3.0)),
            ObjectiveKind::Advreg => Some((1.0, 5.0)),
        }
    }

    /// [`Self::alpha_range`] for a `classes`-way task. RelaxLoss's alpha is a
    /// target cross-entropy, so its range is rescaled by `ln(classes) /
    /// ln(100)` from the 100-class setting it was chosen for; Adv-Reg's
    /// alpha is a loss weight and is left as is.
    pub fn scaled_alpha_range(kind: ObjectiveKind, classes: usize) -> Option<(f64, f64)> {
        let (lo, hi) = Self::alpha_range(kind)?;
        match kind {
            ObjectiveKind::Relaxloss => {
                let f = (classes.max(2) as f64).ln() / 100f64.ln();
                Some((lo * f, hi * f))
            }
            _ => Some((lo, hi)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ObjectiveKind::Ce => Ok(()),
            ObjectiveKind::Relaxloss if self.alpha > 0.0 => Ok(()),
            ObjectiveKind::Advreg if self.alpha >= 0.0 && self.k >= 1 => Ok(()),
            _ => Err(Error::InvalidConfig(format!("invalid objective {self:?}"))),
        }
    }

    pub fn id(&self) -> String {
        match self.kind {
            ObjectiveKind::Ce => "ce".into(),
            ObjectiveKind::Relaxloss => format!("relaxloss(alpha={})", self.alpha),
            ObjectiveKind::Advreg => format!("advreg(alpha={},k={})", self.alpha, self.k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
    /// Multiply by `gamma` at each listed epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
            LrSchedule::Step { milestones, gamma } => {
                base * gamma.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub objective: ObjectiveSpec,
    pub augmentation: AugmentationPolicy,
    /// Save a checkpoint every N epochs (needs a checkpoint directory).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    5e-4
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Cosine
}

impl TrainConfig {
    pub fn desk(epochs: usize, seed: u64, objective: ObjectiveSpec, augmentation: AugmentationPolicy) -> Self {
        TrainConfig {
            epochs,
            batch_size: 128,
            lr: 0.05,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            lr_schedule: LrSchedule::Cosine,
            seed,
            objective,
            augmentation,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig("lr must be finite and non-negative".into()));
        }
        self.objective.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    Descent,
    Ascent,
    Flatten,
}

/// Signed gradient on the logits plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirective {
    pub kind: DirectiveKind,
    /// Mean cross-entropy of the batch (the quantity thresholds act on).
    pub loss: f32,
    /// Objective value actually optimized.
    pub objective: f32,
    /// `d objective / d logits`, row-major `n x classes`.
    pub grad_logits: Vec<f32>,
}

/// Mean cross-entropy and its logit gradient.
pub fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>) {
    let n = labels.len();
    let logp = log_softmax_rows(logits, classes);
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[i * classes + y] as f64;
        for c in 0..classes {
            let p = logp[i * classes + c].exp();
            grad[i * classes + c] = (p - if c == y { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

/// Cross-entropy against soft targets and its logit gradient (targets are
/// treated as constants).
pub fn soft_cross_entropy(logits: &[f32], targets: &[f32], classes: usize) -> (f32, Vec<f32>) {
    let n = logits.len() / classes;
    let logp = log_softmax_rows(logits, classes);
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; logits.len()];
    for i in 0..n {
        let row = i * classes..(i + 1) * classes;
        let tsum: f32 = targets[row.clone()].iter().sum();
        for c in row {
            loss -= (targets[c] * logp[c]) as f64;
            grad[c] = (logp[c].exp() * tsum - targets[c]) / n as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

/// Keeps the true-class probability and spreads the remaining mass
/// uniformly over the other classes.
pub fn flattened_target(probs: &[f32], label: usize) -> Vec<f32> {
    let c = probs.len();
    let keep = probs[label].clamp(0.0, 1.0);
    let rest = (1.0 - keep) / (c - 1) as f32;
    (0..c).map(|i| if i == label { keep } else { rest }).collect()
}

/// One RelaxLoss decision. Above `alpha` the batch takes a plain descent
/// step. At or below it, even epochs ascend the cross-entropy and odd
/// epochs descend towards flattened posterior targets.
pub fn relaxloss_step(epoch: usize, logits: &[f32], labels: &[usize], classes: usize, alpha: f64) -> UpdateDirective {
    let (loss, grad) = cross_entropy(logits, labels, classes);
    if loss as f64 > alpha {
        return UpdateDirective {
            kind: DirectiveKind::Descent,
            loss,
            objective: loss,
            grad_logits: grad,
        };
    }
    if epoch.is_multiple_of(2) {
        return UpdateDirective {
            kind: DirectiveKind::Ascent,
            loss,
            objective: -loss,
            grad_logits: grad.into_iter().map(|g| -g).collect(),
        };
    }
    let probs = softmax_rows(logits, classes);
    let mut targets = Vec::with_capacity(probs.len());
    for (row, &y) in probs.chunks(classes).zip(labels) {
        targets.extend(flattened_target(row, y));
    }
    let (soft, grad) = soft_cross_entropy(logits, &targets, classes);
    UpdateDirective {
        kind: DirectiveKind::Flatten,
        loss,
        objective: soft,
        grad_logits: grad,
    }
}

/// Attack-network input: probabilities sorted in descending order followed
/// by the one-hot label. Also returns the sort permutation of every row.
pub fn attack_features(probs: &[f32], labels: &[usize], classes: usize) -> (Vec<f32>, Vec<Vec<usize>>) {
    let mut feats = Vec::with_capacity(labels.len() * 2 * classes);
    let mut perms = Vec::with_capacity(labels.len());
    for (row, &y) in probs.chunks(classes).zip(labels) {
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        feats.extend(order.iter().map(|&i| row[i]));
        feats.extend((0..classes).map(|c| if c == y { 1.0 } else { 0.0 }));
        perms.push(order);
    }
    (feats, perms)
}

/// Membership-inference network used by Adv-Reg: 3 fully connected layers
/// over `(sorted softmax, one-hot label)`.
#[derive(Debug, Clone)]
pub struct AttackNet {
    pub net: Mlp,
    pub classes: usize,
    opt: Adam,
    pub steps: usize,
}

impl AttackNet {
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttackNet {
            net: Mlp::new("attack", 2 * classes, &[64, 32], &mut rng),
            classes,
            opt: Adam::new(1e-3),
            steps: 0,
        }
    }

    /// Membership logits for softmax rows.
    pub fn logits(&mut self, probs: &[f32], labels: &[usize]) -> Vec<f32> {
        let (x, _) = attack_features(probs, labels, self.classes);
        self.net.forward(&x, labels.len(), false)
    }

    /// One ascent step on `mean log h(member) + mean log(1 - h(nonmember))`.
    /// Returns the binary cross-entropy before the step.
    pub fn train_step(&mut self, member_probs: &[f32], member_labels: &[usize], non_probs: &[f32], non_labels: &[usize]) -> f32 {
        let (mut x, _) = attack_features(member_probs, member_labels, self.classes);
        let (xn, _) = attack_features(non_probs, non_labels, self.classes);
        x.extend(xn);
        let (nm, nn) = (member_labels.len(), non_labels.len());
        let n = nm + nn;
        self.net.zero_grad();
        let z = self.net.forward(&x, n, true);
        let mut loss = 0.0f64;
        let mut dz = Vec::with_capacity(n);
        for (i, &zi) in z.iter().enumerate() {
            let (target, weight) = if i < nm { (1.0, 1.0 / nm as f32) } else { (0.0, 1.0 / nn as f32) };
            let p = sigmoid(zi);
            loss -= (weight * if target == 1.0 { p.max(1e-12).ln() } else { (1.0 - p).max(1e-12).ln() }) as f64;
            dz.push(weight * (p - target));
        }
        self.net.backward(&dz, n, false);
        self.opt.step(&mut self.net);
        self.steps += 1;
        loss as f32
    }

    /// Mean `log h` over member rows and its gradient with respect to the
    /// classifier logits that produced `probs`.
    pub fn member_gain_grad(&mut self, logits: &[f32], labels: &[usize]) -> (f32, Vec<f32>) {
        let c = self.classes;
        let n = labels.len();
        let probs = softmax_rows(logits, c);
        let (x, perms) = attack_features(&probs, labels, c);
        let z = self.net.forward(&x, n, true);
        let mut gain = 0.0f64;
        // d mean(log sigmoid(z)) / dz = (1 - sigmoid(z)) / n
        let dz: Vec<f32> = z
            .iter()
            .map(|&zi| {
                gain += sigmoid(zi).max(1e-12).ln() as f64;
                (1.0 - sigmoid(zi)) / n as f32
            })
            .collect();
        let dx = self.net.backward(&dz, n, true).expect("input gradient");
        // the attack net's own gradients from this pass are discarded
        self.net.zero_grad();
        let mut dlogits = vec![0.0f32; logits.len()];
        for i in 0..n {
            let row = &probs[i * c..(i + 1) * c];
            let mut dprob = vec![0.0f32; c];
            for (pos, &orig) in perms[i].iter().enumerate() {
                dprob[orig] = dx[i * 2 * c + pos];
            }
            let dot: f32 = dprob.iter().zip(row).map(|(a, b)| a * b).sum();
            for j in 0..c {
                dlogits[i * c + j] = row[j] * (dprob[j] - dot);
            }
        }
        ((gain / n as f64) as f32, dlogits)
    }
}

/// Result of one Adv-Reg round.
#[derive(Debug, Clone)]
pub struct AdvRegRound {
    pub attack_updates: usize,
    pub attack_loss: f32,
    pub classifier: UpdateDirective,
}

/// One Adv-Reg round on precomputed classifier outputs: `k` attack-network
/// updates on (member, non-member) softmax rows, then the classifier
/// directive for `CE + alpha * mean log h(member)`.
pub fn advreg_round(
    attack: &mut AttackNet,
    member_logits: &[f32],
    member_labels: &[usize],
    nonmember_logits: &[f32],
    nonmember_labels: &[usize],
    alpha: f64,
    k: usize,
) -> Result<AdvRegRound> {
    if member_labels.is_empty() || nonmember_labels.is_empty() {
        return Err(Error::EmptyIndices("advreg batches"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("advreg needs k >= 1".into()));
    }
    let c = attack.classes;
    let member_probs = softmax_rows(member_logits, c);
    let non_probs = softmax_rows(nonmember_logits, c);
    let mut attack_loss = 0.0;
    for _ in 0..k {
        attack_loss = attack.train_step(&member_probs, member_labels, &non_probs, nonmember_labels);
    }
    let (ce, mut grad) = cross_entropy(member_logits, member_labels, c);
    let (gain, gain_grad) = attack.member_gain_grad(member_logits, member_labels);
    let a = alpha as f32;
    grad.iter_mut().zip(&gain_grad).for_each(|(g, d)| *g += a * d);
    Ok(AdvRegRound {
        attack_updates: k,
        attack_loss,
        classifier: UpdateDirective {
            kind: DirectiveKind::Descent,
            loss: ce,
            objective: ce + a * gain,
            grad_logits: grad,
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectiveCounts {
    pub descent: usize,
    pub ascent: usize,
    pub flatten: usize,
}

impl DirectiveCounts {
    fn record(&mut self, kind: DirectiveKind) {
        match kind {
            DirectiveKind::Descent => self.descent += 1,
            DirectiveKind::Ascent => self.ascent += 1,
            DirectiveKind::Flatten => self.flatten += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Seconds spent on optimization steps (monitoring excluded).
    pub wall_time: f64,
    pub directives: DirectiveCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: String,
    pub epochs: Vec<EpochRecord>,
    pub peak_memory_bytes: usize,
    pub directives: DirectiveCounts,
    pub attack_updates: usize,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn wall_time_per_epoch(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.wall_time).collect()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

const EVAL_BATCH: usize = 250;

/// Evaluation-mode accuracy and mean cross-entropy; never mutates parameters.
pub fn evaluate(model: &mut Model, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::EmptyIndices("evaluate"));
    }
    let c = model.num_classes();
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk);
        let logits = model.predict(&batch)?;
        let logp = log_softmax_rows(&logits, c);
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = &logp[i * c..(i + 1) * c];
            if argmax(row) == y {
                correct += 1;
            }
            loss -= row[y] as f64;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / indices.len() as f64,
        mean_loss: loss / indices.len() as f64,
    })
}

/// Evaluation-mode softmax rows for `indices`, in order.
pub fn predict_probs(model: &mut Model, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f32>>> {
    let c = model.num_classes();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = model.predict(&data.batch(chunk))?;
        out.extend(softmax_rows(&logits, c).chunks(c).map(|r| r.to_vec()));
    }
    Ok(out)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Callback receiving the sample indices of every batch.
pub type BatchObserver<'a> = &'a mut dyn FnMut(&[usize]);

/// Configurable training run. `train` covers the common case.
pub struct Trainer<'a> {
    config: TrainConfig,
    monitor: Option<(&'a Dataset, &'a [usize])>,
    reference: Option<(&'a Dataset, &'a [usize])>,
    observer: Option<BatchObserver<'a>>,
    log_path: Option<PathBuf>,
    checkpoint: Option<(PathBuf, InitSnapshot)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Trainer {
            config,
            monitor: None,
            reference: None,
            observer: None,
            log_path: None,
            checkpoint: None,
        }
    }

    /// Held-out data evaluated after every epoch.
    pub fn monitor(mut self, data: &'a Dataset, indices: &'a [usize]) -> Self {
        self.monitor = Some((data, indices));
        self
    }

    /// Non-member reference data (required by Adv-Reg).
    pub fn reference(mut self, data: &'a Dataset, indices: &'a [usize]) -> Self {
        self.reference = Some((data, indices));
        self
    }

    /// Called with the dataset indices of every training batch.
    pub fn observe(mut self, f: &'a mut dyn FnMut(&[usize])) -> Self {
        self.observer = Some(f);
        self
    }

    /// Appends one JSON line per epoch.
    pub fn log_to(mut self, path: PathBuf) -> Self {
        self.log_path = Some(path);
        self
    }

    pub fn checkpoints(mut self, dir: PathBuf, snapshot: InitSnapshot) -> Self {
        self.checkpoint = Some((dir, snapshot));
        self
    }

    pub fn run(mut self, model: &mut Model, data: &Dataset, indices: &[usize]) -> Result<TrainReport> {
        let cfg = self.config.clone();
        cfg.validate()?;
        if indices.is_empty() && cfg.epochs > 0 {
            return Err(Error::EmptyIndices("training set"));
        }
        let classes = model.num_classes();
        let mut attack = (cfg.objective.kind == ObjectiveKind::Advreg)
            .then(|| AttackNet::new(classes, mix(cfg.seed, 0xA7, 0)));
        if attack.is_some() && self.reference.is_none_or(|(_, r)| r.is_empty()) {
            return Err(Error::InvalidConfig("advreg needs non-member reference data".into()));
        }
        alloc::reset_peak();
        let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        let mut report = TrainReport {
            objective: cfg.objective.id(),
            epochs: Vec::with_capacity(cfg.epochs),
            peak_memory_bytes: 0,
            directives: DirectiveCounts::default(),
            attack_updates: 0,
            final_checkpoint: None,
        };
        if let Some(path) = &self.log_path {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
        }
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_schedule.rate(cfg.lr, epoch, cfg.epochs);
            opt.lr = lr as f32;
            let mut order = indices.to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, epoch as u64)));
            let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, epoch as u64));
            let mut ref_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3, epoch as u64));
            let mut counts = DirectiveCounts::default();
            let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
            let start = Instant::now();
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if chunk.len() < 2 && order.len() >= 2 {
                    continue;
                }
                if let Some(obs) = self.observer.as_mut() {
                    obs(chunk);
                }
                let batch = augment_batch(&data.batch(chunk), &cfg.augmentation, &mut aug_rng);
                let reference_logits = match (&attack, self.reference) {
                    (Some(_), Some((rdata, ridx))) => {
                        let pick: Vec<usize> = (0..chunk.len()).map(|_| ridx[ref_rng.gen_range(0..ridx.len())]).collect();
                        let rb = rdata.batch(&pick);
                        Some((model.predict(&rb)?, rb.labels))
                    }
                    _ => None,
                };
                model.zero_grad();
                let logits = model.forward_train(&batch)?;
                let directive = match cfg.objective.kind {
                    ObjectiveKind::Ce => {
                        let (loss, grad) = cross_entropy(&logits, &batch.labels, classes);
                        UpdateDirective {
                            kind: DirectiveKind::Descent,
                            loss,
                            objective: loss,
                            grad_logits: grad,
                        }
                    }
                    ObjectiveKind::Relaxloss => relaxloss_step(epoch, &logits, &batch.labels, classes, cfg.objective.alpha),
                    ObjectiveKind::Advreg => {
                        let (rl, rlabels) = reference_logits.expect("reference batch");
                        let round = advreg_round(
                            attack.as_mut().expect("attack net"),
                            &logits,
                            &batch.labels,
                            &rl,
                            &rlabels,
                            cfg.objective.alpha,
                            cfg.objective.k,
                        )?;
                        report.attack_updates += round.attack_updates;
                        round.classifier
                    }
                };
                if !directive.loss.is_finite() || !directive.objective.is_finite() {
                    model.clear_cache();
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        loss: directive.loss,
                    });
                }
                counts.record(directive.kind);
                model.backward(&directive.grad_logits);
                opt.step(model);
                loss_sum += directive.loss as f64 * chunk.len() as f64;
                seen += chunk.len();
                for (row, &y) in logits.chunks(classes).zip(&batch.labels) {
                    if argmax(row) == y {
                        correct += 1;
                    }
                }
            }
            let wall_time = start.elapsed().as_secs_f64();
            let (test_loss, test_accuracy) = match self.monitor {
                Some((mdata, midx)) if !midx.is_empty() => {
                    let e = evaluate(model, mdata, midx)?;
                    (Some(e.mean_loss), Some(e.accuracy))
                }
                _ => (None, None),
            };
            report.directives.descent += counts.descent;
            report.directives.ascent += counts.ascent;
            report.directives.flatten += counts.flatten;
            let record = EpochRecord {
                epoch,
                lr,
                train_loss: loss_sum / seen.max(1) as f64,
                train_accuracy: correct as f64 / seen.max(1) as f64,
                test_loss,
                test_accuracy,
                wall_time,
                directives: counts,
            };
            log::debug!(
                "epoch {epoch}: loss {:.4} acc {:.4} test {:?} ({:.1}s)",
                record.train_loss,
                record.train_accuracy,
                record.test_accuracy,
                wall_time
            );
            if let Some(path) = &self.log_path {
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
            }
            report.epochs.push(record);
            if let (Some(every), Some((dir, snap))) = (cfg.checkpoint_every, &self.checkpoint) {
                if every > 0 && (epoch + 1) % every == 0 {
                    let path = dir.join(format!("epoch{:04}", epoch + 1));
                    Checkpoint::save(&path, model, snap, epoch + 1, &cfg.objective.id(), None)?;
                    report.final_checkpoint = Some(path);
                }
            }
        }
        report.peak_memory_bytes = alloc::peak_bytes();
        Ok(report)
    }
}

/// Trains `model` on `indices` of `data`.
pub fn train(model: &mut Model, data: &Dataset, indices: &[usize], config: &TrainConfig) -> Result<TrainReport> {
    Trainer::new(config.clone()).run(model, data, indices)
}

/// Runs `batch` through a training-mode forward/backward without stepping;
/// exposes raw gradients for tests and diagnostics.
pub fn logits_gradient_probe(model: &mut Model, batch: &Batch, grad_logits: &[f32]) -> Result<Vec<f32>> {
    model.zero_grad();
    let logits = model.forward_train(batch)?;
    model.backward(grad_logits);
    Ok(logits)
}
