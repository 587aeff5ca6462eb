//! Membership-inference attacks and their metrics.
//!
//! Every attack reduces a [`ScoreVector`] to one statistic oriented so that
//! larger means "more member-like": confidence is used as is, entropy and
//! modified entropy are negated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model_zoo::Model;
use crate::nn::{sigmoid, Adam, HasParams, Mlp};
use crate::tensor::softmax_rows;
use crate::training::attack_features;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub sample_index: usize,
    pub probs: Vec<f64>,
    pub true_label: usize,
    pub is_member: bool,
}

impl ScoreVector {
    pub fn is_correct(&self) -> bool {
        argmax64(&self.probs) == self.true_label
    }
}

fn argmax64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const SCORE_BATCH: usize = 250;

fn scores_of(model: &mut Model, data: &Dataset, indices: &[usize], member: bool, out: &mut Vec<ScoreVector>) -> Result<()> {
    let c = model.num_classes();
    for chunk in indices.chunks(SCORE_BATCH) {
        let batch = data.batch(chunk);
        let probs = softmax_rows(&model.predict(&batch)?, c);
        for (j, &i) in chunk.iter().enumerate() {
            out.push(ScoreVector {
                sample_index: i,
                probs: probs[j * c..(j + 1) * c].iter().map(|&p| p as f64).collect(),
                true_label: batch.labels[j],
                is_member: member,
            });
        }
    }
    Ok(())
}

/// Scores for members and non-members drawn from one pool.
pub fn collect_scores(model: &mut Model, data: &Dataset, members: &[usize], nonmembers: &[usize]) -> Result<Vec<ScoreVector>> {
    let set: std::collections::BTreeSet<usize> = members.iter().copied().collect();
    if let Some(&i) = nonmembers.iter().find(|i| set.contains(i)) {
        return Err(Error::OverlappingSets(i));
    }
    collect_scores_from(model, data, members, data, nonmembers)
}

/// Scores for members and non-members that live in different pools
/// (training pool vs. evaluation pool), which are disjoint by construction.
pub fn collect_scores_from(
    model: &mut Model,
    member_data: &Dataset,
    members: &[usize],
    nonmember_data: &Dataset,
    nonmembers: &[usize],
) -> Result<Vec<ScoreVector>> {
    let mut out = Vec::with_capacity(members.len() + nonmembers.len());
    scores_of(model, member_data, members, true, &mut out)?;
    scores_of(model, nonmember_data, nonmembers, false, &mut out)?;
    Ok(out)
}

/// `-Σ p ln p` with clamped probabilities.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            p * p.ln()
        })
        .sum::<f64>()
}

/// `-(1 - p_y) ln p_y - Σ_{i≠y} p_i ln(1 - p_i)` with clamped probabilities.
pub fn modified_entropy(probs: &[f64], y: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            if i == y {
                -(1.0 - p) * p.ln()
            } else {
                -p * (1.0 - p).ln()
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Correctness,
    Confidence,
    Entropy,
    Mentropy,
    NeuralNet,
}

impl AttackKind {
    pub const THRESHOLD: [AttackKind; 4] = [
        AttackKind::Correctness,
        AttackKind::Confidence,
        AttackKind::Entropy,
        AttackKind::Mentropy,
    ];

    pub const ALL: [AttackKind; 5] = [
        AttackKind::Correctness,
        AttackKind::Confidence,
        AttackKind::Entropy,
        AttackKind::Mentropy,
        AttackKind::NeuralNet,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            AttackKind::Correctness => "correctness",
            AttackKind::Confidence => "confidence",
            AttackKind::Entropy => "entropy",
            AttackKind::Mentropy => "mentropy",
            AttackKind::NeuralNet => "neural_net",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == s)
    }
}

/// Member-oriented statistic for a threshold attack.
pub fn statistic(kind: AttackKind, s: &ScoreVector) -> f64 {
    match kind {
        AttackKind::Correctness => {
            if s.is_correct() {
                1.0
            } else {
                0.0
            }
        }
        AttackKind::Confidence => s.probs[s.true_label],
        AttackKind::Entropy => -entropy(&s.probs),
        AttackKind::Mentropy => -modified_entropy(&s.probs, s.true_label),
        AttackKind::NeuralNet => panic!("the neural-net attack has no closed-form statistic"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    Global,
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub scope: ThresholdScope,
    /// Fraction of every (membership, label) group used for calibration.
    pub calibration: f64,
    pub seed: u64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            scope: ThresholdScope::PerClass,
            calibration: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub balanced_accuracy: f64,
    pub auc: f64,
    /// `(fpr, tpr)` points from `(0,0)` to `(1,1)`.
    pub roc: Vec<(f64, f64)>,
    /// Keys `"0.1"` and `"0.01"`.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

impl AttackResult {
    fn from_eval(kind: AttackKind, stats: &[f64], flags: &[bool], predicted: &[bool]) -> Result<Self> {
        let (auc, roc) = roc_auc(stats, flags)?;
        let mut tpr = BTreeMap::new();
        for f in [0.1, 0.01] {
            tpr.insert(format!("{f}"), tpr_at_fpr(&roc, f));
        }
        Ok(AttackResult {
            kind,
            balanced_accuracy: balanced_accuracy(predicted, flags),
            auc,
            roc,
            tpr_at_fpr: tpr,
            n_members: flags.iter().filter(|&&m| m).count(),
            n_nonmembers: flags.iter().filter(|&&m| !m).count(),
        })
    }
}

/// Mean of the true-positive and true-negative rates.
pub fn balanced_accuracy(predicted: &[bool], flags: &[bool]) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&pr, &m) in predicted.iter().zip(flags) {
        if m {
            p += 1;
            tp += pr as usize;
        } else {
            n += 1;
            tn += !pr as usize;
        }
    }
    0.5 * (tp as f64 / p.max(1) as f64 + tn as f64 / n.max(1) as f64)
}

/// Pairwise AUC (ties count one half) and the ROC of a full threshold sweep.
pub fn roc_auc(stats: &[f64], flags: &[bool]) -> Result<(f64, Vec<(f64, f64)>)> {
    if stats.len() != flags.len() {
        return Err(Error::DimensionMismatch {
            left: stats.len(),
            right: flags.len(),
        });
    }
    let pos = flags.iter().filter(|&&m| m).count() as u64;
    let neg = flags.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("roc needs members and non-members".into()));
    }
    if stats.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN statistic".into()));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].total_cmp(&stats[a]));
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let v = stats[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && stats[order[i]] == v {
            if flags[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        twice_area += gn as u128 * (2 * tp + gp) as u128;
        tp += gp;
        fp += gn;
        roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok((twice_area as f64 / (2 * pos as u128 * neg as u128) as f64, roc))
}

/// Highest TPR reachable at a false-positive rate no larger than `fpr`.
pub fn tpr_at_fpr(roc: &[(f64, f64)], fpr: f64) -> f64 {
    roc.iter().filter(|p| p.0 <= fpr + 1e-15).map(|p| p.1).fold(0.0, f64::max)
}

/// Seeded per-(membership, label) split into calibration and evaluation
/// index lists.
pub fn calibration_split(scores: &[ScoreVector], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("calibration fraction {fraction} outside (0,1)")));
    }
    let mut groups: BTreeMap<(bool, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in scores.iter().enumerate() {
        groups.entry((s.is_member, s.true_label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cal, mut eval) = (Vec::new(), Vec::new());
    for (_, mut g) in groups {
        g.shuffle(&mut rng);
        let cut = (g.len() as f64 * fraction).round() as usize;
        cal.extend_from_slice(&g[..cut]);
        eval.extend_from_slice(&g[cut..]);
    }
    cal.sort_unstable();
    eval.sort_unstable();
    Ok((cal, eval))
}

/// Threshold maximizing balanced accuracy for "member iff stat >= t".
fn best_threshold(stats: &[f64], flags: &[bool]) -> Result<f64> {
    let pos = flags.iter().filter(|&&m| m).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("calibration needs members and non-members".into()));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].total_cmp(&stats[a]));
    // start with "nobody is a member"
    let mut best = (0.5, f64::INFINITY);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = stats[order[i]];
        while i < order.len() && stats[order[i]] == v {
            if flags[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let ba = 0.5 * (tp as f64 / pos as f64 + (neg - fp) as f64 / neg as f64);
        if ba > best.0 {
            let next = if i < order.len() { stats[order[i]] } else { f64::NEG_INFINITY };
            best = (ba, if next.is_finite() { 0.5 * (v + next) } else { v });
        }
    }
    Ok(best.1)
}

/// Threshold attack. Correctness needs no calibration and is scored on every
/// sample; the other statistics pick thresholds on the calibration split and
/// are scored on the held-out split.
pub fn threshold_attack(scores: &[ScoreVector], kind: AttackKind, policy: &ThresholdPolicy) -> Result<AttackResult> {
    if kind == AttackKind::NeuralNet {
        return Err(Error::InvalidConfig("use nn_attack for the neural-net attack".into()));
    }
    if kind == AttackKind::Correctness {
        let stats: Vec<f64> = scores.iter().map(|s| statistic(kind, s)).collect();
        let flags: Vec<bool> = scores.iter().map(|s| s.is_member).collect();
        let pred: Vec<bool> = stats.iter().map(|&v| v > 0.5).collect();
        return AttackResult::from_eval(kind, &stats, &flags, &pred);
    }
    let (cal, eval) = calibration_split(scores, policy.calibration, policy.seed)?;
    let stat = |i: usize| statistic(kind, &scores[i]);
    let thresholds: BTreeMap<Option<usize>, f64> = match policy.scope {
        ThresholdScope::Global => {
            let s: Vec<f64> = cal.iter().map(|&i| stat(i)).collect();
            let f: Vec<bool> = cal.iter().map(|&i| scores[i].is_member).collect();
            [(None, best_threshold(&s, &f)?)].into()
        }
        ThresholdScope::PerClass => {
            let mut by_class: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
            for &i in &cal {
                let e = by_class.entry(scores[i].true_label).or_default();
                e.0.push(stat(i));
                e.1.push(scores[i].is_member);
            }
            let mut t = BTreeMap::new();
            for (c, (s, f)) in by_class {
                let th = best_threshold(&s, &f)
                    .map_err(|_| Error::Degenerate(format!("class {c} lacks members or non-members in calibration")))?;
                t.insert(Some(c), th);
            }
            t
        }
    };
    let mut stats = Vec::with_capacity(eval.len());
    let mut flags = Vec::with_capacity(eval.len());
    let mut pred = Vec::with_capacity(eval.len());
    for &i in &eval {
        let key = match policy.scope {
            ThresholdScope::Global => None,
            ThresholdScope::PerClass => Some(scores[i].true_label),
        };
        let th = *thresholds
            .get(&key)
            .ok_or_else(|| Error::Degenerate(format!("class {} absent from calibration", scores[i].true_label)))?;
        let v = stat(i);
        stats.push(v);
        flags.push(scores[i].is_member);
        pred.push(v >= th);
    }
    AttackResult::from_eval(kind, &stats, &flags, &pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnAttackConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NnAttackConfig {
    fn default() -> Self {
        NnAttackConfig {
            hidden: vec![64, 32],
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Classifier on `(sorted probs, one-hot label)` trained on `calibration`
/// with class-balanced binary cross-entropy, scored on `evaluation`.
pub fn nn_attack(calibration: &[ScoreVector], evaluation: &[ScoreVector], config: &NnAttackConfig) -> Result<AttackResult> {
    let classes = calibration
        .first()
        .or(evaluation.first())
        .map(|s| s.probs.len())
        .ok_or(Error::EmptyIndices("nn_attack scores"))?;
    let pos = calibration.iter().filter(|s| s.is_member).count();
    let neg = calibration.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("calibration needs members and non-members".into()));
    }
    let features = |set: &[ScoreVector]| -> Vec<f32> {
        let probs: Vec<f32> = set.iter().flat_map(|s| s.probs.iter().map(|&p| p as f32)).collect();
        let labels: Vec<usize> = set.iter().map(|s| s.true_label).collect();
        attack_features(&probs, &labels, classes).0
    };
    let width = 2 * classes;
    let xc = features(calibration);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Mlp::new("mia", width, &config.hidden, &mut rng);
    let mut opt = Adam::new(config.lr as f32);
    let (wp, wn) = (0.5 / pos as f32, 0.5 / neg as f32);
    let mut order: Vec<usize> = (0..calibration.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut x = Vec::with_capacity(chunk.len() * width);
            for &i in chunk {
                x.extend_from_slice(&xc[i * width..(i + 1) * width]);
            }
            net.zero_grad();
            let z = net.forward(&x, chunk.len(), true);
            // weights make each epoch's gradient an unbiased, class-balanced mean
            let scale = calibration.len() as f32 / chunk.len() as f32;
            let dz: Vec<f32> = chunk
                .iter()
                .zip(&z)
                .map(|(&i, &zi)| {
                    let m = calibration[i].is_member;
                    let w = if m { wp } else { wn } * scale;
                    w * (sigmoid(zi) - if m { 1.0 } else { 0.0 })
                })
                .collect();
            net.backward(&dz, chunk.len(), false);
            opt.step(&mut net);
        }
    }
    let xe = features(evaluation);
    let z = net.forward(&xe, evaluation.len(), false);
    let stats: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let flags: Vec<bool> = evaluation.iter().map(|s| s.is_member).collect();
    let pred: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
    AttackResult::from_eval(AttackKind::NeuralNet, &stats, &flags, &pred)
}

/// Runs each requested attack; the neural-net attack uses the same
/// calibration/evaluation split as the threshold attacks.
pub fn run_attacks(scores: &[ScoreVector], kinds: &[AttackKind], policy: &ThresholdPolicy, nn: &NnAttackConfig) -> Result<Vec<AttackResult>> {
    kinds
        .iter()
        .map(|&k| {
            if k == AttackKind::NeuralNet {
                let (cal, eval) = calibration_split(scores, policy.calibration, policy.seed)?;
                let pick = |ix: &[usize]| ix.iter().map(|&i| scores[i].clone()).collect::<Vec<_>>();
                nn_attack(&pick(&cal), &pick(&eval), nn)
            } else {
                threshold_attack(scores, k, policy)
            }
        })
        .collect()
}

/// Copy of `scores` with membership flags randomly permuted.
pub fn permute_membership(scores: &[ScoreVector], seed: u64) -> Vec<ScoreVector> {
    let mut flags: Vec<bool> = scores.iter().map(|s| s.is_member).collect();
    flags.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    scores
        .iter()
        .zip(flags)
        .map(|(s, m)| ScoreVector {
            is_member: m,
            ..s.clone()
        })
        .collect()
}

/// Accuracy of the target model on members and on non-members.
pub fn cohort_accuracies(scores: &[ScoreVector]) -> (f64, f64) {
    let mut acc = [(0usize, 0usize); 2];
    for s in scores {
        let e = &mut acc[s.is_member as usize];
        e.0 += s.is_correct() as usize;
        e.1 += 1;
    }
    (
        acc[1].0 as f64 / acc[1].1.max(1) as f64,
        acc[0].0 as f64 / acc[0].1.max(1) as f64,
    )
}

/// Tab-separated dump: index, probabilities, label, membership.
pub fn write_score_dump(path: &Path, scores: &[ScoreVector]) -> Result<()> {
    let classes = scores.first().map_or(0, |s| s.probs.len());
    let mut out = String::from("sample_index");
    for c in 0..classes {
        write!(out, "\tp{c}").unwrap();
    }
    out.push_str("\tlabel\tmember\n");
    for s in scores {
        write!(out, "{}", s.sample_index).unwrap();
        for p in &s.probs {
            write!(out, "\t{p:e}").unwrap();
        }
        writeln!(out, "\t{}\t{}", s.true_label, s.is_member as u8).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// ROC points as `fpr\ttpr` lines.
pub fn write_roc(path: &Path, result: &AttackResult) -> Result<()> {
    let mut out = String::from("fpr\ttpr\n");
    for (f, t) in &result.roc {
        writeln!(out, "{f:.6}\t{t:.6}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_roc(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let mut it = line.split('\t').map(str::parse::<f64>);
        match (it.next(), it.next()) {
            (Some(Ok(f)), Some(Ok(t))) => out.push((f, t)),
            _ => return Err(Error::InvalidConfig(format!("bad roc line `{line}`"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(i: usize, probs: &[f64], y: usize, m: bool) -> ScoreVector {
        ScoreVector {
            sample_index: i,
            probs: probs.to_vec(),
            true_label: y,
            is_member: m,
        }
    }

    #[test]
    fn entropy_hand_cases() {
        assert!(entropy(&[1.0, 0.0, 0.0]).abs() < 1e-9);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.7, 0.2, 0.1]) - 0.801819).abs() < 1e-6);
        assert!(modified_entropy(&[0.0, 1.0, 0.0], 1).abs() < 1e-9);
        assert!((modified_entropy(&[0.7, 0.2, 0.1], 0) - 0.1621672).abs() < 1e-6);
        assert!(modified_entropy(&[1.0, 0.0], 1) > 20.0);
    }

    #[test]
    fn auc_hand_cases() {
        let (auc, roc) = roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        let (auc, _) = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(auc, 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn correctness_attack_identity() {
        let mut s = Vec::new();
        for i in 0..10 {
            s.push(sv(i, &[0.9, 0.1], 0, true));
        }
        for i in 0..10 {
            let y = if i < 5 { 0 } else { 1 };
            s.push(sv(10 + i, &[0.9, 0.1], y, false));
        }
        let r = threshold_attack(&s, AttackKind::Correctness, &ThresholdPolicy::default()).unwrap();
        assert_eq!(r.balanced_accuracy, 0.75);
    }

    #[test]
    fn separated_confidence_is_perfect() {
        let mut s = Vec::new();
        for i in 0..40 {
            let m = i % 2 == 0;
            let p = if m { 0.95 - i as f64 * 1e-3 } else { 0.3 + i as f64 * 1e-3 };
            s.push(sv(i, &[p, 1.0 - p], 0, m));
        }
        for scope in [ThresholdScope::Global, ThresholdScope::PerClass] {
            let policy = ThresholdPolicy {
                scope,
                ..Default::default()
            };
            let r = threshold_attack(&s, AttackKind::Confidence, &policy).unwrap();
            assert_eq!((r.balanced_accuracy, r.auc), (1.0, 1.0));
        }
    }

    #[test]
    fn per_class_calibration_needs_both_cohorts() {
        let s = vec![sv(0, &[0.9, 0.1], 0, true), sv(1, &[0.9, 0.1], 0, true), sv(2, &[0.5, 0.5], 1, false), sv(3, &[0.4, 0.6], 1, false)];
        assert!(threshold_attack(&s, AttackKind::Entropy, &ThresholdPolicy::default()).is_err());
    }

    #[test]
    fn untrained_nn_attack_is_uninformative() {
        let s: Vec<ScoreVector> = (0..40).map(|i| sv(i, &[0.6, 0.4], i % 2, i % 3 == 0)).collect();
        let cfg = NnAttackConfig {
            epochs: 0,
            ..Default::default()
        };
        let r = nn_attack(&s[..20], &s[20..], &cfg).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.balanced_accuracy, 0.5);
    }

    #[test]
    fn tpr_lookup() {
        let roc = vec![(0.0, 0.0), (0.005, 0.2), (0.05, 0.4), (0.2, 0.9), (1.0, 1.0)];
        assert_eq!(tpr_at_fpr(&roc, 0.01), 0.2);
        assert_eq!(tpr_at_fpr(&roc, 0.1), 0.4);
    }
}
