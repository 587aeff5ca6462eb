//! Paired-model feature-distance measurement.
//!
//! `M_all` is trained on `h1 ∪ h2`, `M_h1` on `h1` only, from the same
//! initialization. For every training sample the two models' features at a
//! tap are compared; samples from `h1` were seen by both models, samples
//! from `h2` only by `M_all`. A stage whose two cohorts have different
//! distance distributions memorizes its training data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::model_zoo::{build_model, ArchitectureSpec, FeatureMap, InitSnapshot, Model, TapId, TapSelection};
use crate::training::{TrainConfig, TrainReport, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    /// In `h1`: seen by both models.
    SeenBoth,
    /// In `h2`: seen by `M_all` only.
    SeenOnlyAll,
}

impl Cohort {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cohort::SeenBoth => "seen_both",
            Cohort::SeenOnlyAll => "seen_only_all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub sample_index: usize,
    pub tap: TapId,
    pub distance: f64,
    pub cohort: Cohort,
}

/// `sqrt(sum (p_i - q_i)^2 / d)`, accumulated in `f64`.
pub fn feature_distance(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::DimensionMismatch { left: 0, right: 0 });
    }
    let ss: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok((ss / p.len() as f64).sqrt())
}

/// The trained pair plus what produced it.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub all: Model,
    pub h1: Model,
    pub snapshot: InitSnapshot,
    pub report_all: TrainReport,
    pub report_h1: TrainReport,
}

/// Trains `M_all` on `h1 ∪ h2` and `M_h1` on `h1` from one initialization
/// and one training configuration.
pub fn train_pair(arch: &ArchitectureSpec, data: &Dataset, split: &SplitPlan, config: &TrainConfig) -> Result<TrainedPair> {
    train_pair_with(arch, data, split, config, None, &mut |_| {})
}

/// [`train_pair`] with an optional held-out monitor and a callback that sees
/// every batch of `M_h1`.
pub fn train_pair_with(
    arch: &ArchitectureSpec,
    data: &Dataset,
    split: &SplitPlan,
    config: &TrainConfig,
    monitor: Option<(&Dataset, &[usize])>,
    h1_observer: &mut dyn FnMut(&[usize]),
) -> Result<TrainedPair> {
    check_split(split, data.len())?;
    let (mut all, snapshot) = build_model(arch)?;
    let mut h1 = all.clone();
    let all_idx = split.all();
    let mut t = Trainer::new(config.clone());
    if let Some((d, i)) = monitor {
        t = t.monitor(d, i);
    }
    let report_all = t.run(&mut all, data, &all_idx)?;
    let mut t = Trainer::new(config.clone()).observe(h1_observer);
    if let Some((d, i)) = monitor {
        t = t.monitor(d, i);
    }
    let report_h1 = t.run(&mut h1, data, &split.h1)?;
    Ok(TrainedPair {
        all,
        h1,
        snapshot,
        report_all,
        report_h1,
    })
}

fn check_split(split: &SplitPlan, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split.h1.iter().chain(&split.h2) {
        if i >= n || seen[i] {
            return Err(Error::InvalidSplit(format!("index {i} repeated or outside a pool of {n}")));
        }
        seen[i] = true;
    }
    Ok(())
}

const MEASURE_BATCH: usize = 250;

/// One distance per (sample in `h1 ∪ h2`, tap), in evaluation mode on
/// un-augmented inputs. Output is ordered by tap, then by split order.
pub fn distance_distributions(
    all: &mut Model,
    h1: &mut Model,
    data: &Dataset,
    split: &SplitPlan,
    taps: TapSelection,
) -> Result<Vec<DistanceSample>> {
    let members: Vec<(usize, Cohort)> = split
        .h1
        .iter()
        .map(|&i| (i, Cohort::SeenBoth))
        .chain(split.h2.iter().map(|&i| (i, Cohort::SeenOnlyAll)))
        .collect();
    let mut per_tap: BTreeMap<TapId, Vec<DistanceSample>> = BTreeMap::new();
    for chunk in members.chunks(MEASURE_BATCH) {
        let idx: Vec<usize> = chunk.iter().map(|&(i, _)| i).collect();
        let batch = data.batch(&idx);
        let (_, fa) = all.forward_with_taps(&batch, taps)?;
        let (_, fh) = h1.forward_with_taps(&batch, taps)?;
        check_taps(&fa, &fh)?;
        for (a, b) in fa.iter().zip(&fh) {
            let out = per_tap.entry(a.tap).or_default();
            for (j, &(sample_index, cohort)) in chunk.iter().enumerate() {
                out.push(DistanceSample {
                    sample_index,
                    tap: a.tap,
                    distance: feature_distance(&a.values.sample_vector(j), &b.values.sample_vector(j))?,
                    cohort,
                });
            }
        }
    }
    Ok(per_tap.into_values().flatten().collect())
}

fn check_taps(a: &[FeatureMap], b: &[FeatureMap]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::TapMismatch(format!("{} taps vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.tap != y.tap || x.d() != y.d() {
            return Err(Error::TapMismatch(format!(
                "{} (d={}) vs {} (d={})",
                x.tap,
                x.d(),
                y.tap,
                y.d()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyIndices("ks_statistic sample"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = (n as f64 * m as f64 / (n + m) as f64).sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((en + 0.12 + 0.11 / en) * d),
    })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 1.0;
    let mut prev = 0.0f64;
    for k in 1..=100 {
        let term = sign * 2.0 * (a2 * (k * k) as f64).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev || term.abs() <= 1e-16 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRule {
    pub max_p_value: f64,
    pub min_statistic: f64,
}

impl Default for DecisionRule {
    fn default() -> Self {
        DecisionRule {
            max_p_value: 0.01,
            min_statistic: 0.1,
        }
    }
}

impl DecisionRule {
    pub fn fires(&self, ks: &KsResult) -> bool {
        ks.p_value < self.max_p_value && ks.statistic >= self.min_statistic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityVerdict {
    pub tap: TapId,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub flagged: bool,
    pub n_seen_both: usize,
    pub n_seen_only_all: usize,
    pub mean_seen_both: f64,
    pub mean_seen_only_all: f64,
}

/// One verdict per tap present in `samples`, ordered by tap.
pub fn disparity_verdicts(samples: &[DistanceSample], rule: &DecisionRule) -> Result<Vec<DisparityVerdict>> {
    let mut groups: BTreeMap<TapId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let g = groups.entry(s.tap).or_default();
        match s.cohort {
            Cohort::SeenBoth => g.0.push(s.distance),
            Cohort::SeenOnlyAll => g.1.push(s.distance),
        }
    }
    groups
        .into_iter()
        .map(|(tap, (both, only))| {
            if both.is_empty() || only.is_empty() {
                return Err(Error::CohortMissing(tap.to_string()));
            }
            let ks = ks_statistic(&both, &only)?;
            Ok(DisparityVerdict {
                tap,
                ks_statistic: ks.statistic,
                p_value: ks.p_value,
                flagged: rule.fires(&ks),
                n_seen_both: both.len(),
                n_seen_only_all: only.len(),
                mean_seen_both: mean(&both),
                mean_seen_only_all: mean(&only),
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Frozen and retrained stages for a given onset. In `retrained_stages`,
/// `K+1` stands for the classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskPartition {
    pub onset_stage: usize,
    pub frozen_stages: BTreeSet<usize>,
    pub retrained_stages: BTreeSet<usize>,
}

impl RiskPartition {
    pub fn from_onset(onset_stage: usize, num_stages: usize) -> Self {
        RiskPartition {
            onset_stage,
            frozen_stages: (1..onset_stage).collect(),
            retrained_stages: (onset_stage..=num_stages + 1).collect(),
        }
    }
}

/// Smallest flagged stage-end tap; every later stage is treated as risky.
/// Per-block verdicts are ignored. No flag at all gives `K+1`.
pub fn locate_risk_onset(verdicts: &[DisparityVerdict], num_stages: usize) -> RiskPartition {
    let onset = verdicts
        .iter()
        .filter(|v| v.tap.is_stage_end() && v.flagged && (1..=num_stages).contains(&v.tap.stage))
        .map(|v| v.tap.stage)
        .min()
        .unwrap_or(num_stages + 1);
    RiskPartition::from_onset(onset, num_stages)
}

/// Verdicts plus the onset derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub rule: DecisionRule,
    pub verdicts: Vec<DisparityVerdict>,
    pub risk: RiskPartition,
}

impl DisparityReport {
    pub fn build(samples: &[DistanceSample], rule: DecisionRule, num_stages: usize) -> Result<Self> {
        let verdicts = disparity_verdicts(samples, &rule)?;
        let risk = locate_risk_onset(&verdicts, num_stages);
        Ok(DisparityReport { rule, verdicts, risk })
    }

    pub fn stage_verdict(&self, stage: usize) -> Option<&DisparityVerdict> {
        self.verdicts.iter().find(|v| v.tap == TapId::stage_end(stage))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Tab-separated dump: `sample_index, tap, cohort, distance`.
pub fn write_distance_dump(path: &Path, samples: &[DistanceSample]) -> Result<()> {
    let mut out = String::from("sample_index\ttap\tcohort\tdistance\n");
    for s in samples {
        writeln!(out, "{}\t{}\t{}\t{:e}", s.sample_index, s.tap, s.cohort.as_str(), s.distance).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_distance_dump(path: &Path) -> Result<Vec<DistanceSample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::InvalidConfig(format!("{}:{}: malformed distance row", path.display(), no + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(DistanceSample {
            sample_index: f[0].parse().map_err(|_| bad())?,
            tap: TapId::parse(f[1]).ok_or_else(bad)?,
            cohort: match f[2] {
                "seen_both" => Cohort::SeenBoth,
                "seen_only_all" => Cohort::SeenOnlyAll,
                _ => return Err(bad()),
            },
            distance: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_hand_cases() {
        assert_eq!(feature_distance(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(feature_distance(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert!(matches!(
            feature_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn ks_hand_cases() {
        let r = ks_statistic(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((r.statistic - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ks_statistic(&[1.0, 1.0, 2.0], &[2.0, 1.0, 1.0]).unwrap().statistic, 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[5.0, 6.0, 7.0]).unwrap().statistic, 1.0);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn kolmogorov_tail_known_values() {
        // Q(1.36) ≈ 0.049, Q(1.63) ≈ 0.0098
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.0100).abs() < 3e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    fn verdict(stage: usize, flagged: bool) -> DisparityVerdict {
        DisparityVerdict {
            tap: TapId::stage_end(stage),
            ks_statistic: 0.0,
            p_value: 1.0,
            flagged,
            n_seen_both: 1,
            n_seen_only_all: 1,
            mean_seen_both: 0.0,
            mean_seen_only_all: 0.0,
        }
    }

    #[test]
    fn onset_rule() {
        let v: Vec<_> = [false, false, false, true].iter().enumerate().map(|(i, &f)| verdict(i + 1, f)).collect();
        let r = locate_risk_onset(&v, 4);
        assert_eq!(r.onset_stage, 4);
        assert_eq!(r.frozen_stages, [1, 2, 3].into());
        assert_eq!(r.retrained_stages, [4, 5].into());
        let v: Vec<_> = [false, true, false, true].iter().enumerate().map(|(i, &f)| verdict(i + 1, f)).collect();
        assert_eq!(locate_risk_onset(&v, 4).onset_stage, 2);
        let v: Vec<_> = (1..=4).map(|s| verdict(s, false)).collect();
        assert_eq!(locate_risk_onset(&v, 4).onset_stage, 5);
    }

    #[test]
    fn verdicts_flag_disjoint_and_skip_zero() {
        let mut samples = Vec::new();
        for i in 0..200 {
            let cohort = if i % 2 == 0 { Cohort::SeenBoth } else { Cohort::SeenOnlyAll };
            samples.push(DistanceSample {
                sample_index: i,
                tap: TapId::stage_end(1),
                distance: 0.0,
                cohort,
            });
            samples.push(DistanceSample {
                sample_index: i,
                tap: TapId::stage_end(2),
                distance: if cohort == Cohort::SeenBoth { 1.0 } else { 2.0 + i as f64 },
                cohort,
            });
        }
        let v = disparity_verdicts(&samples, &DecisionRule::default()).unwrap();
        assert!(!v[0].flagged && v[0].ks_statistic == 0.0);
        assert!(v[1].flagged && v[1].ks_statistic == 1.0);
        samples.retain(|s| s.cohort == Cohort::SeenBoth);
        assert!(matches!(
            disparity_verdicts(&samples, &DecisionRule::default()),
            Err(Error::CohortMissing(_))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let samples = vec![
            DistanceSample {
                sample_index: 3,
                tap: TapId::stage_end(4),
                distance: 0.125,
                cohort: Cohort::SeenBoth,
            },
            DistanceSample {
                sample_index: 9,
                tap: TapId {
                    stage: 4,
                    block: Some(2),
                },
                distance: 1.0 / 3.0,
                cohort: Cohort::SeenOnlyAll,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        write_distance_dump(&p, &samples).unwrap();
        assert_eq!(read_distance_dump(&p).unwrap(), samples);
    }
}
