//! Independent brute-force oracles and small fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use pptp_core::data::{load_dataset, DataPools, DatasetSpec};
use pptp_core::model_zoo::{ArchitectureSpec, Family};

/// Root mean square of the coordinate differences, one coordinate at a time.
pub fn distance_oracle(p: &[f32], q: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..p.len() {
        let d = f64::from(p[i]) - f64::from(q[i]);
        acc += d * d;
    }
    (acc / p.len() as f64).sqrt()
}

pub fn entropy_oracle(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

pub fn mentropy_oracle(p: &[f64], y: usize) -> f64 {
    let mut h = -(1.0 - p[y]) * p[y].ln();
    for (i, &x) in p.iter().enumerate() {
        if i != y {
            h -= x * (1.0 - x).ln();
        }
    }
    h
}

/// Largest ECDF gap, enumerated at every observed value.
pub fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (ecdf(a, t) - ecdf(b, t)).abs())
        .fold(0.0, f64::max)
}

/// Fraction of (member, non-member) pairs ranked correctly, ties half.
pub fn auc_oracle(stats: &[f64], members: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..stats.len() {
        for j in 0..stats.len() {
            if members[i] && !members[j] {
                pairs += 1.0;
                if stats[i] > stats[j] {
                    wins += 1.0;
                } else if stats[i] == stats[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Small built-in dataset for fast end-to-end tests.
pub fn tiny_pools(train: usize, eval: usize) -> DataPools {
    load_dataset(&DatasetSpec {
        train_size: train,
        eval_size: eval,
        ..DatasetSpec::default()
    })
    .unwrap()
}

/// Four single-block stages of eight channels.
pub fn tiny_arch(seed: u64) -> ArchitectureSpec {
    ArchitectureSpec::staged(Family::Residual, &[1, 1, 1, 1], &[8, 8, 8, 8], seed)
}

/// Full pipeline on a few hundred samples and a narrow network.
pub fn tiny_manifest() -> pptp_core::harness::ExperimentManifest {
    use pptp_core::data::AugmentationPolicy;
    use pptp_core::harness::manifest::BaselineSection;
    use pptp_core::pptp::AblationVariant;
    use pptp_core::training::{ObjectiveSpec, TrainConfig};

    let mut m = pptp_core::harness::ExperimentManifest::desk();
    m.name = "tiny".into();
    m.repetitions = 2;
    m.dataset.train_size = 160;
    m.dataset.eval_size = 160;
    m.arch = tiny_arch(0);
    m.split.reference_size = 40;
    m.split.monitor_size = 40;
    m.pretrain = TrainConfig::desk(2, 0, ObjectiveSpec::ce(), AugmentationPolicy::disabled());
    m.pretrain.batch_size = 32;
    m.probe.config.iterations = 20;
    m.pptp.epochs = 1;
    m.pptp.trainer.batch_size = 32;
    m.pptp.alpha_grid = vec![0.3, 0.6];
    m.baseline = Some(BaselineSection {
        epochs: 2,
        defense: None,
        trainer: None,
    });
    m.ablation.variants = AblationVariant::ALL.to_vec();
    m.attacks.per_side = 60;
    m.attacks.nn.epochs = 2;
    m
}
