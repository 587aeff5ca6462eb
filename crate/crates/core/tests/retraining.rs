mod common;

use proptest::prelude::*;

use common::{tiny_arch, tiny_pools};
use pptp_core::data::AugmentationPolicy;
use pptp_core::model_zoo::{build_model, param_stage, partition_parameters, ArchitectureSpec, Family};
use pptp_core::pptp::{ablation_variant, bitwise_eq, changed_params, freeze, pptp_retrain, rewind, AblationVariant, PptpConfig, RetrainOptions};
use pptp_core::training::{ObjectiveSpec, TrainConfig, Trainer};

fn config(epochs: usize, defense: ObjectiveSpec) -> PptpConfig {
    let mut trainer = TrainConfig::desk(epochs, 7, defense.clone(), AugmentationPolicy::disabled());
    trainer.batch_size = 32;
    PptpConfig {
        defense,
        epochs,
        trainer,
    }
}

fn pretrained() -> (pptp_core::model_zoo::Model, pptp_core::model_zoo::InitSnapshot, pptp_core::data::DataPools) {
    let pools = tiny_pools(128, 32);
    let (mut model, snap) = build_model(&tiny_arch(3)).unwrap();
    let mut cfg = TrainConfig::desk(2, 3, ObjectiveSpec::ce(), AugmentationPolicy::disabled());
    cfg.batch_size = 32;
    Trainer::new(cfg).run(&mut model, &pools.train, &(0..128).collect::<Vec<_>>()).unwrap();
    (model, snap, pools)
}

#[test]
fn safe_parameters_survive_retraining_bitwise() {
    let (pre, snap, pools) = pretrained();
    let idx: Vec<usize> = (0..128).collect();
    for onset in 2..=5 {
        let part = partition_parameters(&pre, onset).unwrap();
        let out = pptp_retrain(&pre, &snap, &part, &config(1, ObjectiveSpec::relaxloss(0.5)), &pools.train, &idx).unwrap();
        let before = pre.param_map();
        let after = out.model.param_map();
        for name in &part.safe_names {
            assert!(bitwise_eq(&before[name], &after[name]), "{name} moved at onset {onset}");
        }
        let changed = changed_params(&pre, &out.model);
        assert!(changed.is_subset(&part.risky_names));
        assert!(!changed.is_empty());
    }
}

#[test]
fn rewind_restores_snapshot_and_zero_epochs_is_freeze_then_rewind() {
    let (pre, snap, pools) = pretrained();
    let part = partition_parameters(&pre, 3).unwrap();
    let mut m = pre.clone();
    freeze(&mut m, &part).unwrap();
    rewind(&mut m, &part, &snap).unwrap();
    let values = m.param_map();
    for name in &part.risky_names {
        assert!(bitwise_eq(&values[name], &snap.params[name]), "{name} not rewound");
    }
    assert_eq!(m.frozen_names(), part.safe_names);

    let idx: Vec<usize> = (0..128).collect();
    let out = pptp_retrain(&pre, &snap, &part, &config(0, ObjectiveSpec::ce()), &pools.train, &idx).unwrap();
    assert!(out.report.epochs.is_empty());
    let (a, b) = (out.model.param_map(), m.param_map());
    assert!(a.keys().all(|k| bitwise_eq(&a[k], &b[k])));
    let (a, b) = (out.model.buffer_map(), m.buffer_map());
    assert!(a.keys().all(|k| bitwise_eq(&a[k], &b[k])));
}

#[test]
fn onset_one_with_ce_is_training_from_scratch() {
    let (pre, snap, pools) = pretrained();
    let idx: Vec<usize> = (0..128).collect();
    let cfg = config(2, ObjectiveSpec::ce());
    let part = partition_parameters(&pre, 1).unwrap();
    assert!(part.safe_names.is_empty());
    let out = pptp_retrain(&pre, &snap, &part, &cfg, &pools.train, &idx).unwrap();
    let (mut scratch, _) = build_model(&tiny_arch(3)).unwrap();
    Trainer::new(cfg.train_config()).run(&mut scratch, &pools.train, &idx).unwrap();
    let (a, b) = (out.model.param_map(), scratch.param_map());
    for k in a.keys() {
        assert!(bitwise_eq(&a[k], &b[k]), "{k} differs from the scratch run");
    }
}

#[test]
fn last_layer_variants_touch_only_the_head() {
    let (pre, snap, pools) = pretrained();
    let idx: Vec<usize> = (0..128).collect();
    for v in [AblationVariant::LastLayerFinetune, AblationVariant::LastLayerRewind] {
        let out = ablation_variant(&pre, &snap, v, 4, &config(1, ObjectiveSpec::ce()), &pools.train, &idx, RetrainOptions::default()).unwrap();
        let changed = changed_params(&pre, &out.model);
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| n.starts_with("head.")), "{v:?} changed {changed:?}");
    }
}

#[test]
fn retraining_is_deterministic() {
    let (pre, snap, pools) = pretrained();
    let idx: Vec<usize> = (0..128).collect();
    let part = partition_parameters(&pre, 4).unwrap();
    let cfg = config(1, ObjectiveSpec::relaxloss(0.5));
    let a = pptp_retrain(&pre, &snap, &part, &cfg, &pools.train, &idx).unwrap();
    let b = pptp_retrain(&pre, &snap, &part, &cfg, &pools.train, &idx).unwrap();
    assert!(changed_params(&a.model, &b.model).is_empty());
    assert_eq!(a.report.train_losses(), b.report.train_losses());
}

fn arch_strategy() -> impl Strategy<Value = ArchitectureSpec> {
    (prop::collection::vec(1usize..3, 1..5), any::<bool>(), any::<u64>()).prop_map(|(blocks, residual, seed)| {
        let channels = vec![4; blocks.len()];
        let family = if residual { Family::Residual } else { Family::Plain };
        ArchitectureSpec::staged(family, &blocks, &channels, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_is_exact_and_monotone(arch in arch_strategy()) {
        let (model, snap) = build_model(&arch).unwrap();
        let k = model.num_stages();
        let all: std::collections::BTreeSet<String> = model.param_map().keys().cloned().collect();
        prop_assert!(all.iter().all(|n| snap.covers(n)));
        let mut prev_safe = 0;
        for onset in 1..=k + 1 {
            let p = partition_parameters(&model, onset).unwrap();
            prop_assert!(p.safe_names.is_disjoint(&p.risky_names));
            let union: std::collections::BTreeSet<String> = p.safe_names.union(&p.risky_names).cloned().collect();
            prop_assert_eq!(&union, &all);
            for n in &p.safe_names {
                let s = param_stage(n, k).unwrap();
                prop_assert!(s < onset);
            }
            prop_assert!(p.safe_names.len() >= prev_safe);
            prev_safe = p.safe_names.len();
            prop_assert!(p.risky_names.iter().any(|n| n.starts_with("head.")));
        }
        prop_assert!(partition_parameters(&model, 0).is_err());
        prop_assert!(partition_parameters(&model, k + 2).is_err());
    }
}
