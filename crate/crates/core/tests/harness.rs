mod common;

use std::fs;
use std::path::Path;

use common::tiny_manifest;
use pptp_core::harness::{self, models, report, ExperimentManifest, Factor, Phase, RunOptions, RunRecord};
use pptp_core::mia::AttackKind;
use pptp_core::model_zoo::Checkpoint;

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        output_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

/// Fields that do not depend on wall-clock time or on file locations.
fn deterministic(r: &RunRecord) -> serde_json::Value {
    let mut v = serde_json::json!({
        "seed": r.seed,
        "hash": r.manifest_hash,
        "completed": r.completed,
        "evals": r.evals,
        "disparity": r.disparity,
        "comparison": r.comparison,
        "probe": r.probe,
        "onset": r.onset_stage,
        "alpha": r.pptp_alpha,
        "alpha_search": r.alpha_search,
        "attacks": r.attacks,
        "permuted": r.permuted_attacks,
        "cohorts": r.cohort_accuracy,
    });
    let losses: Vec<_> = r.train_reports.iter().map(|(k, t)| (k.clone(), t.train_losses())).collect();
    v["losses"] = serde_json::to_value(losses).unwrap();
    let conv: Vec<_> = r.costs.iter().map(|(k, c)| (k.clone(), c.epochs_to_converge)).collect();
    v["convergence"] = serde_json::to_value(conv).unwrap();
    v
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap())).collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn full_run_repetitions_cache_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tiny_manifest();
    let first = harness::run_experiment(&m, &opts(tmp.path())).unwrap();
    assert_eq!(first.records.len(), 2);
    assert_eq!(first.cache_hits, 0);
    assert_ne!(first.records[0].seed, first.records[1].seed);
    for r in &first.records {
        assert!(r.is_complete());
        assert!(r.artifacts_exist());
        assert_eq!(r.manifest_hash, m.hash());
        for id in [models::PRETRAINED, models::HALF, models::PPTP, models::BASELINE, models::PPTP_MATCHED] {
            assert!(r.checkpoints.contains_key(id), "missing {id}");
        }
        for v in &m.ablation.variants {
            assert!(r.checkpoints.contains_key(&models::ablation(v.id())));
        }
        assert_eq!(r.attacks[models::PRETRAINED].len(), AttackKind::ALL.len());
        assert_eq!(r.alpha_search.len(), 2);
        let chosen = r.alpha_search.iter().find(|c| Some(c.alpha) == r.matched_alpha).unwrap();
        let target = r.attack(models::BASELINE, m.pptp.matching_attack).unwrap().auc;
        let gap = |c: &harness::AlphaCandidate| (c.auc - target).abs();
        let within: Vec<_> = r.alpha_search.iter().filter(|c| gap(c) <= m.pptp.match_tolerance).collect();
        if within.is_empty() {
            assert!(r.alpha_search.iter().all(|c| gap(c) >= gap(chosen)));
        } else {
            assert!(within.iter().all(|c| c.test_accuracy <= chosen.test_accuracy));
        }
        assert_eq!(r.attack(models::PPTP_MATCHED, m.pptp.matching_attack).unwrap().auc, chosen.auc);
        assert_eq!(r.permuted_attacks.len(), AttackKind::ALL.len());
        let plots = first.root.join(r.repetition.to_string()).join("plots");
        assert!(plots.join("probe.svg").exists());
        let stage_hist = (1..=4).filter(|s| plots.join(format!("distance_stage{s}.svg")).exists()).count();
        assert_eq!(stage_hist, 4);
        assert!(plots.join(format!("roc_{}.svg", AttackKind::Mentropy.id())).exists());
        assert!(plots.join("cost.svg").exists());
        assert!(plots.join("comparison_stage4.svg").exists());
    }
    let agg = &first.aggregate;
    assert_eq!(agg.repetitions, 2);
    let acc = agg.get(&format!("eval.{}.test_accuracy", models::PRETRAINED)).unwrap();
    assert_eq!(acc.n, 2);
    let csv = fs::read_to_string(first.root.join("report").join("summary.csv")).unwrap();
    assert!(csv.starts_with("metric,mean,sd,n\n"));

    let before = files_under(&first.root.join("report"));
    let second = harness::run_experiment(&m, &opts(tmp.path())).unwrap();
    assert_eq!(second.cache_hits, 2);
    for (a, b) in first.records.iter().zip(&second.records) {
        assert_eq!(a, b);
    }
    assert_eq!(files_under(&first.root.join("report")), before, "report must be byte-stable");

    let one = report::aggregate(&first.records[..1]);
    assert_eq!(one.get(&format!("eval.{}.test_accuracy", models::PRETRAINED)).unwrap().n, 1);
    assert_eq!(harness::load_records(&first.root).unwrap(), first.records);
}

#[test]
fn interrupted_run_resumes_to_the_same_record() {
    let mut m = tiny_manifest();
    m.repetitions = 1;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let straight = harness::run_experiment(&m, &opts(a.path())).unwrap();

    let partial = harness::run_experiment(
        &m,
        &RunOptions {
            stop_after: Some(Phase::Profile),
            ..opts(b.path())
        },
    )
    .unwrap();
    let rec = &partial.records[0];
    assert_eq!(rec.completed, vec![Phase::Split, Phase::Pretrain, Phase::Profile]);
    let ckpt = rec.checkpoints[models::PRETRAINED].clone();
    let stamp = fs::metadata(Checkpoint::tensor_path(&ckpt)).unwrap().modified().unwrap();
    let pretrain_time = rec.phase_seconds[&Phase::Pretrain];

    let resumed = harness::run_experiment(&m, &opts(b.path())).unwrap();
    let r = &resumed.records[0];
    assert_eq!(r.phase_seconds[&Phase::Pretrain], pretrain_time, "pretrain was recomputed");
    let after = fs::metadata(Checkpoint::tensor_path(&ckpt)).unwrap().modified().unwrap();
    assert_eq!(stamp, after);
    assert_eq!(deterministic(r), deterministic(&straight.records[0]));
}

#[test]
fn phase_failure_keeps_the_partial_record() {
    let mut m = tiny_manifest();
    m.repetitions = 1;
    let tmp = tempfile::tempdir().unwrap();
    let o = RunOptions {
        stop_after: Some(Phase::Pretrain),
        ..opts(tmp.path())
    };
    let out = harness::run_experiment(&m, &o).unwrap();
    let dir = &out.records[0].checkpoints[models::HALF];
    fs::write(Checkpoint::tensor_path(dir), b"broken").unwrap();
    let err = harness::run_experiment(
        &m,
        &RunOptions {
            resume: true,
            ..opts(tmp.path())
        },
    )
    .unwrap_err();
    assert_eq!(err.kind(), "phase");
    let recs = harness::load_records(&out.root).unwrap();
    let failure = recs[0].failure.as_ref().unwrap();
    assert_eq!(failure.phase, Phase::Profile);
    assert_eq!(recs[0].completed, vec![Phase::Split, Phase::Pretrain]);
}

#[test]
fn empty_attack_list_omits_roc_plots() {
    let mut m = tiny_manifest();
    m.repetitions = 1;
    m.attacks.kinds.clear();
    m.baseline = None;
    m.pptp.alpha_grid.clear();
    m.ablation.variants.clear();
    let tmp = tempfile::tempdir().unwrap();
    let out = harness::run_experiment(&m, &opts(tmp.path())).unwrap();
    let r = &out.records[0];
    assert!(r.is_complete());
    assert!(r.attacks.is_empty());
    let plots = out.root.join("0").join("plots");
    assert!(!walk(&plots).iter().any(|p| p.file_name().unwrap().to_string_lossy().starts_with("roc")));
}

#[test]
fn manifest_hash_ignores_key_order_and_output_dir() {
    let m = ExperimentManifest::desk();
    let text = m.to_toml().unwrap();
    let table: toml::Table = toml::from_str(&text).unwrap();
    let mut keys: Vec<&String> = table.keys().collect();
    keys.reverse();
    let mut reordered = String::new();
    let plain: Vec<_> = keys.iter().filter(|k| !table[**k].is_table()).collect();
    let nested: Vec<_> = keys.iter().filter(|k| table[**k].is_table()).collect();
    for k in plain {
        reordered.push_str(&format!("{k} = {}\n", table[*k]));
    }
    for k in nested {
        let mut t = toml::Table::new();
        t.insert((**k).clone(), table[*k].clone());
        reordered.push_str(&toml::to_string(&t).unwrap());
    }
    let back = ExperimentManifest::from_toml(&reordered).unwrap();
    assert_eq!(back.hash(), m.hash());
    let mut moved = m.clone();
    moved.output_dir = "elsewhere".into();
    assert_eq!(moved.hash(), m.hash());
    let mut changed = m.clone();
    changed.pptp.epochs += 1;
    assert_ne!(changed.hash(), m.hash());
    assert!(ExperimentManifest::from_toml(&text.replace("repetitions = 3", "repetitions = 0")).is_err());
}

#[test]
fn augmentation_sweep_emits_one_profiled_run_per_value() {
    let mut m = tiny_manifest();
    m.repetitions = 1;
    let tmp = tempfile::tempdir().unwrap();
    let rep = harness::factor_sweep(&m, Factor::Augmentation, &[0.0, 1.0], &opts(tmp.path())).unwrap();
    assert_eq!(rep.points.len(), 2);
    for p in &rep.points {
        assert_eq!(p.onsets.len(), 1);
        assert_eq!(p.test_accuracy.len(), 1);
        assert_eq!(p.stage_statistics[0].len(), 4);
    }
    assert_ne!(rep.points[0].manifest_hash, rep.points[1].manifest_hash);
}
