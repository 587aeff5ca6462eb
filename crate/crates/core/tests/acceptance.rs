//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any criterion fails.
//!
//! The desk-scale experiment (three seeds) is run once through the harness
//! and cached under `PPTP_ACCEPTANCE_DIR` (default: the cargo target tmp
//! directory), so later invocations reuse the stored run records.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{auc_oracle, distance_oracle, entropy_oracle, ks_oracle, mentropy_oracle, tiny_arch, tiny_pools};
use pptp_core::data::AugmentationPolicy;
use pptp_core::harness::{self, models, ExperimentManifest, ExperimentOutcome, Phase, RunOptions, RunRecord};
use pptp_core::mia::{entropy, modified_entropy, roc_auc, AttackKind};
use pptp_core::model_zoo::{build_model, partition_parameters, TapId};
use pptp_core::pptp::{bitwise_eq, changed_params, freeze, pptp_retrain, rewind, PptpConfig};
use pptp_core::profiler::{feature_distance, ks_statistic};
use pptp_core::training::{ObjectiveSpec, TrainConfig, Trainer};

struct Verdict {
    id: u8,
    pass: bool,
    detail: String,
}

fn verdict(id: u8, pass: bool, detail: String) -> Verdict {
    println!("[{}] criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, detail }
}

fn max_err(errs: impl Iterator<Item = f64>) -> f64 {
    errs.fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1000;
    let dist = max_err((0..n).map(|_| {
        let d = rng.gen_range(1..48);
        let p: Vec<f32> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        (feature_distance(&p, &q).unwrap() - distance_oracle(&p, &q)).abs()
    }));
    let simplex = |rng: &mut ChaCha8Rng| {
        let c = rng.gen_range(2..12);
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    let ent = max_err((0..n).map(|_| {
        let p = simplex(&mut rng);
        (entropy(&p) - entropy_oracle(&p)).abs()
    }));
    let ment = max_err((0..n).map(|_| {
        let p = simplex(&mut rng);
        let y = rng.gen_range(0..p.len());
        (modified_entropy(&p, y) - mentropy_oracle(&p, y)).abs()
    }));
    let ks = max_err((0..n).map(|_| {
        let a: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0..15) as f64).collect();
        let b: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0..15) as f64).collect();
        (ks_statistic(&a, &b).unwrap().statistic - ks_oracle(&a, &b)).abs()
    }));
    let auc = max_err((0..n).map(|_| {
        let len = rng.gen_range(2..40);
        let mut m: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        m[0] = true;
        m[1] = false;
        let s: Vec<f64> = (0..len).map(|_| rng.gen_range(0..8) as f64 / 2.0).collect();
        (roc_auc(&s, &m).unwrap().0 - auc_oracle(&s, &m)).abs()
    }));
    let hand = feature_distance(&[1.0; 4], &[0.0; 4]).unwrap() == 1.0
        && (entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12
        && modified_entropy(&[0.0, 1.0, 0.0, 0.0], 1).abs() < 1e-9
        && (ks_statistic(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap().statistic - 1.0 / 3.0).abs() < 1e-12;
    let worst = dist.max(ent).max(ment).max(ks).max(auc);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        worst <= 1e-9 && hand && secs < 5.0,
        format!("formula oracles, {n} random cases each: max |err| dist {dist:.1e} entropy {ent:.1e} mentropy {ment:.1e} ks {ks:.1e} auc {auc:.1e}; hand cases {hand}; {secs:.2}s (limit 5s)"),
    )
}

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let pools = tiny_pools(192, 32);
    let idx: Vec<usize> = (0..192).collect();
    let (mut pre, snap) = build_model(&tiny_arch(11)).unwrap();
    let mut cfg = TrainConfig::desk(2, 11, ObjectiveSpec::ce(), AugmentationPolicy::disabled());
    cfg.batch_size = 32;
    Trainer::new(cfg.clone()).run(&mut pre, &pools.train, &idx).unwrap();
    let pptp_cfg = |epochs: usize, defense: ObjectiveSpec| PptpConfig {
        defense: defense.clone(),
        epochs,
        trainer: TrainConfig {
            seed: 17,
            objective: defense,
            ..cfg.clone()
        },
    };

    let mut safe_ok = true;
    let mut rewind_ok = true;
    let mut zero_ok = true;
    for onset in 1..=pre.num_stages() + 1 {
        let part = partition_parameters(&pre, onset).unwrap();
        let out = pptp_retrain(&pre, &snap, &part, &pptp_cfg(1, ObjectiveSpec::relaxloss(0.5)), &pools.train, &idx).unwrap();
        let (a, b) = (pre.param_map(), out.model.param_map());
        safe_ok &= part.safe_names.iter().all(|n| bitwise_eq(&a[n], &b[n]));
        safe_ok &= changed_params(&pre, &out.model).is_subset(&part.risky_names);

        let mut m = pre.clone();
        freeze(&mut m, &part).unwrap();
        rewind(&mut m, &part, &snap).unwrap();
        let v = m.param_map();
        rewind_ok &= part.risky_names.iter().all(|n| bitwise_eq(&v[n], &snap.params[n]));

        let zero = pptp_retrain(&pre, &snap, &part, &pptp_cfg(0, ObjectiveSpec::ce()), &pools.train, &idx).unwrap();
        let z = zero.model.param_map();
        zero_ok &= z.keys().all(|k| bitwise_eq(&z[k], &v[k]));
        let (zb, mb) = (zero.model.buffer_map(), m.buffer_map());
        zero_ok &= zb.keys().all(|k| bitwise_eq(&zb[k], &mb[k]));
    }

    let c = pptp_cfg(2, ObjectiveSpec::ce());
    let part = partition_parameters(&pre, 1).unwrap();
    let via_pptp = pptp_retrain(&pre, &snap, &part, &c, &pools.train, &idx).unwrap().model;
    let (mut scratch, _) = build_model(&tiny_arch(11)).unwrap();
    Trainer::new(c.train_config()).run(&mut scratch, &pools.train, &idx).unwrap();
    let scratch_ok = changed_params(&via_pptp, &scratch).is_empty();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        3,
        safe_ok && rewind_ok && zero_ok && scratch_ok && secs < 60.0,
        format!("safe params bitwise kept {safe_ok}; risky == snapshot after rewind {rewind_ok}; E'=0 == freeze∘rewind {zero_ok}; onset 1 + CE == scratch {scratch_ok}; {secs:.1}s (limit 60s)"),
    )
}

fn desk() -> ExperimentOutcome {
    let dir = std::env::var_os("PPTP_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let opts = RunOptions {
        output_dir: Some(dir),
        resume: true,
        ..RunOptions::default()
    };
    harness::run_experiment(&ExperimentManifest::desk(), &opts).expect("desk experiment")
}

fn phase_secs(r: &RunRecord, phases: &[Phase]) -> f64 {
    phases.iter().filter_map(|p| r.phase_seconds.get(p)).sum()
}

fn mentropy_auc(r: &RunRecord, model: &str) -> f64 {
    r.attack(model, AttackKind::Mentropy).map_or(f64::NAN, |a| a.auc)
}

fn test_acc(r: &RunRecord, model: &str) -> f64 {
    r.evals.get(model).map_or(f64::NAN, |e| e.test_accuracy)
}

fn criterion_2(out: &ExperimentOutcome) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut secs = 0.0;
    for r in &out.records {
        let (all, half) = (&r.evals[models::PRETRAINED], &r.evals[models::HALF]);
        let d = r.disparity.as_ref().unwrap();
        let s1 = d.stage_verdict(1).unwrap();
        let s4 = d.stage_verdict(4).unwrap();
        let good = all.train_accuracy >= 0.99 && half.train_accuracy >= 0.99 && !s1.flagged && s4.flagged;
        ok &= good;
        secs += phase_secs(r, &[Phase::Split, Phase::Pretrain, Phase::Profile]);
        lines.push(format!(
            "seed {}: train acc {:.4}/{:.4}, stage1 D={:.3} p={:.1e} flagged={}, stage4 D={:.3} p={:.1e} flagged={}, onset {}",
            r.seed,
            all.train_accuracy,
            half.train_accuracy,
            s1.ks_statistic,
            s1.p_value,
            s1.flagged,
            s4.ks_statistic,
            s4.p_value,
            s4.flagged,
            d.risk.onset_stage
        ));
    }
    ok &= secs <= 1800.0;
    verdict(2, ok, format!("disparity localization, {:.0}s (limit 1800s): {}", secs, lines.join("; ")))
}

fn criterion_4(out: &ExperimentOutcome) -> Verdict {
    let mut lines = Vec::new();
    let mut passing = 0;
    let mut secs = 0.0;
    for r in &out.records {
        let base = mentropy_auc(r, models::PRETRAINED);
        let red = |id: &str| base - mentropy_auc(r, &models::ablation(id));
        let (llf, llr, risky) = (red("last-layer-finetune"), red("last-layer-rewind"), red("risky-layers-rewind"));
        let acc_gap = test_acc(r, models::PRETRAINED) - test_acc(r, &models::ablation("risky-layers-rewind"));
        let good = llf < 0.02 && llr < 0.02 && risky >= 0.05 && acc_gap.abs() <= 0.05;
        passing += good as usize;
        for id in [models::PPTP, &models::ablation("last-layer-finetune"), &models::ablation("last-layer-rewind")] {
            secs += r.costs.get(id).map_or(0.0, |c| c.wall_time_total);
        }
        secs += phase_secs(r, &[Phase::Attack]);
        lines.push(format!(
            "seed {}: CE AUC {base:.4}, reduction llf {llf:.4} llr {llr:.4} risky(onset {}) {risky:.4}, risky test acc gap {:.4} -> {}",
            r.seed,
            r.onset_stage.unwrap_or(0),
            acc_gap,
            if good { "ok" } else { "no" }
        ));
    }
    let ok = passing >= 2 && secs <= 3600.0;
    verdict(4, ok, format!("ablation ordering, {passing}/3 seeds hold (need 2), {secs:.0}s (limit 3600s): {}", lines.join("; ")))
}

fn criterion_5(out: &ExperimentOutcome) -> Verdict {
    let n = out.records.len() as f64;
    let mut lines = Vec::new();
    let (mut auc_gap, mut acc_gap, mut time_ratio, mut conv_ratio) = (0.0, 0.0, 0.0, 0.0);
    let mut secs = 0.0;
    for r in &out.records {
        let (p, b) = (models::PPTP_MATCHED, models::BASELINE);
        let ag = mentropy_auc(r, p) - mentropy_auc(r, b);
        let cg = test_acc(r, p) - test_acc(r, b);
        let (cp, cb) = (&r.costs[p], &r.costs[b]);
        let tr = cp.mean_epoch_time() / cb.mean_epoch_time();
        let er = cp.epochs_to_converge as f64 / cb.epochs_to_converge.max(1) as f64;
        auc_gap += ag / n;
        acc_gap += cg / n;
        time_ratio += tr / n;
        conv_ratio += er / n;
        secs += cb.wall_time_total + phase_secs(r, &[Phase::Pptp]);
        lines.push(format!(
            "seed {}: alpha {:?}, AUC {:.4} vs {:.4}, acc {:.4} vs {:.4}, epoch time {:.2}s vs {:.2}s, converge {} vs {} epochs",
            r.seed,
            r.matched_alpha,
            mentropy_auc(r, p),
            mentropy_auc(r, b),
            test_acc(r, p),
            test_acc(r, b),
            cp.mean_epoch_time(),
            cb.mean_epoch_time(),
            cp.epochs_to_converge,
            cb.epochs_to_converge
        ));
    }
    let ok = auc_gap.abs() <= 0.02 && acc_gap >= -0.01 && time_ratio <= 0.8 && conv_ratio <= 0.5 && secs <= 7200.0;
    verdict(
        5,
        ok,
        format!(
            "decoupling (seed means): AUC gap {auc_gap:+.4} (|.|<=0.02), acc gap {acc_gap:+.4} (>=-0.01), epoch-time ratio {time_ratio:.3} (<=0.8), convergence ratio {conv_ratio:.3} (<=0.5), {secs:.0}s (limit 7200s): {}",
            lines.join("; ")
        ),
    )
}

fn criterion_6(out: &ExperimentOutcome) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for r in &out.records {
        let (acc_m, acc_n) = r.cohort_accuracy[models::PRETRAINED];
        let results = &r.attacks[models::PRETRAINED];
        let corr = results.iter().find(|a| a.kind == AttackKind::Correctness).unwrap();
        let identity = (acc_m + 1.0 - acc_n) / 2.0;
        let exact = (corr.balanced_accuracy - identity).abs() < 1e-12;
        let min_auc = results.iter().filter(|a| a.kind != AttackKind::Correctness).map(|a| a.auc).fold(1.0, f64::min);
        let perm = r.permuted_attacks.iter().all(|a| (0.45..=0.55).contains(&a.auc));
        let (plo, phi) = r.permuted_attacks.iter().fold((1.0f64, 0.0f64), |(l, h), a| (l.min(a.auc), h.max(a.auc)));
        ok &= exact && min_auc > 0.55 && perm;
        lines.push(format!(
            "seed {}: member acc {acc_m:.4} non-member acc {acc_n:.4}, correctness BA {:.6} vs identity {identity:.6}, min statistic AUC {min_auc:.4}, permuted AUC in [{plo:.4}, {phi:.4}]",
            r.seed, corr.balanced_accuracy
        ));
    }
    verdict(6, ok, format!("attack sanity: {}", lines.join("; ")))
}

fn criterion_7(out: &ExperimentOutcome) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for r in &out.records {
        let p = r.probe.as_ref().unwrap();
        let (a1, a2) = (p.accuracy(1).unwrap(), p.accuracy(2).unwrap());
        let artifact = r.artifacts.get("probe").is_some_and(|f| f.exists()) && out.root.join(r.repetition.to_string()).join("plots/probe.svg").exists();
        ok &= a2 > a1 && artifact;
        let curve: Vec<String> = p.accuracies.iter().map(|(s, a)| format!("{}:{a:.3}", TapId::stage_end(*s))).collect();
        lines.push(format!("seed {}: {} artifact {artifact}", r.seed, curve.join(" ")));
    }
    verdict(7, ok, format!("probe curve stage2 > stage1: {}", lines.join("; ")))
}

fn main() {
    let mut verdicts = vec![criterion_1(), criterion_3()];
    let t = Instant::now();
    let out = desk();
    println!("desk experiment at {} ({} cached repetitions, {:.0}s)", out.root.display(), out.cache_hits, t.elapsed().as_secs_f64());
    verdicts.push(criterion_2(&out));
    verdicts.push(criterion_4(&out));
    verdicts.push(criterion_5(&out));
    verdicts.push(criterion_6(&out));
    verdicts.push(criterion_7(&out));
    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        println!("criterion {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<&Verdict> = verdicts.iter().filter(|v| !v.pass).collect();
    if !failed.is_empty() {
        for v in &failed {
            eprintln!("criterion {} failed: {}", v.id, v.detail);
        }
        std::process::exit(1);
    }
}
