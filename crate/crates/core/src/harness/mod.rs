//! Experiment orchestration: manifests, the phased pipeline, repetitions,
//! factor sweeps, cost metering and report emission.
//!
//! Output layout: `<output_dir>/<manifest-hash>/<repetition>/` holds
//! `checkpoints/`, `records/` and `plots/`; the hash directory also keeps
//! the manifest, the aggregate record and the aggregate report.

pub mod cost;
pub mod manifest;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cost::{epochs_to_converge, measure_cost, CostRecord};
pub use manifest::{ExperimentManifest, Factor};

use crate::data::{load_dataset, make_split, DataPools, SplitPlan};
use crate::error::{Error, Result};
use crate::mia::{collect_scores_from, permute_membership, run_attacks, write_roc, write_score_dump, AttackKind, AttackResult};
use crate::model_zoo::{build_model, partition_parameters, Checkpoint, InitSnapshot, Model};
use crate::pptp::{ablation_variant, pptp_retrain_with, AblationVariant, PptpConfig, RetrainOptions};
use crate::probe::{probe_curve_on, ProbeReport};
use crate::profiler::{distance_distributions, read_distance_dump, train_pair_with, write_distance_dump, DisparityReport};
use crate::training::{evaluate, ObjectiveSpec, TrainReport, Trainer};

/// Pipeline phases in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Split,
    Pretrain,
    Profile,
    Probe,
    Baseline,
    Pptp,
    Ablation,
    Comparison,
    Attack,
    Report,
}

impl Phase {
    pub const ALL: [Phase; 10] = [
        Phase::Split,
        Phase::Pretrain,
        Phase::Profile,
        Phase::Probe,
        Phase::Baseline,
        Phase::Pptp,
        Phase::Ablation,
        Phase::Comparison,
        Phase::Attack,
        Phase::Report,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Phase::Split => "split",
            Phase::Pretrain => "pretrain",
            Phase::Profile => "profile",
            Phase::Probe => "probe",
            Phase::Baseline => "baseline",
            Phase::Pptp => "pptp",
            Phase::Ablation => "ablation",
            Phase::Comparison => "comparison",
            Phase::Attack => "attack",
            Phase::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.id() == s)
    }
}

/// Model identifiers used as keys throughout the run record.
pub mod models {
    pub const PRETRAINED: &str = "pretrained";
    pub const HALF: &str = "half";
    pub const PPTP: &str = "pptp";
    pub const BASELINE: &str = "baseline";
    /// PPTP at the grid strength whose attack AUC is closest to the baseline's.
    pub const PPTP_MATCHED: &str = "pptp-matched";

    pub fn ablation(id: &str) -> String {
        format!("ablation-{id}")
    }
}

/// Accuracy of one model on its training indices and the test indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

/// One alpha candidate of the PPTP defense-strength search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCandidate {
    pub alpha: f64,
    pub auc: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest_hash: String,
    pub repetition: usize,
    pub seed: u64,
    pub completed: Vec<Phase>,
    /// Wall-clock seconds spent in each completed phase.
    pub phase_seconds: BTreeMap<Phase, f64>,
    pub split_plan: Option<PathBuf>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub train_reports: BTreeMap<String, TrainReport>,
    pub costs: BTreeMap<String, CostRecord>,
    pub evals: BTreeMap<String, ModelEval>,
    pub disparity: Option<DisparityReport>,
    pub comparison: Option<DisparityReport>,
    pub probe: Option<ProbeReport>,
    pub onset_stage: Option<usize>,
    pub pptp_alpha: Option<f64>,
    pub matched_alpha: Option<f64>,
    pub alpha_search: Vec<AlphaCandidate>,
    pub attacks: BTreeMap<String, Vec<AttackResult>>,
    /// Attacks on the pretrained model's scores with permuted membership.
    pub permuted_attacks: Vec<AttackResult>,
    /// `(accuracy on members, accuracy on non-members)` per attacked model.
    pub cohort_accuracy: BTreeMap<String, (f64, f64)>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub failure: Option<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub phase: Phase,
    pub kind: String,
    pub message: String,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.completed.contains(&Phase::Report)
    }

    pub fn attack(&self, model: &str, kind: AttackKind) -> Option<&AttackResult> {
        self.attacks.get(model)?.iter().find(|r| r.kind == kind)
    }

    /// Every referenced file exists.
    pub fn artifacts_exist(&self) -> bool {
        self.split_plan.iter().all(|p| p.exists())
            && self.checkpoints.values().all(|p| Checkpoint::exists(p))
            && self.artifacts.values().all(|p| p.exists())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Continue partially completed repetitions from their last phase.
    pub resume: bool,
    /// Parallel repetitions.
    pub workers: usize,
    pub seed_offset: u64,
    /// Stop after this phase (inclusive).
    pub stop_after: Option<Phase>,
    /// Overrides `manifest.output_dir`.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            resume: true,
            workers: 1,
            seed_offset: 0,
            stop_after: None,
            output_dir: None,
        }
    }
}

/// Where a manifest's runs live.
pub fn run_root(manifest: &ExperimentManifest, options: &RunOptions) -> PathBuf {
    options
        .output_dir
        .clone()
        .unwrap_or_else(|| manifest.output_dir.clone())
        .join(manifest.short_hash())
}

const RECORD_FILE: &str = "run.json";

/// Outcome of a full experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub root: PathBuf,
    pub records: Vec<RunRecord>,
    pub aggregate: report::Aggregate,
    /// Repetitions served entirely from disk.
    pub cache_hits: usize,
}

/// Runs every repetition of `manifest` and aggregates them.
pub fn run_experiment(manifest: &ExperimentManifest, options: &RunOptions) -> Result<ExperimentOutcome> {
    manifest.validate()?;
    let root = run_root(manifest, options);
    fs::create_dir_all(&root)?;
    fs::write(root.join("manifest.toml"), manifest.to_toml()?)?;
    let pools = load_dataset(&manifest.dataset)?;
    let reps: Vec<usize> = (0..manifest.repetitions).collect();
    let results: Mutex<BTreeMap<usize, Result<(RunRecord, bool)>>> = Mutex::new(BTreeMap::new());
    let queue = Mutex::new(reps.into_iter());
    std::thread::scope(|s| {
        for _ in 0..options.workers.max(1).min(manifest.repetitions) {
            s.spawn(|| loop {
                let Some(rep) = queue.lock().expect("queue").next() else {
                    break;
                };
                let r = run_repetition(manifest, &pools, &root, rep, options);
                results.lock().expect("results").insert(rep, r);
            });
        }
    });
    let mut records = Vec::new();
    let mut cache_hits = 0;
    for (_, r) in results.into_inner().expect("results") {
        let (rec, hit) = r?;
        cache_hits += hit as usize;
        records.push(rec);
    }
    let aggregate = report::aggregate(&records);
    fs::write(root.join("aggregate.json"), serde_json::to_string_pretty(&aggregate)?)?;
    if records.iter().all(|r| r.is_complete()) {
        report::render_report(&records, &aggregate, &root.join("report"))?;
    }
    Ok(ExperimentOutcome {
        root,
        records,
        aggregate,
        cache_hits,
    })
}

fn load_record(path: &Path) -> Option<RunRecord> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// Runs (or resumes) one repetition. The flag is true for a cache hit.
pub fn run_repetition(
    manifest: &ExperimentManifest,
    pools: &DataPools,
    root: &Path,
    rep: usize,
    options: &RunOptions,
) -> Result<(RunRecord, bool)> {
    let seed = manifest.repetition_seed(rep, options.seed_offset);
    let m = manifest.seeded(seed);
    let dir = root.join(rep.to_string());
    let record_path = dir.join("records").join(RECORD_FILE);
    let hash = manifest.hash();
    let previous = load_record(&record_path).filter(|r| r.manifest_hash == hash && r.seed == seed && r.artifacts_exist());
    if let Some(r) = &previous {
        if r.is_complete() && r.failure.is_none() {
            return Ok((r.clone(), true));
        }
    }
    let record = match previous {
        Some(mut r) if options.resume => {
            r.failure = None;
            r
        }
        _ => RunRecord {
            manifest_hash: hash,
            repetition: rep,
            seed,
            ..Default::default()
        },
    };
    for sub in ["checkpoints", "records", "plots"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut run = Run {
        m,
        pools,
        dir,
        record,
        loaded: BTreeMap::new(),
    };
    for phase in Phase::ALL {
        if run.record.completed.contains(&phase) {
            continue;
        }
        log::info!("repetition {rep}: phase {}", phase.id());
        let started = Instant::now();
        if let Err(e) = run.execute(phase) {
            run.record.failure = Some(FailureRecord {
                phase,
                kind: e.kind().into(),
                message: e.to_string(),
            });
            run.save()?;
            return Err(Error::Phase {
                phase: phase.id().into(),
                source: Box::new(e),
            });
        }
        run.record.completed.push(phase);
        run.record.phase_seconds.insert(phase, started.elapsed().as_secs_f64());
        run.save()?;
        if options.stop_after == Some(phase) {
            break;
        }
    }
    Ok((run.record, false))
}

struct Run<'a> {
    m: ExperimentManifest,
    pools: &'a DataPools,
    dir: PathBuf,
    record: RunRecord,
    loaded: BTreeMap<String, (Model, InitSnapshot)>,
}

impl Run<'_> {
    fn save(&self) -> Result<()> {
        let path = self.dir.join("records").join(RECORD_FILE);
        fs::write(path, serde_json::to_string_pretty(&self.record)?)?;
        Ok(())
    }

    fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.dir.join(sub).join(name)
    }

    fn split(&self) -> Result<SplitPlan> {
        let p = self.record.split_plan.as_ref().ok_or(Error::InvalidConfig("split phase has not run".into()))?;
        SplitPlan::load(p)
    }

    /// Evaluation-pool indices reserved for defenses.
    fn reference(&self) -> Vec<usize> {
        (0..self.m.split.reference_size).collect()
    }

    fn model(&mut self, id: &str) -> Result<(Model, InitSnapshot)> {
        if let Some(m) = self.loaded.get(id) {
            return Ok(m.clone());
        }
        let path = self
            .record
            .checkpoints
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("no checkpoint for model `{id}`")))?;
        let (model, snap, _) = Checkpoint::load(path)?;
        self.loaded.insert(id.to_string(), (model.clone(), snap.clone()));
        Ok((model, snap))
    }

    fn store(&mut self, id: &str, model: &Model, snap: &InitSnapshot, report: Option<&TrainReport>, objective: &str) -> Result<()> {
        let path = self.path("checkpoints", id);
        let epochs = report.map_or(0, |r| r.epochs.len());
        Checkpoint::save(&path, model, snap, epochs, objective, self.record.split_plan.as_deref())?;
        self.record.checkpoints.insert(id.to_string(), path);
        if let Some(r) = report {
            let log = self.path("records", &format!("train_{id}.jsonl"));
            let mut text = String::new();
            for e in &r.epochs {
                text.push_str(&serde_json::to_string(e)?);
                text.push('\n');
            }
            fs::write(&log, text)?;
            self.record.artifacts.insert(format!("train_log.{id}"), log);
            self.record.costs.insert(id.to_string(), CostRecord::from_report(r));
            self.record.train_reports.insert(id.to_string(), r.clone());
        }
        self.loaded.insert(id.to_string(), (model.clone(), snap.clone()));
        Ok(())
    }

    fn eval(&mut self, id: &str, model: &mut Model, train: &[usize]) -> Result<ModelEval> {
        let split = self.split()?;
        let tr = evaluate(model, &self.pools.train, train)?;
        let te = evaluate(model, &self.pools.eval, &split.test)?;
        let e = ModelEval {
            train_accuracy: tr.accuracy,
            test_accuracy: te.accuracy,
            test_loss: te.mean_loss,
        };
        self.record.evals.insert(id.to_string(), e);
        Ok(e)
    }

    fn monitor(&self, split: &SplitPlan) -> Vec<usize> {
        split.test.iter().take(self.m.split.monitor_size).copied().collect()
    }

    fn execute(&mut self, phase: Phase) -> Result<()> {
        match phase {
            Phase::Split => self.phase_split(),
            Phase::Pretrain => self.phase_pretrain(),
            Phase::Profile => self.phase_profile(),
            Phase::Probe => self.phase_probe(),
            Phase::Baseline => self.phase_baseline(),
            Phase::Pptp => self.phase_pptp(),
            Phase::Ablation => self.phase_ablation(),
            Phase::Comparison => self.phase_comparison(),
            Phase::Attack => self.phase_attack(),
            Phase::Report => report::render_run(&self.record, &self.dir.join("plots")),
        }
    }

    fn phase_split(&mut self) -> Result<()> {
        let mut plan = make_split(self.pools.train.len(), self.m.split.seed)?;
        plan.test = (self.m.split.reference_size..self.pools.eval.len()).collect();
        let path = self.path("records", "split.toml");
        plan.save(&path)?;
        self.record.split_plan = Some(path);
        Ok(())
    }

    fn phase_pretrain(&mut self) -> Result<()> {
        let split = self.split()?;
        let monitor = self.monitor(&split);
        let mut seen_h2 = false;
        let h2: BTreeSet<usize> = split.h2.iter().copied().collect();
        let pair = train_pair_with(
            &self.m.arch,
            &self.pools.train,
            &split,
            &self.m.pretrain,
            Some((&self.pools.eval, &monitor)),
            &mut |batch| seen_h2 |= batch.iter().any(|i| h2.contains(i)),
        )?;
        if seen_h2 {
            return Err(Error::InvalidSplit("M_h1 consumed an h2 index".into()));
        }
        let (mut all, mut h1) = (pair.all, pair.h1);
        self.store(models::PRETRAINED, &all, &pair.snapshot, Some(&pair.report_all), "ce")?;
        self.store(models::HALF, &h1, &pair.snapshot, Some(&pair.report_h1), "ce")?;
        self.eval(models::PRETRAINED, &mut all, &split.all())?;
        self.eval(models::HALF, &mut h1, &split.h1)?;
        Ok(())
    }

    fn phase_profile(&mut self) -> Result<()> {
        let split = self.split()?;
        let (mut all, _) = self.model(models::PRETRAINED)?;
        let (mut h1, _) = self.model(models::HALF)?;
        let samples = distance_distributions(&mut all, &mut h1, &self.pools.train, &split, self.m.profiler.taps)?;
        let dump = self.path("records", "distances.tsv");
        write_distance_dump(&dump, &samples)?;
        let report = DisparityReport::build(&samples, self.m.profiler.rule, self.m.arch.num_stages())?;
        let path = self.path("records", "disparity.json");
        report.save(&path)?;
        self.record.artifacts.insert("distances".into(), dump);
        self.record.artifacts.insert("disparity".into(), path);
        self.record.onset_stage = Some(self.m.pptp.onset.unwrap_or(report.risk.onset_stage));
        self.record.disparity = Some(report);
        Ok(())
    }

    fn phase_probe(&mut self) -> Result<()> {
        if !self.m.probe.enabled {
            return Ok(());
        }
        let split = self.split()?;
        let (mut all, _) = self.model(models::PRETRAINED)?;
        let report = probe_curve_on(
            &mut all,
            &self.pools.train,
            &split.all(),
            &self.pools.eval,
            &split.test,
            self.m.split.seed,
            &self.m.probe.config,
        )?;
        let path = self.path("records", "probe.tsv");
        report.save(&path)?;
        self.record.artifacts.insert("probe".into(), path);
        self.record.probe = Some(report);
        Ok(())
    }

    fn pptp_config(&self, defense: ObjectiveSpec, epochs: usize) -> PptpConfig {
        PptpConfig {
            defense,
            epochs,
            trainer: self.m.pptp.trainer.clone(),
        }
    }

    fn phase_baseline(&mut self) -> Result<()> {
        let Some(b) = self.m.baseline.clone() else {
            return Ok(());
        };
        let split = self.split()?;
        let monitor = self.monitor(&split);
        let reference = self.reference();
        let defense = b.defense.unwrap_or_else(|| self.m.pptp.defense.clone());
        let cfg = PptpConfig {
            defense: defense.clone(),
            epochs: b.epochs,
            trainer: b.trainer.clone().unwrap_or_else(|| self.m.pptp.trainer.clone()),
        }
        .train_config();
        let (mut model, snap) = build_model(&self.m.arch)?;
        let all = split.all();
        let report = Trainer::new(cfg)
            .monitor(&self.pools.eval, &monitor)
            .reference(&self.pools.eval, &reference)
            .run(&mut model, &self.pools.train, &all)?;
        self.store(models::BASELINE, &model, &snap, Some(&report), &defense.id())?;
        self.eval(models::BASELINE, &mut model, &all)?;
        Ok(())
    }

    fn onset(&self) -> Result<usize> {
        self.record
            .onset_stage
            .or(self.m.pptp.onset)
            .ok_or(Error::InvalidConfig("no onset stage: run the profile phase or set pptp.onset".into()))
    }

    fn retrain(&mut self, defense: ObjectiveSpec, variant: Option<AblationVariant>) -> Result<(Model, TrainReport)> {
        let split = self.split()?;
        let monitor = self.monitor(&split);
        let reference = self.reference();
        let onset = self.onset()?;
        let (pre, snap) = self.model(models::PRETRAINED)?;
        let cfg = self.pptp_config(defense, self.m.pptp.epochs);
        let options = RetrainOptions {
            monitor: Some((&self.pools.eval, &monitor)),
            reference: Some((&self.pools.eval, &reference)),
            fine_tune: false,
        };
        let all = split.all();
        let out = match variant {
            None => {
                let partition = partition_parameters(&pre, onset)?;
                pptp_retrain_with(&pre, &snap, &partition, &cfg, &self.pools.train, &all, options)?
            }
            Some(v) => ablation_variant(&pre, &snap, v, onset, &cfg, &self.pools.train, &all, options)?,
        };
        Ok((out.model, out.report))
    }

    /// Attack scores for `model` on the fixed member / non-member sets.
    fn attack_model(&mut self, model: &mut Model) -> Result<(Vec<AttackResult>, Vec<crate::mia::ScoreVector>)> {
        let (members, nonmembers) = self.attack_sets()?;
        let scores = collect_scores_from(model, &self.pools.train, &members, &self.pools.eval, &nonmembers)?;
        let results = run_attacks(&scores, &self.m.attacks.kinds, &self.m.attacks.policy, &self.m.attacks.nn)?;
        Ok((results, scores))
    }

    fn attack_sets(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let split = self.split()?;
        let mut members = split.all();
        let mut non = split.test.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.m.attacks.policy.seed ^ 0x5EED);
        members.shuffle(&mut rng);
        non.shuffle(&mut rng);
        let n = self.m.attacks.per_side.min(members.len()).min(non.len());
        members.truncate(n);
        non.truncate(n);
        members.sort_unstable();
        non.sort_unstable();
        Ok((members, non))
    }

    fn phase_pptp(&mut self) -> Result<()> {
        if !self.m.pptp.enabled {
            return Ok(());
        }
        let all = self.split()?.all();
        let defense = self.m.pptp.defense.clone();
        let snap = self.model(models::PRETRAINED)?.1;
        if !self.record.checkpoints.contains_key(models::PPTP) {
            let (mut model, report) = self.retrain(defense.clone(), None)?;
            let partition = partition_parameters(&model, self.onset()?)?;
            let ppath = self.path("records", "partition.json");
            fs::write(&ppath, serde_json::to_string_pretty(&partition)?)?;
            self.record.artifacts.insert("partition".into(), ppath);
            self.record.pptp_alpha = Some(defense.alpha);
            self.store(models::PPTP, &model, &snap, Some(&report), &defense.id())?;
            self.eval(models::PPTP, &mut model, &all)?;
            self.save()?;
        }
        if self.m.pptp.alpha_grid.is_empty() || !self.record.checkpoints.contains_key(models::BASELINE) {
            return Ok(());
        }
        let kind = self.m.pptp.matching_attack;
        let (mut base, _) = self.model(models::BASELINE)?;
        let (res, _) = self.attack_model(&mut base)?;
        let target = res.iter().find(|r| r.kind == kind).map_or(0.5, |r| r.auc);
        let test = self.split()?.test;
        self.record.alpha_search.clear();
        let tol = self.m.pptp.match_tolerance;
        let rank = |gap: f64, acc: f64| if gap <= tol { (0, -acc) } else { (1, gap) };
        let mut best: Option<((i32, f64), f64, Model, Option<TrainReport>)> = None;
        for alpha in self.m.pptp.alpha_grid.clone() {
            let (mut m, r) = if alpha == defense.alpha {
                (self.model(models::PPTP)?.0, None)
            } else {
                let (m, r) = self.retrain(ObjectiveSpec { alpha, ..defense.clone() }, None)?;
                (m, Some(r))
            };
            let (res, _) = self.attack_model(&mut m)?;
            let auc = res.iter().find(|x| x.kind == kind).map_or(0.5, |x| x.auc);
            let test_accuracy = evaluate(&mut m, &self.pools.eval, &test)?.accuracy;
            self.record.alpha_search.push(AlphaCandidate { alpha, auc, test_accuracy });
            let key = rank((auc - target).abs(), test_accuracy);
            if best.as_ref().is_none_or(|b| key < b.0) {
                best = Some((key, alpha, m, r));
            }
        }
        let (_, alpha, mut model, report) = best.ok_or(Error::InvalidConfig("empty alpha grid".into()))?;
        self.record.matched_alpha = Some(alpha);
        match report {
            Some(r) => {
                let objective = ObjectiveSpec { alpha, ..defense };
                self.store(models::PPTP_MATCHED, &model, &snap, Some(&r), &objective.id())?;
                self.eval(models::PPTP_MATCHED, &mut model, &all)?;
            }
            None => self.alias(models::PPTP_MATCHED, models::PPTP)?,
        }
        Ok(())
    }

    /// Registers `id` as another name for an already stored model.
    fn alias(&mut self, id: &str, src: &str) -> Result<()> {
        let (m, s) = self.model(src)?;
        self.record.checkpoints.insert(id.to_string(), self.record.checkpoints[src].clone());
        for map in [&mut self.record.evals] {
            if let Some(e) = map.get(src).copied() {
                map.insert(id.to_string(), e);
            }
        }
        if let Some(c) = self.record.costs.get(src).cloned() {
            self.record.costs.insert(id.to_string(), c);
        }
        if let Some(r) = self.record.train_reports.get(src).cloned() {
            self.record.train_reports.insert(id.to_string(), r);
        }
        self.loaded.insert(id.to_string(), (m, s));
        Ok(())
    }

    fn phase_ablation(&mut self) -> Result<()> {
        let all = self.split()?.all();
        let defense = self.m.pptp.defense.clone();
        for v in self.m.ablation.variants.clone() {
            let id = models::ablation(v.id());
            if self.record.checkpoints.contains_key(&id) {
                continue;
            }
            let reuse = match v {
                AblationVariant::RiskyLayersRewind => Some(models::PPTP),
                AblationVariant::FullScratch => Some(models::BASELINE),
                _ => None,
            }
            .filter(|m| self.record.checkpoints.contains_key(*m));
            let mut model = match reuse {
                Some(src) => {
                    self.alias(&id, src)?;
                    self.model(&id)?.0
                }
                None => {
                    let (m, r) = self.retrain(defense.clone(), Some(v))?;
                    let snap = self.model(models::PRETRAINED)?.1;
                    self.store(&id, &m, &snap, Some(&r), &defense.id())?;
                    m
                }
            };
            if !self.record.evals.contains_key(&id) {
                self.eval(&id, &mut model, &all)?;
            }
            self.save()?;
        }
        Ok(())
    }

    fn phase_comparison(&mut self) -> Result<()> {
        if !self.record.checkpoints.contains_key(models::BASELINE) {
            return Ok(());
        }
        let split = self.split()?;
        let (mut base, _) = self.model(models::BASELINE)?;
        let (mut h1, _) = self.model(models::HALF)?;
        let samples = distance_distributions(&mut base, &mut h1, &self.pools.train, &split, self.m.profiler.taps)?;
        let dump = self.path("records", "comparison_distances.tsv");
        write_distance_dump(&dump, &samples)?;
        self.record.artifacts.insert("comparison_distances".into(), dump);
        self.record.comparison = Some(DisparityReport::build(&samples, self.m.profiler.rule, self.m.arch.num_stages())?);
        Ok(())
    }

    fn phase_attack(&mut self) -> Result<()> {
        if self.m.attacks.kinds.is_empty() {
            return Ok(());
        }
        let ids: Vec<String> = self
            .record
            .checkpoints
            .keys()
            .filter(|k| k.as_str() != models::HALF)
            .cloned()
            .collect();
        let mut done: BTreeMap<PathBuf, String> = BTreeMap::new();
        for id in ids {
            let path = self.record.checkpoints[&id].clone();
            if let Some(src) = done.get(&path).cloned() {
                let results = self.record.attacks[&src].clone();
                let cohort = self.record.cohort_accuracy[&src];
                self.record.cohort_accuracy.insert(id.clone(), cohort);
                self.record.attacks.insert(id, results);
                continue;
            }
            done.insert(path, id.clone());
            let (mut model, _) = self.model(&id)?;
            let (results, scores) = self.attack_model(&mut model)?;
            self.record.cohort_accuracy.insert(id.clone(), crate::mia::cohort_accuracies(&scores));
            let dump = self.path("records", &format!("scores_{id}.tsv"));
            write_score_dump(&dump, &scores)?;
            self.record.artifacts.insert(format!("scores.{id}"), dump);
            let mut results = results;
            for r in &mut results {
                let p = self.path("records", &format!("roc_{id}_{}.tsv", r.kind.id()));
                write_roc(&p, r)?;
                self.record.artifacts.insert(format!("roc.{id}.{}", r.kind.id()), p);
                r.roc.clear();
            }
            if id == models::PRETRAINED && self.m.attacks.permutation_check {
                let permuted = permute_membership(&scores, self.m.attacks.policy.seed ^ 0xABCD);
                let mut p = run_attacks(&permuted, &self.m.attacks.kinds, &self.m.attacks.policy, &self.m.attacks.nn)?;
                p.iter_mut().for_each(|r| r.roc.clear());
                self.record.permuted_attacks = p;
            }
            self.record.attacks.insert(id, results);
        }
        let path = self.path("records", "attacks.json");
        fs::write(&path, serde_json::to_string_pretty(&self.record.attacks)?)?;
        self.record.artifacts.insert("attacks".into(), path);
        Ok(())
    }
}

/// Result of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub manifest_hash: String,
    pub onsets: Vec<usize>,
    pub test_accuracy: Vec<f64>,
    pub stage_statistics: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub factor: Factor,
    pub points: Vec<SweepPoint>,
}

/// One profiled experiment (split, pretrain, profile, probe) per factor
/// value.
pub fn factor_sweep(manifest: &ExperimentManifest, factor: Factor, values: &[f64], options: &RunOptions) -> Result<SweepReport> {
    let mut points = Vec::new();
    let mut records = Vec::new();
    for &v in values {
        let m = manifest.with_factor(factor, v)?;
        let opts = RunOptions {
            stop_after: Some(Phase::Probe),
            ..options.clone()
        };
        let out = run_experiment(&m, &opts)?;
        points.push(SweepPoint {
            value: v,
            manifest_hash: m.short_hash(),
            onsets: out.records.iter().filter_map(|r| r.onset_stage).collect(),
            test_accuracy: out
                .records
                .iter()
                .filter_map(|r| r.evals.get(models::PRETRAINED).map(|e| e.test_accuracy))
                .collect(),
            stage_statistics: out
                .records
                .iter()
                .filter_map(|r| r.disparity.as_ref())
                .map(|d| d.verdicts.iter().filter(|v| v.tap.is_stage_end()).map(|v| v.ks_statistic).collect())
                .collect(),
        });
        records.push((v, out.records));
    }
    let report = SweepReport { factor, points };
    let root = options.output_dir.clone().unwrap_or_else(|| manifest.output_dir.clone()).join(format!("sweep-{}-{}", factor.id(), manifest.short_hash()));
    fs::create_dir_all(&root)?;
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    report::render_sweep(&report, &records, &root)?;
    Ok(report)
}

/// Loads the distance dump of a completed profile phase.
pub fn load_distances(record: &RunRecord, key: &str) -> Result<Vec<crate::profiler::DistanceSample>> {
    let p = record
        .artifacts
        .get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("record has no `{key}` artifact")))?;
    read_distance_dump(p)
}

/// Reads every repetition record under a manifest's run root, ordered by
/// repetition.
pub fn load_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root)? {
        let p = entry?.path().join("records").join(RECORD_FILE);
        if p.exists() {
            out.push(serde_json::from_str::<RunRecord>(&fs::read_to_string(&p)?)?);
        }
    }
    out.sort_by_key(|r| r.repetition);
    Ok(out)
}
