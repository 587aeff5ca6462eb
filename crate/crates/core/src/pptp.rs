//! Freeze the privacy-safe stages, rewind the privacy-risky ones to their
//! initial values and retrain them under a defense objective.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model_zoo::{partition_parameters, InitSnapshot, Model, ParameterPartition};
use crate::nn::HasParams;
use crate::training::{ObjectiveSpec, TrainConfig, TrainReport, Trainer};

/// A partition together with the snapshot its risky half is rewound to.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezePlan {
    pub partition: ParameterPartition,
    pub rewind_target: InitSnapshot,
}

impl FreezePlan {
    /// Keeps only the snapshot entries for risky parameters and the
    /// normalization buffers that belong to them.
    pub fn new(partition: ParameterPartition, snapshot: &InitSnapshot) -> Result<Self> {
        let mut params = BTreeMap::new();
        for name in &partition.risky_names {
            let v = snapshot.params.get(name).ok_or_else(|| Error::SnapshotMissing(name.clone()))?;
            params.insert(name.clone(), v.clone());
        }
        let buffers = snapshot
            .buffers
            .iter()
            .filter(|(name, _)| buffer_is_risky(name, &partition.risky_names))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(FreezePlan {
            partition,
            rewind_target: InitSnapshot {
                seed: snapshot.seed,
                params,
                buffers,
            },
        })
    }
}

/// A running-statistics buffer follows the scale parameter of its layer.
fn buffer_is_risky(buffer: &str, risky: &BTreeSet<String>) -> bool {
    match buffer.rsplit_once('.') {
        Some((layer, _)) => risky.contains(&format!("{layer}.weight")),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PptpConfig {
    pub defense: ObjectiveSpec,
    /// Retraining epochs `E'`.
    pub epochs: usize,
    /// Optimizer, schedule, batch size, seed and augmentation. Its `epochs`
    /// and `objective` are replaced by the fields above.
    pub trainer: TrainConfig,
}

impl PptpConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            objective: self.defense.clone(),
            ..self.trainer.clone()
        }
    }
}

/// Marks the safe parameters frozen. Their values are not touched; frozen
/// batch-norm layers also stop updating their running statistics.
pub fn freeze(model: &mut Model, partition: &ParameterPartition) -> Result<()> {
    partition.validate(model)?;
    model.set_frozen(&partition.safe_names, true);
    Ok(())
}

/// Restores every risky parameter, and the running statistics of risky
/// normalization layers, to the snapshot.
pub fn rewind(model: &mut Model, partition: &ParameterPartition, snapshot: &InitSnapshot) -> Result<()> {
    partition.validate(model)?;
    let plan = FreezePlan::new(partition.clone(), snapshot)?;
    model.load_values(&plan.rewind_target.params, &plan.rewind_target.buffers)
}

/// Output of a retraining run.
#[derive(Debug, Clone)]
pub struct Retrained {
    pub model: Model,
    pub report: TrainReport,
    pub partition: ParameterPartition,
}

/// Optional extras for [`pptp_retrain_with`].
#[derive(Default)]
pub struct RetrainOptions<'a> {
    pub monitor: Option<(&'a Dataset, &'a [usize])>,
    pub reference: Option<(&'a Dataset, &'a [usize])>,
    /// Skip the rewind and continue from the pretrained values.
    pub fine_tune: bool,
}

/// Freeze, rewind, then train the risky region with the defense.
pub fn pptp_retrain(
    pretrained: &Model,
    snapshot: &InitSnapshot,
    partition: &ParameterPartition,
    config: &PptpConfig,
    data: &Dataset,
    indices: &[usize],
) -> Result<Retrained> {
    pptp_retrain_with(pretrained, snapshot, partition, config, data, indices, RetrainOptions::default())
}

pub fn pptp_retrain_with(
    pretrained: &Model,
    snapshot: &InitSnapshot,
    partition: &ParameterPartition,
    config: &PptpConfig,
    data: &Dataset,
    indices: &[usize],
    options: RetrainOptions<'_>,
) -> Result<Retrained> {
    let mut model = pretrained.clone();
    model.unfreeze_all();
    freeze(&mut model, partition)?;
    if !options.fine_tune {
        rewind(&mut model, partition, snapshot)?;
    }
    let mut trainer = Trainer::new(config.train_config());
    if let Some((d, i)) = options.monitor {
        trainer = trainer.monitor(d, i);
    }
    if let Some((d, i)) = options.reference {
        trainer = trainer.reference(d, i);
    }
    let report = trainer.run(&mut model, data, indices)?;
    Ok(Retrained {
        model,
        report,
        partition: partition.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// Head trained further from its pretrained values, everything else frozen.
    LastLayerFinetune,
    /// Head rewound and retrained, everything else frozen.
    LastLayerRewind,
    /// The profiler's risky stages rewound and retrained.
    RiskyLayersRewind,
    /// Every parameter rewound and retrained.
    FullScratch,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::LastLayerFinetune,
        AblationVariant::LastLayerRewind,
        AblationVariant::RiskyLayersRewind,
        AblationVariant::FullScratch,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            AblationVariant::LastLayerFinetune => "last-layer-finetune",
            AblationVariant::LastLayerRewind => "last-layer-rewind",
            AblationVariant::RiskyLayersRewind => "risky-layers-rewind",
            AblationVariant::FullScratch => "full-scratch",
        }
    }

    /// Onset stage used by the variant on a `K`-stage model.
    pub fn onset(&self, risky_onset: usize, num_stages: usize) -> usize {
        match self {
            AblationVariant::LastLayerFinetune | AblationVariant::LastLayerRewind => num_stages + 1,
            AblationVariant::RiskyLayersRewind => risky_onset,
            AblationVariant::FullScratch => 1,
        }
    }
}

/// Builds one ablation model from the shared pretrained checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn ablation_variant(
    pretrained: &Model,
    snapshot: &InitSnapshot,
    variant: AblationVariant,
    risky_onset: usize,
    config: &PptpConfig,
    data: &Dataset,
    indices: &[usize],
    mut options: RetrainOptions<'_>,
) -> Result<Retrained> {
    let partition = partition_parameters(pretrained, variant.onset(risky_onset, pretrained.num_stages()))?;
    options.fine_tune = variant == AblationVariant::LastLayerFinetune;
    pptp_retrain_with(pretrained, snapshot, &partition, config, data, indices, options)
}

/// Names whose values differ between two models of the same architecture.
pub fn changed_params(a: &Model, b: &Model) -> BTreeSet<String> {
    let bm = b.param_map();
    let mut out = BTreeSet::new();
    a.visit_params(&mut |p| {
        if bm.get(&p.name).is_none_or(|v| !bitwise_eq(v, &p.value)) {
            out.insert(p.name.clone());
        }
    });
    out
}

pub fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
