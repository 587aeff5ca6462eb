//! Declarative experiment manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationPolicy, DatasetSpec};
use crate::error::{Error, Result};
use crate::mia::{AttackKind, NnAttackConfig, ThresholdPolicy};
use crate::model_zoo::{ArchitectureSpec, TapSelection};
use crate::pptp::AblationVariant;
use crate::probe::ProbeConfig;
use crate::profiler::DecisionRule;
use crate::training::{ObjectiveKind, ObjectiveSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub arch: ArchitectureSpec,
    pub split: SplitSection,
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub profiler: ProfilerSection,
    #[serde(default)]
    pub probe: ProbeSection,
    pub pptp: PptpSection,
    /// From-scratch training with the PPTP defense, for comparison.
    #[serde(default)]
    pub baseline: Option<BaselineSection>,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub attacks: AttackSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_repetitions() -> usize {
    3
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    /// Leading evaluation-pool indices reserved as non-member reference data
    /// for defenses; the rest are test indices.
    #[serde(default = "default_reference")]
    pub reference_size: usize,
    /// Test indices evaluated after every training epoch.
    #[serde(default = "default_monitor")]
    pub monitor_size: usize,
}

fn default_reference() -> usize {
    1000
}

fn default_monitor() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilerSection {
    #[serde(default)]
    pub rule: DecisionRule,
    #[serde(default = "default_taps")]
    pub taps: TapSelection,
}

fn default_taps() -> TapSelection {
    TapSelection::AllBlocks
}

impl Default for ProfilerSection {
    fn default() -> Self {
        ProfilerSection {
            rule: DecisionRule::default(),
            taps: default_taps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub config: ProbeConfig,
}

fn yes() -> bool {
    true
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            enabled: true,
            config: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PptpSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Manual onset stage; the profiler's onset when absent.
    #[serde(default)]
    pub onset: Option<usize>,
    pub defense: ObjectiveSpec,
    pub epochs: usize,
    pub trainer: TrainConfig,
    /// Candidate defense strengths. When non-empty and a baseline exists,
    /// the most accurate candidate whose matching-attack AUC lies within
    /// `match_tolerance` of the baseline's is kept, or the closest one when
    /// none does.
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_matching")]
    pub matching_attack: AttackKind,
    #[serde(default = "default_tolerance")]
    pub match_tolerance: f64,
}

fn default_tolerance() -> f64 {
    0.02
}

fn default_matching() -> AttackKind {
    AttackKind::Mentropy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub epochs: usize,
    /// Defaults to the PPTP defense.
    #[serde(default)]
    pub defense: Option<ObjectiveSpec>,
    /// Defaults to the PPTP trainer.
    #[serde(default)]
    pub trainer: Option<TrainConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default)]
    pub variants: Vec<AblationVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "all_attacks")]
    pub kinds: Vec<AttackKind>,
    #[serde(default)]
    pub policy: ThresholdPolicy,
    #[serde(default)]
    pub nn: NnAttackConfig,
    /// Evaluation samples per side (members and non-members).
    #[serde(default = "default_per_side")]
    pub per_side: usize,
    /// Also attack the pretrained model with permuted membership labels.
    #[serde(default = "yes")]
    pub permutation_check: bool,
}

fn all_attacks() -> Vec<AttackKind> {
    AttackKind::ALL.to_vec()
}

fn default_per_side() -> usize {
    2500
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kinds: all_attacks(),
            policy: ThresholdPolicy::default(),
            nn: NnAttackConfig::default(),
            per_side: default_per_side(),
            permutation_check: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Augmentation,
    FeatureMapSize,
    ChannelSize,
    Depth,
}

impl Factor {
    pub fn id(&self) -> &'static str {
        match self {
            Factor::Augmentation => "augmentation",
            Factor::FeatureMapSize => "feature_map_size",
            Factor::ChannelSize => "channel_size",
            Factor::Depth => "depth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Factor::Augmentation, Factor::FeatureMapSize, Factor::ChannelSize, Factor::Depth]
            .into_iter()
            .find(|f| f.id() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub factor: Factor,
    /// Augmentation: 0 = off, 1 = on. Feature map: scale of the final stage.
    /// Channels: width multiplier. Depth: blocks per stage.
    pub values: Vec<f64>,
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: ExperimentManifest = toml::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingSource(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 1 {
            return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
        }
        if self.dataset.input_shape != self.arch.input_shape || self.dataset.num_classes != self.arch.num_classes {
            return Err(Error::InvalidConfig("dataset and architecture disagree on shape or classes".into()));
        }
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.pptp.defense.validate()?;
        self.pptp.trainer.validate()?;
        if let Some(b) = &self.baseline {
            if let Some(t) = &b.trainer {
                t.validate()?;
            }
            if let Some(d) = &b.defense {
                d.validate()?;
            }
        }
        if self.split.reference_size >= self.dataset.eval_size {
            return Err(Error::InvalidConfig("reference_size leaves no test indices".into()));
        }
        if let Some(o) = self.pptp.onset {
            if o < 1 || o > self.arch.num_stages() + 1 {
                return Err(Error::OnsetOutOfRange {
                    onset: o,
                    max: self.arch.num_stages() + 1,
                });
            }
        }
        if self.pptp.match_tolerance.is_nan() || self.pptp.match_tolerance < 0.0 {
            return Err(Error::InvalidConfig("match_tolerance must be non-negative".into()));
        }
        if self.pptp.matching_attack == AttackKind::Correctness {
            return Err(Error::InvalidConfig("matching_attack needs a continuous statistic".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (object keys sorted), so key
    /// order in the source file does not matter. `output_dir` is excluded.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.output_dir = PathBuf::new();
        let value = serde_json::to_value(&m).expect("manifest serializes");
        let canonical = canonical_json(&value);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// Seed of repetition `rep` (0-based).
    pub fn repetition_seed(&self, rep: usize, seed_offset: u64) -> u64 {
        self.split.seed + seed_offset + rep as u64
    }

    /// Copy with every seed shifted to the repetition's seed.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut m = self.clone();
        m.arch.seed = seed;
        m.split.seed = seed;
        m.pretrain.seed = seed;
        m.pptp.trainer.seed = seed.wrapping_add(1000);
        if let Some(t) = m.baseline.as_mut().and_then(|b| b.trainer.as_mut()) {
            t.seed = seed.wrapping_add(2000);
        }
        m.attacks.policy.seed = seed;
        m.attacks.nn.seed = seed;
        m
    }

    /// Desk-scale defaults for the built-in dataset: RelaxLoss at the low
    /// end of its class-scaled range, retraining at a fifth of the
    /// pretraining rate, a from-scratch baseline with the same defense and
    /// a three-point strength grid for matching it.
    pub fn desk() -> Self {
        let dataset = DatasetSpec::default();
        let (lo, hi) = ObjectiveSpec::scaled_alpha_range(ObjectiveKind::Relaxloss, dataset.num_classes).expect("relaxloss has a range");
        let round = |a: f64| (a * 100.0).round() / 100.0;
        let grid = vec![round(lo), round((lo + hi) / 2.0), round(hi)];
        let defense = ObjectiveSpec::relaxloss(grid[0]);
        let mut retrain = TrainConfig::desk(10, 1000, defense.clone(), AugmentationPolicy::disabled());
        retrain.lr = 0.01;
        ExperimentManifest {
            name: "desk".into(),
            repetitions: 3,
            output_dir: default_output(),
            arch: ArchitectureSpec::desk_residual(0),
            split: SplitSection {
                seed: 0,
                reference_size: default_reference(),
                monitor_size: default_monitor(),
            },
            pretrain: TrainConfig {
                lr: 0.03,
                ..TrainConfig::desk(20, 0, ObjectiveSpec::ce(), AugmentationPolicy::disabled())
            },
            profiler: ProfilerSection::default(),
            probe: ProbeSection::default(),
            pptp: PptpSection {
                enabled: true,
                onset: None,
                defense: defense.clone(),
                epochs: 10,
                trainer: retrain,
                alpha_grid: grid,
                matching_attack: default_matching(),
                match_tolerance: default_tolerance(),
            },
            baseline: Some(BaselineSection {
                epochs: 20,
                defense: None,
                trainer: Some(TrainConfig::desk(20, 2000, defense, AugmentationPolicy::disabled())),
            }),
            ablation: AblationSection {
                variants: AblationVariant::ALL.to_vec(),
            },
            attacks: AttackSection::default(),
            sweep: None,
            dataset,
        }
    }

    /// Applies one sweep value to a copy of the manifest.
    pub fn with_factor(&self, factor: Factor, value: f64) -> Result<Self> {
        let mut m = self.clone();
        m.sweep = None;
        match factor {
            Factor::Augmentation => {
                let on = value != 0.0;
                m.pretrain.augmentation = if on { AugmentationPolicy::default() } else { AugmentationPolicy::disabled() };
            }
            Factor::FeatureMapSize => m.arch.feature_map_scale = value,
            Factor::ChannelSize => {
                if value <= 0.0 {
                    return Err(Error::InvalidConfig(format!("channel multiplier {value}")));
                }
                let scale = |c: usize| ((c as f64 * value).round() as usize).max(1);
                m.arch.stem.channels = scale(m.arch.stem.channels);
                for st in &mut m.arch.stages {
                    st.channels = scale(st.channels);
                }
            }
            Factor::Depth => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!("blocks per stage {value}")));
                }
                for st in &mut m.arch.stages {
                    st.num_blocks = value as usize;
                }
            }
        }
        m.name = format!("{}-{}={}", self.name, factor.id(), value);
        m.arch.validate()?;
        Ok(m)
    }
}

/// JSON with object keys in sorted order and no whitespace.
pub fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<&String, &serde_json::Value> = map.iter().collect();
            let parts: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{}", serde_json::Value::String(k.clone()), canonical_json(v)))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_manifest_round_trips_through_toml() {
        let m = ExperimentManifest::desk();
        let text = m.to_toml().unwrap();
        let back = ExperimentManifest::from_toml(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentManifest::desk().to_toml().unwrap();
        text = text.replacen("name = ", "nmae = \"typo\"\nname = ", 1);
        assert!(ExperimentManifest::from_toml(&text).is_err());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"d":[1,2],"c":null}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":{"c":null,"d":[1,2]},"b":1}"#).unwrap();
        assert_eq!(canonical_json(&a), canonical_json(&b));
        assert_eq!(canonical_json(&a), r#"{"a":{"c":null,"d":[1,2]},"b":1}"#);
    }
}
