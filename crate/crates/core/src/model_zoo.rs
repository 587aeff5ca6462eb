//! Staged convolutional networks with per-stage feature taps.
//!
//! Two families share one skeleton: a stem, `K` stages of blocks, and a
//! global-average-pool + linear head. Residual blocks are ResNet basic
//! blocks; plain blocks are two conv-BN-ReLU layers without a skip path.
//! Parameter names carry their stage as a prefix (`stem.`, `stage3.`,
//! `head.`) which is what partitions and freeze plans key on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, BatchNorm2d, Buffer, Conv2d, HasParams, Linear, MaxPool2d, Param};
use crate::tensor::Act;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Plain,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub index: usize,
    pub num_blocks: usize,
    pub channels: usize,
    pub downsample: bool,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3x3 stride-2 max pool after the stem convolution.
    pub max_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Only global average pooling followed by one linear layer is built.
    pub pooling: String,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            pooling: "global_average".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub head: HeadSpec,
    /// Multiplier on the final stage's spatial size; one of 1/2, 1, 2, 4.
    #[serde(default = "one")]
    pub feature_map_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl ArchitectureSpec {
    /// Desk-scale residual network: 4 stages of 2 basic blocks, widths
    /// 32/64/128/256, on 32x32 inputs (a shrunken ResNet18 analogue). The
    /// stride-2 stem and max pool give stage maps of 8, 4, 2 and 1 pixels.
    pub fn desk_residual(seed: u64) -> Self {
        Self::staged(Family::Residual, &[2, 2, 2, 2], &[32, 64, 128, 256], seed)
    }

    /// Plain (VGG-like) counterpart of [`Self::desk_residual`].
    pub fn desk_plain(seed: u64) -> Self {
        Self::staged(Family::Plain, &[2, 2, 2, 2], &[32, 64, 128, 256], seed)
    }

    pub fn staged(family: Family, blocks: &[usize], channels: &[usize], seed: u64) -> Self {
        assert_eq!(blocks.len(), channels.len());
        ArchitectureSpec {
            family,
            input_shape: [3, 32, 32],
            num_classes: 10,
            stem: StemSpec {
                channels: channels[0],
                kernel: 3,
                stride: 2,
                max_pool: true,
            },
            stages: blocks
                .iter()
                .zip(channels)
                .enumerate()
                .map(|(i, (&b, &c))| StageSpec {
                    index: i + 1,
                    num_blocks: b,
                    channels: c,
                    downsample: i > 0,
                    residual: family == Family::Residual,
                })
                .collect(),
            head: HeadSpec::default(),
            feature_map_scale: 1.0,
            seed,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Spatial size at the output of every stage (square inputs).
    pub fn stage_spatial(&self) -> Result<Vec<usize>> {
        self.layout().map(|l| l.into_iter().map(|s| s.out_size).collect())
    }

    fn layout(&self) -> Result<Vec<StageLayout>> {
        let [_, h, w] = self.input_shape;
        if h != w {
            return Err(Error::InvalidArchitecture("only square inputs are supported".into()));
        }
        let stem_out = conv_out(h, self.stem.kernel, self.stem.stride, self.stem.kernel / 2);
        let mut size = if self.stem.max_pool { conv_out(stem_out, 3, 2, 1) } else { stem_out };
        let k = self.stages.len();
        let mut out = Vec::with_capacity(k);
        for (i, st) in self.stages.iter().enumerate() {
            let base_stride = if st.downsample { 2 } else { 1 };
            if i + 1 < k || self.feature_map_scale == 1.0 {
                if size % base_stride != 0 || size < base_stride {
                    return Err(Error::InvalidArchitecture(format!(
                        "stage {} cannot downsample a {size}x{size} map",
                        st.index
                    )));
                }
                out.push(StageLayout {
                    upsample: 1,
                    stride: base_stride,
                    out_size: size / base_stride,
                });
                size /= base_stride;
                continue;
            }
            // final stage with a rescaled feature map
            let target = size as f64 / base_stride as f64 * self.feature_map_scale;
            if target < 1.0 || target.fract() != 0.0 {
                return Err(Error::InvalidArchitecture(format!(
                    "feature_map_scale {} gives a {target}-pixel final map from {size}x{size}",
                    self.feature_map_scale
                )));
            }
            let target = target as usize;
            let (upsample, stride) = if target <= size {
                if size % target != 0 {
                    return Err(Error::InvalidArchitecture(format!(
                        "final map {target} does not divide {size}"
                    )));
                }
                (1, size / target)
            } else {
                if !target.is_multiple_of(size) {
                    return Err(Error::InvalidArchitecture(format!(
                        "final map {target} is not a multiple of {size}"
                    )));
                }
                (target / size, 1)
            };
            out.push(StageLayout {
                upsample,
                stride,
                out_size: target,
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArchitecture("no stages".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArchitecture("num_classes must be >= 2".into()));
        }
        if ![0.5, 1.0, 2.0, 4.0].contains(&self.feature_map_scale) {
            return Err(Error::InvalidArchitecture(format!(
                "unsupported feature_map_scale {}",
                self.feature_map_scale
            )));
        }
        if self.head.pooling != "global_average" {
            return Err(Error::InvalidArchitecture(format!(
                "unsupported head pooling `{}`",
                self.head.pooling
            )));
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::InvalidArchitecture("degenerate stem".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.index != i + 1 {
                return Err(Error::InvalidArchitecture(format!(
                    "stage indices must be 1..K in order, found {} at position {}",
                    st.index,
                    i + 1
                )));
            }
            if st.channels == 0 || st.num_blocks == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "stage {} needs positive channels and blocks",
                    st.index
                )));
            }
            if st.residual != (self.family == Family::Residual) {
                return Err(Error::InvalidArchitecture(format!(
                    "stage {} residual flag disagrees with family {:?}",
                    st.index, self.family
                )));
            }
        }
        self.layout().map(|_| ())
    }
}

struct StageLayout {
    upsample: usize,
    stride: usize,
    out_size: usize,
}

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> usize {
    (size + 2 * p - k) / s + 1
}

/// Identifies a feature tap: the end of a stage, or a specific block in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TapId {
    pub stage: usize,
    /// 1-based block index; `None` is the stage end.
    pub block: Option<usize>,
}

impl TapId {
    pub fn stage_end(stage: usize) -> Self {
        TapId { stage, block: None }
    }

    pub fn is_stage_end(&self) -> bool {
        self.block.is_none()
    }

    pub fn parse(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("stage")?;
        match rest.split_once(".block") {
            Some((st, b)) => Some(TapId {
                stage: st.parse().ok()?,
                block: Some(b.parse().ok()?),
            }),
            None => Some(TapId::stage_end(rest.parse().ok()?)),
        }
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(b) => write!(f, "stage{}.block{}", self.stage, b),
            None => write!(f, "stage{}", self.stage),
        }
    }
}

/// Which taps a forward pass should emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSelection {
    None,
    StageEnds,
    /// Stage ends plus every block output.
    AllBlocks,
}

/// Feature map captured at a tap, for a whole batch.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tap: TapId,
    pub values: Act,
}

impl FeatureMap {
    /// Flattened per-sample dimensionality `C*H*W`.
    pub fn d(&self) -> usize {
        self.values.c * self.values.plane()
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    mask1: Option<Vec<bool>>,
    mask_out: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
struct PlainBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    mask1: Option<Vec<bool>>,
    mask2: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
enum Block {
    Residual(ResidualBlock),
    Plain(PlainBlock),
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, project: bool, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, rng);
        let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), cout);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, rng);
        let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), cout);
        if residual {
            let shortcut = project.then(|| {
                (
                    Conv2d::new(&format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, rng),
                    BatchNorm2d::new(&format!("{name}.shortcut.bn"), cout),
                )
            });
            Block::Residual(ResidualBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
                mask1: None,
                mask_out: None,
            })
        } else {
            Block::Plain(PlainBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                mask1: None,
                mask2: None,
            })
        }
    }

    fn forward(&mut self, x: &Act, train: bool) -> Act {
        match self {
            Block::Residual(b) => {
                let mut h = b.bn1.forward(&b.conv1.forward(x, train), train);
                b.mask1 = relu_inplace(&mut h.data, train);
                let mut out = b.bn2.forward(&b.conv2.forward(&h, train), train);
                match &mut b.shortcut {
                    Some((conv, bn)) => {
                        let s = bn.forward(&conv.forward(x, train), train);
                        out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
                    }
                    None => out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v),
                }
                b.mask_out = relu_inplace(&mut out.data, train);
                out
            }
            Block::Plain(b) => {
                let mut h = b.bn1.forward(&b.conv1.forward(x, train), train);
                b.mask1 = relu_inplace(&mut h.data, train);
                let mut out = b.bn2.forward(&b.conv2.forward(&h, train), train);
                b.mask2 = relu_inplace(&mut out.data, train);
                out
            }
        }
    }

    fn backward(&mut self, dy: &Act, need_dx: bool) -> Option<Act> {
        match self {
            Block::Residual(b) => {
                let mut g = dy.clone();
                relu_backward(&mut g.data, b.mask_out.as_ref().expect("block mask"));
                let mut dh = b.conv2.backward(&b.bn2.backward(&g), true).unwrap();
                relu_backward(&mut dh.data, b.mask1.as_ref().expect("block mask"));
                let dbn1 = b.bn1.backward(&dh);
                let dx_main = b.conv1.backward(&dbn1, need_dx);
                let dx_skip = match &mut b.shortcut {
                    Some((conv, bn)) => conv.backward(&bn.backward(&g), need_dx),
                    None => need_dx.then(|| g.clone()),
                };
                match (dx_main, dx_skip) {
                    (Some(mut a), Some(s)) => {
                        a.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
                        Some(a)
                    }
                    _ => None,
                }
            }
            Block::Plain(b) => {
                let mut g = dy.clone();
                relu_backward(&mut g.data, b.mask2.as_ref().expect("block mask"));
                let mut dh = b.conv2.backward(&b.bn2.backward(&g), true).unwrap();
                relu_backward(&mut dh.data, b.mask1.as_ref().expect("block mask"));
                b.conv1.backward(&b.bn1.backward(&dh), need_dx)
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        let (c1, b1, c2, b2, sc) = match self {
            Block::Residual(b) => (&b.conv1, &b.bn1, &b.conv2, &b.bn2, b.shortcut.as_ref()),
            Block::Plain(b) => (&b.conv1, &b.bn1, &b.conv2, &b.bn2, None),
        };
        f(&c1.weight);
        f(&b1.gamma);
        f(&b1.beta);
        f(&c2.weight);
        f(&b2.gamma);
        f(&b2.beta);
        if let Some((c, b)) = sc {
            f(&c.weight);
            f(&b.gamma);
            f(&b.beta);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        let (c1, b1, c2, b2, sc) = match self {
            Block::Residual(b) => (&mut b.conv1, &mut b.bn1, &mut b.conv2, &mut b.bn2, b.shortcut.as_mut()),
            Block::Plain(b) => (&mut b.conv1, &mut b.bn1, &mut b.conv2, &mut b.bn2, None),
        };
        f(&mut c1.weight);
        f(&mut b1.gamma);
        f(&mut b1.beta);
        f(&mut c2.weight);
        f(&mut b2.gamma);
        f(&mut b2.beta);
        if let Some((c, b)) = sc {
            f(&mut c.weight);
            f(&mut b.gamma);
            f(&mut b.beta);
        }
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        match self {
            Block::Residual(b) => {
                let mut v = vec![&mut b.bn1, &mut b.bn2];
                if let Some((_, bn)) = b.shortcut.as_mut() {
                    v.push(bn);
                }
                v
            }
            Block::Plain(b) => vec![&mut b.bn1, &mut b.bn2],
        }
    }

    fn norms(&self) -> Vec<&BatchNorm2d> {
        match self {
            Block::Residual(b) => {
                let mut v = vec![&b.bn1, &b.bn2];
                if let Some((_, bn)) = b.shortcut.as_ref() {
                    v.push(bn);
                }
                v
            }
            Block::Plain(b) => vec![&b.bn1, &b.bn2],
        }
    }

    fn clear_cache(&mut self) {
        for bn in self.norms_mut() {
            bn.clear_cache();
        }
        match self {
            Block::Residual(b) => {
                b.conv1.clear_cache();
                b.conv2.clear_cache();
                if let Some((c, _)) = b.shortcut.as_mut() {
                    c.clear_cache();
                }
                b.mask1 = None;
                b.mask_out = None;
            }
            Block::Plain(b) => {
                b.conv1.clear_cache();
                b.conv2.clear_cache();
                b.mask1 = None;
                b.mask2 = None;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: Option<MaxPool2d>,
    mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
struct Stage {
    upsample: usize,
    blocks: Vec<Block>,
    up_dims: Option<(usize, usize)>,
}

/// A built network. Not `Sync`-mutable: forward passes take `&mut self`
/// because training-mode passes cache activations.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchitectureSpec,
    stem: Stem,
    stages: Vec<Stage>,
    fc: Linear,
    pool_dims: Option<(usize, usize, usize, usize)>,
}

/// Parameter and buffer values at construction, used as the rewind target.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSnapshot {
    pub seed: u64,
    pub params: BTreeMap<String, Vec<f32>>,
    pub buffers: BTreeMap<String, Vec<f32>>,
}

impl InitSnapshot {
    pub fn of(model: &Model) -> Self {
        InitSnapshot {
            seed: model.arch.seed,
            params: model.param_map(),
            buffers: model.buffer_map(),
        }
    }

    pub fn covers(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }
}

/// Exact split of parameter names into privacy-safe and privacy-risky sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub onset_stage: usize,
    pub safe_names: BTreeSet<String>,
    pub risky_names: BTreeSet<String>,
}

impl ParameterPartition {
    /// Checks exactness against a model's parameter names.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let all: BTreeSet<String> = model.param_names().into_iter().collect();
        if let Some(n) = self.safe_names.intersection(&self.risky_names).next() {
            return Err(Error::InvalidConfig(format!("{n} is both safe and risky")));
        }
        for n in self.safe_names.iter().chain(&self.risky_names) {
            if !all.contains(n) {
                return Err(Error::UnknownParameter(n.clone()));
            }
        }
        if let Some(n) = all
            .iter()
            .find(|n| !self.safe_names.contains(*n) && !self.risky_names.contains(*n))
        {
            return Err(Error::InvalidConfig(format!("{n} is in neither set")));
        }
        Ok(())
    }
}

/// Stage number a parameter belongs to: 0 for the stem, `K+1` for the head.
pub fn param_stage(name: &str, num_stages: usize) -> Option<usize> {
    if name.starts_with("stem.") {
        return Some(0);
    }
    if name.starts_with("head.") {
        return Some(num_stages + 1);
    }
    let rest = name.strip_prefix("stage")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

pub fn build_model(arch: &ArchitectureSpec) -> Result<(Model, InitSnapshot)> {
    arch.validate()?;
    let layout = arch.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let [cin, _, _] = arch.input_shape;
    let stem = Stem {
        conv: Conv2d::new(
            "stem.conv",
            cin,
            arch.stem.channels,
            arch.stem.kernel,
            arch.stem.stride,
            arch.stem.kernel / 2,
            &mut rng,
        ),
        bn: BatchNorm2d::new("stem.bn", arch.stem.channels),
        pool: arch.stem.max_pool.then(|| MaxPool2d::new(3, 2, 1)),
        mask: None,
    };
    let mut stages = Vec::with_capacity(arch.stages.len());
    let mut channels = arch.stem.channels;
    for (st, lay) in arch.stages.iter().zip(&layout) {
        let mut blocks = Vec::with_capacity(st.num_blocks);
        for b in 0..st.num_blocks {
            let name = format!("stage{}.block{}", st.index, b + 1);
            let (stride, project) = if b == 0 {
                (lay.stride, st.downsample || channels != st.channels || lay.stride != 1)
            } else {
                (1, false)
            };
            blocks.push(Block::new(&name, channels, st.channels, stride, project, st.residual, &mut rng));
            channels = st.channels;
        }
        stages.push(Stage {
            upsample: lay.upsample,
            blocks,
            up_dims: None,
        });
    }
    let fc = Linear::new("head.fc", channels, arch.num_classes, &mut rng);
    let model = Model {
        arch: arch.clone(),
        stem,
        stages,
        fc,
        pool_dims: None,
    };
    let snapshot = InitSnapshot::of(&model);
    Ok((model, snapshot))
}

fn upsample_nearest(x: &Act, f: usize) -> Act {
    let mut out = Act::zeros(x.c, x.n, x.h * f, x.w * f);
    let (ow, plane_in, plane_out) = (x.w * f, x.plane(), out.plane());
    for cn in 0..x.c * x.n {
        for y in 0..out.h {
            for xx in 0..ow {
                out.data[cn * plane_out + y * ow + xx] = x.data[cn * plane_in + (y / f) * x.w + xx / f];
            }
        }
    }
    out
}

fn upsample_backward(dy: &Act, f: usize, h: usize, w: usize) -> Act {
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    let (plane_in, plane_out) = (h * w, dy.plane());
    for cn in 0..dy.c * dy.n {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[cn * plane_in + (y / f) * w + xx / f] += dy.data[cn * plane_out + y * dy.w + xx];
            }
        }
    }
    dx
}

impl Model {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Segment order: 0 = stem, 1..=K = stages, K+1 = head.
    fn segment_trainable(&self) -> Vec<bool> {
        let k = self.num_stages();
        let mut flags = vec![false; k + 2];
        self.visit_params(&mut |p| {
            if !p.frozen {
                if let Some(s) = param_stage(&p.name, k) {
                    flags[s] = true;
                }
            }
        });
        flags
    }

    fn input_act(&self, batch: &Batch) -> Result<Act> {
        let [c, h, w] = self.arch.input_shape;
        if (batch.c, batch.h, batch.w) != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch is {}x{}x{}, model expects {c}x{h}x{w}",
                batch.c, batch.h, batch.w
            )));
        }
        Ok(Act::from_nchw(batch.n, c, h, w, &batch.images))
    }

    /// Training-mode forward: caches activations for [`Model::backward`] in
    /// every segment at or after the first trainable one. Returns logits,
    /// row-major `n x classes`.
    pub fn forward_train(&mut self, batch: &Batch) -> Result<Vec<f32>> {
        let x = self.input_act(batch)?;
        let trainable = self.segment_trainable();
        let mut live = false;
        let mut keep = |seg: usize| {
            live |= trainable[seg];
            live
        };
        let k0 = keep(0);
        let mut h = self.stem_forward(&x, k0);
        for s in 0..self.stages.len() {
            let ks = keep(s + 1);
            h = self.stage_forward(s, &h, ks, &mut |_, _| {});
        }
        let kh = keep(self.stages.len() + 1);
        Ok(self.head_forward(&h, kh))
    }

    /// Accumulates parameter gradients for `d loss / d logits`. Stops at the
    /// earliest trainable segment; frozen prefixes are never traversed.
    pub fn backward(&mut self, dlogits: &[f32]) {
        let trainable = self.segment_trainable();
        let k = self.stages.len();
        let earlier = |seg: usize| trainable[..seg].iter().any(|&t| t);
        let (c, n, h, w) = self.pool_dims.take().expect("backward without forward_train");
        let Some(dfeat) = self.fc.backward(dlogits, n, earlier(k + 1)) else {
            self.clear_cache();
            return;
        };
        let plane = h * w;
        let mut grad = Act::zeros(c, n, h, w);
        for ch in 0..c {
            for i in 0..n {
                let v = dfeat[i * c + ch] / plane as f32;
                grad.data[(ch * n + i) * plane..(ch * n + i + 1) * plane].fill(v);
            }
        }
        for s in (0..k).rev() {
            let pass_on = earlier(s + 1);
            let stage = &mut self.stages[s];
            for b in (0..stage.blocks.len()).rev() {
                match stage.blocks[b].backward(&grad, b > 0 || pass_on) {
                    Some(d) => grad = d,
                    None => {
                        self.clear_cache();
                        return;
                    }
                }
            }
            if stage.upsample > 1 {
                let (uh, uw) = stage.up_dims.take().expect("upsample dims");
                grad = upsample_backward(&grad, stage.upsample, uh, uw);
            }
        }
        self.stem_backward(&grad);
        self.clear_cache();
    }

    fn stem_forward(&mut self, x: &Act, train: bool) -> Act {
        let stem = &mut self.stem;
        let mut h = stem.bn.forward(&stem.conv.forward(x, train), train);
        stem.mask = relu_inplace(&mut h.data, train);
        match stem.pool.as_mut() {
            Some(p) => p.forward(&h, train),
            None => h,
        }
    }

    fn stem_backward(&mut self, dy: &Act) {
        let stem = &mut self.stem;
        let mut g = match stem.pool.as_mut() {
            Some(p) => p.backward(dy),
            None => dy.clone(),
        };
        relu_backward(&mut g.data, stem.mask.as_ref().expect("stem mask"));
        let d = stem.bn.backward(&g);
        stem.conv.backward(&d, false);
    }

    fn stage_forward(&mut self, s: usize, x: &Act, train: bool, tap: &mut dyn FnMut(usize, &Act)) -> Act {
        let stage = &mut self.stages[s];
        let mut h = if stage.upsample > 1 {
            stage.up_dims = Some((x.h, x.w));
            upsample_nearest(x, stage.upsample)
        } else {
            x.clone()
        };
        for (b, block) in stage.blocks.iter_mut().enumerate() {
            h = block.forward(&h, train);
            tap(b, &h);
        }
        h
    }

    fn head_forward(&mut self, x: &Act, train: bool) -> Vec<f32> {
        let plane = x.plane();
        let mut feat = vec![0.0f32; x.n * x.c];
        for ch in 0..x.c {
            for i in 0..x.n {
                let src = &x.data[(ch * x.n + i) * plane..(ch * x.n + i + 1) * plane];
                feat[i * x.c + ch] = src.iter().sum::<f32>() / plane as f32;
            }
        }
        self.pool_dims = train.then_some((x.c, x.n, x.h, x.w));
        self.fc.forward(&feat, x.n, train)
    }

    /// Evaluation-mode forward emitting the selected taps. Taps are copies
    /// of intermediate activations and do not influence the logits.
    pub fn forward_with_taps(&mut self, batch: &Batch, taps: TapSelection) -> Result<(Vec<f32>, Vec<FeatureMap>)> {
        let x = self.input_act(batch)?;
        let mut maps = Vec::new();
        let mut h = self.stem_forward(&x, false);
        for s in 0..self.stages.len() {
            let nb = self.stages[s].blocks.len();
            let stage_no = s + 1;
            h = self.stage_forward(s, &h, false, &mut |b, act| match taps {
                TapSelection::None => {}
                TapSelection::StageEnds => {
                    if b + 1 == nb {
                        maps.push(FeatureMap {
                            tap: TapId::stage_end(stage_no),
                            values: act.clone(),
                        });
                    }
                }
                TapSelection::AllBlocks => {
                    maps.push(FeatureMap {
                        tap: TapId {
                            stage: stage_no,
                            block: Some(b + 1),
                        },
                        values: act.clone(),
                    });
                    if b + 1 == nb {
                        maps.push(FeatureMap {
                            tap: TapId::stage_end(stage_no),
                            values: act.clone(),
                        });
                    }
                }
            });
        }
        let logits = self.head_forward(&h, false);
        Ok((logits, maps))
    }

    /// Evaluation-mode logits.
    pub fn predict(&mut self, batch: &Batch) -> Result<Vec<f32>> {
        Ok(self.forward_with_taps(batch, TapSelection::None)?.0)
    }

    pub fn clear_cache(&mut self) {
        self.stem.conv.clear_cache();
        self.stem.bn.clear_cache();
        if let Some(p) = self.stem.pool.as_mut() {
            p.clear_cache();
        }
        self.stem.mask = None;
        for st in &mut self.stages {
            st.up_dims = None;
            st.blocks.iter_mut().for_each(Block::clear_cache);
        }
        self.fc.clear_cache();
        self.pool_dims = None;
    }

    fn visit_norms(&self, f: &mut dyn FnMut(&BatchNorm2d)) {
        f(&self.stem.bn);
        for st in &self.stages {
            for b in &st.blocks {
                b.norms().into_iter().for_each(&mut *f);
            }
        }
    }

    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.stem.bn);
        for st in &mut self.stages {
            for b in &mut st.blocks {
                b.norms_mut().into_iter().for_each(&mut *f);
            }
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.visit_norms(&mut |bn| {
            f(&bn.running_mean);
            f(&bn.running_var);
        });
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.visit_norms_mut(&mut |bn| {
            f(&mut bn.running_mean);
            f(&mut bn.running_var);
        });
    }

    pub fn param_map(&self) -> BTreeMap<String, Vec<f32>> {
        let mut m = BTreeMap::new();
        self.visit_params(&mut |p| {
            m.insert(p.name.clone(), p.value.clone());
        });
        m
    }

    pub fn buffer_map(&self) -> BTreeMap<String, Vec<f32>> {
        let mut m = BTreeMap::new();
        self.visit_buffers(&mut |b| {
            m.insert(b.name.clone(), b.value.clone());
        });
        m
    }

    pub fn frozen_names(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        self.visit_params(&mut |p| {
            if p.frozen {
                s.insert(p.name.clone());
            }
        });
        s
    }

    /// Number of parameters belonging to one stage (0 = stem, K+1 = head).
    pub fn stage_param_count(&self, stage: usize) -> usize {
        let k = self.num_stages();
        let mut n = 0;
        self.visit_params(&mut |p| {
            if param_stage(&p.name, k) == Some(stage) {
                n += p.numel();
            }
        });
        n
    }

    /// Overwrites parameters and buffers from maps; unknown names are errors,
    /// names absent from the maps are left untouched.
    pub fn load_values(
        &mut self,
        params: &BTreeMap<String, Vec<f32>>,
        buffers: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if let Some(v) = params.get(&p.name) {
                if v.len() != p.numel() {
                    err = Some(Error::ShapeMismatch(format!("{}: {} values", p.name, v.len())));
                } else {
                    p.value.copy_from_slice(v);
                }
                seen += 1;
            }
        });
        if seen != params.len() {
            let names = self.param_names();
            let unknown = params.keys().find(|k| !names.contains(k)).cloned().unwrap_or_default();
            return Err(Error::UnknownParameter(unknown));
        }
        let mut seen_b = 0usize;
        self.visit_buffers_mut(&mut |b| {
            if let Some(v) = buffers.get(&b.name) {
                if v.len() != b.value.len() {
                    err = Some(Error::ShapeMismatch(format!("{}: {} values", b.name, v.len())));
                } else {
                    b.value.copy_from_slice(v);
                }
                seen_b += 1;
            }
        });
        if seen_b != buffers.len() {
            return Err(Error::UnknownParameter("unknown buffer name".into()));
        }
        err.map_or(Ok(()), Err)
    }

    pub fn set_frozen(&mut self, names: &BTreeSet<String>, frozen: bool) {
        self.visit_params_mut(&mut |p| {
            if names.contains(&p.name) {
                p.frozen = frozen;
            }
        });
    }

    pub fn unfreeze_all(&mut self) {
        self.visit_params_mut(&mut |p| p.frozen = false);
    }
}

impl HasParams for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.stem.conv.weight);
        f(&self.stem.bn.gamma);
        f(&self.stem.bn.beta);
        for st in &self.stages {
            for b in &st.blocks {
                b.visit(f);
            }
        }
        f(&self.fc.weight);
        f(&self.fc.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.stem.conv.weight);
        f(&mut self.stem.bn.gamma);
        f(&mut self.stem.bn.beta);
        for st in &mut self.stages {
            for b in &mut st.blocks {
                b.visit_mut(f);
            }
        }
        f(&mut self.fc.weight);
        f(&mut self.fc.bias);
    }
}

/// Splits parameters at `onset_stage`: the stem and stages before the onset
/// are safe; the onset stage, everything after it and the head are risky.
/// `onset_stage = 1` makes every parameter (stem included) risky;
/// `onset_stage = K+1` leaves only the head risky.
pub fn partition_parameters(model: &Model, onset_stage: usize) -> Result<ParameterPartition> {
    let k = model.num_stages();
    if onset_stage < 1 || onset_stage > k + 1 {
        return Err(Error::OnsetOutOfRange {
            onset: onset_stage,
            max: k + 1,
        });
    }
    let mut safe = BTreeSet::new();
    let mut risky = BTreeSet::new();
    model.visit_params(&mut |p| {
        let stage = param_stage(&p.name, k).expect("parameter names carry a stage prefix");
        let is_safe = if stage == 0 { onset_stage > 1 } else { stage < onset_stage };
        if is_safe {
            safe.insert(p.name.clone());
        } else {
            risky.insert(p.name.clone());
        }
    });
    Ok(ParameterPartition {
        onset_stage,
        safe_names: safe,
        risky_names: risky,
    })
}

/// Checkpoint manifest, stored as TOML next to the tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub arch: ArchitectureSpec,
    pub seed: u64,
    pub epoch: usize,
    pub objective: String,
    pub split_plan: Option<String>,
    #[serde(default)]
    pub frozen: Vec<String>,
}

const TENSOR_MAGIC: &[u8; 8] = b"PPTPTNS1";
const MANIFEST_FILE: &str = "manifest.toml";
const TENSOR_FILE: &str = "tensors.bin";
/// Reserved key prefix for the initialization snapshot inside a checkpoint.
pub const INIT_KEY: &str = "init/";

/// Named tensors as (shape, values).
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Writes `name -> (shape, values)` tensors in a small little-endian format.
pub fn write_tensors(path: &Path, tensors: &TensorMap) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, (shape, values)) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated tensor file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32le = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32le(take(4)?);
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let len = u32le(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("non-utf8 name"))?;
        let ndim = u32le(take(4)?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(name, (shape, values));
    }
    Ok(map)
}

/// A model's full state on disk: manifest plus tensors, with the
/// initialization snapshot stored under [`INIT_KEY`].
pub struct Checkpoint;

impl Checkpoint {
    pub fn save(
        dir: &Path,
        model: &Model,
        snapshot: &InitSnapshot,
        epoch: usize,
        objective: &str,
        split_plan: Option<&Path>,
    ) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            arch: model.arch.clone(),
            seed: model.arch.seed,
            epoch,
            objective: objective.into(),
            split_plan: split_plan.map(|p| p.display().to_string()),
            frozen: model.frozen_names().into_iter().collect(),
        };
        fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
        let mut tensors = BTreeMap::new();
        model.visit_params(&mut |p| {
            tensors.insert(format!("param/{}", p.name), (p.shape.clone(), p.value.clone()));
        });
        model.visit_buffers(&mut |b| {
            tensors.insert(format!("buffer/{}", b.name), (vec![b.value.len()], b.value.clone()));
        });
        for (k, v) in &snapshot.params {
            tensors.insert(format!("{INIT_KEY}param/{k}"), (vec![v.len()], v.clone()));
        }
        for (k, v) in &snapshot.buffers {
            tensors.insert(format!("{INIT_KEY}buffer/{k}"), (vec![v.len()], v.clone()));
        }
        write_tensors(&dir.join(TENSOR_FILE), &tensors)
    }

    pub fn load(dir: &Path) -> Result<(Model, InitSnapshot, CheckpointManifest)> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let manifest: CheckpointManifest = toml::from_str(&text)?;
        let (mut model, _) = build_model(&manifest.arch)?;
        let tensors = read_tensors(&dir.join(TENSOR_FILE))?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut init_params = BTreeMap::new();
        let mut init_buffers = BTreeMap::new();
        for (k, (_, v)) in tensors {
            if let Some(rest) = k.strip_prefix(INIT_KEY) {
                if let Some(n) = rest.strip_prefix("param/") {
                    init_params.insert(n.to_string(), v);
                } else if let Some(n) = rest.strip_prefix("buffer/") {
                    init_buffers.insert(n.to_string(), v);
                }
            } else if let Some(n) = k.strip_prefix("param/") {
                params.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("buffer/") {
                buffers.insert(n.to_string(), v);
            }
        }
        model.load_values(&params, &buffers)?;
        let frozen: BTreeSet<String> = manifest.frozen.iter().cloned().collect();
        model.set_frozen(&frozen, true);
        let snapshot = InitSnapshot {
            seed: manifest.seed,
            params: init_params,
            buffers: init_buffers,
        };
        Ok((model, snapshot, manifest))
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST_FILE).is_file() && dir.join(TENSOR_FILE).is_file()
    }

    pub fn tensor_path(dir: &Path) -> PathBuf {
        dir.join(TENSOR_FILE)
    }
}
