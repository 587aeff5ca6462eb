//! Dataset loading, deterministic half splits and train-time augmentation.
//!
//! Two pools are always exposed separately: the *training pool* (the data a
//! model may be trained on, split into halves for paired training) and the
//! *evaluation pool* (held-out samples used as non-members and for test
//! accuracy). Images are stored as `u8` and normalized on batch assembly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source string prefix for generated datasets.
pub const BUILTIN_PREFIX: &str = "builtin:";
/// Name of the built-in desk-scale dataset.
pub const BUILTIN_SYNTH: &str = "synth10";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// `builtin:<name>` or a directory of label-prefixed binary records.
    pub source: String,
    /// Training-pool size for built-in sources.
    #[serde(default = "default_pool")]
    pub train_size: usize,
    /// Evaluation-pool size for built-in sources.
    #[serde(default = "default_pool")]
    pub eval_size: usize,
    #[serde(default)]
    pub data_seed: u64,
}

fn default_pool() -> usize {
    5000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: BUILTIN_SYNTH.into(),
            input_shape: [3, 32, 32],
            num_classes: 10,
            source: format!("{BUILTIN_PREFIX}{BUILTIN_SYNTH}"),
            train_size: default_pool(),
            eval_size: default_pool(),
            data_seed: 0,
        }
    }
}

/// One pool of labelled images in a fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u16>,
}

/// Normalized image batch in `N x C x H x W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.c * self.h * self.w;
        &self.images[i * len..(i + 1) * len]
    }
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let [c, h, w] = shape;
        if num_classes < 2 {
            return Err(Error::ShapeMismatch(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if images.len() != labels.len() * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} image bytes for {} labels of shape {c}x{h}x{w}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as usize,
                num_classes,
            });
        }
        Ok(Dataset {
            channels: c,
            height: h,
            width: w,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// Assembles a normalized batch; pixel `v` maps to `(v/255 - 0.5) / 0.25`.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let len = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            images.extend(self.raw_image(i).iter().map(|&v| (v as f32 / 255.0 - 0.5) * 4.0));
        }
        Batch {
            n: indices.len(),
            c: self.channels,
            h: self.height,
            w: self.width,
            images,
            labels: indices.iter().map(|&i| self.label(i)).collect(),
        }
    }
}

/// Training and evaluation pools of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPools {
    pub spec: DatasetSpec,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<DataPools> {
    if spec.num_classes < 2 {
        return Err(Error::ShapeMismatch("num_classes must be >= 2".into()));
    }
    if let Some(name) = spec.source.strip_prefix(BUILTIN_PREFIX) {
        return match name {
            BUILTIN_SYNTH => {
                let cfg = SynthConfig::default();
                if spec.input_shape != [3, 32, 32] || spec.num_classes != cfg.classes {
                    return Err(Error::ShapeMismatch(format!(
                        "builtin {BUILTIN_SYNTH} is 3x32x32 with {} classes",
                        cfg.classes
                    )));
                }
                let (train, eval) = cfg.generate(spec.train_size, spec.eval_size, spec.data_seed)?;
                Ok(DataPools {
                    spec: spec.clone(),
                    train,
                    eval,
                })
            }
            other => Err(Error::MissingSource(format!("{BUILTIN_PREFIX}{other}"))),
        };
    }
    load_record_dir(spec, Path::new(&spec.source))
}

/// Directory layout: training files named `train*.bin` or `data_batch*.bin`,
/// evaluation files named `test*.bin`, each a sequence of records
/// `[label: u8][pixels: C*H*W u8, channel-major]`.
fn load_record_dir(spec: &DatasetSpec, dir: &Path) -> Result<DataPools> {
    if !dir.is_dir() {
        return Err(Error::MissingSource(dir.display().to_string()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    let stem = |p: &PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
    let train_files: Vec<_> = files
        .iter()
        .filter(|p| {
            let s = stem(p);
            s.starts_with("train") || s.starts_with("data_batch")
        })
        .collect();
    let eval_files: Vec<_> = files.iter().filter(|p| stem(p).starts_with("test")).collect();
    if train_files.is_empty() || eval_files.is_empty() {
        return Err(Error::MissingSource(format!(
            "{} has no train*.bin / test*.bin record files",
            dir.display()
        )));
    }
    let read = |paths: &[&PathBuf]| -> Result<Dataset> {
        let rec = 1 + spec.input_shape.iter().product::<usize>();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for path in paths {
            let bytes = fs::read(path)?;
            if bytes.len() % rec != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {} bytes is not a multiple of the record size {rec}",
                    path.display(),
                    bytes.len()
                )));
            }
            for chunk in bytes.chunks(rec) {
                labels.push(chunk[0] as u16);
                images.extend_from_slice(&chunk[1..]);
            }
        }
        Dataset::new(spec.input_shape, spec.num_classes, images, labels)
    };
    Ok(DataPools {
        spec: spec.clone(),
        train: read(&train_files)?,
        eval: read(&eval_files)?,
    })
}

/// Writes a pool in the record format understood by directory sources.
pub fn write_records(path: &Path, data: &Dataset) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * (1 + data.image_len()));
    for i in 0..data.len() {
        bytes.push(data.label(i) as u8);
        bytes.extend_from_slice(data.raw_image(i));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Generator for the built-in 32x32, 10-class dataset.
///
/// Five texture primitives (oriented, coloured gratings under a Gaussian
/// window) are combined in pairs; each of the ten pairs is one class, with a
/// class-specific layout. Samples vary by translation, per-part jitter,
/// amplitude and phase, a smooth random background, pixel noise, a weak
/// distractor primitive and a fraction of flipped labels. The result is
/// learnable well above chance yet leaves a large train/test gap once a
/// network memorizes its training pool.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub classes: usize,
    pub primitives: usize,
    pub shift: i32,
    pub jitter: i32,
    pub pixel_noise: f32,
    pub background: f32,
    pub distractor: f32,
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            primitives: 5,
            shift: 4,
            jitter: 2,
            pixel_noise: 0.35,
            background: 0.35,
            distractor: 0.45,
            label_noise: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
struct Primitive {
    theta: f32,
    freq: f32,
    sigma: f32,
    color: [f32; 3],
}

#[derive(Debug, Clone)]
struct ClassLayout {
    parts: [(usize, f32, f32); 2],
}

impl SynthConfig {
    fn pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for a in 0..self.primitives {
            for b in a + 1..self.primitives {
                pairs.push((a, b));
            }
        }
        pairs
    }

    pub fn generate(&self, n_train: usize, n_eval: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let pairs = self.pairs();
        if pairs.len() < self.classes {
            return Err(Error::InvalidConfig(format!(
                "{} primitives give only {} classes",
                self.primitives,
                pairs.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e54_4831_3000);
        let prims: Vec<Primitive> = (0..self.primitives)
            .map(|i| {
                let mut color = [0.0f32; 3];
                for c in color.iter_mut() {
                    *c = rng.gen_range(-1.0..1.0);
                }
                let norm = color.iter().map(|c| c * c).sum::<f32>().sqrt().max(1e-3);
                color.iter_mut().for_each(|c| *c = *c / norm * 1.2);
                Primitive {
                    theta: std::f32::consts::PI * i as f32 / self.primitives as f32
                        + rng.gen_range(-0.1..0.1),
                    freq: rng.gen_range(0.12..0.32),
                    sigma: rng.gen_range(3.0..4.5),
                    color,
                }
            })
            .collect();
        let layouts: Vec<ClassLayout> = pairs[..self.classes]
            .iter()
            .map(|&(a, b)| {
                let mut pos = || (rng.gen_range(10.0..22.0f32), rng.gen_range(10.0..22.0f32));
                let (pa, pb) = (pos(), pos());
                ClassLayout {
                    parts: [(a, pa.0, pa.1), (b, pb.0, pb.1)],
                }
            })
            .collect();
        let make = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut images = Vec::with_capacity(n * 3 * 32 * 32);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % self.classes;
                let img = self.render(&prims, &layouts[class], rng);
                images.extend(img.iter().map(|&v| (128.0 + 48.0 * v).round().clamp(0.0, 255.0) as u8));
                let label = if rng.gen_bool(self.label_noise) {
                    (class + rng.gen_range(1..self.classes)) % self.classes
                } else {
                    class
                };
                labels.push(label as u16);
            }
            // canonical order: a fixed permutation so classes interleave irregularly
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let len = 3 * 32 * 32;
            let mut shuffled = Vec::with_capacity(images.len());
            let mut shuffled_labels = Vec::with_capacity(n);
            for &j in &order {
                shuffled.extend_from_slice(&images[j * len..(j + 1) * len]);
                shuffled_labels.push(labels[j]);
            }
            Dataset::new([3, 32, 32], self.classes, shuffled, shuffled_labels)
        };
        let train = make(n_train, &mut rng)?;
        let eval = make(n_eval, &mut rng)?;
        Ok((train, eval))
    }

    #[allow(clippy::approx_constant)]
    fn render(&self, prims: &[Primitive], layout: &ClassLayout, rng: &mut ChaCha8Rng) -> Vec<f32> {
        const S: usize = 32;
        let mut img = vec![0.0f32; 3 * S * S];
        // smooth background: two random plane waves with random colours
        for _ in 0..2 {
            let fx: f32 = rng.gen_range(-0.15..0.15);
            let fy: f32 = rng.gen_range(-0.15..0.15);
            let ph: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let col: [f32; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            for y in 0..S {
                for x in 0..S {
                    let v = self.background * (fx * x as f32 * 6.28 + fy * y as f32 * 6.28 + ph).cos();
                    for c in 0..3 {
                        img[(c * S + y) * S + x] += v * col[c];
                    }
                }
            }
        }
        let dx = rng.gen_range(-self.shift..=self.shift) as f32;
        let dy = rng.gen_range(-self.shift..=self.shift) as f32;
        let stamp = |img: &mut [f32], p: &Primitive, cx: f32, cy: f32, amp: f32, rng: &mut ChaCha8Rng| {
            let ph: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (s, c) = p.theta.sin_cos();
            let inv = 1.0 / (2.0 * p.sigma * p.sigma);
            for y in 0..S {
                for x in 0..S {
                    let (u, v) = (x as f32 - cx, y as f32 - cy);
                    let env = (-(u * u + v * v) * inv).exp();
                    if env < 1e-3 {
                        continue;
                    }
                    let carrier = (std::f32::consts::TAU * p.freq * (u * c + v * s) + ph).cos();
                    let val = amp * env * (0.35 + 0.65 * carrier);
                    for ch in 0..3 {
                        img[(ch * S + y) * S + x] += val * p.color[ch];
                    }
                }
            }
        };
        for &(prim, px, py) in &layout.parts {
            let jx = rng.gen_range(-self.jitter..=self.jitter) as f32;
            let jy = rng.gen_range(-self.jitter..=self.jitter) as f32;
            let amp = rng.gen_range(0.6..1.2);
            stamp(&mut img, &prims[prim], px + dx + jx, py + dy + jy, amp, rng);
        }
        let d = rng.gen_range(0..prims.len());
        let (qx, qy) = (rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0));
        stamp(&mut img, &prims[d], qx, qy, self.distractor, rng);
        for v in img.iter_mut() {
            *v += self.pixel_noise * rng.sample::<f32, _>(StandardNormal);
        }
        img
    }
}

/// Deterministic partition of the training pool into halves, plus the
/// evaluation-pool indices used as held-out test data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub seed: u64,
    pub h1: Vec<usize>,
    pub h2: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    /// `h1 ∪ h2`, h1 first.
    pub fn all(&self) -> Vec<usize> {
        let mut all = self.h1.clone();
        all.extend_from_slice(&self.h2);
        all
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Shuffles `0..n_train` with `seed` and cuts it in half; `h1` takes the
/// extra sample when `n_train` is odd. `test` is left empty.
pub fn make_split(n_train: usize, seed: u64) -> Result<SplitPlan> {
    if n_train < 2 {
        return Err(Error::InvalidSplit(format!("need at least 2 samples, got {n_train}")));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = n_train.div_ceil(2);
    let h2 = order.split_off(cut);
    Ok(SplitPlan {
        seed,
        h1: order,
        h2,
        test: Vec::new(),
    })
}

/// [`make_split`] with the whole evaluation pool as the test indices.
pub fn make_split_with_test(n_train: usize, n_eval: usize, seed: u64) -> Result<SplitPlan> {
    let mut plan = make_split(n_train, seed)?;
    plan.test = (0..n_eval).collect();
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub flip_probability: f64,
    pub crop_padding: usize,
    pub enabled: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            flip_probability: 0.5,
            crop_padding: 4,
            enabled: true,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        AugmentationPolicy {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled || (self.flip_probability <= 0.0 && self.crop_padding == 0)
    }
}

/// Random horizontal flip followed by zero-pad-and-crop, per image.
/// Labels and shape are preserved; a disabled policy returns the input.
pub fn augment_batch(batch: &Batch, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> Batch {
    if policy.is_identity() {
        return batch.clone();
    }
    let (c, h, w) = (batch.c, batch.h, batch.w);
    let pad = policy.crop_padding;
    let mut out = batch.clone();
    let len = c * h * w;
    for i in 0..batch.n {
        let flip = policy.flip_probability > 0.0 && rng.gen_bool(policy.flip_probability.min(1.0));
        let (oy, ox) = if pad > 0 {
            (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
        } else {
            (pad, pad)
        };
        let src = batch.image(i);
        let dst = &mut out.images[i * len..(i + 1) * len];
        for ch in 0..c {
            for y in 0..h {
                // position in the padded image is (y + oy, x + ox); source is that minus pad
                let sy = (y + oy) as isize - pad as isize;
                for x in 0..w {
                    let sx = (x + ox) as isize - pad as isize;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                        src[(ch * h + sy as usize) * w + sx]
                    };
                    dst[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(train: usize, eval: usize) -> DatasetSpec {
        DatasetSpec {
            train_size: train,
            eval_size: eval,
            ..Default::default()
        }
    }

    #[test]
    fn builtin_labels_in_range_and_deterministic() {
        let spec = tiny_spec(64, 32);
        let a = load_dataset(&spec).unwrap();
        let b = load_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 64);
        assert_eq!(a.eval.len(), 32);
        assert!(a.train.labels().iter().all(|&l| l < 10));
    }

    #[test]
    fn label_outside_class_range_is_rejected() {
        let err = Dataset::new([1, 1, 1], 10, vec![0, 0], vec![3, 12]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { index: 1, label: 12, .. }));
    }

    #[test]
    fn record_directory_round_trip_and_mismatch() {
        let pools = load_dataset(&tiny_spec(20, 10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_records(&dir.path().join("train.bin"), &pools.train).unwrap();
        write_records(&dir.path().join("test.bin"), &pools.eval).unwrap();
        let spec = DatasetSpec {
            source: dir.path().display().to_string(),
            ..tiny_spec(0, 0)
        };
        let loaded = load_dataset(&spec).unwrap();
        assert_eq!(loaded.train, pools.train);
        assert_eq!(loaded.eval, pools.eval);

        let narrow = DatasetSpec {
            num_classes: 3,
            ..spec.clone()
        };
        assert!(matches!(load_dataset(&narrow), Err(Error::LabelOutOfRange { .. })));
        let missing = DatasetSpec {
            source: dir.path().join("nope").display().to_string(),
            ..spec
        };
        assert!(matches!(load_dataset(&missing), Err(Error::MissingSource(_))));
    }

    #[test]
    fn split_sizes_and_tie_break() {
        let even = make_split(10, 0).unwrap();
        assert_eq!((even.h1.len(), even.h2.len()), (5, 5));
        let odd = make_split(11, 0).unwrap();
        assert_eq!((odd.h1.len(), odd.h2.len()), (6, 5));
        assert_eq!(make_split(11, 0).unwrap(), odd);
        assert!(matches!(make_split(1, 0), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn split_text_record_round_trips() {
        let plan = make_split_with_test(9, 4, 7).unwrap();
        let text = plan.to_text().unwrap();
        assert!(text.contains("seed = 7"));
        assert_eq!(SplitPlan::from_text(&text).unwrap(), plan);
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let pools = load_dataset(&tiny_spec(4, 2)).unwrap();
        let batch = pools.train.batch(&[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = AugmentationPolicy {
            flip_probability: 0.0,
            crop_padding: 0,
            enabled: true,
        };
        assert_eq!(augment_batch(&batch, &none, &mut rng), batch);
        assert_eq!(augment_batch(&batch, &AugmentationPolicy::disabled(), &mut rng), batch);
    }

    #[test]
    fn augmentation_is_reproducible_and_shape_preserving() {
        let pools = load_dataset(&tiny_spec(4, 2)).unwrap();
        let batch = pools.train.batch(&[0, 1, 2, 3]);
        let policy = AugmentationPolicy::default();
        let a = augment_batch(&batch, &policy, &mut ChaCha8Rng::seed_from_u64(11));
        let b = augment_batch(&batch, &policy, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert_eq!((a.n, a.c, a.h, a.w), (4, 3, 32, 32));
        assert_eq!(a.images.len(), batch.images.len());
        assert_eq!(a.labels, batch.labels);
        assert_ne!(a.images, batch.images);
    }

    #[test]
    fn full_flip_mirrors_each_row() {
        let batch = Batch {
            n: 1,
            c: 1,
            h: 1,
            w: 3,
            images: vec![1.0, 2.0, 3.0],
            labels: vec![0],
        };
        let policy = AugmentationPolicy {
            flip_probability: 1.0,
            crop_padding: 0,
            enabled: true,
        };
        let out = augment_batch(&batch, &policy, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.images, vec![3.0, 2.0, 1.0]);
    }
}
