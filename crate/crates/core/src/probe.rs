//! Linear probes on globally pooled stage features.
//!
//! The probe is a one-vs-rest linear classifier with the squared hinge loss
//! (an L2-SVM) fitted by full-batch accelerated gradient descent on
//! standardized features. It never touches the backbone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::model_zoo::{Model, TapSelection};
use crate::tensor::{argmax, sgemm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFeature {
    pub sample_index: usize,
    pub stage: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (not the biases).
    pub regularization: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            regularization: 1e-3,
            iterations: 300,
        }
    }
}

const EXTRACT_BATCH: usize = 250;

/// Global-average-pooled stage-end features for every stage, keyed by stage.
pub fn extract_all_stages(model: &mut Model, data: &Dataset, indices: &[usize]) -> Result<BTreeMap<usize, Vec<ProbeFeature>>> {
    let mut out: BTreeMap<usize, Vec<ProbeFeature>> = BTreeMap::new();
    for chunk in indices.chunks(EXTRACT_BATCH) {
        let (_, maps) = model.forward_with_taps(&data.batch(chunk), TapSelection::StageEnds)?;
        for fm in maps {
            let v = &fm.values;
            let hw = v.plane();
            let dst = out.entry(fm.tap.stage).or_default();
            for (j, &sample_index) in chunk.iter().enumerate() {
                let vector = (0..v.c)
                    .map(|ch| {
                        let s = &v.data[(ch * v.n + j) * hw..(ch * v.n + j + 1) * hw];
                        (s.iter().map(|&x| x as f64).sum::<f64>() / hw as f64) as f32
                    })
                    .collect();
                dst.push(ProbeFeature {
                    sample_index,
                    stage: fm.tap.stage,
                    vector,
                });
            }
        }
    }
    Ok(out)
}

/// Pooled features of one stage, one vector per index.
pub fn extract_pooled_features(model: &mut Model, data: &Dataset, indices: &[usize], stage: usize) -> Result<Vec<ProbeFeature>> {
    if stage < 1 || stage > model.num_stages() {
        return Err(Error::OnsetOutOfRange {
            onset: stage,
            max: model.num_stages(),
        });
    }
    Ok(extract_all_stages(model, data, indices)?.remove(&stage).unwrap_or_default())
}

/// Fitted probe: standardization followed by a linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub classes: usize,
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
    /// `(d + 1) x classes`, the last row holding the biases.
    pub weights: Vec<f32>,
}

impl Probe {
    fn design(&self, features: &[&[f32]]) -> Vec<f32> {
        standardized(features, &self.mean, &self.scale)
    }

    pub fn predict(&self, features: &[&[f32]]) -> Vec<usize> {
        let x = self.design(features);
        let d1 = self.mean.len() + 1;
        let mut s = vec![0.0f32; features.len() * self.classes];
        sgemm(features.len(), d1, self.classes, 1.0, &x, false, &self.weights, false, 0.0, &mut s);
        s.chunks(self.classes).map(argmax).collect()
    }

    pub fn accuracy(&self, features: &[&[f32]], labels: &[usize]) -> f64 {
        let hits = self.predict(features).iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn standardized(features: &[&[f32]], mean: &[f32], scale: &[f32]) -> Vec<f32> {
    let d = mean.len();
    let mut x = Vec::with_capacity(features.len() * (d + 1));
    for f in features {
        x.extend(f.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) * s));
        x.push(1.0);
    }
    x
}

/// Fits a one-vs-rest squared-hinge probe. Rows are sorted by sample index
/// first, so the result does not depend on input order.
pub fn fit_linear_probe(features: &[ProbeFeature], labels: &[usize], classes: usize, seed: u64, config: &ProbeConfig) -> Result<Probe> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by_key(|&i| features[i].sample_index);
    let rows: Vec<&[f32]> = order.iter().map(|&i| features[i].vector.as_slice()).collect();
    let ys: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    fit_rows(&rows, &ys, classes, seed, config)
}

fn fit_rows(rows: &[&[f32]], labels: &[usize], classes: usize, seed: u64, config: &ProbeConfig) -> Result<Probe> {
    let n = rows.len();
    if labels.iter().any(|&y| y >= classes) {
        return Err(Error::InvalidConfig("probe label outside class range".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("probe needs at least two classes".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { left: d, right: 0 });
    }
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for r in rows {
        for (j, &v) in r.iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += v as f64 * v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / n as f64) as f32).collect();
    let scale: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, &m)| {
            let var = (s / n as f64 - (m as f64) * (m as f64)).max(0.0);
            if var > 1e-12 {
                (1.0 / var.sqrt()) as f32
            } else {
                0.0
            }
        })
        .collect();
    let x = standardized(rows, &mean, &scale);
    let d1 = d + 1;
    let lam = config.regularization as f32;
    let step = 1.0 / (2.0 * top_eigenvalue(&x, n, d1) + lam);

    let normal = Normal::new(0.0f32, 1e-3).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f32> = (0..d1 * classes).map(|_| normal.sample(&mut rng)).collect();
    let mut prev = w.clone();
    let mut look = w.clone();
    let mut s = vec![0.0f32; n * classes];
    let mut g = vec![0.0f32; d1 * classes];
    for t in 0..config.iterations {
        sgemm(n, d1, classes, 1.0, &x, false, &look, false, 0.0, &mut s);
        for (i, &y) in labels.iter().enumerate() {
            for c in 0..classes {
                let sign = if c == y { 1.0 } else { -1.0 };
                let v = &mut s[i * classes + c];
                let margin = 1.0 - sign * *v;
                *v = if margin > 0.0 { -2.0 * sign * margin / n as f32 } else { 0.0 };
            }
        }
        sgemm(d1, n, classes, 1.0, &x, true, &s, false, 0.0, &mut g);
        for (k, gv) in g[..d * classes].iter_mut().enumerate() {
            *gv += lam * look[k];
        }
        let momentum = t as f32 / (t as f32 + 3.0);
        for k in 0..w.len() {
            let next = look[k] - step * g[k];
            look[k] = next + momentum * (next - prev[k]);
            prev[k] = next;
        }
        w.copy_from_slice(&prev);
    }
    Ok(Probe {
        classes,
        mean,
        scale,
        weights: w,
    })
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
fn top_eigenvalue(x: &[f32], n: usize, d: usize) -> f32 {
    let mut v = vec![1.0f32 / (d as f32).sqrt(); d];
    let mut xv = vec![0.0f32; n];
    let mut lam = 1.0;
    for _ in 0..30 {
        sgemm(n, d, 1, 1.0, x, false, &v, false, 0.0, &mut xv);
        let mut u = vec![0.0f32; d];
        sgemm(d, n, 1, 1.0 / n as f32, x, true, &xv, false, 0.0, &mut u);
        let norm = u.iter().map(|a| a * a).sum::<f32>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        lam = norm;
        v = u.into_iter().map(|a| a / norm).collect();
    }
    lam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `(stage, test accuracy)`, stages in order.
    pub accuracies: Vec<(usize, f64)>,
    pub train_accuracies: Vec<(usize, f64)>,
}

impl ProbeReport {
    pub fn accuracy(&self, stage: usize) -> Option<f64> {
        self.accuracies.iter().find(|(s, _)| *s == stage).map(|&(_, a)| a)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("stage\ttest_accuracy\ttrain_accuracy\n");
        for ((s, a), (_, t)) in self.accuracies.iter().zip(&self.train_accuracies) {
            writeln!(out, "{s}\t{a:.6}\t{t:.6}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Probe accuracy per stage: fitted on `train` indices of the training pool,
/// scored on `test` indices of the evaluation pool.
#[allow(clippy::too_many_arguments)]
pub fn probe_curve_on(
    model: &mut Model,
    train_data: &Dataset,
    train: &[usize],
    test_data: &Dataset,
    test: &[usize],
    seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyIndices("probe_curve"));
    }
    let classes = model.num_classes();
    let tr = extract_all_stages(model, train_data, train)?;
    let te = extract_all_stages(model, test_data, test)?;
    let ytr: Vec<usize> = train.iter().map(|&i| train_data.label(i)).collect();
    let yte: Vec<usize> = test.iter().map(|&i| test_data.label(i)).collect();
    let mut report = ProbeReport {
        accuracies: Vec::new(),
        train_accuracies: Vec::new(),
    };
    for (stage, feats) in &tr {
        let probe = fit_linear_probe(feats, &ytr, classes, seed, config)?;
        let rows: Vec<&[f32]> = feats.iter().map(|f| f.vector.as_slice()).collect();
        report.train_accuracies.push((*stage, probe.accuracy(&rows, &ytr)));
        let rows: Vec<&[f32]> = te[stage].iter().map(|f| f.vector.as_slice()).collect();
        report.accuracies.push((*stage, probe.accuracy(&rows, &yte)));
    }
    Ok(report)
}

/// [`probe_curve_on`] with the split's training pool (`h1 ∪ h2`) and test
/// indices.
pub fn probe_curve(model: &mut Model, train_data: &Dataset, test_data: &Dataset, split: &SplitPlan, seed: u64) -> Result<ProbeReport> {
    probe_curve_on(model, train_data, &split.all(), test_data, &split.test, seed, &ProbeConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[Vec<f32>]) -> Vec<ProbeFeature> {
        rows.iter()
            .enumerate()
            .map(|(i, v)| ProbeFeature {
                sample_index: i,
                stage: 1,
                vector: v.clone(),
            })
            .collect()
    }

    #[test]
    fn separable_two_class_is_fit_exactly() {
        let rows: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let c = (i % 2) as f32;
                vec![c * 2.0 - 1.0 + (i as f32 * 0.37).sin() * 0.3, (i as f32).cos()]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let probe = fit_linear_probe(&feats(&rows), &labels, 2, 0, &ProbeConfig::default()).unwrap();
        let r: Vec<&[f32]> = rows.iter().map(|v| v.as_slice()).collect();
        assert_eq!(probe.accuracy(&r, &labels), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = vec![vec![1.0f32], vec![2.0]];
        assert!(matches!(
            fit_linear_probe(&feats(&rows), &[0, 0], 3, 0, &ProbeConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn input_order_does_not_matter() {
        let rows: Vec<Vec<f32>> = (0..30).map(|i| vec![(i as f32 * 0.7).sin(), (i as f32 * 1.3).cos()]).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let f = feats(&rows);
        let a = fit_linear_probe(&f, &labels, 3, 4, &ProbeConfig::default()).unwrap();
        let mut rf = f.clone();
        let mut rl = labels.clone();
        rf.reverse();
        rl.reverse();
        let b = fit_linear_probe(&rf, &rl, 3, 4, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
