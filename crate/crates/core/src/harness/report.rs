//! Aggregation across repetitions and byte-stable CSV / SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{models, RunRecord, SweepReport};
use crate::error::Result;
use crate::mia::AttackKind;
use crate::model_zoo::TapId;
use crate::profiler::{Cohort, DistanceSample};

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, sd, n })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repetitions: usize,
    pub metrics: BTreeMap<String, Summary>,
}

impl Aggregate {
    pub fn get(&self, key: &str) -> Option<&Summary> {
        self.metrics.get(key)
    }
}

/// Flat `metric -> value` view of one repetition.
pub fn metrics(r: &RunRecord) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (id, e) in &r.evals {
        out.insert(format!("eval.{id}.train_accuracy"), e.train_accuracy);
        out.insert(format!("eval.{id}.test_accuracy"), e.test_accuracy);
    }
    for (id, c) in &r.costs {
        out.insert(format!("cost.{id}.wall_time_total"), c.wall_time_total);
        out.insert(format!("cost.{id}.wall_time_per_epoch"), c.mean_epoch_time());
        out.insert(format!("cost.{id}.epochs_to_converge"), c.epochs_to_converge as f64);
        out.insert(format!("cost.{id}.peak_memory_bytes"), c.peak_memory_bytes as f64);
    }
    if let Some(d) = &r.disparity {
        for v in &d.verdicts {
            out.insert(format!("disparity.{}.ks", v.tap), v.ks_statistic);
            out.insert(format!("disparity.{}.flagged", v.tap), v.flagged as u8 as f64);
        }
    }
    if let Some(o) = r.onset_stage {
        out.insert("onset_stage".into(), o as f64);
    }
    if let Some(p) = &r.probe {
        for &(s, a) in &p.accuracies {
            out.insert(format!("probe.stage{s}"), a);
        }
    }
    if let Some(a) = r.pptp_alpha {
        out.insert("pptp.alpha".into(), a);
    }
    for (id, results) in &r.attacks {
        for a in results {
            out.insert(format!("attack.{id}.{}.auc", a.kind.id()), a.auc);
            out.insert(format!("attack.{id}.{}.balanced_accuracy", a.kind.id()), a.balanced_accuracy);
        }
    }
    for a in &r.permuted_attacks {
        out.insert(format!("permuted.{}.auc", a.kind.id()), a.auc);
    }
    out
}

pub fn aggregate(records: &[RunRecord]) -> Aggregate {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (k, v) in metrics(r) {
            values.entry(k).or_default().push(v);
        }
    }
    Aggregate {
        repetitions: records.len(),
        metrics: values
            .into_iter()
            .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
            .collect(),
    }
}

pub fn summary_csv(agg: &Aggregate) -> String {
    let mut s = String::from("metric,mean,sd,n\n");
    for (k, v) in &agg.metrics {
        let _ = writeln!(s, "{k},{:.6},{:.6},{}", v.mean, v.sd, v.n);
    }
    s
}

/// One named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line chart with markers. Axis ranges come from the data unless given.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], y_range: Option<(f64, f64)>) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if let Some((a, b)) = y_range {
        (y0, y1) = (a, b);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} L{} {} M{M} {} L{M} {M}" stroke="black" fill="none"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(fx), H - M + 14.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, M - 4.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.1} {:.1}", if j == 0 { "M" } else { "L" }, px(x), py(y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        }
        if ser.points.len() <= 64 {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(x), py(y));
            }
        }
        let ly = 32.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="3" fill="{color}"/>"#, W - M - 110.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - M - 96.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Overlaid density histograms on shared bins, drawn as step lines.
pub fn histogram_chart(title: &str, xlabel: &str, groups: &[(String, Vec<f64>)], bins: usize) -> String {
    let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let series: Vec<Series> = groups
        .iter()
        .map(|(name, values)| {
            let mut counts = vec![0usize; bins];
            for &v in values {
                counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
            let norm = values.len().max(1) as f64 * width;
            let mut points = Vec::with_capacity(2 * bins);
            for (b, &c) in counts.iter().enumerate() {
                let y = c as f64 / norm;
                points.push((lo + b as f64 * width, y));
                points.push((lo + (b + 1) as f64 * width, y));
            }
            Series {
                name: format!("{name} (n={})", values.len()),
                points,
            }
        })
        .collect();
    line_chart(title, xlabel, "density", &series, None)
}

/// Vertical bars, one per label.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let slot = (W - 2.0 * M) / bars.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<path d="M{M} {} L{} {}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v / top * (H - 2.0 * M - 16.0);
        let x = M + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - M - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - M - h - 4.0, tick(*v));
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="9">{}</text>"#, H - M + 14.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1e6) {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Per-repetition plots: cohort-overlaid distance histograms per tap, the
/// objective comparison per stage, KS statistic and probe accuracy per stage,
/// ROC curves per attack and model, and a cost chart.
pub fn render_run(r: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if r.artifacts.contains_key("distances") {
        let samples = super::load_distances(r, "distances")?;
        let mut taps: BTreeMap<TapId, [Vec<f64>; 2]> = BTreeMap::new();
        for s in &samples {
            let slot = taps.entry(s.tap).or_default();
            slot[(s.cohort == Cohort::SeenOnlyAll) as usize].push(s.distance);
        }
        for (tap, [both, only]) in &taps {
            let groups = [("seen by both".to_string(), both.clone()), ("seen only by M_all".to_string(), only.clone())];
            let svg = histogram_chart(&format!("feature distance at {tap}"), "distance", &groups, 40);
            fs::write(dir.join(format!("distance_{tap}.svg")), svg)?;
        }
        if r.artifacts.contains_key("comparison_distances") {
            let other = super::load_distances(r, "comparison_distances")?;
            for tap in taps.keys().filter(|t| t.is_stage_end()) {
                let pick = |v: &[DistanceSample], c: Cohort| -> Vec<f64> {
                    v.iter().filter(|s| s.tap == *tap && s.cohort == c).map(|s| s.distance).collect()
                };
                let groups = [
                    ("CE full vs half".to_string(), pick(&samples, Cohort::SeenOnlyAll)),
                    ("defense full vs half".to_string(), pick(&other, Cohort::SeenOnlyAll)),
                ];
                let svg = histogram_chart(&format!("objective comparison at {tap} (h2 samples)"), "distance", &groups, 40);
                fs::write(dir.join(format!("comparison_{tap}.svg")), svg)?;
            }
        }
    }
    let bars: Vec<(String, f64)> = r.costs.iter().map(|(id, c)| (id.clone(), c.mean_epoch_time())).collect();
    if !bars.is_empty() {
        fs::write(dir.join("cost.svg"), bar_chart("training cost", "seconds per epoch", &bars))?;
    }
    if let Some(d) = &r.disparity {
        let mut by_block = Series {
            name: "all taps".into(),
            points: Vec::new(),
        };
        let mut ends = Series {
            name: "stage ends".into(),
            points: Vec::new(),
        };
        for (i, v) in d.verdicts.iter().enumerate() {
            by_block.points.push((i as f64 + 1.0, v.ks_statistic));
            if v.tap.is_stage_end() {
                ends.points.push((i as f64 + 1.0, v.ks_statistic));
            }
        }
        let svg = line_chart("distance disparity", "tap (network order)", "KS statistic", &[by_block, ends], None);
        fs::write(dir.join("disparity.svg"), svg)?;
    }
    if let Some(p) = &r.probe {
        let s = Series {
            name: "test".into(),
            points: p.accuracies.iter().map(|&(s, a)| (s as f64, a)).collect(),
        };
        let t = Series {
            name: "train".into(),
            points: p.train_accuracies.iter().map(|&(s, a)| (s as f64, a)).collect(),
        };
        fs::write(dir.join("probe.svg"), line_chart("linear probe", "stage", "accuracy", &[s, t], Some((0.0, 1.0))))?;
    }
    for kind in AttackKind::ALL {
        let mut series = Vec::new();
        for (id, path) in &r.artifacts {
            let Some(model) = id.strip_prefix("roc.").and_then(|s| s.strip_suffix(&format!(".{}", kind.id()))) else {
                continue;
            };
            if let Ok(points) = crate::mia::read_roc(path) {
                series.push(Series {
                    name: model.to_string(),
                    points: thin(points, 200),
                });
            }
        }
        if !series.is_empty() {
            let svg = line_chart(&format!("ROC ({})", kind.id()), "false positive rate", "true positive rate", &series, Some((0.0, 1.0)));
            fs::write(dir.join(format!("roc_{}.svg", kind.id())), svg)?;
        }
    }
    Ok(())
}

fn thin(points: Vec<(f64, f64)>, max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max {
        return points;
    }
    let step = points.len().div_ceil(max);
    let last = *points.last().expect("non-empty");
    let mut out: Vec<_> = points.into_iter().step_by(step).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Aggregate report: `summary.csv`, a privacy/utility table and charts.
pub fn render_report(records: &[RunRecord], agg: &Aggregate, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), summary_csv(agg))?;
    fs::write(dir.join("models.csv"), models_csv(agg))?;
    let mut ks = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(d) = &r.disparity {
            ks.push(Series {
                name: format!("rep {i}"),
                points: d
                    .verdicts
                    .iter()
                    .filter(|v| v.tap.is_stage_end())
                    .map(|v| (v.tap.stage as f64, v.ks_statistic))
                    .collect(),
            });
        }
    }
    if !ks.is_empty() {
        fs::write(dir.join("disparity.svg"), line_chart("stage-end disparity", "stage", "KS statistic", &ks, None))?;
    }
    let mut probe = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(p) = &r.probe {
            probe.push(Series {
                name: format!("rep {i}"),
                points: p.accuracies.iter().map(|&(s, a)| (s as f64, a)).collect(),
            });
        }
    }
    if !probe.is_empty() {
        fs::write(dir.join("probe.svg"), line_chart("linear probe", "stage", "test accuracy", &probe, Some((0.0, 1.0))))?;
    }
    let bars: Vec<(String, f64)> = agg
        .metrics
        .iter()
        .filter_map(|(k, v)| Some((k.strip_prefix("cost.")?.strip_suffix(".wall_time_per_epoch")?.to_string(), v.mean)))
        .collect();
    if !bars.is_empty() {
        fs::write(dir.join("cost.svg"), bar_chart("mean seconds per epoch", "seconds", &bars))?;
    }
    let mut tradeoff = Vec::new();
    for id in model_ids(agg) {
        let (Some(acc), Some(auc)) = (
            agg.get(&format!("eval.{id}.test_accuracy")),
            agg.get(&format!("attack.{id}.{}.auc", AttackKind::Mentropy.id())),
        ) else {
            continue;
        };
        tradeoff.push(Series {
            name: id,
            points: vec![(auc.mean, acc.mean)],
        });
    }
    if !tradeoff.is_empty() {
        let svg = line_chart("privacy / utility", "mentropy attack AUC", "test accuracy", &tradeoff, None);
        fs::write(dir.join("tradeoff.svg"), svg)?;
    }
    Ok(())
}

fn model_ids(agg: &Aggregate) -> Vec<String> {
    let mut ids: Vec<String> = agg
        .metrics
        .keys()
        .filter_map(|k| k.strip_prefix("eval.")?.strip_suffix(".test_accuracy").map(str::to_string))
        .filter(|id| id != models::HALF)
        .collect();
    ids.dedup();
    ids
}

/// One row per model: utility, cost and every attack's AUC.
pub fn models_csv(agg: &Aggregate) -> String {
    let mut s = String::from("model,test_accuracy,train_accuracy,epoch_time,epochs_to_converge");
    for k in AttackKind::ALL {
        let _ = write!(s, ",{}_auc", k.id());
    }
    s.push('\n');
    let fmt = |v: Option<&Summary>| v.map_or(String::new(), |v| format!("{:.4}", v.mean));
    for id in model_ids(agg) {
        let _ = write!(
            s,
            "{id},{},{},{},{}",
            fmt(agg.get(&format!("eval.{id}.test_accuracy"))),
            fmt(agg.get(&format!("eval.{id}.train_accuracy"))),
            fmt(agg.get(&format!("cost.{id}.wall_time_per_epoch"))),
            fmt(agg.get(&format!("cost.{id}.epochs_to_converge"))),
        );
        for k in AttackKind::ALL {
            let _ = write!(s, ",{}", fmt(agg.get(&format!("attack.{id}.{}.auc", k.id()))));
        }
        s.push('\n');
    }
    s
}

/// Sweep charts: onset stage and stage-end KS statistics against the factor.
pub fn render_sweep(report: &SweepReport, records: &[(f64, Vec<RunRecord>)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("value,repetition,onset_stage,test_accuracy\n");
    for (v, recs) in records {
        for r in recs {
            let acc = r.evals.get(models::PRETRAINED).map_or(f64::NAN, |e| e.test_accuracy);
            let onset = r.onset_stage.map_or(String::new(), |o| o.to_string());
            let _ = writeln!(csv, "{v},{},{onset},{acc:.4}", r.repetition);
        }
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    let onset = Series {
        name: "mean onset".into(),
        points: report
            .points
            .iter()
            .filter_map(|p| {
                let o: Vec<f64> = p.onsets.iter().map(|&o| o as f64).collect();
                Summary::of(&o).map(|s| (p.value, s.mean))
            })
            .collect(),
    };
    let title = format!("risk onset vs {}", report.factor.id());
    fs::write(dir.join("onset.svg"), line_chart(&title, report.factor.id(), "onset stage", &[onset], None))?;
    let stages = report
        .points
        .iter()
        .flat_map(|p| p.stage_statistics.iter().map(|s| s.len()))
        .max()
        .unwrap_or(0);
    let series: Vec<Series> = (0..stages)
        .map(|k| Series {
            name: format!("stage {}", k + 1),
            points: report
                .points
                .iter()
                .filter_map(|p| {
                    let v: Vec<f64> = p.stage_statistics.iter().filter_map(|s| s.get(k).copied()).collect();
                    Summary::of(&v).map(|s| (p.value, s.mean))
                })
                .collect(),
        })
        .collect();
    let title = format!("disparity vs {}", report.factor.id());
    fs::write(dir.join("disparity.svg"), line_chart(&title, report.factor.id(), "KS statistic", &series, None))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_sample_sd() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[7.0]).unwrap().sd, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn charts_are_deterministic() {
        let s = || {
            vec![Series {
                name: "a<b".into(),
                points: vec![(0.0, 0.1), (1.0, 0.5), (2.0, 0.4)],
            }]
        };
        let a = line_chart("t", "x", "y", &s(), None);
        assert_eq!(a, line_chart("t", "x", "y", &s(), None));
        assert!(a.contains("a&lt;b"));
        assert!(a.starts_with("<svg"));
    }
}
