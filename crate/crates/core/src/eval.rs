//! Accuracy metrics, per-fold evaluation and the inference latency
//! benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::architecture::{complexity, ComplexityReport, Model};
use crate::data::{normalize, Fold, NormalizationStats, QoETrace};
use crate::error::{QoeError, Result};
use crate::numerics::Series;
use crate::rng::rng_for;
use crate::training::make_windows;

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(QoeError::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < min_len {
        return Err(QoeError::Shape(format!("need at least {min_len} values, got {}", a.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(QoeError::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn srocc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    pcc(&average_ranks(a), &average_ranks(b))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 1)?;
    Ok((a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Per-second predictions for one test trace, in native QoE units.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePrediction {
    pub fold: usize,
    pub trace_id: String,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
}

impl TracePrediction {
    /// `t,y_true,y_pred` CSV for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,y_true,y_pred\n");
        for (t, (y, p)) in self.y_true.iter().zip(&self.y_pred).enumerate() {
            let _ = writeln!(s, "{t},{y},{p}");
        }
        s
    }
}

/// Model outputs (normalized) for every second of `trace`.
pub fn predict_normalized(
    model: &Model,
    trace: &QoETrace,
    stats: &NormalizationStats,
    window: usize,
) -> Result<Vec<f64>> {
    let n = normalize(trace, stats)?;
    make_windows(&n, window)?
        .iter()
        .map(|s| model.forward(&s.window))
        .collect()
}

pub fn predict_trace(
    model: &Model,
    trace: &QoETrace,
    stats: &NormalizationStats,
    window: usize,
    fold: usize,
) -> Result<TracePrediction> {
    let y_pred = predict_normalized(model, trace, stats, window)?
        .into_iter()
        .map(|v| stats.denormalize_qoe(v))
        .collect();
    Ok(TracePrediction {
        fold,
        trace_id: trace.id.clone(),
        y_true: trace.qoe(),
        y_pred,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub trace_id: String,
    pub pcc: Option<f64>,
    pub srocc: Option<f64>,
    pub rmse: Option<f64>,
    /// Why a metric is missing, if one is.
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub pcc: Option<f64>,
    pub srocc: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldMetrics>,
    pub aggregate: Aggregate,
    pub complexity: Option<ComplexityReport>,
    pub latency: Option<LatencyStats>,
}

fn opt_mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// Unweighted mean of each metric over the rows where it is defined.
    fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let aggregate = Aggregate {
            pcc: opt_mean(folds.iter().map(|f| f.pcc)),
            srocc: opt_mean(folds.iter().map(|f| f.srocc)),
            rmse: opt_mean(folds.iter().map(|f| f.rmse)),
        };
        Self {
            folds,
            aggregate,
            complexity: None,
            latency: None,
        }
    }

    /// One row per evaluated test trace plus an `aggregate` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,trace,pcc,srocc,rmse,note\n");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                f.fold,
                f.trace_id,
                fmt_opt(f.pcc),
                fmt_opt(f.srocc),
                fmt_opt(f.rmse),
                f.note.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "aggregate,,{},{},{},",
            fmt_opt(a.pcc),
            fmt_opt(a.srocc),
            fmt_opt(a.rmse)
        );
        s
    }
}

/// Metrics for one prediction series. Missing correlations are explained
/// in the note.
pub fn score(pred: &TracePrediction) -> FoldMetrics {
    let mut row = FoldMetrics {
        fold: pred.fold,
        trace_id: pred.trace_id.clone(),
        pcc: None,
        srocc: None,
        rmse: None,
        note: None,
    };
    if pred.y_true.len() < 2 {
        row.note = Some("trace shorter than 2 samples; skipped".into());
        log::warn!("fold {}: trace `{}` too short, skipped", pred.fold, pred.trace_id);
        return row;
    }
    row.rmse = rmse(&pred.y_true, &pred.y_pred).ok();
    let mut notes = Vec::new();
    match pcc(&pred.y_true, &pred.y_pred) {
        Ok(v) => row.pcc = Some(v),
        Err(e) => notes.push(format!("pcc: {e}")),
    }
    match srocc(&pred.y_true, &pred.y_pred) {
        Ok(v) => row.srocc = Some(v),
        Err(e) => notes.push(format!("srocc: {e}")),
    }
    if !notes.is_empty() {
        row.note = Some(notes.join("; "));
    }
    row
}

/// Evaluates each fold's test traces. `models` holds one `(model, stats)`
/// pair per fold, or a single pair shared by every fold.
pub fn evaluate(
    db: &[QoETrace],
    folds: &[Fold],
    models: &[(&Model, &NormalizationStats)],
    window: usize,
) -> Result<(EvalReport, Vec<TracePrediction>)> {
    if models.len() != folds.len() && models.len() != 1 {
        return Err(QoeError::Shape(format!(
            "{} models for {} folds",
            models.len(),
            folds.len()
        )));
    }
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for (i, fold) in folds.iter().enumerate() {
        let (model, stats) = models[if models.len() == 1 { 0 } else { i }];
        for &ti in &fold.test {
            let trace = db
                .get(ti)
                .ok_or_else(|| QoeError::Split(format!("fold {i} references trace {ti}")))?;
            let p = predict_trace(model, trace, stats, window, i)?;
            rows.push(score(&p));
            preds.push(p);
        }
    }
    Ok((EvalReport::from_folds(rows), preds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub latency: LatencyStats,
    pub complexity: ComplexityReport,
    pub reps: usize,
    pub window: usize,
}

pub const MIN_BENCH_REPS: usize = 30;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times single-window predictions on the calling thread. The first
/// `warmup` calls are discarded. `window = None` uses the model's
/// receptive field.
pub fn bench_inference(
    model: &Model,
    reps: usize,
    warmup: usize,
    window: Option<usize>,
) -> Result<BenchReport> {
    if reps < MIN_BENCH_REPS {
        return Err(QoeError::Parameter(format!(
            "need at least {MIN_BENCH_REPS} repetitions, got {reps}"
        )));
    }
    let w = window.unwrap_or_else(|| model.receptive_field()).max(1);
    let mut rng = rng_for(0, "bench-window");
    let c = model.in_channels();
    let x = Series::new(c, w, (0..c * w).map(|_| rng.random::<f64>()).collect())?;
    let mut sink = 0.0;
    for _ in 0..warmup {
        sink += model.forward(&x)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        sink += std::hint::black_box(model.forward(std::hint::black_box(&x))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    let mean_ms = mean(&times);
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        latency: LatencyStats {
            median_ms: percentile(&times, 0.5),
            p95_ms: percentile(&times, 0.95),
            mean_ms,
        },
        complexity: complexity(model),
        reps,
        window: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcc_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pcc(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&a, &[1.0, 4.0, 9.0]).unwrap() - 0.989_743_318_610_787).abs() < 1e-12);
        assert!((pcc(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pcc(&a, &[2.0; 3]), Err(QoeError::UndefinedCorrelation(_))));
        assert!(pcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn srocc_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((srocc(&a, &[1.0, 4.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((srocc(&a, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((srocc(&[1.0, 1.0, 2.0], &[3.0, 3.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        let (a, b) = ([0.5, -1.0, 2.0], [1.5, 0.0, -2.0]);
        let base = rmse(&a, &b).unwrap();
        for c in [-3.0, 0.5, 10.0] {
            let ca: Vec<f64> = a.iter().map(|v| v * c).collect();
            let cb: Vec<f64> = b.iter().map(|v| v * c).collect();
            assert!((rmse(&ca, &cb).unwrap() - c.abs() * base).abs() < 1e-12);
        }
        assert!(rmse(&[1.0], &[]).is_err());
    }

    fn pred(y: Vec<f64>, p: Vec<f64>) -> TracePrediction {
        TracePrediction {
            fold: 0,
            trace_id: "t".into(),
            y_true: y,
            y_pred: p,
        }
    }

    #[test]
    fn score_perfect_and_constant() {
        let y = vec![10.0, 30.0, 20.0, 50.0];
        let r = score(&pred(y.clone(), y.clone()));
        assert_eq!((r.pcc, r.rmse), (Some(1.0), Some(0.0)));
        let r = score(&pred(y.clone(), vec![25.0; 4]));
        assert!(r.pcc.is_none() && r.srocc.is_none());
        assert!(r.note.unwrap().contains("pcc"));
        // RMS deviation of y from 25: sqrt((225 + 25 + 25 + 625) / 4) = 15
        assert!((r.rmse.unwrap() - 15.0).abs() < 1e-12);
        let r = score(&pred(vec![1.0], vec![1.0]));
        assert!(r.rmse.is_none() && r.note.is_some());
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let rows = vec![
            score(&pred(vec![1.0, 2.0, 3.0], vec![1.0, 2.5, 3.0])),
            score(&pred(vec![1.0, 2.0, 3.0], vec![2.0, 2.0, 2.0])),
        ];
        let r0 = rows[0].rmse.unwrap();
        let r1 = rows[1].rmse.unwrap();
        let rep = EvalReport::from_folds(rows);
        assert!((rep.aggregate.rmse.unwrap() - (r0 + r1) / 2.0).abs() < 1e-15);
        assert_eq!(rep.aggregate.pcc, rep.folds[0].pcc);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("aggregate,"));
    }

    #[test]
    fn bench_needs_thirty_reps_and_reports_complexity() {
        let config = crate::ModelConfig::default();
        let model = crate::build_model(&config, &mut rng_for(0, "t"), false).unwrap();
        assert!(matches!(bench_inference(&model, 29, 0, None), Err(QoeError::Parameter(_))));
        let r = bench_inference(&model, 30, 2, None).unwrap();
        assert_eq!(r.window, 9);
        assert_eq!(r.reps, 30);
        assert_eq!(r.complexity, complexity(&model));
        let l = r.latency;
        assert!(l.median_ms > 0.0 && l.median_ms <= l.p95_ms && l.mean_ms > 0.0);
    }
}
