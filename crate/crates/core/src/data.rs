//! QoE traces: CSV ingestion, normalization, evaluation split protocols
//! and a synthetic session generator.
//!
//! A trace file looks like
//!
//! ```text
//! # id=s01
//! # content=c3
//! # pattern=p1
//! # qoe_min=0
//! # qoe_max=100
//! t,stsq,pi,nr,tr,qoe
//! 0,12.5,0,0,0,81.2
//! 1,12.7,0,0,1,80.9
//! ```
//!
//! Features per second: STSQ (rendered-quality distortion score, larger is
//! worse), PI (1 while rebuffering), NR (rebuffering events so far) and TR
//! (seconds since the last impairment, i.e. a stall second or a quality
//! switch).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{QoeError, Result};
use crate::numerics::Series;
use crate::rng::{derive_indexed, rng_for, SeededRng};
use rand::SeedableRng;

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub stsq: f64,
    pub pi: u8,
    pub nr: u32,
    pub tr: f64,
    pub qoe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QoETrace {
    pub id: String,
    pub content_id: Option<String>,
    pub pattern_id: Option<String>,
    pub samples: Vec<TraceSample>,
    pub qoe_range: (f64, f64),
}

impl QoETrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn qoe(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.qoe).collect()
    }

    /// Checks every trace invariant. On failure returns the offending
    /// sample index and a description.
    fn check(&self) -> std::result::Result<(), (usize, String)> {
        let (lo, hi) = self.qoe_range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err((0, format!("invalid qoe range [{lo}, {hi}]")));
        }
        let mut prev: Option<&TraceSample> = None;
        for (i, s) in self.samples.iter().enumerate() {
            check_sample(prev, s, self.qoe_range).map_err(|m| (i, m))?;
            prev = Some(s);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(QoeError::Data(format!("trace `{}` is empty", self.id)));
        }
        self.check()
            .map_err(|(i, m)| QoeError::Data(format!("trace `{}` second {i}: {m}", self.id)))
    }
}

fn check_sample(
    prev: Option<&TraceSample>,
    s: &TraceSample,
    (lo, hi): (f64, f64),
) -> std::result::Result<(), String> {
    if !(s.stsq.is_finite() && s.stsq >= 0.0) {
        return Err(format!("stsq {} must be a nonnegative number", s.stsq));
    }
    if s.pi > 1 {
        return Err(format!("pi {} must be 0 or 1", s.pi));
    }
    if !(s.tr.is_finite() && s.tr >= 0.0) {
        return Err(format!("tr {} must be nonnegative", s.tr));
    }
    if s.pi == 1 && s.tr.abs() > TOL {
        return Err(format!("tr must be 0 while rebuffering, got {}", s.tr));
    }
    if !(s.qoe.is_finite() && s.qoe >= lo - TOL && s.qoe <= hi + TOL) {
        return Err(format!("qoe {} outside [{lo}, {hi}]", s.qoe));
    }
    if let Some(p) = prev {
        if s.nr < p.nr {
            return Err(format!("nr decreased from {} to {}", p.nr, s.nr));
        }
        if s.tr.abs() > TOL && (s.tr - (p.tr + 1.0)).abs() > TOL {
            return Err(format!(
                "tr must reset to 0 or advance by 1 (previous {}, got {})",
                p.tr, s.tr
            ));
        }
    }
    Ok(())
}

const COLUMNS: [&str; 6] = ["t", "stsq", "pi", "nr", "tr", "qoe"];

fn perr(line: usize, message: impl Into<String>) -> QoeError {
    QoeError::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_trace(bytes: &[u8]) -> Result<QoETrace> {
    let text = std::str::from_utf8(bytes).map_err(|e| perr(0, format!("not UTF-8: {e}")))?;
    let mut id = String::new();
    let mut content_id = None;
    let mut pattern_id = None;
    let mut qoe_min = None;
    let mut qoe_max = None;
    let mut columns: Option<[usize; 6]> = None;
    let mut samples = Vec::new();
    let mut sample_lines = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            let Some((key, value)) = meta.trim().split_once('=') else {
                continue;
            };
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| perr(line_no, format!("`{v}` is not a number")))
            };
            match key.trim() {
                "id" => id = value.to_string(),
                "content" => content_id = Some(value.to_string()),
                "pattern" => pattern_id = Some(value.to_string()),
                "qoe_min" => qoe_min = Some(num(value)?),
                "qoe_max" => qoe_max = Some(num(value)?),
                other => log::debug!("line {line_no}: ignoring metadata key `{other}`"),
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(cols) = columns else {
            let mut pos = [usize::MAX; 6];
            for (i, name) in COLUMNS.iter().enumerate() {
                pos[i] = fields
                    .iter()
                    .position(|f| f == name)
                    .ok_or_else(|| perr(line_no, format!("missing column `{name}`")))?;
            }
            columns = Some(pos);
            continue;
        };
        let get = |c: usize| -> Result<&str> {
            fields
                .get(cols[c])
                .copied()
                .ok_or_else(|| perr(line_no, format!("missing value for `{}`", COLUMNS[c])))
        };
        let real = |c: usize| -> Result<f64> {
            let v = get(c)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| perr(line_no, format!("{} `{v}` is not a finite number", COLUMNS[c])))
        };
        let t = get(0)?
            .parse::<usize>()
            .map_err(|_| perr(line_no, "t must be a nonnegative integer"))?;
        if t != samples.len() {
            return Err(perr(line_no, format!("expected t={}, got {t}", samples.len())));
        }
        let pi = match get(2)? {
            "0" => 0,
            "1" => 1,
            other => return Err(perr(line_no, format!("pi `{other}` must be 0 or 1"))),
        };
        let nr = get(3)?
            .parse::<u32>()
            .map_err(|_| perr(line_no, "nr must be a nonnegative integer"))?;
        samples.push(TraceSample {
            stsq: real(1)?,
            pi,
            nr,
            tr: real(4)?,
            qoe: real(5)?,
        });
        sample_lines.push(line_no);
    }

    if columns.is_none() {
        return Err(perr(0, "missing header row"));
    }
    let qoe_min = qoe_min.ok_or_else(|| perr(0, "missing `# qoe_min=` metadata"))?;
    let qoe_max = qoe_max.ok_or_else(|| perr(0, "missing `# qoe_max=` metadata"))?;
    let trace = QoETrace {
        id,
        content_id,
        pattern_id,
        samples,
        qoe_range: (qoe_min, qoe_max),
    };
    if trace.samples.is_empty() {
        return Err(perr(0, "no data rows"));
    }
    trace
        .check()
        .map_err(|(i, m)| perr(sample_lines.get(i).copied().unwrap_or(0), m))?;
    Ok(trace)
}

/// Canonical CSV form of a trace.
pub fn write_trace(trace: &QoETrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# id={}", trace.id);
    if let Some(c) = &trace.content_id {
        let _ = writeln!(out, "# content={c}");
    }
    if let Some(p) = &trace.pattern_id {
        let _ = writeln!(out, "# pattern={p}");
    }
    let _ = writeln!(out, "# qoe_min={}", trace.qoe_range.0);
    let _ = writeln!(out, "# qoe_max={}", trace.qoe_range.1);
    out.push_str("t,stsq,pi,nr,tr,qoe\n");
    for (t, s) in trace.samples.iter().enumerate() {
        let _ = writeln!(out, "{t},{},{},{},{},{}", s.stsq, s.pi, s.nr, s.tr, s.qoe);
    }
    out
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<QoETrace> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let mut trace = parse_trace(&bytes).map_err(|e| match e {
        QoeError::Parse { line, message } => QoeError::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    if trace.id.is_empty() {
        trace.id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(trace)
}

/// Trace files (`*.csv`) in `dir`, sorted by file name.
pub fn trace_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Feature min/max used for scaling, plus the database's QoE range.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub stsq: (f64, f64),
    pub nr: (f64, f64),
    pub tr: (f64, f64),
    pub qoe_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Stsq,
    Pi,
    Nr,
    Tr,
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    // A feature that never varies in training still needs a usable scale.
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

impl NormalizationStats {
    /// Fits feature ranges over all samples of `traces`. The QoE range is
    /// the union of the traces' declared ranges.
    pub fn fit(traces: &[QoETrace]) -> Result<Self> {
        let mut it = traces.iter().flat_map(|t| t.samples.iter()).peekable();
        if it.peek().is_none() {
            return Err(QoeError::Data("cannot fit normalization on no samples".into()));
        }
        let mut stsq = (f64::INFINITY, f64::NEG_INFINITY);
        let mut nr = stsq;
        let mut tr = stsq;
        for s in it {
            stsq = (stsq.0.min(s.stsq), stsq.1.max(s.stsq));
            nr = (nr.0.min(f64::from(s.nr)), nr.1.max(f64::from(s.nr)));
            tr = (tr.0.min(s.tr), tr.1.max(s.tr));
        }
        let mut qoe_range = traces[0].qoe_range;
        for t in traces {
            if t.qoe_range != traces[0].qoe_range {
                log::warn!("trace `{}` declares a different qoe range", t.id);
            }
            qoe_range = (qoe_range.0.min(t.qoe_range.0), qoe_range.1.max(t.qoe_range.1));
        }
        let stats = Self {
            stsq: widen(stsq.0, stsq.1),
            nr: widen(nr.0, nr.1),
            tr: widen(tr.0, tr.1),
            qoe_range,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("stsq", self.stsq),
            ("nr", self.nr),
            ("tr", self.tr),
            ("qoe", self.qoe_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(QoeError::Data(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    fn range(&self, f: Feature) -> Option<(f64, f64)> {
        match f {
            Feature::Stsq => Some(self.stsq),
            Feature::Nr => Some(self.nr),
            Feature::Tr => Some(self.tr),
            Feature::Pi => None,
        }
    }

    pub fn scale_feature(&self, f: Feature, v: f64) -> f64 {
        match self.range(f) {
            Some((lo, hi)) => (v - lo) / (hi - lo),
            None => v,
        }
    }

    pub fn unscale_feature(&self, f: Feature, v: f64) -> f64 {
        match self.range(f) {
            Some((lo, hi)) => lo + v * (hi - lo),
            None => v,
        }
    }

    pub fn normalize_qoe(&self, q: f64) -> f64 {
        (q - self.qoe_range.0) / (self.qoe_range.1 - self.qoe_range.0)
    }

    pub fn denormalize_qoe(&self, v: f64) -> f64 {
        self.qoe_range.0 + v * (self.qoe_range.1 - self.qoe_range.0)
    }

    /// Flat `key = value` text, the same syntax as run config files.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (lo, hi)) in [
            ("stsq", self.stsq),
            ("nr", self.nr),
            ("tr", self.tr),
            ("qoe", self.qoe_range),
        ] {
            let _ = writeln!(s, "{k}_min = {lo}\n{k}_max = {hi}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(i + 1, "expected `key = value`"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| perr(i + 1, format!("`{}` is not a number", v.trim())))?;
            vals.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| QoeError::Data(format!("normalization file lacks `{k}`")))
        };
        let stats = Self {
            stsq: (get("stsq_min")?, get("stsq_max")?),
            nr: (get("nr_min")?, get("nr_max")?),
            tr: (get("tr_min")?, get("tr_max")?),
            qoe_range: (get("qoe_min")?, get("qoe_max")?),
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Model-ready view of a trace: a `4 x T` feature series (STSQ, PI, NR, TR
/// rows) and QoE targets in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrace {
    pub features: Series,
    pub targets: Vec<f64>,
    /// Feature values that fell outside the stats range and were clamped.
    pub clamped: usize,
}

pub fn normalize(trace: &QoETrace, stats: &NormalizationStats) -> Result<NormalizedTrace> {
    stats.validate()?;
    if trace.is_empty() {
        return Err(QoeError::Data(format!("trace `{}` is empty", trace.id)));
    }
    let len = trace.len();
    let mut rows: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(len)).collect();
    let mut clamped = 0;
    let mut scaled = |f: Feature, v: f64| {
        let x = stats.scale_feature(f, v);
        if (0.0..=1.0).contains(&x) {
            x
        } else {
            clamped += 1;
            x.clamp(0.0, 1.0)
        }
    };
    let mut targets = Vec::with_capacity(len);
    for s in &trace.samples {
        rows[0].push(scaled(Feature::Stsq, s.stsq));
        rows[1].push(f64::from(s.pi));
        rows[2].push(scaled(Feature::Nr, f64::from(s.nr)));
        rows[3].push(scaled(Feature::Tr, s.tr));
        targets.push(stats.normalize_qoe(s.qoe).clamp(0.0, 1.0));
    }
    if clamped > 0 {
        log::warn!("trace `{}`: clamped {clamped} feature values to the training range", trace.id);
    }
    Ok(NormalizedTrace {
        features: Series::from_rows(&rows)?,
        targets,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// One fold per trace; training excludes every trace sharing the test
    /// trace's content or playout pattern.
    LeaveOneOutExcludingContentAndPattern,
    /// A single seeded split with `fraction` of traces for training.
    RandomTrainTest,
    /// One fold per trace; training is a seeded `fraction` sample of the
    /// remaining traces.
    RandomFractionPerTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitProtocol {
    pub kind: SplitKind,
    pub fraction: f64,
    pub seed: u64,
}

impl SplitProtocol {
    pub fn leave_one_out() -> Self {
        Self {
            kind: SplitKind::LeaveOneOutExcludingContentAndPattern,
            fraction: 1.0,
            seed: 0,
        }
    }

    /// The 80:20 train/test split.
    pub fn random_80_20(seed: u64) -> Self {
        Self {
            kind: SplitKind::RandomTrainTest,
            fraction: 0.8,
            seed,
        }
    }

    pub fn random_fraction_per_test(fraction: f64, seed: u64) -> Self {
        Self {
            kind: SplitKind::RandomFractionPerTest,
            fraction,
            seed,
        }
    }
}

/// Indices into the database passed to [`split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(db: &[QoETrace], protocol: &SplitProtocol) -> Result<Vec<Fold>> {
    if db.is_empty() {
        return Err(QoeError::Split("empty database".into()));
    }
    let needs_fraction = protocol.kind != SplitKind::LeaveOneOutExcludingContentAndPattern;
    if needs_fraction && !(protocol.fraction > 0.0 && protocol.fraction < 1.0) {
        return Err(QoeError::Split(format!(
            "fraction {} must lie in (0, 1)",
            protocol.fraction
        )));
    }
    let n = db.len();
    let folds = match protocol.kind {
        SplitKind::LeaveOneOutExcludingContentAndPattern => {
            let meta = |t: &QoETrace| -> Result<(String, String)> {
                match (&t.content_id, &t.pattern_id) {
                    (Some(c), Some(p)) => Ok((c.clone(), p.clone())),
                    _ => Err(QoeError::Split(format!(
                        "trace `{}` lacks content/pattern metadata needed for leave-one-out",
                        t.id
                    ))),
                }
            };
            let ids = db.iter().map(meta).collect::<Result<Vec<_>>>()?;
            let mut folds = Vec::with_capacity(n);
            for (i, (c, p)) in ids.iter().enumerate() {
                let train: Vec<usize> = ids
                    .iter()
                    .enumerate()
                    .filter(|(j, (cj, pj))| *j != i && cj != c && pj != p)
                    .map(|(j, _)| j)
                    .collect();
                if train.is_empty() {
                    return Err(QoeError::Split(format!(
                        "no training traces left for test trace `{}`",
                        db[i].id
                    )));
                }
                folds.push(Fold {
                    train,
                    test: vec![i],
                });
            }
            folds
        }
        SplitKind::RandomTrainTest => {
            let n_train = (protocol.fraction * n as f64).floor() as usize;
            if n_train == 0 || n_train == n {
                return Err(QoeError::Split(format!(
                    "{n} traces cannot be split at fraction {}",
                    protocol.fraction
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng_for(protocol.seed, "split"));
            let (train, test) = idx.split_at(n_train);
            let (mut train, mut test) = (train.to_vec(), test.to_vec());
            train.sort_unstable();
            test.sort_unstable();
            vec![Fold { train, test }]
        }
        SplitKind::RandomFractionPerTest => {
            let n_train = (protocol.fraction * (n - 1) as f64).floor() as usize;
            if n_train == 0 {
                return Err(QoeError::Split("training sample would be empty".into()));
            }
            (0..n)
                .map(|i| {
                    let mut rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    let mut rng = SeededRng::seed_from_u64(derive_indexed(protocol.seed, "split", i as u64));
                    rest.shuffle(&mut rng);
                    rest.truncate(n_train);
                    rest.sort_unstable();
                    Fold {
                        train: rest,
                        test: vec![i],
                    }
                })
                .collect()
        }
    };
    Ok(folds)
}

/// A rebuffering interval `[start, start + duration)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stall {
    pub start: usize,
    pub duration: usize,
}

/// From second `start` on, the rendered STSQ sits at `level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityStep {
    pub start: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub duration: usize,
    pub stalls: Vec<Stall>,
    pub quality: Vec<QualityStep>,
    /// Standard deviation of Gaussian noise added to STSQ.
    pub noise_std: f64,
    pub seed: u64,
    pub id: String,
    pub content_id: String,
    pub pattern_id: String,
}

/// Constants of the synthetic QoE law, see [`synth_trace`].
pub mod law {
    /// STSQ value mapped to zero perceived quality.
    pub const STSQ_SCALE: f64 = 100.0;
    pub const STALL_PENALTY: f64 = 0.35;
    pub const RECENCY_PENALTY: f64 = 0.2;
    /// Seconds over which the post-impairment penalty fades out.
    pub const RECENCY_SECONDS: f64 = 15.0;
    pub const PER_STALL_PENALTY: f64 = 0.04;
    pub const MAX_COUNTED_STALLS: u32 = 5;
    /// Exponential smoothing rate of the perceived quality.
    pub const SMOOTHING: f64 = 0.5;
    pub const QOE_RANGE: (f64, f64) = (0.0, 100.0);
}

/// Instantaneous (unsmoothed) quality in `[0, 1]`-ish units.
fn instantaneous_quality(s: &TraceSample) -> f64 {
    use law::*;
    let visual = (1.0 - s.stsq / STSQ_SCALE).clamp(0.0, 1.0);
    let stall = STALL_PENALTY * f64::from(s.pi);
    let recency = if s.nr > 0 {
        RECENCY_PENALTY * (1.0 - s.tr / RECENCY_SECONDS).max(0.0)
    } else {
        0.0
    };
    let count = PER_STALL_PENALTY * f64::from(s.nr.min(MAX_COUNTED_STALLS));
    visual - stall - recency - count
}

/// Generates a trace whose features follow the given schedules and whose
/// QoE is a deterministic function of those features:
///
/// ```text
/// u_t   = (1 - stsq_t/100) - 0.35*pi_t - 0.2*[nr_t>0]*max(0, 1 - tr_t/15)
///         - 0.04*min(nr_t, 5)
/// s_t   = s_{t-1} + 0.5*(u_t - s_{t-1}),   s_{-1} = u_0
/// qoe_t = 100 * clamp(s_t, 0, 1)
/// ```
pub fn synth_trace(params: &SynthParams) -> Result<QoETrace> {
    let t_len = params.duration;
    if t_len < 1 {
        return Err(QoeError::Parameter("duration must be >= 1".into()));
    }
    if !(params.noise_std >= 0.0 && params.noise_std.is_finite()) {
        return Err(QoeError::Parameter("noise_std must be >= 0".into()));
    }
    let mut stalls = params.stalls.clone();
    stalls.sort_by_key(|s| s.start);
    for s in &stalls {
        if s.duration == 0 || s.start + s.duration > t_len {
            return Err(QoeError::Parameter(format!(
                "stall at {} for {} s does not fit in {t_len} s",
                s.start, s.duration
            )));
        }
    }
    for w in stalls.windows(2) {
        if w[1].start < w[0].start + w[0].duration {
            return Err(QoeError::Parameter(format!(
                "stalls at {} and {} overlap",
                w[0].start, w[1].start
            )));
        }
    }
    let mut quality = params.quality.clone();
    quality.sort_by_key(|q| q.start);
    if quality.first().map(|q| q.start) != Some(0) {
        return Err(QoeError::Parameter("quality schedule must start at second 0".into()));
    }
    if quality.iter().any(|q| !(q.level >= 0.0 && q.level.is_finite())) {
        return Err(QoeError::Parameter("quality levels must be nonnegative".into()));
    }

    let mut rng = rng_for(params.seed, "synth-noise");
    let noise = Normal::new(0.0, params.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| QoeError::Parameter(e.to_string()))?;
    let mut samples = Vec::with_capacity(t_len);
    let mut level_idx = 0;
    let mut nr = 0u32;
    let mut tr = 0.0;
    for t in 0..t_len {
        let mut switched = false;
        while level_idx + 1 < quality.len() && quality[level_idx + 1].start <= t {
            level_idx += 1;
            switched = true;
        }
        let stall = stalls.iter().find(|s| t >= s.start && t < s.start + s.duration);
        if stall.is_some_and(|s| s.start == t) {
            nr += 1;
        }
        let pi = u8::from(stall.is_some());
        if t > 0 {
            tr = if pi == 1 || switched { 0.0 } else { tr + 1.0 };
        }
        let jitter = if params.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        samples.push(TraceSample {
            stsq: (quality[level_idx].level + jitter).max(0.0),
            pi,
            nr,
            tr,
            qoe: 0.0,
        });
    }

    let (lo, hi) = law::QOE_RANGE;
    let mut smoothed = instantaneous_quality(&samples[0]);
    for s in &mut samples {
        smoothed += law::SMOOTHING * (instantaneous_quality(s) - smoothed);
        s.qoe = lo + (hi - lo) * smoothed.clamp(0.0, 1.0);
    }

    let trace = QoETrace {
        id: params.id.clone(),
        content_id: Some(params.content_id.clone()),
        pattern_id: Some(params.pattern_id.clone()),
        samples,
        qoe_range: law::QOE_RANGE,
    };
    trace.validate()?;
    Ok(trace)
}

const LEVELS: [f64; 5] = [5.0, 12.0, 22.0, 35.0, 50.0];

/// Piecewise-constant quality schedule with 3 to 6 segments.
pub fn random_quality_schedule<R: Rng + ?Sized>(rng: &mut R, duration: usize) -> Vec<QualityStep> {
    let segments = rng.random_range(3..=6).min(duration.max(1));
    let mut starts: Vec<usize> = vec![0];
    if duration > 1 {
        while starts.len() < segments {
            let s = rng.random_range(1..duration);
            if !starts.contains(&s) {
                starts.push(s);
            }
        }
    }
    starts.sort_unstable();
    let mut prev = usize::MAX;
    starts
        .into_iter()
        .map(|start| {
            let mut idx = rng.random_range(0..LEVELS.len());
            if idx == prev {
                idx = (idx + 1) % LEVELS.len();
            }
            prev = idx;
            QualityStep {
                start,
                level: LEVELS[idx],
            }
        })
        .collect()
}

/// 1 to 3 non-overlapping stalls of 2 to 8 seconds, starting after second 5.
pub fn random_stall_pattern<R: Rng + ?Sized>(rng: &mut R, duration: usize) -> Vec<Stall> {
    let wanted = rng.random_range(1..=3);
    let mut stalls: Vec<Stall> = Vec::new();
    for _ in 0..wanted * 20 {
        if stalls.len() == wanted || duration < 16 {
            break;
        }
        let len = rng.random_range(2..=8).min(duration - 6);
        let start = rng.random_range(5..=duration - len);
        let clear = stalls
            .iter()
            .all(|s| start + len + 2 <= s.start || s.start + s.duration + 2 <= start);
        if clear {
            stalls.push(Stall {
                start,
                duration: len,
            });
        }
    }
    stalls.sort_by_key(|s| s.start);
    stalls
}

/// Synthetic trace `index` of a database generated from `seed`; every
/// trace gets its own content and pattern.
pub fn random_trace(seed: u64, index: usize, duration: usize) -> Result<QoETrace> {
    let s = derive_indexed(seed, "synth-trace", index as u64);
    let mut rng = SeededRng::seed_from_u64(s);
    synth_trace(&SynthParams {
        duration,
        quality: random_quality_schedule(&mut rng, duration),
        stalls: random_stall_pattern(&mut rng, duration),
        noise_std: 1.0,
        seed: s,
        id: format!("synth{index:03}"),
        content_id: format!("c{index:03}"),
        pattern_id: format!("p{index:03}"),
    })
}

/// A `contents x patterns` database: every content's quality schedule is
/// crossed with every pattern's stall schedule.
pub fn synth_grid_database(
    contents: usize,
    patterns: usize,
    duration: usize,
    seed: u64,
) -> Result<Vec<QoETrace>> {
    let qualities: Vec<Vec<QualityStep>> = (0..contents)
        .map(|c| random_quality_schedule(&mut SeededRng::seed_from_u64(derive_indexed(seed, "content", c as u64)), duration))
        .collect();
    let stall_sets: Vec<Vec<Stall>> = (0..patterns)
        .map(|p| random_stall_pattern(&mut SeededRng::seed_from_u64(derive_indexed(seed, "pattern", p as u64)), duration))
        .collect();
    let mut db = Vec::with_capacity(contents * patterns);
    for (c, q) in qualities.iter().enumerate() {
        for (p, st) in stall_sets.iter().enumerate() {
            db.push(synth_trace(&SynthParams {
                duration,
                stalls: st.clone(),
                quality: q.clone(),
                noise_std: 1.0,
                seed: derive_indexed(seed, "grid-noise", (c * patterns + p) as u64),
                id: format!("c{c}_p{p}"),
                content_id: format!("c{c}"),
                pattern_id: format!("p{p}"),
            })?);
        }
    }
    Ok(db)
}
