use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cnnqoe::data::{
    normalize, random_trace, read_trace_file, split, synth_grid_database, trace_files, write_trace,
    Fold,
};
use cnnqoe::eval::{bench_inference, evaluate as evaluate_folds, predict_trace};
use cnnqoe::rng::{derive_indexed, rng_for};
use cnnqoe::training::{grid_search, windows_for, GridSpace, TrainHistory};
use cnnqoe::{
    build_model, complexity, load_model, receptive_field, save_model, Model, ModelConfig,
    NormalizationStats, QoeError, QoETrace, TrainConfig,
};

use crate::config::RunConfig;
use crate::{BenchArgs, SynthArgs, UsageError};

/// Receptive field quoted for the reference configuration, which counts
/// only the dilated blocks.
const REFERENCE_RECEPTIVE_FIELD: usize = 8;

/// Normalization stats and window length stored next to a model file.
pub struct Sidecar {
    pub stats: NormalizationStats,
    pub window: usize,
}

pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".norm");
    PathBuf::from(s)
}

fn write_sidecar(model: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = format!("window = {}\n{}", sidecar.window, sidecar.stats.to_text());
    let path = sidecar_path(model);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_sidecar(model: &Path) -> Result<Sidecar> {
    let path = sidecar_path(model);
    let text = fs::read_to_string(&path).with_context(|| {
        format!("reading {} (written by `train` next to the model)", path.display())
    })?;
    let mut window = None;
    let mut rest = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == "window" => {
                window = Some(v.trim().parse().with_context(|| format!("bad window in {}", path.display()))?)
            }
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let stats = NormalizationStats::from_text(&rest).with_context(|| format!("in {}", path.display()))?;
    let window = window.with_context(|| format!("{} lacks `window`", path.display()))?;
    Ok(Sidecar { stats, window })
}

fn load(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_traces(dir: &Path) -> Result<Vec<QoETrace>> {
    let files = trace_files(dir).with_context(|| format!("listing {}", dir.display()))?;
    if files.is_empty() {
        bail!("no trace CSVs in {}", dir.display());
    }
    files
        .iter()
        .map(|f| read_trace_file(f).with_context(|| format!("reading {}", f.display())))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn checked_config(config: &ModelConfig, override_limits: bool) -> Result<()> {
    if let Err(e) = cnnqoe::check_config(config, override_limits) {
        if let QoeError::Config(violations) = &e {
            for v in violations {
                eprintln!("violation: {v}");
            }
            if violations.iter().all(|v| !v.hard) {
                eprintln!("pass --override-receptive-field to train this configuration anyway");
            }
        }
        return Err(e.into());
    }
    Ok(())
}

/// Fits stats on `train_set`, builds a model from `config` and trains it.
fn fit(
    config: &ModelConfig,
    train_set: &[QoETrace],
    val_set: &[QoETrace],
    window: Option<usize>,
    cfg: &TrainConfig,
    override_limits: bool,
) -> Result<(Model, Sidecar, TrainHistory)> {
    let stats = NormalizationStats::fit(train_set)?;
    let window = window.unwrap_or_else(|| receptive_field(config));
    let norm = |set: &[QoETrace]| -> Result<Vec<_>> {
        let n: Vec<_> = set.iter().map(|t| normalize(t, &stats)).collect::<cnnqoe::Result<_>>()?;
        Ok(windows_for(&n, window)?)
    };
    let train_w = norm(train_set)?;
    let val_w = if val_set.is_empty() { Vec::new() } else { norm(val_set)? };
    let mut model = build_model(config, &mut rng_for(cfg.seed, "init"), override_limits)?;
    let history = cnnqoe::train(&mut model, &train_w, cfg, (!val_w.is_empty()).then_some(&val_w[..]))?;
    Ok((model, Sidecar { stats, window }, history))
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let duration = args.duration as usize;
    let traces = match (args.contents, args.patterns) {
        (Some(c), Some(p)) => synth_grid_database(c as usize, p as usize, duration, args.seed)?,
        _ => (0..args.count as usize)
            .map(|i| random_trace(args.seed, i, duration))
            .collect::<cnnqoe::Result<_>>()?,
    };
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for t in &traces {
        write(&args.out_dir.join(format!("{}.csv", t.id)), &write_trace(t))?;
    }
    eprintln!("wrote {} traces to {}", traces.len(), args.out_dir.display());
    Ok(())
}

pub fn train(run: &RunConfig, override_limits: bool) -> Result<()> {
    checked_config(&run.model, override_limits)?;
    let traces = read_traces(run.traces_dir()?)?;
    let val = match &run.val_traces {
        Some(d) => read_traces(d)?,
        None => Vec::new(),
    };
    if run.train.early_stop_patience.is_some() && val.is_empty() {
        log::warn!("`patience` has no effect without validation traces");
    }
    let (model, sidecar, history) = fit(&run.model, &traces, &val, run.window, &run.train, override_limits)?;

    let model_path = run.out_dir.join("model.cqoe");
    fs::create_dir_all(&run.out_dir).with_context(|| format!("creating {}", run.out_dir.display()))?;
    save_model(&model, &model_path).with_context(|| format!("writing {}", model_path.display()))?;
    write_sidecar(&model_path, &sidecar)?;
    write(&run.out_dir.join("loss_history.csv"), &history.to_csv())?;
    write(&run.out_dir.join("run.conf"), &run.to_text())?;

    let c = complexity(&model);
    let range = sidecar.stats.qoe_range.1 - sidecar.stats.qoe_range.0;
    let mut summary = String::new();
    let _ = writeln!(summary, "epochs_run = {}", history.epochs.len());
    let _ = writeln!(summary, "final_train_loss = {}", history.final_train_loss);
    let _ = writeln!(summary, "final_train_rmse = {}", history.final_train_loss.sqrt() * range);
    if let Some(v) = history.final_val_loss {
        let _ = writeln!(summary, "final_val_loss = {v}");
    }
    let _ = writeln!(summary, "stopped_early = {}", history.stopped_early);
    let _ = writeln!(summary, "param_count = {}", c.param_count);
    let _ = writeln!(summary, "receptive_field = {}", c.receptive_field);
    let _ = writeln!(summary, "window = {}", sidecar.window);
    write(&run.out_dir.join("summary.txt"), &summary)?;

    println!(
        "trained {} (k={} L={} n={}) on {} traces: {} params, final train loss {:.6}{}",
        run.model.variant,
        run.model.kernel_size,
        run.model.blocks,
        run.model.filters,
        traces.len(),
        c.param_count,
        history.final_train_loss,
        history
            .final_val_loss
            .map(|v| format!(", val loss {v:.6}"))
            .unwrap_or_default()
    );
    println!("model written to {}", model_path.display());
    Ok(())
}

pub fn evaluate(model_path: &Path, run: &RunConfig, override_limits: bool) -> Result<()> {
    let model = load(model_path)?;
    let sidecar = read_sidecar(model_path)?;
    let db = read_traces(run.traces_dir()?)?;

    let (report, predictions) = match run.split_protocol() {
        None => {
            let folds: Vec<Fold> = (0..db.len())
                .map(|i| Fold {
                    train: Vec::new(),
                    test: vec![i],
                })
                .collect();
            evaluate_folds(&db, &folds, &[(&model, &sidecar.stats)], sidecar.window)?
        }
        Some(protocol) => {
            let folds = split(&db, &protocol).context("splitting the trace set")?;
            log::info!("{} folds; retraining the model's configuration per fold", folds.len());
            let mut fitted = Vec::with_capacity(folds.len());
            for (i, f) in folds.iter().enumerate() {
                let train_set: Vec<QoETrace> = f.train.iter().map(|&j| db[j].clone()).collect();
                let cfg = TrainConfig {
                    seed: derive_indexed(run.train.seed, "fold", i as u64),
                    ..run.train.clone()
                };
                let (m, s, _) = fit(model.config(), &train_set, &[], Some(sidecar.window), &cfg, override_limits)
                    .with_context(|| format!("training fold {i}"))?;
                fitted.push((m, s.stats));
            }
            let pairs: Vec<(&Model, &NormalizationStats)> = fitted.iter().map(|(m, s)| (m, s)).collect();
            evaluate_folds(&db, &folds, &pairs, sidecar.window)?
        }
    };

    write(&run.out_dir.join("eval_report.csv"), &report.to_csv())?;
    let pred_dir = run.out_dir.join("predictions");
    for p in &predictions {
        write(&pred_dir.join(format!("fold{}_{}.csv", p.fold, p.trace_id)), &p.to_csv())?;
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    let a = &report.aggregate;
    println!(
        "{} rows: pcc {} srocc {} rmse {}",
        report.folds.len(),
        fmt(a.pcc),
        fmt(a.srocc),
        fmt(a.rmse)
    );
    println!("report written to {}", run.out_dir.join("eval_report.csv").display());
    Ok(())
}

pub fn predict(model_path: &Path, trace_path: &Path, out: Option<&Path>) -> Result<()> {
    let model = load(model_path)?;
    let sidecar = read_sidecar(model_path)?;
    let trace = read_trace_file(trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let pred = predict_trace(&model, &trace, &sidecar.stats, sidecar.window, 0)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => model_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("{}.pred.csv", trace.id)),
    };
    write(&out, &pred.to_csv())?;
    eprintln!("{} predictions written to {}", pred.y_pred.len(), out.display());
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let model = load(&args.model)?;
    let r = bench_inference(
        &model,
        args.reps as usize,
        args.warmup as usize,
        args.window.map(|w| w as usize),
    )
    .map_err(|e| UsageError(e.to_string()))?;
    let c = &r.complexity;
    println!("window {} s, {} reps", r.window, r.reps);
    println!(
        "latency median {:.5} ms, p95 {:.5} ms, mean {:.5} ms",
        r.latency.median_ms, r.latency.p95_ms, r.latency.mean_ms
    );
    println!(
        "params {}, flops/step {}, receptive field {}, file size {} bytes",
        c.param_count, c.flops_per_step, c.receptive_field, c.model_size_bytes
    );
    if let Some(out) = &args.out {
        let csv = format!(
            "window,reps,median_ms,p95_ms,mean_ms,param_count,flops_per_step,receptive_field,model_size_bytes\n{},{},{},{},{},{},{},{},{}\n",
            r.window,
            r.reps,
            r.latency.median_ms,
            r.latency.p95_ms,
            r.latency.mean_ms,
            c.param_count,
            c.flops_per_step,
            c.receptive_field,
            c.model_size_bytes
        );
        write(out, &csv)?;
    }
    Ok(())
}

pub fn inspect(model_path: &Path) -> Result<()> {
    let model = load(model_path)?;
    let cfg = model.config();
    let c = complexity(&model);
    println!(
        "variant {}, kernel size {}, blocks {}, filters {}, input channels {}, dropout {}",
        cfg.variant, cfg.kernel_size, cfg.blocks, cfg.filters, cfg.in_channels, cfg.dropout_p
    );
    println!("{:<18} {:>5} {:>5} {:>5} {:>8} {:>8}", "layer", "in", "out", "width", "dilation", "params");
    for l in model.layer_summary() {
        println!(
            "{:<18} {:>5} {:>5} {:>5} {:>8} {:>8}",
            l.name, l.in_channels, l.out_channels, l.width, l.dilation, l.params
        );
    }
    println!("parameters {}", c.param_count);
    println!("flops per step {}", c.flops_per_step);
    println!("receptive field {}", c.receptive_field);
    println!("file size {} bytes", c.model_size_bytes);
    let reference = ModelConfig::default();
    if (cfg.kernel_size, cfg.blocks, cfg.filters, cfg.variant)
        == (reference.kernel_size, reference.blocks, reference.filters, reference.variant)
    {
        println!(
            "note: the reference figure for this configuration is a receptive field of {REFERENCE_RECEPTIVE_FIELD}, \
             which counts the dilated blocks alone; the causal stem adds one step, so the literal stack covers {}",
            c.receptive_field
        );
    }
    Ok(())
}

pub fn grid(run: &RunConfig, jobs: usize) -> Result<()> {
    let db = read_traces(run.traces_dir()?)?;
    let (train_set, val_set): (Vec<QoETrace>, Vec<QoETrace>) = match &run.val_traces {
        Some(d) => (db, read_traces(d)?),
        None => {
            let folds = split(&db, &cnnqoe::SplitProtocol::random_80_20(run.train.seed))
                .context("holding out validation traces")?;
            let pick = |ix: &[usize]| ix.iter().map(|&i| db[i].clone()).collect();
            (pick(&folds[0].train), pick(&folds[0].test))
        }
    };
    let stats = NormalizationStats::fit(&train_set)?;
    let norm = |set: &[QoETrace]| -> Result<Vec<_>> {
        Ok(set.iter().map(|t| normalize(t, &stats)).collect::<cnnqoe::Result<_>>()?)
    };
    let result = grid_search(
        &GridSpace::default(),
        &run.model,
        &norm(&train_set)?,
        &norm(&val_set)?,
        run.window,
        &run.train,
        jobs,
    )?;
    for (c, v) in &result.skipped {
        let why: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        eprintln!("skipped k={} L={} n={}: {}", c.kernel_size, c.blocks, c.filters, why.join("; "));
    }
    let out = run.out_dir.join("grid.csv");
    write(&out, &result.to_csv())?;
    let best = &result.ranking[0];
    println!(
        "best of {}: k={} L={} n={} val rmse {:.5} ({} params)",
        result.ranking.len(),
        best.config.kernel_size,
        best.config.blocks,
        best.config.filters,
        best.val_rmse,
        best.params
    );
    println!("ranking written to {}", out.display());
    Ok(())
}
