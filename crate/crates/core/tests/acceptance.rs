//! Acceptance criteria, one line per criterion. Runs as a plain binary so
//! the criteria execute in order with their own timing budgets.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cnnqoe::data::{normalize, random_trace, split, synth_grid_database};
use cnnqoe::eval::{average_ranks, bench_inference, pcc, rmse, srocc};
use cnnqoe::model_file::{decode_model, encode_model};
use cnnqoe::numerics::{conv1d_dilated_causal, selu, selu_derivative, Kernel, Series, SELU};
use cnnqoe::rng::SeededRng;
use cnnqoe::training::{windows_for, TrainHistory};
use cnnqoe::{
    build_model, count_flops, count_params, dilation_schedule, pure_dilated_receptive_field,
    receptive_field, train, ModelConfig, NormalizationStats, QoETrace, SplitProtocol, TrainConfig,
    Variant,
};
use common::grad::{conv_error, model_error, selu_error};
use common::*;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.1?}, budget {budget:.0?}"))
}

/// Number of output samples an impulse at time 0 reaches through a stack
/// of all-ones causal convs, i.e. the stack's receptive field.
fn impulse_support(kernel_size: usize, dilations: &[usize]) -> usize {
    let len = 512;
    let mut x = Series::zeros(1, len);
    x.set(0, 0, 1.0);
    let ones = Kernel::new(1, 1, kernel_size, vec![1.0; kernel_size], vec![0.0]).unwrap();
    for &d in dilations {
        x = conv1d_dilated_causal(&x, &ones, d).unwrap();
    }
    x.values().iter().filter(|v| **v != 0.0).count()
}

fn receptive_field_formulas() -> Outcome {
    let start = Instant::now();
    for blocks in 1..=6u32 {
        let dilations: Vec<usize> = (0..blocks).map(|i| 1 << i).collect();
        let (two, three) = (2usize.pow(blocks), 2usize.pow(blocks + 1) - 1);
        for (k, expect) in [(2, two), (3, three)] {
            let got = pure_dilated_receptive_field(k, blocks as usize).map_err(|e| e.to_string())?;
            ensure(got == expect, || format!("k={k} L={blocks}: {got} != {expect}"))?;
            let support = impulse_support(k, &dilations);
            ensure(support == expect, || format!("k={k} L={blocks}: impulse reaches {support}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("k=2 gives 2^L and k=3 gives 2^(L+1)-1 for L in 1..=6".into())
}

fn causality_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::seed_from_u64(2024);
    let mut checks = 0;
    for m in 0..50 {
        let variant = if m % 2 == 0 { Variant::Proposed } else { Variant::OriginalTcn };
        let config = ModelConfig {
            kernel_size: rng.random_range(2..=3),
            blocks: rng.random_range(1..=4),
            filters: [4, 8, 16][rng.random_range(0..3)],
            in_channels: 4,
            variant,
            dropout_p: 0.2,
        };
        let model = build_model(&config, &mut rng, true).map_err(|e| e.to_string())?;
        let r = receptive_field(&config);
        for _ in 0..20 {
            let len = r + rng.random_range(5..30);
            let x = series(4, len, |_| rng.random_range(0.0..1.0));
            let t = rng.random_range(0..len);
            let base = model.forward_sequence(&x).map_err(|e| e.to_string())?.get(0, t);

            let mut later = x.clone();
            let mut earlier = x.clone();
            for c in 0..4 {
                for s in t + 1..len {
                    later.set(c, s, x.get(c, s) + rng.random_range(0.5..2.0));
                }
                for s in 0..(t + 1).saturating_sub(r) {
                    earlier.set(c, s, x.get(c, s) + rng.random_range(0.5..2.0));
                }
            }
            for (what, perturbed) in [("after t", &later), ("before t-r+1", &earlier)] {
                let y = model.forward_sequence(perturbed).map_err(|e| e.to_string())?.get(0, t);
                ensure(y.to_bits() == base.to_bits(), || {
                    format!("{config:?}: input {what} changed the output at t={t}")
                })?;
            }
            checks += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{checks} windows over 50 models"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst_model = 0.0_f64;
    for seed in 0..100u64 {
        let (variant, p, masks) = match seed % 3 {
            0 => (Variant::Proposed, 0.0, None),
            1 => (Variant::OriginalTcn, 0.0, None),
            _ => (Variant::OriginalTcn, 0.2, Some(seed)),
        };
        let e = model_error(variant, p, masks, seed);
        ensure(e <= 1e-4, || format!("seed {seed} {variant}: relative error {e:e}"))?;
        worst_model = worst_model.max(e);
    }
    let mut worst_unit = 0.0_f64;
    let mut rng = SeededRng::seed_from_u64(3);
    for seed in 0..100u64 {
        let e = conv_error(seed, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4),
            rng.random_range(1..4), rng.random_range(1..10));
        ensure(e <= 1e-5, || format!("conv seed {seed}: relative error {e:e}"))?;
        worst_unit = worst_unit.max(e);
    }
    let points: Vec<f64> = (0..100)
        .map(|_| rng.random_range(-5.0..5.0))
        .map(|p: f64| if p.abs() < 1e-3 { p + 0.01 } else { p })
        .collect();
    let e = selu_error(&points);
    ensure(e <= 1e-5, || format!("selu: relative error {e:e}"))?;
    worst_unit = worst_unit.max(e);
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("worst model error {worst_model:.1e}, worst unit error {worst_unit:.1e}"))
}

fn selu_constants() -> Outcome {
    let one = selu(1.0);
    ensure((one - 1.0507).abs() <= 1e-9, || format!("selu(1) = {one}"))?;
    let left = selu_derivative(-f64::MIN_POSITIVE);
    let expect = SELU.lambda * SELU.alpha;
    ensure((left - expect).abs() <= 1e-9, || format!("left slope {left} vs {expect}"))?;
    ensure((left - 1.762_370_631).abs() <= 1e-9, || format!("left slope {left}"))?;
    for eps in [1e-15, 1e-18, 1e-300] {
        let gap = (selu(-eps) - selu(eps)).abs().max((selu(-eps) - selu(0.0)).abs());
        ensure(gap <= 1e-12, || format!("jump {gap:e} at 0 (eps {eps:e})"))?;
    }
    Ok(format!("selu(1) = {one}, selu'(0-) = {left}"))
}

fn default_configuration() -> Outcome {
    let config = ModelConfig::default();
    let model = build_model(&config, &mut SeededRng::seed_from_u64(1), false).map_err(|e| e.to_string())?;
    let c = model.config();
    ensure((c.kernel_size, c.blocks, c.filters) == (2, 3, 32), || format!("{c:?}"))?;
    let d = dilation_schedule(c.blocks).map_err(|e| e.to_string())?;
    ensure(d == [1, 2, 4], || format!("dilations {d:?}"))?;
    let (analytic, enumerated) = (count_params(&model), enumerate_params(&model));
    ensure(analytic == enumerated, || format!("count {analytic} vs enumeration {enumerated}"))?;
    ensure(analytic == closed_form_params(c), || format!("count {analytic} vs closed form"))?;
    Ok(format!(
        "k=2 L=3 n=32 dilations [1,2,4], {analytic} parameters (published figure 9605, gap {})",
        9605 - analytic as i64
    ))
}

fn variant_ordering() -> Outcome {
    let mut rng = SeededRng::seed_from_u64(6);
    let mut configs = 0;
    for k in cnnqoe::architecture::GRID_KERNEL_SIZES {
        for blocks in cnnqoe::architecture::GRID_BLOCKS {
            for filters in cnnqoe::architecture::GRID_FILTERS {
                let p = ModelConfig { kernel_size: k, blocks, filters, ..ModelConfig::default() };
                let t = p.with_variant(Variant::OriginalTcn);
                let mp = build_model(&p, &mut rng, true).map_err(|e| e.to_string())?;
                let mt = build_model(&t, &mut rng, true).map_err(|e| e.to_string())?;
                let (pp, pt) = (count_params(&mp), count_params(&mt));
                let (fp, ft) = (count_flops(&mp), count_flops(&mt));
                ensure(pt > pp, || format!("k={k} L={blocks} n={filters}: params {pt} <= {pp}"))?;
                ensure(ft > fp, || format!("k={k} L={blocks} n={filters}: flops {ft} <= {fp}"))?;
                configs += 1;
            }
        }
    }
    let p = ModelConfig::default();
    let t = p.with_variant(Variant::OriginalTcn);
    let mp = build_model(&p, &mut rng, false).map_err(|e| e.to_string())?;
    let mt = build_model(&t, &mut rng, false).map_err(|e| e.to_string())?;
    let window = receptive_field(&p).max(receptive_field(&t));
    let bp = bench_inference(&mp, 1000, 100, Some(window)).map_err(|e| e.to_string())?;
    let bt = bench_inference(&mt, 1000, 100, Some(window)).map_err(|e| e.to_string())?;
    let (lp, lt) = (bp.latency.median_ms, bt.latency.median_ms);
    ensure(lt >= lp, || format!("median latency tcn {lt:.4} ms < proposed {lp:.4} ms"))?;
    Ok(format!(
        "{configs} grid configs ordered; median latency {lp:.4} ms vs {lt:.4} ms at window {window}"
    ))
}

fn prepare(train_set: &[QoETrace], test_set: &[QoETrace], window: usize) -> Result<(Vec<cnnqoe::WindowSample>, Vec<cnnqoe::WindowSample>), String> {
    let stats = NormalizationStats::fit(train_set).map_err(|e| e.to_string())?;
    let norm = |set: &[QoETrace]| -> Result<Vec<_>, String> {
        let n: Vec<_> = set.iter().map(|t| normalize(t, &stats)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        windows_for(&n, window).map_err(|e| e.to_string())
    };
    Ok((norm(train_set)?, norm(test_set)?))
}

fn desk_scale_learning() -> Outcome {
    let start = Instant::now();
    let traces: Vec<QoETrace> = (0..20)
        .map(|i| random_trace(77, i, 120))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let config = ModelConfig::default();
    let window = receptive_field(&config);

    let (train_w, test_w) = prepare(&traces[..16], &traces[16..], window)?;
    let mut model = build_model(&config, &mut SeededRng::seed_from_u64(1), false).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 60, seed: 1, ..TrainConfig::default() };
    train(&mut model, &train_w, &cfg, None).map_err(|e| e.to_string())?;
    let pred: Vec<f64> = test_w.iter().map(|s| model.forward(&s.window).unwrap()).collect();
    let target: Vec<f64> = test_w.iter().map(|s| s.target).collect();
    let test_rmse = rmse(&pred, &target).map_err(|e| e.to_string())?;
    let test_pcc = pcc(&pred, &target).map_err(|e| e.to_string())?;
    let held_out = start.elapsed();

    let (overfit_w, _) = prepare(&traces[..4], &traces[..1], window)?;
    let mut small = build_model(&config, &mut SeededRng::seed_from_u64(2), false).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 500, seed: 2, ..TrainConfig::default() };
    let history = train(&mut small, &overfit_w, &cfg, None).map_err(|e| e.to_string())?;
    let overfit_rmse = history.final_train_loss.sqrt();

    let detail = format!(
        "test rmse {test_rmse:.4}, pcc {test_pcc:.4} ({held_out:.0?}); overfit rmse {overfit_rmse:.4}; total {:.0?}",
        start.elapsed()
    );
    ensure(test_rmse < 0.10, || format!("test rmse too high: {detail}"))?;
    ensure(test_pcc > 0.90, || format!("test pcc too low: {detail}"))?;
    ensure(overfit_rmse < 0.02, || format!("overfit rmse too high: {detail}"))?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(detail)
}

fn metric_oracles() -> Outcome {
    let mut rng = SeededRng::seed_from_u64(8);
    let mut worst = 0.0_f64;
    for i in 0..1000 {
        let n = rng.random_range(3..80);
        // Every third pair is quantized so ties are frequent.
        let draw = |rng: &mut SeededRng| -> f64 {
            let v: f64 = rng.random_range(-100.0..100.0);
            if i % 3 == 0 { (v / 25.0).round() } else { v }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let (Ok(p), Ok(s)) = (pcc(&a, &b), srocc(&a, &b)) else {
            continue;
        };
        let r = rmse(&a, &b).map_err(|e| e.to_string())?;
        let diffs = [
            (p - textbook_pearson(&a, &b)).abs(),
            (s - textbook_spearman(&a, &b)).abs(),
            (r - textbook_rmse(&a, &b)).abs(),
        ];
        for (name, d) in ["pcc", "srocc", "rmse"].iter().zip(diffs) {
            ensure(d <= 1e-12, || format!("pair {i}: {name} off by {d:e}"))?;
            worst = worst.max(d);
        }
        ensure(average_ranks(&a) == counting_ranks(&a), || format!("pair {i}: ranks differ"))?;
    }
    Ok(format!("1000 pairs, worst deviation {worst:.1e}"))
}

fn train_once(config: &ModelConfig, traces: &[QoETrace]) -> Result<(cnnqoe::Model, Vec<u8>, TrainHistory), String> {
    let (w, v) = prepare(&traces[..3], &traces[3..], receptive_field(config))?;
    let mut model = build_model(config, &mut SeededRng::seed_from_u64(5), true).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 5, seed: 5, early_stop_patience: Some(10), ..TrainConfig::default() };
    let history = train(&mut model, &w, &cfg, Some(&v)).map_err(|e| e.to_string())?;
    let bytes = encode_model(&model).map_err(|e| e.to_string())?;
    Ok((model, bytes, history))
}

fn reproducibility() -> Outcome {
    let traces: Vec<QoETrace> = (0..4)
        .map(|i| random_trace(9, i, 60))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for variant in [Variant::Proposed, Variant::OriginalTcn] {
        let config = ModelConfig { filters: 16, variant, ..ModelConfig::default() };
        let (trained, bytes_a, hist_a) = train_once(&config, &traces)?;
        let (_, bytes_b, hist_b) = train_once(&config, &traces)?;
        ensure(bytes_a == bytes_b, || format!("{variant}: model files differ"))?;
        ensure(hist_a.to_csv() == hist_b.to_csv(), || format!("{variant}: loss histories differ"))?;
        ensure(hist_a == hist_b, || format!("{variant}: histories differ"))?;

        let reloaded = decode_model(&bytes_a).map_err(|e| e.to_string())?;
        ensure(encode_model(&reloaded).map_err(|e| e.to_string())? == bytes_a, || {
            "re-encoding changed bytes".into()
        })?;
        let mut rng = SeededRng::seed_from_u64(10);
        for _ in 0..50 {
            let x = series(4, rng.random_range(1..40), |_| rng.random_range(0.0..1.0));
            let a = trained.forward_sequence(&x).map_err(|e| e.to_string())?;
            let b = reloaded.forward_sequence(&x).map_err(|e| e.to_string())?;
            ensure(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()), || {
                format!("{variant}: round-trip changed outputs")
            })?;
        }
    }
    Ok("identical bytes and loss histories for both variants; outputs bit-exact after reload".into())
}

fn split_protocols() -> Outcome {
    let db = synth_grid_database(6, 6, 30, 4).map_err(|e| e.to_string())?;
    ensure(db.len() == 36, || format!("{} traces", db.len()))?;
    let loo = split(&db, &SplitProtocol::leave_one_out()).map_err(|e| e.to_string())?;
    ensure(loo.len() == 36, || format!("{} folds", loo.len()))?;
    for f in &loo {
        ensure(f.train.len() == 25 && f.test.len() == 1, || {
            format!("fold sizes {}/{}", f.train.len(), f.test.len())
        })?;
    }
    let random = split(&db, &SplitProtocol::random_80_20(3)).map_err(|e| e.to_string())?;
    ensure(random.len() == 1, || format!("{} folds", random.len()))?;
    let (tr, te) = (random[0].train.len(), random[0].test.len());
    ensure((tr, te) == (28, 8), || format!("80:20 gave {tr}/{te}"))?;
    Ok("36 folds of 25 training traces; 80:20 gives 28/8".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("receptive field formulas", receptive_field_formulas),
        ("causality", causality_suite),
        ("gradient correctness", gradient_correctness),
        ("selu constants", selu_constants),
        ("default configuration", default_configuration),
        ("variant ordering", variant_ordering),
        ("desk-scale learning", desk_scale_learning),
        ("metric oracles", metric_oracles),
        ("reproducibility", reproducibility),
        ("split protocols", split_protocols),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name} ({elapsed:.2?}): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
