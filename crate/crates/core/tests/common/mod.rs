//! Test-only oracles, independent of the library's implementation paths.
#![allow(dead_code)]

use cnnqoe::numerics::Series;
use cnnqoe::{Model, ModelConfig, Variant};

pub const FD_STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`; below `floor` magnitude the check
/// becomes absolute.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let up = f(x);
    x[i] = orig - FD_STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Direct evaluation of the dilated causal convolution sum, one output
/// element at a time.
pub fn naive_conv(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], bias: &[f64], d: usize) -> Vec<Vec<f64>> {
    let len = x[0].len();
    let mut out = vec![vec![0.0; len]; w.len()];
    for (o, row) in out.iter_mut().enumerate() {
        for (t, y) in row.iter_mut().enumerate() {
            let mut acc = bias[o];
            for (i, xi) in x.iter().enumerate() {
                for (j, tap) in w[o][i].iter().enumerate() {
                    if t >= d * j {
                        acc += tap * xi[t - d * j];
                    }
                }
            }
            *y = acc;
        }
    }
    out
}

/// Textbook Pearson: covariance over product of standard deviations, with
/// the n-1 normalization written out.
pub fn textbook_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sa * sb)
}

/// Rank by counting: rank(x_i) = #{x_j < x_i} + (#{x_j == x_i} + 1) / 2.
pub fn counting_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn textbook_spearman(a: &[f64], b: &[f64]) -> f64 {
    textbook_pearson(&counting_ranks(a), &counting_ranks(b))
}

pub fn textbook_rmse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    (s / a.len() as f64).sqrt()
}

/// Element-by-element parameter enumeration over the model's tensors.
pub fn enumerate_params(model: &Model) -> usize {
    let mut n = 0;
    for t in model.param_slices() {
        for _ in t.iter() {
            n += 1;
        }
    }
    n
}

/// Parameter count of the layer stack written out by hand from the
/// architecture description: sum of (C_in*k*C_out + C_out) per conv, plus
/// gains and skip projections for the original TCN.
pub fn closed_form_params(c: &ModelConfig) -> usize {
    let (k, n, cin, l) = (c.kernel_size, c.filters, c.in_channels, c.blocks);
    let conv = |i: usize, o: usize, w: usize| i * w * o + o;
    match c.variant {
        Variant::Proposed => conv(cin, n, k) + l * conv(n, n, k) + conv(n, 1, 1),
        Variant::OriginalTcn => {
            let first = conv(cin, n, k) + n + conv(n, n, k) + n;
            let proj = if cin != n { conv(cin, n, 1) } else { 0 };
            let rest = (l - 1) * 2 * (conv(n, n, k) + n);
            first + proj + rest + conv(n, 1, 1)
        }
    }
}

pub fn series(channels: usize, len: usize, f: impl FnMut(usize) -> f64) -> Series {
    Series::new(channels, len, (0..channels * len).map(f).collect()).unwrap()
}

pub mod grad {
    use super::{central_diff, rel_err, series, FD_STEP};
    use cnnqoe::numerics::{
        conv1d_backward, conv1d_dilated_causal, selu, selu_backward, Kernel, Series,
    };
    use cnnqoe::rng::SeededRng;
    use cnnqoe::{build_model, Model, ModelConfig, Variant};
    use rand::{Rng, SeedableRng};

    /// Magnitude below which relative error turns into absolute error.
    pub const FLOOR: f64 = 1e-6;

    fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn conv_objective(x: &Series, w: &Kernel, d: usize, c: &Series) -> f64 {
        let y = conv1d_dilated_causal(x, w, d).unwrap();
        y.values().iter().zip(c.values()).map(|(a, b)| a * b).sum()
    }

    /// Worst relative error between the conv backward pass and central
    /// differences of `<c, conv(x, w)>`, over input, weights and bias.
    pub fn conv_error(seed: u64, cin: usize, cout: usize, k: usize, d: usize, len: usize) -> f64 {
        let mut rng = SeededRng::seed_from_u64(seed);
        let x = Series::new(cin, len, random_vec(&mut rng, cin * len)).unwrap();
        let w = Kernel::new(cout, cin, k, random_vec(&mut rng, cout * cin * k), random_vec(&mut rng, cout))
            .unwrap();
        let c = Series::new(cout, len, random_vec(&mut rng, cout * len)).unwrap();
        let g = conv1d_backward(&x, &w, d, &c).unwrap();
        let mut worst = 0.0_f64;

        let mut xs = x.values().to_vec();
        for i in 0..xs.len() {
            let fd = central_diff(&mut xs, i, &mut |v| {
                conv_objective(&Series::new(cin, len, v.to_vec()).unwrap(), &w, d, &c)
            });
            worst = worst.max(rel_err(g.dx.values()[i], fd, FLOOR));
        }
        let mut ws = w.weights().to_vec();
        for i in 0..ws.len() {
            let fd = central_diff(&mut ws, i, &mut |v| {
                let wk = Kernel::new(cout, cin, k, v.to_vec(), w.bias().to_vec()).unwrap();
                conv_objective(&x, &wk, d, &c)
            });
            worst = worst.max(rel_err(g.dkernel.weights()[i], fd, FLOOR));
        }
        let mut bs = w.bias().to_vec();
        for i in 0..bs.len() {
            let fd = central_diff(&mut bs, i, &mut |v| {
                let wk = Kernel::new(cout, cin, k, w.weights().to_vec(), v.to_vec()).unwrap();
                conv_objective(&x, &wk, d, &c)
            });
            worst = worst.max(rel_err(g.dkernel.bias()[i], fd, FLOOR));
        }
        worst
    }

    /// Worst relative error of the SeLU backward pass at `points`.
    pub fn selu_error(points: &[f64]) -> f64 {
        let x = Series::new(1, points.len(), points.to_vec()).unwrap();
        let ones = Series::new(1, points.len(), vec![1.0; points.len()]).unwrap();
        let dx = selu_backward(&x, &ones).unwrap();
        points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut v = [p];
                let fd = central_diff(&mut v, 0, &mut |s| selu(s[0]));
                rel_err(dx.values()[i], fd, FLOOR)
            })
            .fold(0.0, f64::max)
    }

    pub fn tiny_config(variant: Variant, dropout_p: f64) -> ModelConfig {
        ModelConfig {
            kernel_size: 2,
            blocks: 2,
            filters: 2,
            in_channels: 2,
            variant,
            dropout_p,
        }
    }

    /// Prediction with dropout masks drawn from a generator re-seeded on
    /// every call, so masks stay fixed across perturbations.
    fn predict(model: &Model, window: &Series, mask_seed: Option<u64>) -> (f64, cnnqoe::Gradients) {
        let (y, cache) = match mask_seed {
            Some(s) => {
                let mut r = SeededRng::seed_from_u64(s);
                model.forward_train(window, Some(&mut r)).unwrap()
            }
            None => model.forward_train(window, None).unwrap(),
        };
        (y, model.backward(&cache, 1.0).unwrap())
    }

    /// Worst relative error between backprop and central differences over
    /// every parameter of a tiny model with a 5-step window.
    pub fn model_error(variant: Variant, dropout_p: f64, mask_seed: Option<u64>, seed: u64) -> f64 {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut model = build_model(&tiny_config(variant, dropout_p), &mut rng, true).unwrap();
        // Non-zero biases so every tensor carries gradient.
        for t in model.param_slices_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let window = series(2, 5, |_| rng.random_range(-1.0..1.0));
        let (_, analytic) = predict(&model, &window, mask_seed);
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        let mut worst = 0.0_f64;
        for (ti, &len) in shapes.iter().enumerate() {
            for i in 0..len {
                let orig = model.param_slices()[ti][i];
                model.param_slices_mut()[ti][i] = orig + FD_STEP;
                let up = predict(&model, &window, mask_seed).0;
                model.param_slices_mut()[ti][i] = orig - FD_STEP;
                let down = predict(&model, &window, mask_seed).0;
                model.param_slices_mut()[ti][i] = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic.tensors[ti][i], fd, FLOOR));
            }
        }
        worst
    }
}
