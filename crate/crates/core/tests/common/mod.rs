//! Finite-difference gradient checks and brute-force oracles shared by the
//! integration tests. Nothing here calls the library code it checks.
#![allow(dead_code)]

use abfr_core::autodiff::{Tape, Var};
use abfr_core::params::{Bindings, ParamStore};
use abfr_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences for every input of a scalar function built on a
/// fresh tape; returns the worst per-input relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        tape.value(f(&tape, &vars)).data()[0]
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    tape.backward(loss).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("param has a gradient");
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check over every tensor in a parameter store.
pub fn check_store<F>(store: &mut ParamStore, f: F) -> f64
where
    F: Fn(&Tape, &Bindings, &ParamStore) -> Var,
{
    let eval = |store: &ParamStore| -> f64 {
        let tape = Tape::new();
        let b = store.bind(&tape);
        tape.value(f(&tape, &b, store)).data()[0]
    };
    let tape = Tape::new();
    let b = store.bind(&tape);
    let loss = f(&tape, &b, store);
    tape.backward(loss).expect("scalar loss");
    store.zero_grad();
    store.accumulate_grads(&tape, &b);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = store.iter().nth(k).unwrap().value.data()[e];
            store.iter_mut().nth(k).unwrap().value.data_mut()[e] = orig + FD_STEP;
            let up = eval(store);
            store.iter_mut().nth(k).unwrap().value.data_mut()[e] = orig - FD_STEP;
            let down = eval(store);
            store.iter_mut().nth(k).unwrap().value.data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(grad, &numeric));
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Pearson correlation straight from the textbook formula.
pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One KAN layer evaluated edge by edge:
/// `y[b][o] = Σ_i Σ_g c[o][i][g]·(1 − tanh²((x[b][i] − k_g)/h)) + w[o][i]·silu(x[b][i])`
/// with knots spaced uniformly over `[−range, range]` and `h` half the spacing.
pub fn kan_layer_oracle(
    x: &[Vec<f64>],
    coeffs: &[f64],
    base: Option<&[f64]>,
    out_dim: usize,
    grid_size: usize,
    range: f64,
) -> Vec<Vec<f64>> {
    let in_dim = x[0].len();
    let spacing = 2.0 * range / (grid_size - 1) as f64;
    let knots: Vec<f64> = (0..grid_size).map(|g| -range + g as f64 * spacing).collect();
    let h = spacing / 2.0;
    x.iter()
        .map(|row| {
            (0..out_dim)
                .map(|o| {
                    let mut acc = 0.0;
                    for i in 0..in_dim {
                        for (g, k) in knots.iter().enumerate() {
                            let t = ((row[i] - k) / h).tanh();
                            acc += coeffs[(o * in_dim + i) * grid_size + g] * (1.0 - t * t);
                        }
                        if let Some(w) = base {
                            acc += w[o * in_dim + i] * silu(row[i]);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn pair_count_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Kruskal-Wallis H from a quadratic-time rank computation with tie correction.
pub fn brute_force_h(groups: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let rank = |v: f64| -> f64 {
        let below = all.iter().filter(|&&w| w < v).count() as f64;
        let equal = all.iter().filter(|&&w| w == v).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let mut stat = 0.0;
    for g in groups {
        let r: f64 = g.iter().map(|&v| rank(v)).sum();
        stat += r * r / g.len() as f64;
    }
    let h = 12.0 / (n * (n + 1.0)) * stat - 3.0 * (n + 1.0);
    let mut ties = 0.0;
    let mut seen: Vec<f64> = Vec::new();
    for &v in &all {
        if !seen.contains(&v) {
            seen.push(v);
            let t = all.iter().filter(|&&w| w == v).count() as f64;
            ties += t * t * t - t;
        }
    }
    h / (1.0 - ties / (n * n * n - n))
}

/// Fraction of label shuffles whose statistic reaches the observed one.
pub fn permutation_p<F>(groups: &[Vec<f64>], shuffles: usize, seed: u64, stat: F) -> f64
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let observed = stat(groups);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let mut r = rng(seed);
    let mut hits = 0usize;
    for _ in 0..shuffles {
        // Fisher-Yates, written out so the oracle owns its shuffle.
        for i in (1..pooled.len()).rev() {
            let j = r.random_range(0..=i);
            pooled.swap(i, j);
        }
        let mut regrouped = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &s in &sizes {
            regrouped.push(pooled[off..off + s].to_vec());
            off += s;
        }
        if stat(&regrouped) >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / shuffles as f64
}

/// Absolute Dunn z for one pair, from brute-force mean ranks over the pooled sample.
pub fn brute_force_dunn_abs_z(groups: &[Vec<f64>], a: usize, b: usize) -> f64 {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let rank = |v: f64| -> f64 {
        let below = all.iter().filter(|&&w| w < v).count() as f64;
        let equal = all.iter().filter(|&&w| w == v).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let mean_rank = |g: &Vec<f64>| g.iter().map(|&v| rank(v)).sum::<f64>() / g.len() as f64;
    let mut ties = 0.0;
    let mut seen: Vec<f64> = Vec::new();
    for &v in &all {
        if !seen.contains(&v) {
            seen.push(v);
            let t = all.iter().filter(|&&w| w == v).count() as f64;
            ties += t * t * t - t;
        }
    }
    let var = n * (n + 1.0) / 12.0 - ties / (12.0 * (n - 1.0));
    let se = (var * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64)).sqrt();
    ((mean_rank(&groups[a]) - mean_rank(&groups[b])) / se).abs()
}
