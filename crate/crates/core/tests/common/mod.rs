//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use modforge_core::models::{FusionSpec, ModalitySpec, MultiModalModel};
use modforge_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

/// A small random model with `k` modalities plus a matching batch.
pub fn random_case(seed: u64, k: usize, early: bool, batch: usize) -> (MultiModalModel, Vec<Tensor>, Vec<usize>) {
    let mut r = rng(seed);
    let classes = r.random_range(2..5);
    let mods: Vec<ModalitySpec> = (0..k)
        .map(|m| {
            let dim = r.random_range(1..5);
            let hidden = if r.random_bool(0.5) { vec![r.random_range(2..5)] } else { vec![] };
            ModalitySpec::new(format!("m{m}"), dim, hidden)
        })
        .collect();
    let fusion = if early {
        FusionSpec::EarlyMaxout { fusion_hidden_dim: r.random_range(2..5), maxout_pieces: r.random_range(2..4) }
    } else {
        FusionSpec::LateSum
    };
    let inputs = mods.iter().map(|m| random_tensor(&mut r, batch, m.input_dim, 2.0)).collect();
    let labels = random_labels(&mut r, batch, classes);
    let model = MultiModalModel::build(mods, fusion, classes, seed).unwrap();
    (model, inputs, labels)
}

fn masked(model: &MultiModalModel, inputs: &[Tensor], present: &[usize]) -> Tensor {
    let names = model.modality_names();
    let n = inputs[0].rows();
    if present.is_empty() {
        return Tensor::zeros(&[n, model.num_classes()]);
    }
    let chosen: Vec<&str> = present.iter().map(|&m| names[m]).collect();
    model.forward_masked(inputs, &chosen).unwrap()
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Shapley values as the average marginal contribution over all orderings.
pub fn brute_force_shapley(model: &MultiModalModel, inputs: &[Tensor]) -> Vec<Tensor> {
    let k = model.num_modalities();
    let n = inputs[0].rows();
    let c = model.num_classes();
    let orders = permutations(&(0..k).collect::<Vec<_>>());
    let mut phi = vec![Tensor::zeros(&[n, c]); k];
    for order in &orders {
        let mut present: Vec<usize> = Vec::new();
        let mut before = masked(model, inputs, &present);
        for &m in order {
            present.push(m);
            present.sort_unstable();
            let after = masked(model, inputs, &present);
            for ((p, a), b) in phi[m].data_mut().iter_mut().zip(after.data()).zip(before.data()) {
                *p += a - b;
            }
            before = after;
        }
    }
    for p in &mut phi {
        for v in p.data_mut() {
            *v /= orders.len() as f64;
        }
    }
    phi
}

/// Central finite differences of `f` at `x`.
pub fn central_differences(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// Mean true-class log-probability, computed directly.
pub fn mean_true_logprob(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += row[y] - lse;
    }
    total / labels.len() as f64
}

/// `(softmax(φ) − onehot) / N`, computed directly.
pub fn ce_grad(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.cols();
    let n = labels.len() as f64;
    let mut g = Vec::with_capacity(logits.data().len());
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for (j, v) in row.iter().enumerate() {
            let p = (v - mx).exp() / z;
            g.push((p - if j == y { 1.0 } else { 0.0 }) / n);
        }
    }
    g
}

/// Ridge objective `(1/n)Σ‖Wz + b − c‖² + λ‖W‖²`, minimized by plain gradient descent.
///
/// Returns `(W row-major [K×D], b)`.
pub fn ridge_by_gradient_descent(z: &Tensor, c: &Tensor, lambda: f64, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, d, k) = (z.rows(), z.cols(), c.cols());
    let nf = n as f64;
    // Lipschitz bound of the gradient: 2(‖[Z 1]‖²_F / n + λ)
    let fro: f64 = z.data().iter().map(|v| v * v).sum::<f64>() + nf;
    let step = 1.0 / (2.0 * (fro / nf + lambda));
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    for _ in 0..iters {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let zi = &z.data()[i * d..(i + 1) * d];
            for j in 0..k {
                let pred: f64 = b[j] + (0..d).map(|t| w[j * d + t] * zi[t]).sum::<f64>();
                let e = 2.0 * (pred - c.at(i, j)) / nf;
                gb[j] += e;
                for t in 0..d {
                    gw[j * d + t] += e * zi[t];
                }
            }
        }
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g += 2.0 * lambda * wv;
        }
        let norm: f64 = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= step * g;
        }
        if norm < 1e-13 {
            break;
        }
    }
    (w, b)
}
