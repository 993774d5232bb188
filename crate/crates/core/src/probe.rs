//! Competition strength by linear probing.
//!
//! A ridge-regularized linear map `f(z) = W z + b` is fitted from the
//! multi-modal latent `z` to a concept's outputs on one hold-out set, and
//! scored on a second one:
//!
//! ```text
//! d = Σ_i ‖C_i − f(z_i)‖² / Σ_i ‖C_i − mean(C)‖²
//! ```
//!
//! `d = 0` means the latent linearly determines the concept; `d = 1` means
//! the probe does no better than predicting the mean.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::concept::{concept_eval, ConceptModel};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::models::MultiModalModel;
use crate::tensor::Tensor;

/// Default ridge strength.
pub const DEFAULT_LAMBDA: f64 = 120.0;

/// Fitted affine map; `weights` is `[K, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        let (k, d) = (self.weights.rows(), self.weights.cols());
        if z.cols() != d {
            return Err(Error::dim("probe predict", &[z.rows(), d], z.shape()));
        }
        let n = z.rows();
        let w = self.weights.data();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let zi = z.row(i);
            for c in 0..k {
                let dot: f64 = w[c * d..(c + 1) * d].iter().zip(zi).map(|(a, b)| a * b).sum();
                out.push(dot + self.bias[c]);
            }
        }
        Tensor::new(vec![n, k], out)
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

/// Minimizes `(1/n) Σ ‖W z_i + b − y_i‖² + λ‖W‖²_F` with `b` unpenalized.
///
/// Solved on centered data through `(ZᵀZ/n + λI) Wᵀ = ZᵀY/n` by Cholesky.
pub fn fit_linear_probe(z: &Tensor, targets: &Tensor, lambda: f64) -> Result<LinearProbe> {
    if z.rank() != 2 || targets.rank() != 2 || z.rows() != targets.rows() {
        return Err(Error::dim("fit_linear_probe", z.shape(), targets.shape()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let (n, d, k) = (z.rows(), z.cols(), targets.cols());
    if n <= d {
        log::warn!("probe fit with {n} samples for {d} latent dimensions");
    }
    let mut zm = to_matrix(z);
    let mut ym = to_matrix(targets);
    let z_mean = column_means(&zm);
    let y_mean = column_means(&ym);
    for (j, mu) in z_mean.iter().enumerate() {
        zm.column_mut(j).add_scalar_mut(-mu);
    }
    for (j, mu) in y_mean.iter().enumerate() {
        ym.column_mut(j).add_scalar_mut(-mu);
    }
    let nf = n as f64;
    let mut gram = zm.transpose() * &zm / nf;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = zm.transpose() * &ym / nf;
    let singular = || Error::Numeric("singular probe system; use lambda > 0".into());
    let chol = gram.cholesky().ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
    if hi == 0.0 || (lo / hi).powi(2) < 1e-14 {
        return Err(singular());
    }
    let x = chol.solve(&rhs); // [D, K]
    let mut weights = Vec::with_capacity(k * d);
    for c in 0..k {
        weights.extend(x.column(c).iter());
    }
    let bias = (0..k)
        .map(|c| y_mean[c] - (0..d).map(|j| x[(j, c)] * z_mean[j]).sum::<f64>())
        .collect();
    Ok(LinearProbe {
        weights: Tensor::new(vec![k, d], weights)?,
        bias,
    })
}

/// Residual-to-variance ratio of a probe on held-out data, raw and clamped to `[0, 1]`.
pub fn competition_strength(probe: &LinearProbe, z_eval: &Tensor, targets_eval: &Tensor) -> Result<(f64, f64)> {
    let pred = probe.predict(z_eval)?;
    if pred.shape() != targets_eval.shape() {
        return Err(Error::dim("competition_strength", pred.shape(), targets_eval.shape()));
    }
    let (n, k) = (targets_eval.rows(), targets_eval.cols());
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(targets_eval.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sse = 0.0;
    let mut sst = 0.0;
    for i in 0..n {
        for c in 0..k {
            let y = targets_eval.at(i, c);
            sse += (y - pred.at(i, c)).powi(2);
            sst += (y - mean[c]).powi(2);
        }
    }
    let constant = (0..k).all(|c| (1..n).all(|i| targets_eval.at(i, c) == targets_eval.at(0, c)));
    if sst == 0.0 || constant {
        return Err(Error::Degenerate("concept outputs have zero variance on the evaluation set".into()));
    }
    let raw = sse / sst;
    Ok((raw, raw.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub modality: String,
    pub probe: LinearProbe,
    pub d_raw: f64,
    pub d: f64,
    pub n_fit: usize,
    pub n_eval: usize,
    pub lambda: f64,
}

/// The manifest-facing part of a [`ProbeResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub modality: String,
    pub d_raw: f64,
    pub d: f64,
    pub lambda: f64,
    pub n_fit: usize,
    pub n_eval: usize,
}

impl From<&ProbeResult> for ProbeSummary {
    fn from(r: &ProbeResult) -> Self {
        ProbeSummary {
            modality: r.modality.clone(),
            d_raw: r.d_raw,
            d: r.d,
            lambda: r.lambda,
            n_fit: r.n_fit,
            n_eval: r.n_eval,
        }
    }
}

/// Probes every modality of `model` against its concept.
pub fn probe_pipeline(
    model: &MultiModalModel,
    concepts: &[ConceptModel],
    dataset: &Dataset,
    splits: &Splits,
    lambda: f64,
) -> Result<Vec<ProbeResult>> {
    if splits.probe_fit.iter().any(|i| splits.probe_eval.binary_search(i).is_ok()) {
        return Err(Error::Config("probe fit and eval sets overlap".into()));
    }
    let fit_batch = dataset.gather(&splits.probe_fit)?;
    let eval_batch = dataset.gather(&splits.probe_eval)?;
    let z_fit = model.latent_features(&fit_batch.inputs)?;
    let z_eval = model.latent_features(&eval_batch.inputs)?;
    model
        .modality_names()
        .into_iter()
        .map(|name| {
            let concept = concepts
                .iter()
                .find(|c| c.modality() == name)
                .ok_or_else(|| Error::Config(format!("no concept trained for modality {name}")))?;
            let c_fit = concept_eval(concept, dataset, &splits.probe_fit)?.logits;
            let c_eval = concept_eval(concept, dataset, &splits.probe_eval)?.logits;
            let probe = fit_linear_probe(&z_fit, &c_fit, lambda)?;
            let (d_raw, d) = competition_strength(&probe, &z_eval, &c_eval)?;
            Ok(ProbeResult {
                modality: name.to_string(),
                probe,
                d_raw,
                d,
                n_fit: splits.probe_fit.len(),
                n_eval: splits.probe_eval.len(),
                lambda,
            })
        })
        .collect()
}
