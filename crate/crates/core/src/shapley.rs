//! Mono-modal responses via Shapley attribution over modality coalitions.
//!
//! For modality `m` in a `k`-modality model,
//!
//! ```text
//! φ^m(x) = Σ_{S ⊆ M∖{m}} |S|!(k−|S|−1)!/k! · [φ(S ∪ {m}) − φ(S)]
//! ```
//!
//! where `φ(S)` is the model evaluated with only the modalities in `S`
//! present and `φ(∅) := 0`. The empty coalition therefore needs no forward
//! pass, and the responses sum exactly to the full output. Each response is a
//! fixed linear combination of the `2^k − 1` masked outputs, so it is
//! computed once per coalition and recombined.

use crate::error::{Error, Result};
use crate::models::{ModalitySet, MultiModalModel};
use crate::tensor::{log_softmax_rows, Tape, Tensor, Var};

/// Largest modality count enumerated without a warning.
pub const MAX_EXACT_MODALITIES: usize = 4;

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// Shapley weight for a coalition of size `s` out of `k` players.
pub fn shapley_weight(k: usize, s: usize) -> f64 {
    (factorial(s) * factorial(k - s - 1)) as f64 / factorial(k) as f64
}

/// Coefficients expressing every `φ^m` as a combination of masked outputs.
#[derive(Debug, Clone)]
pub struct ShapleyPlan {
    k: usize,
    sets: Vec<ModalitySet>,
    coeffs: Vec<Vec<f64>>,
}

impl ShapleyPlan {
    pub fn new(k: usize) -> Self {
        assert!((1..=16).contains(&k), "modality count {k} out of range");
        let sets: Vec<ModalitySet> = (1..(1u32 << k)).map(ModalitySet).collect();
        let coeffs = (0..k)
            .map(|m| {
                sets.iter()
                    .map(|&t| {
                        if t.contains(m) {
                            shapley_weight(k, t.len() - 1)
                        } else {
                            -shapley_weight(k, t.len())
                        }
                    })
                    .collect()
            })
            .collect();
        ShapleyPlan { k, sets, coeffs }
    }

    pub fn num_modalities(&self) -> usize {
        self.k
    }

    /// Non-empty coalitions in evaluation order; the last one is the full set.
    pub fn sets(&self) -> &[ModalitySet] {
        &self.sets
    }

    /// Coefficient of coalition `j` in `φ^m`.
    pub fn coefficient(&self, m: usize, j: usize) -> f64 {
        self.coeffs[m][j]
    }

    /// Per-coalition coefficients of `Σ_m w_m φ^m`.
    pub fn combine(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.sets.len())
            .map(|j| weights.iter().zip(&self.coeffs).map(|(w, c)| w * c[j]).sum())
            .collect()
    }
}

/// Mono-modal responses and the full output, as plain values.
#[derive(Debug, Clone)]
pub struct MonoModalOutputs {
    pub per_modality: Vec<Tensor>,
    pub full: Tensor,
    /// Forward evaluations performed (masked passes, or branches on the fast path).
    pub evaluations: usize,
}

impl MonoModalOutputs {
    /// `max |φ − Σ_m φ^m|`.
    pub fn sum_residual(&self) -> f64 {
        let mut sum = Tensor::zeros(self.full.shape());
        for p in &self.per_modality {
            sum = sum.axpy(1.0, p).expect("same shape");
        }
        self.full.max_abs_diff(&sum).expect("same shape")
    }
}

/// Mono-modal responses recorded on a tape, differentiable in the parameters.
#[derive(Debug, Clone)]
pub struct MonoModalVars {
    pub per_modality: Vec<Var>,
    pub full: Var,
    /// Masked outputs `φ(S)` the responses were assembled from.
    pub coalitions: Vec<(ModalitySet, Var)>,
    pub evaluations: usize,
}

/// Generic coalition enumeration (any fusion kind).
pub fn mono_modal_vars(
    tape: &mut Tape,
    model: &MultiModalModel,
    bound: &[Var],
    inputs: &[Tensor],
) -> Result<MonoModalVars> {
    let k = model.num_modalities();
    if k > MAX_EXACT_MODALITIES {
        log::warn!("exact Shapley enumeration over {k} modalities needs {} forward passes", (1u64 << k) - 1);
    }
    let plan = ShapleyPlan::new(k);
    let outs = model.forward_subsets(tape, bound, inputs, plan.sets())?;
    let mut per_modality = Vec::with_capacity(k);
    for m in 0..k {
        let terms: Vec<(Var, f64)> = outs
            .iter()
            .enumerate()
            .map(|(j, &v)| (v, plan.coefficient(m, j)))
            .collect();
        per_modality.push(tape.lin_comb(&terms)?);
    }
    let full = *outs.last().expect("at least one coalition");
    Ok(MonoModalVars {
        per_modality,
        full,
        coalitions: plan.sets().iter().copied().zip(outs).collect(),
        evaluations: plan.sets().len(),
    })
}

/// Late-fusion shortcut: the responses are the branch logits themselves.
pub fn mono_modal_vars_late_fast(
    tape: &mut Tape,
    model: &MultiModalModel,
    bound: &[Var],
    inputs: &[Tensor],
) -> Result<MonoModalVars> {
    if !model.fusion().is_late() {
        return Err(Error::Usage("the branch shortcut requires late fusion".into()));
    }
    model.check_inputs(inputs)?;
    let k = model.num_modalities();
    let per_modality = (0..k)
        .map(|m| model.branch_logits_on(tape, bound, m, &inputs[m]))
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(Var, f64)> = per_modality.iter().map(|&v| (v, 1.0)).collect();
    let full = if k == 1 { per_modality[0] } else { tape.lin_comb(&terms)? };
    Ok(MonoModalVars {
        per_modality,
        full,
        coalitions: Vec::new(),
        evaluations: k,
    })
}

fn frozen_tape(model: &MultiModalModel) -> (Tape, Vec<Var>) {
    let mut tape = Tape::new();
    let bound = (0..model.params().len())
        .map(|i| tape.constant(model.params().tensor(i).clone()))
        .collect();
    (tape, bound)
}

fn to_values(tape: &Tape, vars: MonoModalVars) -> MonoModalOutputs {
    MonoModalOutputs {
        per_modality: vars.per_modality.iter().map(|&v| tape.value(v).clone()).collect(),
        full: tape.value(vars.full).clone(),
        evaluations: vars.evaluations,
    }
}

pub fn mono_modal_outputs(model: &MultiModalModel, inputs: &[Tensor]) -> Result<MonoModalOutputs> {
    let (mut tape, bound) = frozen_tape(model);
    let vars = mono_modal_vars(&mut tape, model, &bound, inputs)?;
    Ok(to_values(&tape, vars))
}

pub fn mono_modal_outputs_late_fast(model: &MultiModalModel, inputs: &[Tensor]) -> Result<MonoModalOutputs> {
    let (mut tape, bound) = frozen_tape(model);
    let vars = mono_modal_vars_late_fast(&mut tape, model, &bound, inputs)?;
    Ok(to_values(&tape, vars))
}

/// Cheapest exact route for the model's fusion kind.
pub fn mono_modal_outputs_auto(model: &MultiModalModel, inputs: &[Tensor]) -> Result<MonoModalOutputs> {
    if model.fusion().is_late() {
        mono_modal_outputs_late_fast(model, inputs)
    } else {
        mono_modal_outputs(model, inputs)
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() || logits.rank() != 2 {
        return Err(Error::dim("labels", logits.shape(), &[labels.len()]));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean log-probability of the true class under `Softmax(φ^m)`; always ≤ 0.
pub fn mono_modal_score(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let ls = log_softmax_rows(logits);
    let sum: f64 = labels.iter().enumerate().map(|(i, &y)| ls.at(i, y)).sum();
    Ok(sum / labels.len() as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn mono_modal_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len(), "one label per logit row");
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}
