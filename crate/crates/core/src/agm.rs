//! Adaptive gradient modulation.
//!
//! Each iteration scores every modality by the mean true-class
//! log-probability of its mono-modal response, turns the scores into
//! discrepancy ratios `r^m`, compares them against ratios `τ^m` built from
//! running-average scores, and scales modality `m`'s share of the gradient by
//! `κ^m = exp(−α(r^m − τ^m))`. The parameter update is
//!
//! ```text
//! θ ← θ − η · ∂L/∂φ · Σ_m κ^m ∂φ^m/∂θ
//! ```
//!
//! with `∂L/∂φ` taken at the full output and `κ` held constant.

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::models::MultiModalModel;
use crate::rng;
use crate::shapley::{
    mono_modal_accuracy, mono_modal_outputs_auto, mono_modal_score, mono_modal_vars,
    mono_modal_vars_late_fast, ShapleyPlan,
};
use crate::tensor::{softmax_rows, Sgd, SgdConfig, Tape, Tensor, Var};

/// Bound on `|α(r − τ)|` before exponentiation.
pub const KAPPA_EXPONENT_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Unmodulated joint training (`κ ≡ 1`).
    #[serde(rename = "joint")]
    JointTrain,
    /// Modulation toward the running-average reference.
    Agm,
    /// Modulation toward a fixed reference `τ ≡ 1`.
    AgmToOne,
}

impl TrainMethod {
    pub fn label(self) -> &'static str {
        match self {
            TrainMethod::JointTrain => "joint",
            TrainMethod::Agm => "agm",
            TrainMethod::AgmToOne => "agm_to_one",
        }
    }
}

/// Mutable modulation state carried across iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgmState {
    /// Running mean `ŝ^m` of the per-batch scores.
    pub running_avg: Vec<f64>,
    /// Number of batches absorbed so far.
    pub t: u64,
    pub alpha: f64,
}

impl AgmState {
    pub fn new(num_modalities: usize, alpha: f64) -> Self {
        AgmState {
            running_avg: vec![0.0; num_modalities],
            t: 0,
            alpha,
        }
    }

    /// Folds one batch of scores into the running means and advances `t`.
    pub fn update_running_average(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != self.running_avg.len() {
            return Err(Error::dim("running average", &[self.running_avg.len()], &[s.len()]));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score at iteration {}", self.t)));
        }
        let t = self.t as f64;
        for (avg, &v) in self.running_avg.iter_mut().zip(s) {
            *avg = *avg * t / (t + 1.0) + v / (t + 1.0);
        }
        self.t += 1;
        Ok(())
    }
}

fn pairwise_ratios(s: &[f64]) -> Vec<f64> {
    let k = s.len();
    if k < 2 {
        return vec![1.0; k];
    }
    (0..k)
        .map(|m| {
            let gap: f64 = (0..k).filter(|&o| o != m).map(|o| s[m] - s[o]).sum();
            (gap / (k - 1) as f64).exp()
        })
        .collect()
}

/// `r^m = exp[(1/(k−1)) Σ_{m'≠m} (s^m − s^{m'})]`.
pub fn discrepancy_ratios(s: &[f64]) -> Result<Vec<f64>> {
    if s.len() < 2 {
        return Err(Error::Usage("discrepancy ratios need at least two modalities".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite modality score".into()));
    }
    Ok(pairwise_ratios(s))
}

/// Same ratios through the mean form `exp[(s^m − s̄)·k/(k−1)]`.
pub fn discrepancy_ratios_mean_form(s: &[f64]) -> Result<Vec<f64>> {
    if s.len() < 2 {
        return Err(Error::Usage("discrepancy ratios need at least two modalities".into()));
    }
    let k = s.len() as f64;
    let mean = s.iter().sum::<f64>() / k;
    Ok(s.iter().map(|v| ((v - mean) * k / (k - 1.0)).exp()).collect())
}

/// Reference ratios `τ^m` from the current running averages.
///
/// Before any update the averages are all zero, so every `τ^m` is 1.
pub fn reference_ratios(state: &AgmState) -> Vec<f64> {
    pairwise_ratios(&state.running_avg)
}

/// `κ^m = exp(−α(r^m − τ^m))`, exponent clamped to ±[`KAPPA_EXPONENT_CLAMP`].
pub fn modulation_coefficients(r: &[f64], tau: &[f64], alpha: f64) -> Vec<f64> {
    r.iter()
        .zip(tau)
        .map(|(&rm, &tm)| (-alpha * (rm - tm)).clamp(-KAPPA_EXPONENT_CLAMP, KAPPA_EXPONENT_CLAMP).exp())
        .collect()
}

/// Per-iteration quantities reported by a modulated step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub tau: Vec<f64>,
    pub kappa: Vec<f64>,
}

/// `∂L/∂logits` for mean cross-entropy: `(softmax − onehot)/N`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Tensor {
    let mut g = softmax_rows(logits);
    let (n, k) = (logits.rows(), logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        g.data_mut()[i * k + y] -= 1.0;
    }
    g.map(|v| v / n as f64)
}

fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(-mono_modal_score(logits, labels)?)
}

/// Mono-modal responses on a tape, using the branch shortcut for late fusion.
fn responses(
    tape: &mut Tape,
    model: &MultiModalModel,
    bound: &[Var],
    inputs: &[Tensor],
) -> Result<crate::shapley::MonoModalVars> {
    if model.fusion().is_late() {
        mono_modal_vars_late_fast(tape, model, bound, inputs)
    } else {
        mono_modal_vars(tape, model, bound, inputs)
    }
}

/// Modulated gradient at the current parameters, without touching the
/// optimizer or the running averages.
pub fn modulated_gradients(
    model: &MultiModalModel,
    batch: &Batch,
    state: &AgmState,
    method: TrainMethod,
) -> Result<(Vec<Tensor>, StepDiagnostics)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let k = model.num_modalities();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let vars = responses(&mut tape, model, &bound, &batch.inputs)?;

    let s = vars
        .per_modality
        .iter()
        .map(|&v| mono_modal_score(tape.value(v), &batch.labels))
        .collect::<Result<Vec<_>>>()?;
    let full = tape.value(vars.full).clone();
    let loss = cross_entropy_value(&full, &batch.labels)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at iteration {}", state.t)));
    }

    let (r, tau, kappa) = if k < 2 {
        (vec![1.0; k], vec![1.0; k], vec![1.0; k])
    } else {
        let r = discrepancy_ratios(&s)?;
        let tau = match method {
            TrainMethod::AgmToOne => vec![1.0; k],
            _ => reference_ratios(state),
        };
        let kappa = match method {
            TrainMethod::JointTrain => vec![1.0; k],
            _ => modulation_coefficients(&r, &tau, state.alpha),
        };
        (r, tau, kappa)
    };

    // Σ_m κ^m VJP(φ^m, g) = VJP(Σ_m κ^m φ^m, g)
    let combined = if vars.coalitions.is_empty() {
        let terms: Vec<(Var, f64)> = vars.per_modality.iter().copied().zip(kappa.iter().copied()).collect();
        tape.lin_comb(&terms)?
    } else {
        let plan = ShapleyPlan::new(k);
        let coeffs = plan.combine(&kappa);
        let terms: Vec<(Var, f64)> = vars
            .coalitions
            .iter()
            .zip(coeffs)
            .filter(|(_, c)| *c != 0.0)
            .map(|(&(_, v), c)| (v, c))
            .collect();
        if terms.is_empty() {
            vars.full
        } else {
            tape.lin_comb(&terms)?
        }
    };
    let g = cross_entropy_grad(&full, &batch.labels);
    tape.backward_vjp(combined, &g)?;
    let grads = model.params().collect_grads(&tape, &bound);
    Ok((
        grads,
        StepDiagnostics {
            loss,
            s,
            r,
            tau,
            kappa,
        },
    ))
}

/// One training iteration: modulated gradient, optimizer step, then the
/// running-average update (after `τ` has been read).
pub fn modulated_step(
    model: &mut MultiModalModel,
    batch: &Batch,
    state: &mut AgmState,
    method: TrainMethod,
    opt: &mut Sgd,
    epoch: usize,
) -> Result<StepDiagnostics> {
    let (grads, diag) = modulated_gradients(model, batch, state, method)?;
    opt.step(model.params_mut(), &grads, epoch)?;
    state.update_running_average(&diag.s)?;
    Ok(diag)
}

fn default_batch_size() -> usize {
    64
}

fn default_alpha() -> f64 {
    1.0
}

/// Settings shared by multi-modal training and concept training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TrainMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// Shuffling seed for a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    rng::derive_seed(seed, &format!("epoch.{epoch}"))
}

/// Accuracy and per-modality metrics on a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub acc: f64,
    pub acc_m: Vec<f64>,
    pub s_m: Vec<f64>,
}

pub fn evaluate(model: &MultiModalModel, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let batch = dataset.gather(indices)?;
    let out = mono_modal_outputs_auto(model, &batch.inputs)?;
    Ok(Evaluation {
        loss: cross_entropy_value(&out.full, &batch.labels)?,
        acc: mono_modal_accuracy(&out.full, &batch.labels),
        acc_m: out
            .per_modality
            .iter()
            .map(|p| mono_modal_accuracy(p, &batch.labels))
            .collect(),
        s_m: out
            .per_modality
            .iter()
            .map(|p| mono_modal_score(p, &batch.labels))
            .collect::<Result<_>>()?,
    })
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Validation accuracy of the full model.
    pub acc: f64,
    /// Validation mono-modal accuracies.
    pub acc_m: Vec<f64>,
    pub val_loss: f64,
    pub val_s: Vec<f64>,
    /// Epoch means of the step diagnostics.
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub tau: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Competition strengths when probed this epoch.
    pub d: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: MultiModalModel,
    pub history: Vec<EpochMetrics>,
    pub state: AgmState,
}

/// Callback run after every epoch; may return competition strengths.
pub type EpochHook<'a> = dyn FnMut(&MultiModalModel, usize) -> Result<Option<Vec<f64>>> + 'a;

pub fn train(model: MultiModalModel, dataset: &Dataset, splits: &Splits, cfg: &TrainConfig) -> Result<TrainedRun> {
    train_with_hook(model, dataset, splits, cfg, &mut |_, _| Ok(None))
}

pub fn train_with_hook(
    mut model: MultiModalModel,
    dataset: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let k = model.num_modalities();
    if dataset.num_modalities() != k {
        return Err(Error::Config("dataset and model modality counts differ".into()));
    }
    let mut state = AgmState::new(k, cfg.alpha);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let chunks = batch_indices(&splits.train, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        let mut sums = StepDiagnostics {
            loss: 0.0,
            s: vec![0.0; k],
            r: vec![0.0; k],
            tau: vec![0.0; k],
            kappa: vec![0.0; k],
        };
        for idx in &chunks {
            let batch = dataset.gather(idx)?;
            let d = modulated_step(&mut model, &batch, &mut state, cfg.method, &mut opt, epoch)?;
            sums.loss += d.loss;
            for m in 0..k {
                sums.s[m] += d.s[m];
                sums.r[m] += d.r[m];
                sums.tau[m] += d.tau[m];
                sums.kappa[m] += d.kappa[m];
            }
        }
        let nb = chunks.len() as f64;
        let mean = |v: Vec<f64>| v.into_iter().map(|x| x / nb).collect::<Vec<_>>();
        let eval = evaluate(&model, dataset, &splits.val)?;
        let d = hook(&model, epoch)?;
        log::debug!("epoch {epoch}: loss {:.4} val acc {:.4}", sums.loss / nb, eval.acc);
        history.push(EpochMetrics {
            epoch,
            loss: sums.loss / nb,
            acc: eval.acc,
            acc_m: eval.acc_m,
            val_loss: eval.loss,
            val_s: eval.s_m,
            s: mean(sums.s),
            r: mean(sums.r),
            tau: mean(sums.tau),
            kappa: mean(sums.kappa),
            d,
        });
    }
    Ok(TrainedRun { model, history, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn ratio_examples() {
        let r = discrepancy_ratios(&[-0.5, -2.0]).unwrap();
        assert!(close(&r, &[1.5f64.exp(), (-1.5f64).exp()], 1e-12));
        assert!(close(&r, &[4.4817, 0.2231], 1e-4));
        assert!(close(&discrepancy_ratios(&[-1.2; 3]).unwrap(), &[1.0; 3], 1e-15));
        let r3 = discrepancy_ratios(&[0.0, -1.0, -2.0]).unwrap();
        assert!(close(&r3, &[1.5f64.exp(), 1.0, (-1.5f64).exp()], 1e-12));
        assert!(matches!(discrepancy_ratios(&[0.3]), Err(Error::Usage(_))));
    }

    #[test]
    fn pairwise_and_mean_forms_agree() {
        for s in [vec![-0.5, -2.0], vec![0.0, -1.0, -2.0], vec![-0.1, -3.3, -0.7, -1.9]] {
            let a = discrepancy_ratios(&s).unwrap();
            let b = discrepancy_ratios_mean_form(&s).unwrap();
            assert!(close(&a, &b, 1e-12), "{a:?} {b:?}");
        }
    }

    #[test]
    fn reference_examples() {
        let mut st = AgmState::new(2, 1.0);
        assert_eq!(reference_ratios(&st), vec![1.0, 1.0]);
        st.running_avg = vec![-1.0, -1.5];
        assert!(close(&reference_ratios(&st), &[0.5f64.exp(), (-0.5f64).exp()], 1e-12));
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(modulation_coefficients(&[3.0, 0.2], &[1.0, 1.0], 0.0), vec![1.0, 1.0]);
        assert_eq!(modulation_coefficients(&[1.7, 0.4], &[1.7, 0.4], 2.0), vec![1.0, 1.0]);
        let k = modulation_coefficients(&[4.4817, 0.2231], &[1.0, 1.0], 1.0);
        assert!((k[0] - (-3.4817f64).exp()).abs() < 1e-12);
        assert!((k[1] - 0.7769f64.exp()).abs() < 1e-12);
        assert!((k[0] - 0.0307).abs() < 1e-4 && (k[1] - 2.1747).abs() < 1e-4);
        let clamped = modulation_coefficients(&[1e6], &[0.0], 1.0);
        assert_eq!(clamped[0], (-50.0f64).exp());
    }

    #[test]
    fn running_average_examples() {
        let mut st = AgmState::new(1, 1.0);
        st.update_running_average(&[-0.7]).unwrap();
        assert_eq!(st.running_avg, vec![-0.7]);
        assert_eq!(st.t, 1);
        let mut st = AgmState::new(1, 1.0);
        st.update_running_average(&[-1.0]).unwrap();
        st.update_running_average(&[-3.0]).unwrap();
        assert_eq!(st.running_avg, vec![-2.0]);
        assert!(st.update_running_average(&[f64::NAN]).is_err());
    }

    #[test]
    fn kappa_strictly_decreasing_in_r() {
        let grid: Vec<f64> = (0..50).map(|i| 0.1 + i as f64 * 0.1).collect();
        let ks: Vec<f64> = grid.iter().map(|&r| modulation_coefficients(&[r], &[1.3], 0.7)[0]).collect();
        assert!(ks.windows(2).all(|w| w[1] < w[0]));
        assert!(ks.iter().all(|&k| k > 0.0));
    }

    #[test]
    fn ce_grad_rows_sum_to_zero() {
        let logits = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 0.0]]).unwrap();
        let g = cross_entropy_grad(&logits, &[2, 0]);
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
    }
}
