//! Mono-modal concepts: reference models of how a modality is processed when
//! no other modality competes with it.
//!
//! Late fusion trains the modality's branch on its own. Early fusion trains
//! the full architecture with every other modality padded (zeros, or fresh
//! standard-normal noise per sample per epoch), and always evaluates with
//! zero padding. Training uses the paired run's optimizer settings, epoch
//! budget, batch size, seed and training split.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agm::{epoch_seed, TrainConfig};
use crate::data::{batch_indices, Dataset, Splits};
use crate::error::{Error, Result};
use crate::models::{FusionSpec, ModalitySpec, ModelSpec, MultiModalModel};
use crate::rng;
use crate::shapley::mono_modal_accuracy;
use crate::tensor::{Sgd, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptContext {
    LateBranch,
    EarlyZeroPad,
    EarlyRandomPad,
}

impl ConceptContext {
    pub fn label(self) -> &'static str {
        match self {
            ConceptContext::LateBranch => "late",
            ConceptContext::EarlyZeroPad => "early_zero",
            ConceptContext::EarlyRandomPad => "early_random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConceptModel {
    modality: String,
    context: ConceptContext,
    network: MultiModalModel,
    /// Index of the concept's modality inside `network`.
    slot: usize,
    env: TrainConfig,
    train_size: usize,
}

impl ConceptModel {
    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn context(&self) -> ConceptContext {
        self.context
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    pub fn network(&self) -> &MultiModalModel {
        &self.network
    }

    /// Training settings the concept was built with.
    pub fn environment(&self) -> &TrainConfig {
        &self.env
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    /// Checkpoint file name, `concept_<modality>_<context>.mmf`.
    pub fn checkpoint_name(&self) -> String {
        format!("concept_{}_{}.mmf", self.modality, self.context.label())
    }

    /// `C^m(x^m)`: K logits per row of the modality's features.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.rows();
        let inputs: Vec<Tensor> = self
            .network
            .spec()
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if i == self.slot {
                    features.clone()
                } else {
                    Tensor::zeros(&[n, m.input_dim])
                }
            })
            .collect();
        self.network.forward_full(&inputs)
    }
}

fn full_logits_loss_grads(model: &MultiModalModel, inputs: &[Tensor], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let out = model.forward_subsets(&mut tape, &bound, inputs, &[model.full_set()])?[0];
    let loss = tape.cross_entropy(out, labels)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    Ok((value, model.params().collect_grads(&tape, &bound)))
}

/// Unmodulated training where `make_inputs(epoch, indices)` builds each batch.
fn fit(
    model: &mut MultiModalModel,
    dataset: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
    mut make_inputs: impl FnMut(usize, &[usize]) -> Result<Vec<Tensor>>,
) -> Result<()> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for idx in batch_indices(&splits.train, cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
            let inputs = make_inputs(epoch, &idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let (loss, grads) = full_logits_loss_grads(model, &inputs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite concept loss at iteration {step}")));
            }
            opt.step(model.params_mut(), &grads, epoch)?;
            step += 1;
        }
    }
    Ok(())
}

fn check_dims(dataset: &Dataset, m: usize, spec: &ModalitySpec) -> Result<()> {
    if dataset.dims()[m] != spec.input_dim {
        return Err(Error::Config(format!(
            "modality {} has width {} in the dataset but {} in the model",
            spec.name,
            dataset.dims()[m],
            spec.input_dim
        )));
    }
    Ok(())
}

/// Trains branch `branch` alone on its own features (late fusion).
pub fn train_concept_late(
    paired: &ModelSpec,
    branch: &ModalitySpec,
    dataset: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<ConceptModel> {
    if !paired.fusion.is_late() {
        return Err(Error::Config("late concepts need a late-fusion paired model".into()));
    }
    let paired_branch = paired
        .modalities
        .iter()
        .find(|m| m.name == branch.name)
        .ok_or_else(|| Error::Config(format!("paired model has no modality {}", branch.name)))?;
    if paired_branch != branch {
        return Err(Error::Config(format!(
            "branch spec for {} differs from the paired model's encoder",
            branch.name
        )));
    }
    let m = dataset.modality_index(&branch.name)?;
    check_dims(dataset, m, branch)?;
    let mut network = MultiModalModel::from_spec(ModelSpec {
        modalities: vec![branch.clone()],
        fusion: FusionSpec::LateSum,
        num_classes: paired.num_classes,
        seed: paired.seed,
    })?;
    let features = dataset.features(m);
    fit(&mut network, dataset, splits, cfg, |_, idx| Ok(vec![features.select_rows(idx)?]))?;
    Ok(ConceptModel {
        modality: branch.name.clone(),
        context: ConceptContext::LateBranch,
        network,
        slot: 0,
        env: cfg.clone(),
        train_size: splits.train.len(),
    })
}

/// Trains the full early-fusion architecture on one modality with the others padded.
pub fn train_concept_early(
    paired: &ModelSpec,
    modality: &str,
    dataset: &Dataset,
    splits: &Splits,
    padding: Padding,
    cfg: &TrainConfig,
) -> Result<ConceptModel> {
    if paired.fusion.is_late() {
        return Err(Error::Config("early concepts need an early-fusion paired model".into()));
    }
    let slot = paired
        .modalities
        .iter()
        .position(|m| m.name == modality)
        .ok_or_else(|| Error::Config(format!("paired model has no modality {modality}")))?;
    let m = dataset.modality_index(modality)?;
    check_dims(dataset, m, &paired.modalities[slot])?;
    let mut network = MultiModalModel::from_spec(paired.clone())?;
    let features = dataset.features(m);
    let widths: Vec<usize> = paired.modalities.iter().map(|s| s.input_dim).collect();
    let mut pad_rng = None;
    let mut pad_epoch = usize::MAX;
    fit(&mut network, dataset, splits, cfg, |epoch, idx| {
        if epoch != pad_epoch {
            pad_rng = Some(rng::stream(cfg.seed, &format!("pad.{modality}.{epoch}")));
            pad_epoch = epoch;
        }
        let n = idx.len();
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i == slot {
                    return features.select_rows(idx);
                }
                match padding {
                    Padding::Zero => Ok(Tensor::zeros(&[n, w])),
                    Padding::Random => {
                        let r = pad_rng.as_mut().expect("seeded above");
                        Tensor::new(vec![n, w], (0..n * w).map(|_| r.sample(StandardNormal)).collect())
                    }
                }
            })
            .collect()
    })?;
    Ok(ConceptModel {
        modality: modality.to_string(),
        context: match padding {
            Padding::Zero => ConceptContext::EarlyZeroPad,
            Padding::Random => ConceptContext::EarlyRandomPad,
        },
        network,
        slot,
        env: cfg.clone(),
        train_size: splits.train.len(),
    })
}

/// Concept outputs and argmax accuracy on a set of samples.
#[derive(Debug, Clone)]
pub struct ConceptEval {
    pub logits: Tensor,
    pub accuracy: f64,
}

pub fn concept_eval(concept: &ConceptModel, dataset: &Dataset, indices: &[usize]) -> Result<ConceptEval> {
    let m = dataset.modality_index(concept.modality())?;
    let features = dataset.features(m).select_rows(indices)?;
    let logits = concept.predict(&features)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels()[i]).collect();
    let accuracy = mono_modal_accuracy(&logits, &labels);
    Ok(ConceptEval { logits, accuracy })
}
