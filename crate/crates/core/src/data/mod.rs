//! Synthetic multi-modal datasets, splits and batching.

pub mod format;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use format::{load, read_dataset, save, write_dataset};

/// One generated modality: its width and signal-to-noise scale `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityGenSpec {
    pub name: String,
    pub dim: usize,
    pub snr: f64,
}

fn default_shared_dim() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_samples: usize,
    pub modalities: Vec<ModalityGenSpec>,
    /// Fraction `γ` of each modality's class signal routed through a latent
    /// shared by all modalities.
    #[serde(default)]
    pub shared_signal_fraction: f64,
    #[serde(default = "default_shared_dim")]
    pub shared_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.num_samples < self.num_classes {
            return Err(Error::Config("num_samples must be at least num_classes".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("modalities must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_signal_fraction) {
            return Err(Error::Config("shared_signal_fraction must lie in [0, 1]".into()));
        }
        if self.shared_dim == 0 {
            return Err(Error::Config("shared_dim must be positive".into()));
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config("num_classes exceeds the u16 label range".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return Err(Error::Config(format!("modalities.{}.dim must be positive", m.name)));
            }
            if !(m.snr >= 0.0 && m.snr.is_finite()) {
                return Err(Error::Config(format!("modalities.{}.snr must be non-negative", m.name)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality name {}", m.name)));
            }
        }
        Ok(())
    }

    /// Parses and validates a spec; JSON when `path` ends in `.json`, TOML otherwise.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SyntheticSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Names of the shipped benchmark configurations.
pub const BENCHMARKS: [&str; 3] = ["balanced", "imbalanced", "trimodal"];

/// Shipped benchmark specs, all with 4 classes and 4000 samples.
pub fn benchmark(name: &str) -> Result<SyntheticSpec> {
    let mods: &[(&str, usize, f64)] = match name {
        "balanced" => &[("a", 4, 1.5), ("v", 4, 1.5)],
        "imbalanced" => &[("a", 2, 3.0), ("v", 16, 0.5)],
        "trimodal" => &[("a", 4, 2.5), ("v", 8, 1.0), ("t", 16, 0.3)],
        other => {
            return Err(Error::Config(format!(
                "unknown benchmark {other}; expected one of {BENCHMARKS:?}"
            )))
        }
    };
    Ok(SyntheticSpec {
        num_classes: 4,
        num_samples: 4000,
        modalities: mods
            .iter()
            .map(|&(n, d, s)| ModalityGenSpec {
                name: n.into(),
                dim: d,
                snr: s,
            })
            .collect(),
        shared_signal_fraction: 0.0,
        shared_dim: default_shared_dim(),
        seed: 999,
    })
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SyntheticSpec),
    External { description: serde_json::Value },
}

/// Per-modality feature matrices plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    features: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
}

/// A gathered mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        features: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if names.len() != features.len() || names.is_empty() {
            return Err(Error::Config("one feature matrix per modality name is required".into()));
        }
        let n = labels.len();
        for (name, f) in names.iter().zip(&features) {
            if f.rank() != 2 || f.rows() != n {
                return Err(Error::dim("dataset", &[n], f.shape()));
            }
            if !f.is_finite() {
                return Err(Error::Numeric(format!("non-finite features in modality {name}")));
            }
        }
        if num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            *seen
                .get_mut(y)
                .ok_or_else(|| Error::Index(format!("label {y} out of range for {num_classes} classes")))? = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("class {c} has no samples")));
        }
        Ok(Dataset {
            names,
            features,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_modalities(&self) -> usize {
        self.names.len()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.names
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("dataset has no modality {name}")))
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(Tensor::cols).collect()
    }

    pub fn features(&self, m: usize) -> &Tensor {
        &self.features[m]
    }

    pub fn features_mut(&mut self, m: usize) -> &mut Tensor {
        &mut self.features[m]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            indices: indices.to_vec(),
            inputs: self
                .features
                .iter()
                .map(|f| f.select_rows(indices))
                .collect::<Result<_>>()?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Single-modality view with the same labels and sample order.
    pub fn only(&self, m: usize) -> Dataset {
        Dataset {
            names: vec![self.names[m].clone()],
            features: vec![self.features[m].clone()],
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }
}

fn gaussian(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws a Gaussian class-mean dataset.
///
/// Each modality sample is `ρ·[(1−γ)·μ_y + γ·P·μ^shared_y] + ε` with class
/// means `μ_y ~ N(0, I)`, a class latent `μ^shared_y ~ N(0, I)` shared by all
/// modalities, a fixed random map `P` (entries `N(0, 1/shared_dim)`), and
/// unit Gaussian noise. Features are rounded to `f32` precision so a saved
/// file reloads bit-exactly.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (k, n, sd) = (spec.num_classes, spec.num_samples, spec.shared_dim);
    let gamma = spec.shared_signal_fraction;

    let mut lr = rng::stream(spec.seed, "labels");
    let mut labels: Vec<usize> = (0..k).collect();
    labels.extend((k..n).map(|_| lr.random_range(0..k)));
    labels.shuffle(&mut lr);

    let shared = gaussian(&mut rng::stream(spec.seed, "shared"), k * sd);
    let mut features = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let d = m.dim;
        let means = gaussian(&mut rng::stream(spec.seed, &format!("means.{}", m.name)), k * d);
        let scale = 1.0 / (sd as f64).sqrt();
        let proj: Vec<f64> = gaussian(&mut rng::stream(spec.seed, &format!("proj.{}", m.name)), d * sd)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        // class signal per (class, feature)
        let mut signal = vec![0.0; k * d];
        for c in 0..k {
            for i in 0..d {
                let projected: f64 = (0..sd).map(|j| proj[i * sd + j] * shared[c * sd + j]).sum();
                signal[c * d + i] = m.snr * ((1.0 - gamma) * means[c * d + i] + gamma * projected);
            }
        }
        let mut nr = rng::stream(spec.seed, &format!("noise.{}", m.name));
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for i in 0..d {
                let eps: f64 = nr.sample(StandardNormal);
                data.push((signal[y * d + i] + eps) as f32 as f64);
            }
        }
        features.push(Tensor::new(vec![n, d], data)?);
    }
    Dataset::new(
        spec.modalities.iter().map(|m| m.name.clone()).collect(),
        features,
        labels,
        k,
        Provenance::Synthetic(spec.clone()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub probe_fit: f64,
    pub probe_eval: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            probe_fit: 0.1,
            probe_eval: 0.1,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 4] {
        [self.train, self.val, self.probe_fit, self.probe_eval]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Config("split fractions must lie in [0, 1]".into()));
        }
        let total: f64 = f.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total} > 1")));
        }
        Ok(())
    }
}

/// Disjoint index sets; each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub probe_fit: Vec<usize>,
    pub probe_eval: Vec<usize>,
}

/// Class-stratified split.
///
/// Split sizes are `floor(fraction · N)`. Within every class each split
/// receives either the floor or the ceiling of its proportional share; the
/// rounding units go to the splits that are furthest behind their running
/// target, which keeps the totals exact.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let f = fractions.as_array();
    let n = dataset.num_samples();
    let k = dataset.num_classes();
    // bucket 4 holds samples left out of every split
    let mut targets = [0usize; 5];
    for j in 0..4 {
        targets[j] = (f[j] * n as f64 + 1e-9).floor() as usize;
    }
    targets[4] = n - targets[..4].iter().sum::<usize>();
    let active = f.iter().filter(|&&x| x > 0.0).count();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.len() < active) {
        return Err(Error::Config(format!(
            "class {c} has {} samples, fewer than the {active} requested splits",
            by_class[c].len()
        )));
    }

    let mut alloc = vec![[0usize; 5]; k];
    let mut bumped = vec![[false; 5]; k];
    let mut deficit = [0.0f64; 5];
    for (c, members) in by_class.iter().enumerate() {
        let nc = members.len();
        let ideal: Vec<f64> = targets.iter().map(|&t| (nc * t) as f64 / n as f64).collect();
        let mut a: Vec<usize> = ideal.iter().map(|q| q.floor() as usize).collect();
        let rem = nc - a.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..5).filter(|&j| targets[j] > 0).collect();
        let prio = |j: usize| deficit[j] + ideal[j] - ideal[j].floor();
        order.sort_by(|&x, &y| prio(y).total_cmp(&prio(x)).then(x.cmp(&y)));
        for &j in order.iter().take(rem) {
            a[j] += 1;
            bumped[c][j] = true;
        }
        for j in 0..5 {
            deficit[j] += ideal[j] - a[j] as f64;
            alloc[c][j] = a[j];
        }
    }
    // Repair any residual mismatch by moving a rounding unit between classes.
    for _ in 0..(k * 5) {
        let sums: Vec<usize> = (0..5).map(|j| alloc.iter().map(|a| a[j]).sum()).collect();
        let over = (0..5).find(|&j| sums[j] > targets[j]);
        let under = (0..5).find(|&j| sums[j] < targets[j]);
        let (Some(o), Some(u)) = (over, under) else { break };
        let c = (0..k)
            .find(|&c| bumped[c][o] && !bumped[c][u] && (alloc[c][u] as f64) < by_class[c].len() as f64)
            .ok_or_else(|| Error::Config("unable to balance stratified split".into()))?;
        alloc[c][o] -= 1;
        alloc[c][u] += 1;
        bumped[c][o] = false;
        bumped[c][u] = true;
    }

    let mut out: [Vec<usize>; 4] = Default::default();
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng::stream(seed, &format!("split.{c}")));
        let mut offset = 0;
        for j in 0..4 {
            out[j].extend_from_slice(&shuffled[offset..offset + alloc[c][j]]);
            offset += alloc[c][j];
        }
    }
    for v in &mut out {
        v.sort_unstable();
    }
    let [train, val, probe_fit, probe_eval] = out;
    Ok(Splits {
        train,
        val,
        probe_fit,
        probe_eval,
    })
}

/// Shuffled mini-batch index lists covering `indices` exactly once; the last
/// batch may be partial.
pub fn batch_indices(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Usage("cannot batch an empty split".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(epoch_seed, "batches"));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches<'a>(
    dataset: &'a Dataset,
    indices: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let chunks = batch_indices(indices, batch_size, epoch_seed)?;
    Ok(chunks.into_iter().map(move |c| dataset.gather(&c)))
}
