use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::agm::{train_with_hook, EpochMetrics, TrainMethod};
use crate::concept::{concept_eval, train_concept_early, train_concept_late, ConceptModel};
use crate::data::{split, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::models::MultiModalModel;
use crate::probe::{probe_pipeline, ProbeSummary};
use crate::tensor::save_checkpoint;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTIAL_MANIFEST_FILE: &str = "manifest.partial.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityShape {
    pub name: String,
    pub dim: usize,
}

/// Identity of the dataset a run used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_samples: usize,
    pub num_classes: usize,
    pub modalities: Vec<ModalityShape>,
    pub provenance: Provenance,
}

impl DatasetSummary {
    pub fn of(dataset: &Dataset) -> Self {
        DatasetSummary {
            num_samples: dataset.num_samples(),
            num_classes: dataset.num_classes(),
            modalities: dataset
                .modality_names()
                .iter()
                .zip(dataset.dims())
                .map(|(n, d)| ModalityShape { name: n.clone(), dim: d })
                .collect(),
            provenance: dataset.provenance().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityResult {
    pub name: String,
    pub acc: f64,
    pub concept_acc: f64,
    pub d_raw: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub acc: f64,
    pub modalities: Vec<ModalityResult>,
    pub concept_context: String,
    pub probes: Vec<ProbeSummary>,
    pub metrics_csv: String,
    pub checkpoints: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAggregate {
    pub name: String,
    pub acc: MeanStd,
    pub concept_acc: MeanStd,
    pub d: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: MeanStd,
    pub modalities: Vec<ModalityAggregate>,
}

impl Aggregate {
    pub fn of(results: &[SeedResult]) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
        let names = results.first().map(|r| r.modalities.clone()).unwrap_or_default();
        Aggregate {
            acc: MeanStd::of(&col(&|r| r.acc)),
            modalities: names
                .iter()
                .enumerate()
                .map(|(m, mr)| ModalityAggregate {
                    name: mr.name.clone(),
                    acc: MeanStd::of(&col(&|r| r.modalities[m].acc)),
                    concept_acc: MeanStd::of(&col(&|r| r.modalities[m].concept_acc)),
                    d: MeanStd::of(&col(&|r| r.modalities[m].d)),
                })
                .collect(),
        }
    }
}

/// Everything needed to rebuild a comparison row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub timestamp: String,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
    pub method: String,
    pub fusion: String,
    /// `None` for joint training, where it has no effect.
    pub alpha: Option<f64>,
    pub dataset: DatasetSummary,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn csv_name(seed: u64) -> String {
    format!("metrics_seed{seed}.csv")
}

/// Per-epoch CSV: a `train` row and a `val` row per epoch.
pub fn metrics_csv(names: &[String], history: &[EpochMetrics], with_d: bool) -> String {
    let mut out = String::from("epoch,split,loss,acc");
    for m in names {
        write!(out, ",acc_{m},s_{m},r_{m},tau_{m},kappa_{m}").unwrap();
    }
    if with_d {
        for m in names {
            write!(out, ",d_{m}").unwrap();
        }
    }
    out.push('\n');
    for h in history {
        write!(out, "{},train,{},", h.epoch, h.loss).unwrap();
        for m in 0..names.len() {
            write!(out, ",,{},{},{},{}", h.s[m], h.r[m], h.tau[m], h.kappa[m]).unwrap();
        }
        if with_d {
            out.push_str(&",".repeat(names.len()));
        }
        out.push('\n');
        write!(out, "{},val,{},{}", h.epoch, h.val_loss, h.acc).unwrap();
        for m in 0..names.len() {
            write!(out, ",{},{},,,", h.acc_m[m], h.val_s[m]).unwrap();
        }
        if with_d {
            for m in 0..names.len() {
                match &h.d {
                    Some(d) => write!(out, ",{}", d[m]).unwrap(),
                    None => out.push(','),
                }
            }
        }
        out.push('\n');
    }
    out
}

fn train_concepts(cfg: &ExperimentConfig, model: &MultiModalModel, dataset: &Dataset, splits: &crate::data::Splits, seed: u64) -> Result<Vec<ConceptModel>> {
    let spec = model.spec();
    let ccfg = cfg.concept_config(seed);
    spec.modalities
        .iter()
        .map(|m| {
            if spec.fusion.is_late() {
                train_concept_late(spec, m, dataset, splits, &ccfg)
            } else {
                train_concept_early(spec, &m.name, dataset, splits, cfg.concept_padding, &ccfg)
            }
        })
        .collect()
}

/// Runs one seed and writes its CSV and checkpoints under `out`.
pub fn run_seed(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, out: &Path) -> Result<SeedResult> {
    let started = Instant::now();
    let splits = split(dataset, cfg.splits, seed)?;
    let model = MultiModalModel::from_spec(cfg.model.model_spec(dataset, seed)?)?;
    let concepts = train_concepts(cfg, &model, dataset, &splits, seed)?;
    log::info!("seed {seed}: concepts trained");

    let every = cfg.probe_every;
    let mut hook = |m: &MultiModalModel, epoch: usize| -> Result<Option<Vec<f64>>> {
        if every == 0 || (epoch + 1) % every != 0 {
            return Ok(None);
        }
        let probes = probe_pipeline(m, &concepts, dataset, &splits, cfg.lambda)?;
        Ok(Some(probes.iter().map(|p| p.d).collect()))
    };
    let run = train_with_hook(model, dataset, &splits, &cfg.train_config(seed), &mut hook)?;
    let names = dataset.modality_names().to_vec();
    let csv = csv_name(seed);
    std::fs::write(out.join(&csv), metrics_csv(&names, &run.history, every > 0))?;

    let probes = probe_pipeline(&run.model, &concepts, dataset, &splits, cfg.lambda)?;
    let last = run.history.last().expect("at least one epoch");
    let modalities = names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let concept = concepts.iter().find(|c| c.modality() == name).expect("one per modality");
            Ok(ModalityResult {
                name: name.clone(),
                acc: last.acc_m[m],
                concept_acc: concept_eval(concept, dataset, &splits.val)?.accuracy,
                d_raw: probes[m].d_raw,
                d: probes[m].d,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ckpt_dir = PathBuf::from(format!("checkpoints/seed{seed}"));
    std::fs::create_dir_all(out.join(&ckpt_dir))?;
    let mut checkpoints = vec![ckpt_dir.join("model.mmf")];
    save_checkpoint(run.model.params(), &out.join(&checkpoints[0]))?;
    for c in &concepts {
        let p = ckpt_dir.join(c.checkpoint_name());
        save_checkpoint(c.network().params(), &out.join(&p))?;
        checkpoints.push(p);
    }
    log::info!("seed {seed}: acc {:.4}", last.acc);
    Ok(SeedResult {
        seed,
        acc: last.acc,
        modalities,
        concept_context: concepts[0].context().label().to_string(),
        probes: probes.iter().map(ProbeSummary::from).collect(),
        metrics_csv: csv,
        checkpoints: checkpoints.iter().map(|p| p.to_string_lossy().replace('\\', "/")).collect(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Runs every seed, then writes `manifest.json` to the output directory.
///
/// When a seed fails, the finished seeds are written to
/// `manifest.partial.json` and the first error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let dataset = cfg.dataset.resolve()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;

    let outcomes: Vec<Result<SeedResult>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &dataset, seed, out))
        .collect();
    let mut seeds = Vec::new();
    let mut first_err = None;
    for (seed, o) in cfg.seeds.iter().zip(outcomes) {
        match o {
            Ok(r) => seeds.push(r),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                first_err.get_or_insert((*seed, e));
            }
        }
    }

    let mut manifest = RunManifest {
        tool: "modforge".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        wall_time_s: 0.0,
        config: cfg.clone(),
        method: cfg.method.label().into(),
        fusion: cfg.model.fusion_spec().label().into(),
        alpha: (cfg.method != TrainMethod::JointTrain).then_some(cfg.alpha),
        dataset: DatasetSummary::of(&dataset),
        aggregate: Aggregate::of(&seeds),
        seeds,
        error: None,
    };
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    if let Some((seed, e)) = first_err {
        manifest.error = Some(format!("seed {seed}: {e}"));
        std::fs::write(out.join(PARTIAL_MANIFEST_FILE), manifest.to_json())?;
        return Err(e);
    }
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(manifest)
}
