//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use modforge_core::agm::{
    discrepancy_ratios, modulated_gradients, modulated_step, modulation_coefficients, reference_ratios, AgmState,
    TrainMethod,
};
use modforge_core::concept::{concept_eval, train_concept_early, Padding};
use modforge_core::data::{benchmark, generate, split, Batch, SplitFractions};
use modforge_core::harness::{run_experiment, ExperimentConfig, RunManifest};
use modforge_core::models::{ModalitySpec, MultiModalModel};
use modforge_core::probe::{competition_strength, fit_linear_probe, LinearProbe};
use modforge_core::shapley::mono_modal_outputs;
use modforge_core::tensor::{Sgd, SgdConfig, Tensor};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

fn sum(ts: &[Tensor]) -> Tensor {
    let mut out = ts[0].clone();
    for t in &ts[1..] {
        out = out.axpy(1.0, t).unwrap();
    }
    out
}

// 1. Shapley correctness
fn shapley_correctness() -> Outcome {
    let started = Instant::now();
    let (mut identity, mut oracle) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for trial in 0..100u64 {
        let k = 2 + (trial % 2) as usize;
        let early = trial % 4 >= 2;
        let (model, inputs, _) = random_case(1000 + trial, k, early, 5);
        let out = mono_modal_outputs(&model, &inputs).unwrap();
        identity = identity.max(max_abs(&out.full, &sum(&out.per_modality)));
        let reference = brute_force_shapley(&model, &inputs);
        for (a, b) in out.per_modality.iter().zip(&reference) {
            oracle = oracle.max(max_abs(a, b));
        }
        cases += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        identity < 1e-9 && oracle < 1e-10 && secs < 30.0,
        format!("{cases} cases: max |φ − Σφ^m| = {identity:.2e} (< 1e-9), max |generic − brute force| = {oracle:.2e} (< 1e-10), {secs:.2}s (< 30s)"),
    )
}

// 2. k=2 closed form
fn two_modality_closed_form() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let (model, inputs, _) = random_case(2000 + trial, 2, trial % 2 == 1, 4);
        let out = mono_modal_outputs(&model, &inputs).unwrap();
        let names = model.modality_names();
        let full = model.forward_full(&inputs).unwrap();
        let only = |m: usize| model.forward_masked(&inputs, &[names[m]]).unwrap();
        for m in 0..2 {
            let own = only(m);
            let other = only(1 - m);
            let data: Vec<f64> = full
                .data()
                .iter()
                .zip(own.data())
                .zip(other.data())
                .map(|((f, a), b)| 0.5 * (f - b + a))
                .collect();
            let closed = Tensor::new(full.shape().to_vec(), data).unwrap();
            worst = worst.max(max_abs(&out.per_modality[m], &closed));
        }
    }
    outcome(worst < 1e-12, format!("100 cases: max deviation {worst:.2e} (< 1e-12)"))
}

// 3. Gradient fidelity
fn gradient_fidelity() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for early in [false, true] {
        let mut worst_norm = 0.0f64;
        let mut worst_elem = 0.0f64;
        let mut max_params = 0;
        for trial in 0..5u64 {
            let (model, inputs, labels) = random_case(3000 + trial + 10 * early as u64, 2, early, 6);
            max_params = max_params.max(model.params().num_scalars());
            let batch = Batch { indices: (0..labels.len()).collect(), inputs: inputs.clone(), labels: labels.clone() };
            let mut state = AgmState::new(2, 1.0);
            state.running_avg = vec![-0.4, -1.3];
            state.t = 7;
            let (grads, diag) = modulated_gradients(&model, &batch, &state, TrainMethod::Agm).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

            // independent κ from independent mono-modal scores
            let phi0 = brute_force_shapley(&model, &inputs);
            let s: Vec<f64> = phi0.iter().map(|p| mean_true_logprob(p, &labels)).collect();
            let r = [(s[0] - s[1]).exp(), (s[1] - s[0]).exp()];
            let tau = [(-0.4f64 + 1.3).exp(), (-1.3f64 + 0.4).exp()];
            let kappa: Vec<f64> = (0..2).map(|m| (-(r[m] - tau[m])).exp()).collect();
            for m in 0..2 {
                assert!((kappa[m] - diag.kappa[m]).abs() < 1e-10, "κ mismatch");
            }
            let g0 = ce_grad(&model.forward_full(&inputs).unwrap(), &labels);

            // F(θ) = Σ_m κ^m ⟨g0, φ^m(θ)⟩ with g0 and κ frozen
            let theta = model.params().flatten();
            let mut probe = model.clone();
            let mut f = |flat: &[f64]| {
                probe.params_mut().assign_flat(flat).unwrap();
                let phi = brute_force_shapley(&probe, &inputs);
                (0..2)
                    .map(|m| kappa[m] * phi[m].data().iter().zip(&g0).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let numeric = central_differences(&mut f, &theta, 1e-5);
            worst_norm = worst_norm.max(normwise_rel_err(&analytic, &numeric));
            worst_elem = worst_elem.max(max_rel_err(&analytic, &numeric, 1e-3));
        }
        let ok = worst_norm < 1e-4 && worst_elem < 1e-4 && max_params <= 500;
        pass &= ok;
        details.push(format!(
            "{}: normwise {worst_norm:.2e}, elementwise {worst_elem:.2e} (< 1e-4), ≤{max_params} params",
            if early { "early_maxout" } else { "late_sum" }
        ));
    }
    outcome(pass, details.join("; "))
}

// 4. Modulation arithmetic
fn algorithm_arithmetic() -> Outcome {
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
    let mut ok = true;
    ok &= close(&discrepancy_ratios(&[-0.5, -2.0]).unwrap(), &[1.5f64.exp(), (-1.5f64).exp()]);
    ok &= close(&discrepancy_ratios(&[-0.9; 3]).unwrap(), &[1.0; 3]);
    ok &= close(&discrepancy_ratios(&[0.0, -1.0, -2.0]).unwrap(), &[1.5f64.exp(), 1.0, (-1.5f64).exp()]);
    let mut st = AgmState::new(2, 1.0);
    st.running_avg = vec![-1.0, -1.5];
    ok &= close(&reference_ratios(&st), &[0.5f64.exp(), (-0.5f64).exp()]);
    st.running_avg = vec![-0.3, -0.3];
    ok &= close(&reference_ratios(&st), &[1.0, 1.0]);
    ok &= close(&modulation_coefficients(&[4.4817, 0.2231], &[1.0, 1.0], 0.0), &[1.0, 1.0]);
    ok &= close(&modulation_coefficients(&[1.7, 0.3], &[1.7, 0.3], 2.0), &[1.0, 1.0]);
    ok &= close(
        &modulation_coefficients(&[4.4817, 0.2231], &[1.0, 1.0], 1.0),
        &[(-3.4817f64).exp(), (0.7769f64).exp()],
    );
    let mut st = AgmState::new(1, 1.0);
    st.update_running_average(&[-0.7]).unwrap();
    ok &= close(&st.running_avg, &[-0.7]);
    let mut st = AgmState::new(1, 1.0);
    st.update_running_average(&[-1.0]).unwrap();
    st.update_running_average(&[-3.0]).unwrap();
    ok &= close(&st.running_avg, &[-2.0]) && st.t == 2;
    let unit = ok;

    let mut worst = 0.0f64;
    let mut iterations = 0;
    for name in ["imbalanced", "trimodal"] {
        let ds = generate(&benchmark(name).unwrap()).unwrap();
        let splits = split(&ds, SplitFractions::default(), 1).unwrap();
        let mods: Vec<ModalitySpec> = ds
            .modality_names()
            .iter()
            .zip(ds.dims())
            .map(|(n, d)| ModalitySpec::new(n.clone(), d, vec![16]))
            .collect();
        let mut model = MultiModalModel::build(mods, modforge_core::models::FusionSpec::LateSum, 4, 1).unwrap();
        let mut state = AgmState::new(ds.num_modalities(), 1.0);
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.05, ..SgdConfig::default() });
        let batches = modforge_core::data::batch_indices(&splits.train, 64, 1).unwrap();
        for it in 0..200 {
            let batch = ds.gather(&batches[it % batches.len()]).unwrap();
            let d = modulated_step(&mut model, &batch, &mut state, TrainMethod::Agm, &mut opt, 0).unwrap();
            let pr: f64 = d.r.iter().product();
            let pt: f64 = d.tau.iter().product();
            worst = worst.max((pr - 1.0).abs()).max((pt - 1.0).abs());
            iterations += 1;
        }
    }
    outcome(
        unit && worst < 1e-9,
        format!("unit examples {} (1e-10); max |Π r − 1|, |Π τ − 1| = {worst:.2e} over {iterations} iterations, k=2 and k=3 (< 1e-9)", if unit { "match" } else { "MISMATCH" }),
    )
}

// 5. Baseline equivalence
fn baseline_equivalence() -> Outcome {
    let ds = generate(&benchmark("imbalanced").unwrap()).unwrap();
    let splits = split(&ds, SplitFractions::default(), 5).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for early in [false, true] {
        let fusion = if early {
            modforge_core::models::FusionSpec::EarlyMaxout { fusion_hidden_dim: 16, maxout_pieces: 2 }
        } else {
            modforge_core::models::FusionSpec::LateSum
        };
        let build = || {
            MultiModalModel::build(
                vec![ModalitySpec::new("a", 2, vec![16]), ModalitySpec::new("v", 16, vec![16])],
                fusion,
                4,
                5,
            )
            .unwrap()
        };
        let (mut joint, mut agm) = (build(), build());
        let (mut sj, mut sa) = (AgmState::new(2, 0.0), AgmState::new(2, 0.0));
        let cfg = SgdConfig { learning_rate: 0.05, ..SgdConfig::default() };
        let (mut oj, mut oa) = (Sgd::new(cfg.clone()), Sgd::new(cfg));
        let batches = modforge_core::data::batch_indices(&splits.train, 64, 5).unwrap();
        let mut identical = 0;
        for it in 0..100 {
            let batch = ds.gather(&batches[it % batches.len()]).unwrap();
            modulated_step(&mut joint, &batch, &mut sj, TrainMethod::JointTrain, &mut oj, 0).unwrap();
            modulated_step(&mut agm, &batch, &mut sa, TrainMethod::Agm, &mut oa, 0).unwrap();
            let same = joint
                .params()
                .flatten()
                .iter()
                .zip(agm.params().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                break;
            }
            identical += 1;
        }
        pass &= identical == 100;
        details.push(format!("{}: {identical}/100 iterations bitwise equal", fusion.label()));
    }
    outcome(pass, details.join("; "))
}

// 6. Late-fusion scaling law
fn late_scaling_law() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let (model, inputs, labels) = random_case(6000 + trial, 2 + (trial % 2) as usize, false, 8);
        let k = model.num_modalities();
        let batch = Batch { indices: (0..labels.len()).collect(), inputs, labels };
        let mut state = AgmState::new(k, 1.5);
        let mut r = rng(trial);
        state.running_avg = (0..k).map(|_| r.random_range(-2.0..0.0)).collect();
        state.t = 11;
        let (g_agm, diag) = modulated_gradients(&model, &batch, &state, TrainMethod::Agm).unwrap();
        let (g_joint, _) = modulated_gradients(&model, &batch, &state, TrainMethod::JointTrain).unwrap();
        for m in 0..k {
            for slot in model.branch_param_slots(m) {
                for (a, j) in g_agm[slot].data().iter().zip(g_joint[slot].data()) {
                    worst = worst.max((a - diag.kappa[m] * j).abs());
                }
            }
        }
    }
    outcome(worst < 1e-10, format!("20 cases, k ∈ {{2,3}}: max |g_agm − κ^m g_joint| = {worst:.2e} (< 1e-10)"))
}

// 7. Probe oracle
fn probe_oracle() -> Outcome {
    let mut r = rng(77);
    let (n, d, k) = (80, 5, 3);
    let z = random_tensor(&mut r, n, d, 1.0);
    let c = random_tensor(&mut r, n, k, 2.0);
    let mut agreement = 0.0f64;
    for lambda in [0.05, 1.0, 120.0] {
        let fit = fit_linear_probe(&z, &c, lambda).unwrap();
        let (w, b) = ridge_by_gradient_descent(&z, &c, lambda, 200_000);
        for (x, y) in fit.weights.data().iter().zip(&w).chain(fit.bias.iter().zip(&b)) {
            agreement = agreement.max((x - y).abs());
        }
    }

    // d = 0: targets produced by the probe itself
    let probe = LinearProbe { weights: random_tensor(&mut r, k, d, 1.0), bias: vec![0.3, -0.2, 1.0] };
    let exact = probe.predict(&z).unwrap();
    let (raw0, d0) = competition_strength(&probe, &z, &exact).unwrap();
    // d = 1: a probe predicting the evaluation means
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(c.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let flat = LinearProbe { weights: Tensor::zeros(&[k, d]), bias: mean };
    let (raw1, d1) = competition_strength(&flat, &z, &c).unwrap();

    // monotone in noise
    let z_fit = random_tensor(&mut r, 200, d, 1.0);
    let z_eval = random_tensor(&mut r, 200, d, 1.0);
    let noise_fit = random_tensor(&mut r, 200, k, 1.0);
    let noise_eval = random_tensor(&mut r, 200, k, 1.0);
    let clean = LinearProbe { weights: random_tensor(&mut r, k, d, 1.0), bias: vec![0.0; k] };
    let mut ds = Vec::new();
    for sigma in [0.0, 0.1, 0.3, 1.0, 3.0] {
        let cf = clean.predict(&z_fit).unwrap().axpy(sigma, &noise_fit).unwrap();
        let ce = clean.predict(&z_eval).unwrap().axpy(sigma, &noise_eval).unwrap();
        let p = fit_linear_probe(&z_fit, &cf, 1e-3).unwrap();
        ds.push(competition_strength(&p, &z_eval, &ce).unwrap().1);
    }
    let monotone = ds.windows(2).all(|w| w[1] > w[0]);
    outcome(
        agreement < 1e-4 && d0 == 0.0 && raw0 == 0.0 && d1 == 1.0 && raw1 == 1.0 && monotone,
        format!(
            "closed form vs gradient descent {agreement:.2e} (< 1e-4); d limits {d0} / {d1} (exact 0 / 1); d over noise {:?} monotone: {monotone}",
            ds.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_single_core(name: &str, out: &Path) -> (RunManifest, f64) {
    let mut cfg = ExperimentConfig::load(&config_dir().join(name)).unwrap();
    cfg.output_dir = out.join(name.trim_end_matches(".toml"));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let manifest = pool.install(|| run_experiment(&cfg)).unwrap();
    (manifest, started.elapsed().as_secs_f64())
}

// 8. Directional effectiveness; returns the joint manifests for criterion 9
fn directional_effectiveness(out: &Path) -> (Outcome, Vec<RunManifest>) {
    let mut pass = true;
    let mut details = Vec::new();
    let mut joints = Vec::new();
    for fusion in ["late", "early"] {
        let (joint, tj) = run_single_core(&format!("imbalanced_joint_{fusion}.toml"), out);
        let (agm, ta) = run_single_core(&format!("imbalanced_agm_{fusion}.toml"), out);
        let gain = agm.aggregate.acc.mean - joint.aggregate.acc.mean;
        let secs = tj + ta;
        let ok = agm.aggregate.acc.mean >= joint.aggregate.acc.mean && gain > 0.0 && secs < 300.0;
        pass &= ok;
        details.push(format!(
            "{}: joint {:.4}, agm {:.4}, gain {gain:+.4}, {secs:.1}s single core",
            joint.fusion, joint.aggregate.acc.mean, agm.aggregate.acc.mean
        ));
        joints.push(joint);
    }
    (outcome(pass, details.join("; ")), joints)
}

// 9. Preferred-modality trend
fn preferred_modality(joints: &[RunManifest]) -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for m in joints {
        let hits = m
            .seeds
            .iter()
            .filter(|s| {
                let argmin_d = (0..s.modalities.len())
                    .min_by(|&a, &b| s.modalities[a].d.total_cmp(&s.modalities[b].d))
                    .unwrap();
                let argmax_acc = (0..s.modalities.len())
                    .max_by(|&a, &b| s.modalities[a].acc.total_cmp(&s.modalities[b].acc))
                    .unwrap();
                argmin_d == argmax_acc
            })
            .count();
        pass &= hits >= 4;
        details.push(format!("{}: {hits}/{} seeds", m.fusion, m.seeds.len()));
    }
    outcome(pass, format!("{} (≥ 4 of 5)", details.join(", ")))
}

// 10. Padding robustness
fn padding_robustness() -> Outcome {
    let cfg = ExperimentConfig::load(&config_dir().join("imbalanced_joint_early.toml")).unwrap();
    let ds = generate(&benchmark("imbalanced").unwrap()).unwrap();
    let mut worst_mean = 0.0f64;
    let mut worst_seed = 0.0f64;
    let mut per_modality = Vec::new();
    for name in ds.modality_names() {
        let mut gaps = Vec::new();
        for seed in 1..=3u64 {
            let splits = split(&ds, cfg.splits, seed).unwrap();
            let spec = cfg.model.model_spec(&ds, seed).unwrap();
            let ccfg = cfg.concept_config(seed);
            let acc = |p| {
                let c = train_concept_early(&spec, name, &ds, &splits, p, &ccfg).unwrap();
                concept_eval(&c, &ds, &splits.val).unwrap().accuracy
            };
            gaps.push(acc(Padding::Zero) - acc(Padding::Random));
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_seed = worst_seed.max(gaps.iter().fold(0.0f64, |a, g| a.max(g.abs())));
        per_modality.push(format!("{name} {:+.2}pp", 100.0 * mean));
    }
    outcome(
        worst_mean < 0.03,
        format!(
            "mean zero − random concept accuracy over 3 seeds: {} (< 3pp); largest single-seed gap {:.2}pp",
            per_modality.join(", "),
            100.0 * worst_seed
        ),
    )
}

fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("timestamp");
            map.remove("wall_time_s");
            map.remove("output_dir");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

// 11. Determinism
fn determinism(out: &Path) -> Outcome {
    let text = r#"
        method = "agm"
        epochs = 4
        seeds = [1, 2, 3]
        probe_every = 2
        output_dir = "unused"
        [dataset]
        builtin = "trimodal"
        [model]
        fusion = "early_maxout"
        encoder_hidden = [8]
        fusion_hidden_dim = 8
        [sgd]
        learning_rate = 0.05
    "#;
    let mut runs = Vec::new();
    for i in 0..2 {
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.output_dir = out.join(format!("determinism_{i}"));
        run_experiment(&cfg).unwrap();
        let manifest = std::fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        strip_timing(&mut v);
        let csv = std::fs::read(cfg.output_dir.join("metrics_seed2.csv")).unwrap();
        let ckpt = std::fs::read(cfg.output_dir.join("checkpoints/seed3/model.mmf")).unwrap();
        runs.push((v, csv, ckpt));
    }
    let same_manifest = runs[0].0 == runs[1].0;
    let same_files = runs[0].1 == runs[1].1 && runs[0].2 == runs[1].2;
    outcome(
        same_manifest && same_files,
        format!("manifests equal modulo timestamps/wall time/output dir: {same_manifest}; CSV and checkpoint bytes equal: {same_files}"),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        };
        let secs = started.elapsed().as_secs_f64();
        println!("{} [{id:>2}] {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };
    record(1, "shapley correctness", &mut shapley_correctness);
    record(2, "two-modality closed form", &mut two_modality_closed_form);
    record(3, "gradient fidelity", &mut gradient_fidelity);
    record(4, "modulation arithmetic", &mut algorithm_arithmetic);
    record(5, "baseline equivalence", &mut baseline_equivalence);
    record(6, "late-fusion scaling law", &mut late_scaling_law);
    record(7, "probe oracle", &mut probe_oracle);
    let mut joints = Vec::new();
    record(8, "directional effectiveness", &mut || {
        let (o, j) = directional_effectiveness(out);
        joints = j;
        o
    });
    record(9, "preferred-modality trend", &mut || {
        if joints.is_empty() {
            return outcome(false, "no joint runs from criterion 8");
        }
        preferred_modality(&joints)
    });
    record(10, "padding robustness", &mut padding_robustness);
    record(11, "determinism", &mut || determinism(out));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
