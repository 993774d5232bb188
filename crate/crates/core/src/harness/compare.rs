//! Comparison tables built from run manifests.
//!
//! Column order: `method, fusion, alpha, seeds, acc_mean, acc_std`, then for
//! each modality in dataset order `acc_<m>_mean, acc_<m>_std, d_<m>_mean,
//! d_<m>_std, concept_acc_<m>_mean, concept_acc_<m>_std`, then `best`.
//! Numbers are copied from the manifest aggregates without recomputation and
//! printed in shortest round-trip form. `best` holds `*` on the first row with
//! the highest mean accuracy, and only when there are at least two rows.

use std::fmt::Write as _;

use super::run::RunManifest;
use crate::error::{Error, Result};

fn mismatch(field: &str, a: usize, b: usize) -> Error {
    Error::Config(format!("manifests {a} and {b} differ in {field}"))
}

/// Checks that every manifest shares the first one's dataset and model shape.
pub fn check_compatible(manifests: &[RunManifest]) -> Result<()> {
    let Some(first) = manifests.first() else {
        return Err(Error::Config("compare needs at least one manifest".into()));
    };
    for (i, m) in manifests.iter().enumerate().skip(1) {
        let (a, b) = (&first.dataset, &m.dataset);
        if a.num_samples != b.num_samples {
            return Err(mismatch("dataset.num_samples", 0, i));
        }
        if a.num_classes != b.num_classes {
            return Err(mismatch("dataset.num_classes", 0, i));
        }
        if a.modalities != b.modalities {
            return Err(mismatch("dataset.modalities", 0, i));
        }
        if a.provenance != b.provenance {
            return Err(mismatch("dataset.provenance", 0, i));
        }
        if first.config.model.encoder_hidden != m.config.model.encoder_hidden {
            return Err(mismatch("model.encoder_hidden", 0, i));
        }
        if first.config.model.encoders != m.config.model.encoders {
            return Err(mismatch("model.encoders", 0, i));
        }
    }
    for (i, m) in manifests.iter().enumerate() {
        let names: Vec<&str> = m.dataset.modalities.iter().map(|s| s.name.as_str()).collect();
        let agg: Vec<&str> = m.aggregate.modalities.iter().map(|s| s.name.as_str()).collect();
        if names != agg || m.seeds.is_empty() {
            return Err(Error::Config(format!("manifest {i} has an incomplete aggregate block")));
        }
    }
    Ok(())
}

pub fn comparison_table(manifests: &[RunManifest]) -> Result<String> {
    check_compatible(manifests)?;
    let names: Vec<&str> = manifests[0].dataset.modalities.iter().map(|s| s.name.as_str()).collect();
    let mut out = String::from("method,fusion,alpha,seeds,acc_mean,acc_std");
    for m in &names {
        write!(
            out,
            ",acc_{m}_mean,acc_{m}_std,d_{m}_mean,d_{m}_std,concept_acc_{m}_mean,concept_acc_{m}_std"
        )
        .unwrap();
    }
    out.push_str(",best\n");

    let best = if manifests.len() > 1 {
        let mut idx = 0;
        for (i, m) in manifests.iter().enumerate() {
            if m.aggregate.acc.mean > manifests[idx].aggregate.acc.mean {
                idx = i;
            }
        }
        Some(idx)
    } else {
        None
    };
    for (i, m) in manifests.iter().enumerate() {
        let alpha = m.alpha.map(|a| a.to_string()).unwrap_or_default();
        write!(
            out,
            "{},{},{},{},{},{}",
            m.method,
            m.fusion,
            alpha,
            m.seeds.len(),
            m.aggregate.acc.mean,
            m.aggregate.acc.std
        )
        .unwrap();
        for a in &m.aggregate.modalities {
            write!(
                out,
                ",{},{},{},{},{},{}",
                a.acc.mean, a.acc.std, a.d.mean, a.d.std, a.concept_acc.mean, a.concept_acc.std
            )
            .unwrap();
        }
        out.push_str(if best == Some(i) { ",*\n" } else { ",\n" });
    }
    Ok(out)
}
