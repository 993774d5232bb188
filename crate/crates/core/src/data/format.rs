//! `.mmds` dataset files.
//!
//! Layout: magic `MMDS`, version `u32`, JSON header length `u64`, UTF-8 JSON
//! header, labels as `u16[N]`, then one `f32[N × d_m]` block per modality in
//! header order. All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMDS";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderModality {
    name: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    num_samples: usize,
    num_classes: usize,
    modalities: Vec<HeaderModality>,
    label_dtype: String,
    feature_dtype: String,
    provenance: Provenance,
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        num_samples: dataset.num_samples(),
        num_classes: dataset.num_classes(),
        modalities: dataset
            .modality_names()
            .iter()
            .zip(dataset.dims())
            .map(|(n, d)| HeaderModality { name: n.clone(), dim: d })
            .collect(),
        label_dtype: "u16".into(),
        feature_dtype: "f32".into(),
        provenance: dataset.provenance().clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Usage(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for &y in dataset.labels() {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    for m in 0..dataset.num_modalities() {
        for &v in dataset.features(m).data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::format(*pos as u64, format!("truncated while reading {what}")));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected MMDS"));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&bytes, &mut pos, 8, "header length")?.try_into().unwrap());
    let header_at = pos as u64;
    let hlen = usize::try_from(hlen).map_err(|_| Error::format(8, "header length overflow"))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut pos, hlen, "header")?)
        .map_err(|e| Error::format(header_at, format!("invalid header: {e}")))?;
    if header.label_dtype != "u16" || header.feature_dtype != "f32" {
        return Err(Error::format(header_at, "unsupported dtypes (expected u16 labels, f32 features)"));
    }
    let n = header.num_samples;
    if n == 0 || header.modalities.is_empty() || header.modalities.iter().any(|m| m.dim == 0) {
        return Err(Error::format(header_at, "header declares an empty dimension"));
    }

    let labels_at = pos as u64;
    let labels: Vec<usize> = take(&bytes, &mut pos, n * 2, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let mut features = Vec::with_capacity(header.modalities.len());
    for m in &header.modalities {
        let block = take(&bytes, &mut pos, n * m.dim * 4, &format!("features of {}", m.name))?;
        let data = block
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        features.push(Tensor::new(vec![n, m.dim], data)?);
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after feature blocks"));
    }
    Dataset::new(
        header.modalities.into_iter().map(|m| m.name).collect(),
        features,
        labels,
        header.num_classes,
        header.provenance,
    )
    .map_err(|e| Error::format(labels_at, e.to_string()))
}

pub fn load(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}
