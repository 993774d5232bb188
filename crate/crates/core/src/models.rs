//! Multi-modal classifiers: one MLP encoder per modality, fused either by
//! summing per-branch logits (late) or by a maxout layer over the concatenated
//! encodings (early).
//!
//! Masked evaluation follows the fusion kind: late fusion drops absent
//! branches entirely, early fusion feeds a zero vector of the modality's
//! input width through its encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub input_dim: usize,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, input_dim: usize, encoder_hidden: Vec<usize>) -> Self {
        ModalitySpec {
            name: name.into(),
            input_dim,
            encoder_hidden,
        }
    }

    /// Width of the encoder output (the input width when there are no hidden layers).
    pub fn output_dim(&self) -> usize {
        *self.encoder_hidden.last().unwrap_or(&self.input_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionSpec {
    LateSum,
    EarlyMaxout {
        fusion_hidden_dim: usize,
        maxout_pieces: usize,
    },
}

impl FusionSpec {
    pub fn label(&self) -> &'static str {
        match self {
            FusionSpec::LateSum => "late_sum",
            FusionSpec::EarlyMaxout { .. } => "early_maxout",
        }
    }

    pub fn is_late(&self) -> bool {
        matches!(self, FusionSpec::LateSum)
    }
}

/// Architecture description; together with the seed it fully determines the
/// initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modalities: Vec<ModalitySpec>,
    pub fusion: FusionSpec,
    pub num_classes: usize,
    pub seed: u64,
}

/// Subset of modalities as a bitmask over model modality order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySet(pub u32);

impl ModalitySet {
    pub fn full(k: usize) -> Self {
        ModalitySet((1u32 << k) - 1)
    }

    pub fn single(m: usize) -> Self {
        ModalitySet(1 << m)
    }

    pub fn contains(self, m: usize) -> bool {
        self.0 & (1 << m) != 0
    }

    pub fn with(self, m: usize) -> Self {
        ModalitySet(self.0 | (1 << m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Late(Vec<Linear>),
    Early { pieces: Vec<Linear>, out: Linear },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalModel {
    spec: ModelSpec,
    params: ParamStore,
    encoders: Vec<Vec<Linear>>,
    head: Head,
}

fn init_linear(
    params: &mut ParamStore,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<Linear> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |name: String, shape: Vec<usize>| -> Result<usize> {
        let mut r = rng::stream(seed, &name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
        params.insert(name, Tensor::new(shape, data)?)
    };
    let w = draw(format!("{prefix}.w"), vec![fan_in, fan_out])?;
    let b = draw(format!("{prefix}.b"), vec![fan_out])?;
    Ok(Linear { w, b })
}

impl MultiModalModel {
    /// Builds a model with parameters drawn uniformly from `±1/√fan_in`.
    ///
    /// Each parameter has its own seeded stream keyed by its name, so a branch
    /// gets identical initial weights whether it is built inside a multi-modal
    /// model or on its own.
    pub fn build(
        modalities: Vec<ModalitySpec>,
        fusion: FusionSpec,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::from_spec(ModelSpec {
            modalities,
            fusion,
            num_classes,
            seed,
        })
    }

    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        validate_spec(&spec)?;
        let mut params = ParamStore::new();
        let seed = spec.seed;
        let k = spec.num_classes;
        let mut encoders = Vec::with_capacity(spec.modalities.len());
        for m in &spec.modalities {
            let mut layers = Vec::new();
            let mut width = m.input_dim;
            for (l, &h) in m.encoder_hidden.iter().enumerate() {
                layers.push(init_linear(&mut params, seed, &format!("enc.{}.{l}", m.name), width, h)?);
                width = h;
            }
            encoders.push(layers);
        }
        let head = match spec.fusion {
            FusionSpec::LateSum => Head::Late(
                spec.modalities
                    .iter()
                    .map(|m| init_linear(&mut params, seed, &format!("head.{}", m.name), m.output_dim(), k))
                    .collect::<Result<_>>()?,
            ),
            FusionSpec::EarlyMaxout {
                fusion_hidden_dim,
                maxout_pieces,
            } => {
                let fused: usize = spec.modalities.iter().map(ModalitySpec::output_dim).sum();
                let pieces = (0..maxout_pieces)
                    .map(|p| init_linear(&mut params, seed, &format!("maxout.{p}"), fused, fusion_hidden_dim))
                    .collect::<Result<_>>()?;
                let out = init_linear(&mut params, seed, "head", fusion_hidden_dim, k)?;
                Head::Early { pieces, out }
            }
        };
        Ok(MultiModalModel {
            spec,
            params,
            encoders,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fusion(&self) -> FusionSpec {
        self.spec.fusion
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_modalities(&self) -> usize {
        self.spec.modalities.len()
    }

    pub fn modality_names(&self) -> Vec<&str> {
        self.spec.modalities.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameters with a store of identical names and shapes.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::Config("parameter names do not match the architecture".into()));
        }
        for (slot, (_, t)) in params.iter().enumerate() {
            if t.shape() != self.params.tensor(slot).shape() {
                return Err(Error::dim("set_params", self.params.tensor(slot).shape(), t.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.spec
            .modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("unknown modality {name}")))
    }

    pub fn full_set(&self) -> ModalitySet {
        ModalitySet::full(self.num_modalities())
    }

    /// Bitmask for a set of present modality names.
    pub fn set_of(&self, present: &[&str]) -> Result<ModalitySet> {
        let mut s = ModalitySet(0);
        for name in present {
            s = s.with(self.modality_index(name)?);
        }
        if s.is_empty() {
            return Err(Error::Config("present modality set must be non-empty".into()));
        }
        Ok(s)
    }

    /// Indices of the parameters owned by modality `m`'s branch (encoder, and
    /// the head for late fusion).
    pub fn branch_param_slots(&self, m: usize) -> Vec<usize> {
        let mut slots: Vec<usize> = self.encoders[m].iter().flat_map(|l| [l.w, l.b]).collect();
        if let Head::Late(heads) = &self.head {
            slots.extend([heads[m].w, heads[m].b]);
        }
        slots
    }

    pub fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.num_modalities() {
            return Err(Error::dim("model inputs", &[self.num_modalities()], &[inputs.len()]));
        }
        let n = inputs[0].rows();
        for (x, m) in inputs.iter().zip(&self.spec.modalities) {
            if x.rank() != 2 || x.cols() != m.input_dim || x.rows() != n {
                return Err(Error::dim("model inputs", &[n, m.input_dim], x.shape()));
            }
        }
        Ok(n)
    }

    fn linear(&self, tape: &mut Tape, bound: &[Var], l: Linear, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound[l.w])?;
        tape.add_bias(h, bound[l.b])
    }

    fn encode(&self, tape: &mut Tape, bound: &[Var], m: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for &l in &self.encoders[m] {
            let a = self.linear(tape, bound, l, h)?;
            h = tape.relu(a)?;
        }
        Ok(h)
    }

    /// Logits of late-fusion branch `m` on its own input.
    pub fn branch_logits_on(&self, tape: &mut Tape, bound: &[Var], m: usize, input: &Tensor) -> Result<Var> {
        let Head::Late(heads) = &self.head else {
            return Err(Error::Usage("branch logits exist only for late fusion".into()));
        };
        let x = tape.constant(input.clone());
        let h = self.encode(tape, bound, m, x)?;
        self.linear(tape, bound, heads[m], h)
    }

    fn maxout(&self, tape: &mut Tape, bound: &[Var], fused: Var) -> Result<Var> {
        let Head::Early { pieces, .. } = &self.head else {
            return Err(Error::Usage("maxout exists only for early fusion".into()));
        };
        let mut out = self.linear(tape, bound, pieces[0], fused)?;
        for &p in &pieces[1..] {
            let z = self.linear(tape, bound, p, fused)?;
            out = tape.maximum(out, z)?;
        }
        Ok(out)
    }

    /// Final classifier applied to a latent (early fusion only).
    pub fn head_on(&self, tape: &mut Tape, bound: &[Var], latent: Var) -> Result<Var> {
        let Head::Early { out, .. } = &self.head else {
            return Err(Error::Usage("a single head exists only for early fusion".into()));
        };
        self.linear(tape, bound, *out, latent)
    }

    /// Evaluates φ(S) for each requested present-set `S`, sharing encoder
    /// computations between passes.
    pub fn forward_subsets(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        inputs: &[Tensor],
        sets: &[ModalitySet],
    ) -> Result<Vec<Var>> {
        let n = self.check_inputs(inputs)?;
        let k = self.num_modalities();
        let full = self.full_set();
        for s in sets {
            if s.is_empty() || s.0 & !full.0 != 0 {
                return Err(Error::Usage(format!("invalid modality set {:#b}", s.0)));
            }
        }
        match &self.head {
            Head::Late(_) => {
                let mut branches: Vec<Option<Var>> = vec![None; k];
                let mut out = Vec::with_capacity(sets.len());
                for &s in sets {
                    let mut terms = Vec::with_capacity(s.len());
                    for m in (0..k).filter(|&m| s.contains(m)) {
                        let b = match branches[m] {
                            Some(b) => b,
                            None => {
                                let b = self.branch_logits_on(tape, bound, m, &inputs[m])?;
                                branches[m] = Some(b);
                                b
                            }
                        };
                        terms.push((b, 1.0));
                    }
                    out.push(if terms.len() == 1 { terms[0].0 } else { tape.lin_comb(&terms)? });
                }
                Ok(out)
            }
            Head::Early { .. } => {
                let mut present: Vec<Option<Var>> = vec![None; k];
                let mut absent: Vec<Option<Var>> = vec![None; k];
                let mut out = Vec::with_capacity(sets.len());
                for &s in sets {
                    let mut parts = Vec::with_capacity(k);
                    for m in 0..k {
                        let on = s.contains(m);
                        let cached = if on { present[m] } else { absent[m] };
                        let h = match cached {
                            Some(h) => h,
                            None => {
                                let x = if on {
                                    tape.constant(inputs[m].clone())
                                } else {
                                    tape.constant(Tensor::zeros(&[n, self.spec.modalities[m].input_dim]))
                                };
                                let h = self.encode(tape, bound, m, x)?;
                                if on {
                                    present[m] = Some(h);
                                } else {
                                    absent[m] = Some(h);
                                }
                                h
                            }
                        };
                        parts.push(h);
                    }
                    let fused = if k == 1 { parts[0] } else { tape.concat(&parts)? };
                    let z = self.maxout(tape, bound, fused)?;
                    out.push(self.head_on(tape, bound, z)?);
                }
                Ok(out)
            }
        }
    }

    /// Pre-classifier latent `z` on the full input: the maxout output for
    /// early fusion, the concatenated branch encodings for late fusion.
    pub fn latent_on(&self, tape: &mut Tape, bound: &[Var], inputs: &[Tensor]) -> Result<Var> {
        self.check_inputs(inputs)?;
        let mut parts = Vec::with_capacity(inputs.len());
        for (m, input) in inputs.iter().enumerate() {
            let x = tape.constant(input.clone());
            parts.push(self.encode(tape, bound, m, x)?);
        }
        let fused = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        match self.head {
            Head::Late(_) => Ok(fused),
            Head::Early { .. } => self.maxout(tape, bound, fused),
        }
    }

    fn frozen(&self) -> (Tape, Vec<Var>) {
        let mut tape = Tape::new();
        let bound = (0..self.params.len())
            .map(|i| tape.constant(self.params.tensor(i).clone()))
            .collect();
        (tape, bound)
    }

    pub fn forward_full(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.forward_set(inputs, self.full_set())
    }

    /// φ(S) with `present` naming the modalities that keep their features.
    pub fn forward_masked(&self, inputs: &[Tensor], present: &[&str]) -> Result<Tensor> {
        let s = self.set_of(present)?;
        self.forward_set(inputs, s)
    }

    pub fn forward_set(&self, inputs: &[Tensor], set: ModalitySet) -> Result<Tensor> {
        let (mut tape, bound) = self.frozen();
        let out = self.forward_subsets(&mut tape, &bound, inputs, &[set])?;
        Ok(tape.value(out[0]).clone())
    }

    pub fn branch_logits(&self, m: usize, input: &Tensor) -> Result<Tensor> {
        let (mut tape, bound) = self.frozen();
        let v = self.branch_logits_on(&mut tape, &bound, m, input)?;
        Ok(tape.value(v).clone())
    }

    pub fn latent_features(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (mut tape, bound) = self.frozen();
        let v = self.latent_on(&mut tape, &bound, inputs)?;
        Ok(tape.value(v).clone())
    }

    /// Applies the early-fusion classifier head to a latent batch.
    pub fn head(&self, latent: &Tensor) -> Result<Tensor> {
        let (mut tape, bound) = self.frozen();
        let z = tape.constant(latent.clone());
        let v = self.head_on(&mut tape, &bound, z)?;
        Ok(tape.value(v).clone())
    }
}

fn validate_spec(spec: &ModelSpec) -> Result<()> {
    if spec.modalities.is_empty() {
        return Err(Error::Config("model needs at least one modality".into()));
    }
    if spec.modalities.len() > 16 {
        return Err(Error::Config("at most 16 modalities are supported".into()));
    }
    if spec.num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    for (i, m) in spec.modalities.iter().enumerate() {
        if m.input_dim == 0 || m.encoder_hidden.contains(&0) {
            return Err(Error::Config(format!("modality {} has a zero width", m.name)));
        }
        if spec.modalities[..i].iter().any(|o| o.name == m.name) {
            return Err(Error::Config(format!("duplicate modality name {}", m.name)));
        }
    }
    if let FusionSpec::EarlyMaxout {
        fusion_hidden_dim,
        maxout_pieces,
    } = spec.fusion
    {
        if fusion_hidden_dim == 0 {
            return Err(Error::Config("fusion_hidden_dim must be positive".into()));
        }
        if maxout_pieces < 2 {
            return Err(Error::Config("maxout_pieces must be at least 2".into()));
        }
    }
    Ok(())
}
