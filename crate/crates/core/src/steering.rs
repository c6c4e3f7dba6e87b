//! Difference-in-means bias vectors and directional ablation.
//!
//! Mean residual-stream activations are taken at `resid_pre(l)` for every
//! layer and position on an overrepresented and an underrepresented group of
//! the same class. Their difference `r = μ − ν` per `(layer, position)` is a
//! candidate bias direction. A unit direction `r̂` is removed from a residual
//! vector by `x' = x − r̂ (r̂ᵀ x)`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActivationDump, GroupedDataset};
use crate::error::{Error, Result};
use crate::eval::{best_entry, group_accuracies, ProfileEntry};
use crate::format::{Reader, Writer};
use crate::model::{forward, project_out, InterventionSpec, ModelConfig, ModelParams};
use crate::numeric::dot;

/// Differences with Euclidean norm at or below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;
/// Allowed deviation from unit norm for a steering direction.
pub const UNIT_TOLERANCE: f64 = 1e-5;

fn norm_f64(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// A direction of unit Euclidean norm (within [`UNIT_TOLERANCE`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct UnitDirection(Vec<f32>);

impl UnitDirection {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let norm = norm_f64(&values);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "steering direction must have unit norm, got {norm}"
            )));
        }
        Ok(Self(values))
    }

    /// Normalizes `raw`, or returns `None` when its norm is at most [`DEGENERATE_NORM`].
    pub fn from_raw(raw: &[f32]) -> Option<Self> {
        let norm = norm_f64(raw);
        (norm > DEGENERATE_NORM)
            .then(|| Self(raw.iter().map(|&v| (v as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

impl TryFrom<Vec<f32>> for UnitDirection {
    type Error = Error;
    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitDirection> for Vec<f32> {
    fn from(d: UnitDirection) -> Self {
        d.0
    }
}

/// Per-`(layer, position)` mean of `resid_pre` activations over one group.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanField {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    /// `[L × T × d_model]`
    pub means: Vec<f32>,
    pub n_samples: usize,
    pub source: String,
}

impl MeanField {
    pub fn at(&self, layer: usize, position: usize) -> &[f32] {
        let o = ((layer - 1) * self.seq_len + position) * self.d_model;
        &self.means[o..o + self.d_model]
    }

    fn from_sums(sums: Vec<f64>, dims: (usize, usize, usize), n: usize, source: String) -> Self {
        let inv = 1.0 / n as f64;
        Self {
            n_layers: dims.0,
            seq_len: dims.1,
            d_model: dims.2,
            means: sums.iter().map(|s| (s * inv) as f32).collect(),
            n_samples: n,
            source,
        }
    }
}

const MEAN_CHUNK: usize = 64;

/// Mean `resid_pre` field over `group`, with no intervention active.
///
/// Sums run in 64-bit over fixed-size chunks that are reduced in order, so the
/// result does not depend on the thread count.
pub fn mean_activations(params: &ModelParams<f32>, group: &GroupedDataset) -> Result<MeanField> {
    if group.is_empty() {
        return Err(Error::Data(format!(
            "cannot average activations over empty group {}",
            group.provenance
        )));
    }
    let cfg = &params.config;
    let width = cfg.n_layers * cfg.seq_len * cfg.d_model;
    let partials: Vec<Vec<f64>> = group
        .examples
        .par_chunks(MEAN_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0f64; width];
            for ex in chunk {
                let (_, trace) = forward(params, &ex.tokens, &InterventionSpec::None, true)?;
                let trace = trace.expect("capture requested");
                for (a, &v) in acc.iter_mut().zip(&trace.resid_pre) {
                    *a += v as f64;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0f64; width];
    for p in &partials {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    Ok(MeanField::from_sums(
        sums,
        (cfg.n_layers, cfg.seq_len, cfg.d_model),
        group.len(),
        group.provenance.clone(),
    ))
}

/// Mean field over the dump samples accepted by `keep(label, confounder)`.
pub fn mean_field_from_dump(
    dump: &ActivationDump,
    keep: impl Fn(u32, u32) -> bool,
    source: &str,
) -> Result<MeanField> {
    let [_, l, t, d] = dump.dims;
    let mut sums = vec![0.0f64; l * t * d];
    let mut n = 0;
    for i in 0..dump.n_samples() {
        if keep(dump.labels[i], dump.confounders[i]) {
            n += 1;
            for (s, &v) in sums.iter_mut().zip(dump.sample(i)) {
                *s += v as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("no dump samples match {source}")));
    }
    Ok(MeanField::from_sums(sums, (l, t, d), n, source.to_string()))
}

/// Resid-pre activations of every example, in dump form.
pub fn capture_dump(params: &ModelParams<f32>, dataset: &GroupedDataset) -> Result<ActivationDump> {
    let cfg = &params.config;
    let blocks: Vec<Vec<f32>> = dataset
        .examples
        .par_iter()
        .map(|ex| {
            forward(params, &ex.tokens, &InterventionSpec::None, true)
                .map(|(_, t)| t.expect("capture requested").resid_pre)
        })
        .collect::<Result<_>>()?;
    ActivationDump::new(
        [dataset.len(), cfg.n_layers, cfg.seq_len, cfg.d_model],
        blocks.concat(),
        dataset.examples.iter().map(|e| e.y).collect(),
        dataset.examples.iter().map(|e| e.a).collect(),
    )
}

/// `r = μ − ν` at one `(layer, position)`; `direction` is `None` when degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateVector {
    /// 1-based layer index.
    pub layer: usize,
    pub position: usize,
    pub raw: Vec<f32>,
    pub direction: Option<UnitDirection>,
    pub norm: f32,
}

impl CandidateVector {
    pub fn from_raw(layer: usize, position: usize, raw: Vec<f32>) -> Self {
        let norm = norm_f64(&raw);
        Self {
            layer,
            position,
            direction: UnitDirection::from_raw(&raw),
            norm: norm as f32,
            raw,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.direction.is_none()
    }
}

fn check_same_shape(mu: &MeanField, nu: &MeanField) -> Result<()> {
    if (mu.n_layers, mu.seq_len, mu.d_model) != (nu.n_layers, nu.seq_len, nu.d_model) {
        return Err(Error::Shape(format!(
            "mean fields differ in shape: [{} × {} × {}] vs [{} × {} × {}]",
            mu.n_layers, mu.seq_len, mu.d_model, nu.n_layers, nu.seq_len, nu.d_model
        )));
    }
    Ok(())
}

/// Raw `μ − ν` over the whole `[L × T × d_model]` field.
pub fn diff_field(mu: &MeanField, nu: &MeanField) -> Result<Vec<f32>> {
    check_same_shape(mu, nu)?;
    Ok(mu.means.iter().zip(&nu.means).map(|(a, b)| a - b).collect())
}

/// One candidate per `(layer, position)`, layer-major.
pub fn diff_in_means(mu: &MeanField, nu: &MeanField) -> Result<Vec<CandidateVector>> {
    let raw = diff_field(mu, nu)?;
    let d = mu.d_model;
    Ok(raw
        .chunks_exact(d)
        .enumerate()
        .map(|(slot, r)| {
            CandidateVector::from_raw(slot / mu.seq_len + 1, slot % mu.seq_len, r.to_vec())
        })
        .collect())
}

fn check_unit(r_hat: &[f32]) -> Result<()> {
    let norm = norm_f64(r_hat);
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!(
            "ablation direction must have unit norm, got {norm}"
        )));
    }
    Ok(())
}

/// `x − r̂ (r̂ᵀ x)`.
pub fn ablate_vector(x: &[f32], r_hat: &[f32]) -> Result<Vec<f32>> {
    if x.len() != r_hat.len() {
        return Err(Error::Shape(format!(
            "vector has {} components, direction has {}",
            x.len(),
            r_hat.len()
        )));
    }
    check_unit(r_hat)?;
    let mut out = x.to_vec();
    project_out(&mut out, r_hat);
    Ok(out)
}

/// `x − alpha·r`.
///
/// # Panics
/// If `x` and `r` differ in length.
pub fn subtract_vector(x: &[f32], r: &[f32], alpha: f32) -> Vec<f32> {
    assert_eq!(x.len(), r.len(), "subtract_vector: length mismatch");
    x.iter().zip(r).map(|(a, b)| a - alpha * b).collect()
}

/// Unit ablation direction per `(layer, position)`, with degenerate rows masked.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringField {
    n_layers: usize,
    seq_len: usize,
    d_model: usize,
    directions: Vec<f32>,
    mask: Vec<bool>,
}

impl SteeringField {
    /// Validates that every unmasked row is unit-norm; masked rows must be zero.
    pub fn new(
        n_layers: usize,
        seq_len: usize,
        d_model: usize,
        directions: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let slots = n_layers * seq_len;
        if directions.len() != slots * d_model || mask.len() != slots {
            return Err(Error::Shape(format!(
                "field buffers do not match [{n_layers} × {seq_len} × {d_model}]"
            )));
        }
        for (slot, row) in directions.chunks_exact(d_model).enumerate() {
            if mask[slot] {
                if row.iter().any(|&v| v != 0.0) {
                    return Err(Error::Contract(format!("masked row {slot} is not zero")));
                }
            } else {
                check_unit(row)?;
            }
        }
        Ok(Self {
            n_layers,
            seq_len,
            d_model,
            directions,
            mask,
        })
    }

    /// Row-wise normalization of a raw difference field; rows with norm ≤ 1e-8 are masked.
    pub fn from_raw(n_layers: usize, seq_len: usize, d_model: usize, raw: &[f32]) -> Result<Self> {
        if raw.len() != n_layers * seq_len * d_model {
            return Err(Error::Shape(format!(
                "raw field has {} values, expected [{n_layers} × {seq_len} × {d_model}]",
                raw.len()
            )));
        }
        let mut directions = vec![0.0; raw.len()];
        let mut mask = vec![false; n_layers * seq_len];
        for (slot, row) in raw.chunks_exact(d_model).enumerate() {
            match UnitDirection::from_raw(row) {
                Some(u) => {
                    directions[slot * d_model..(slot + 1) * d_model].copy_from_slice(u.as_slice())
                }
                None => mask[slot] = true,
            }
        }
        Ok(Self {
            n_layers,
            seq_len,
            d_model,
            directions,
            mask,
        })
    }

    /// The same direction at every slot.
    pub fn constant(n_layers: usize, seq_len: usize, direction: &UnitDirection) -> Self {
        let slots = n_layers * seq_len;
        Self {
            n_layers,
            seq_len,
            d_model: direction.dim(),
            directions: direction.as_slice().repeat(slots),
            mask: vec![false; slots],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn directions(&self) -> &[f32] {
        &self.directions
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Direction at a 1-based layer, or `None` if masked.
    pub fn at(&self, layer: usize, position: usize) -> Option<&[f32]> {
        let slot = (layer - 1) * self.seq_len + position;
        (!self.mask[slot]).then(|| &self.directions[slot * self.d_model..(slot + 1) * self.d_model])
    }
}

/// `X'[l,t] = X[l,t] − R̂[l,t] (R̂[l,t]ᵀ X[l,t])`; masked slots pass through.
pub fn ablate_field(x: &[f32], field: &SteeringField) -> Result<Vec<f32>> {
    if x.len() != field.directions.len() {
        return Err(Error::Shape(format!(
            "activation block has {} values, field covers {}",
            x.len(),
            field.directions.len()
        )));
    }
    let d = field.d_model;
    let mut out = x.to_vec();
    for (slot, row) in out.chunks_exact_mut(d).enumerate() {
        if !field.mask[slot] {
            project_out(row, &field.directions[slot * d..(slot + 1) * d]);
        }
    }
    Ok(out)
}

/// Difference-in-means candidates at `position` for layers `1..=L`.
pub fn extract_candidates(
    params: &ModelParams<f32>,
    over: &GroupedDataset,
    under: &GroupedDataset,
    position: usize,
) -> Result<Vec<CandidateVector>> {
    if position >= params.config.seq_len {
        return Err(Error::Shape(format!(
            "position {position} outside sequence of length {}",
            params.config.seq_len
        )));
    }
    let mu = mean_activations(params, over)?;
    let nu = mean_activations(params, under)?;
    Ok(candidates_at(&diff_in_means(&mu, &nu)?, position))
}

/// Keeps the candidates at one position, in layer order.
pub fn candidates_at(all: &[CandidateVector], position: usize) -> Vec<CandidateVector> {
    all.iter()
        .filter(|c| c.position == position)
        .cloned()
        .collect()
}

/// Normalized full difference field between `over` and `under`.
pub fn build_full_field(
    params: &ModelParams<f32>,
    over: &GroupedDataset,
    under: &GroupedDataset,
) -> Result<SteeringField> {
    let mu = mean_activations(params, over)?;
    let nu = mean_activations(params, under)?;
    let raw = diff_field(&mu, &nu)?;
    SteeringField::from_raw(mu.n_layers, mu.seq_len, mu.d_model, &raw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Validation metrics for every non-degenerate candidate, in layer order.
    pub entries: Vec<ProfileEntry>,
    pub chosen_layer: usize,
    pub chosen_position: usize,
    pub direction: UnitDirection,
    pub chosen_wga: f64,
    pub chosen_aga: f64,
}

/// Evaluates single-direction ablation for each candidate on `d_val` and keeps
/// the one with the best worst-group accuracy (ties: higher AGA, then lower layer).
pub fn sweep_single_layer(
    params: &ModelParams<f32>,
    candidates: &[CandidateVector],
    d_val: &GroupedDataset,
) -> Result<SweepResult> {
    let mut usable: Vec<&CandidateVector> =
        candidates.iter().filter(|c| !c.is_degenerate()).collect();
    if usable.is_empty() {
        return Err(Error::Steering(
            "no non-degenerate candidate to sweep".to_string(),
        ));
    }
    usable.sort_by_key(|c| (c.layer, c.position));
    let mut entries = Vec::with_capacity(usable.len());
    for c in &usable {
        let spec = InterventionSpec::SingleGlobal {
            direction: c.direction.clone().expect("filtered"),
        };
        let report = group_accuracies(params, d_val, &spec)?;
        entries.push(ProfileEntry {
            layer: c.layer,
            position: c.position,
            wga: report.wga,
            aga: report.aga,
        });
    }
    let best = best_entry(&entries).expect("nonempty");
    Ok(SweepResult {
        chosen_layer: entries[best].layer,
        chosen_position: entries[best].position,
        chosen_wga: entries[best].wga,
        chosen_aga: entries[best].aga,
        direction: usable[best].direction.clone().expect("filtered"),
        entries,
    })
}

const VECTOR_MAGIC: &[u8; 4] = b"STVC";
const VECTOR_VERSION: u32 = 1;
const MODE_SINGLE: u8 = 0;
const MODE_FIELD: u8 = 1;

/// Contents of a steering-vector file. Raw differences are stored; unit
/// directions and degenerate masks are recomputed on load.
#[derive(Clone, Debug, PartialEq)]
pub enum VectorContent {
    Candidates(Vec<CandidateVector>),
    Field {
        n_layers: usize,
        seq_len: usize,
        d_model: usize,
        raw: Vec<f32>,
    },
}

impl VectorContent {
    pub fn to_field(&self) -> Result<SteeringField> {
        match self {
            VectorContent::Field {
                n_layers,
                seq_len,
                d_model,
                raw,
            } => SteeringField::from_raw(*n_layers, *seq_len, *d_model, raw),
            VectorContent::Candidates(_) => Err(Error::Steering(
                "vector file holds single candidates, not a full field".to_string(),
            )),
        }
    }

    pub fn candidates(&self) -> Result<&[CandidateVector]> {
        match self {
            VectorContent::Candidates(c) => Ok(c),
            VectorContent::Field { .. } => Err(Error::Steering(
                "vector file holds a full field, not single candidates".to_string(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorFile {
    pub config_digest: [u8; 32],
    pub content: VectorContent,
}

impl VectorFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(VECTOR_MAGIC);
        w.u32(VECTOR_VERSION);
        match &self.content {
            VectorContent::Candidates(cands) => {
                w.u8(MODE_SINGLE);
                w.bytes(&self.config_digest);
                w.u32(cands.len() as u32);
                for c in cands {
                    w.u32(c.layer as u32);
                    w.u32(c.position as u32);
                    w.tensor(&[c.raw.len()], &c.raw);
                }
            }
            VectorContent::Field {
                n_layers,
                seq_len,
                d_model,
                raw,
            } => {
                w.u8(MODE_FIELD);
                w.bytes(&self.config_digest);
                w.tensor(&[*n_layers, *seq_len, *d_model], raw);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(VECTOR_MAGIC)?;
        r.version(VECTOR_VERSION)?;
        let mode_at = r.offset();
        let mode = r.u8("mode")?;
        let config_digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
        let content = match mode {
            MODE_SINGLE => {
                let count = r.u32("candidate count")?;
                let mut cands = Vec::new();
                for _ in 0..count {
                    let layer = r.u32("layer")? as usize;
                    let position = r.u32("position")? as usize;
                    let at = r.offset();
                    let (dims, raw) = r.tensor("direction")?;
                    if dims.len() != 1 {
                        return Err(Error::format(at, "candidate direction must be 1-D"));
                    }
                    if layer == 0 {
                        return Err(Error::format(at, "layer indices start at 1"));
                    }
                    cands.push(CandidateVector::from_raw(layer, position, raw));
                }
                VectorContent::Candidates(cands)
            }
            MODE_FIELD => {
                let at = r.offset();
                let (dims, raw) = r.tensor("field")?;
                let [n_layers, seq_len, d_model]: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| Error::format(at, "field tensor must be 3-D"))?;
                VectorContent::Field {
                    n_layers,
                    seq_len,
                    d_model,
                    raw,
                }
            }
            m => return Err(Error::format(mode_at, format!("unknown mode byte {m}"))),
        };
        r.expect_end()?;
        Ok(Self {
            config_digest,
            content,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks that the file was extracted from a model with `config`.
    pub fn load_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let file = Self::load(path)?;
        file.verify(config)?;
        Ok(file)
    }

    pub fn verify(&self, config: &ModelConfig) -> Result<()> {
        if self.config_digest != config.digest() {
            return Err(Error::Mismatch(
                "steering vectors were extracted from a different model configuration".to_string(),
            ));
        }
        Ok(())
    }
}

/// Cosine similarity in 64-bit; used when comparing directions across runs.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    dot(&a64, &b64) / (dot(&a64, &a64).sqrt() * dot(&b64, &b64).sqrt())
}
