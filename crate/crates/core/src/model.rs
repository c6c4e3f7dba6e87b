//! Pre-norm transformer encoder classifier with a prepended CLS token.
//!
//! The residual stream is exposed at three kinds of hook point:
//!
//! ```text
//! x(1) = tok_emb[t] + pos_emb[t]
//! for l in 1..=L:
//!     resid_pre(l)  = x(l)                     <- hook
//!     x~(l)         = x(l) + Attn(LN1(x(l)))
//!     resid_mid(l)  = x~(l)                    <- hook
//!     x(l+1)        = x~(l) + MLP(LN2(x~(l)))
//! resid_final       = x(L+1)                   <- hook
//! logits            = W · x(L+1)[CLS]
//! ```
//!
//! Interventions rewrite the raw residual vector at a hook before anything
//! downstream reads it, so the normalized copies fed to each sublayer always
//! see the intervened stream.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, matmul, matmul_backward, softmax_into, Scalar};
use crate::steering::{SteeringField, UnitDirection};

/// Token id reserved for the classification token.
pub const CLS_TOKEN: u32 = 0;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Sequence length including the CLS slot at position 0.
    pub seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 32,
            seq_len: 16,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!(
                "seq_len must be >= 2, got {}",
                self.seq_len
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of data tokens per example (the CLS slot excluded).
    pub fn input_len(&self) -> usize {
        self.seq_len - 1
    }

    /// SHA-256 over the canonical JSON encoding; binds steering files to checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1_gain: Vec<T>,
    pub norm1_bias: Vec<T>,
    pub w_query: Vec<T>,
    pub w_key: Vec<T>,
    pub w_value: Vec<T>,
    pub w_out: Vec<T>,
    pub norm2_gain: Vec<T>,
    pub norm2_bias: Vec<T>,
    pub w_up: Vec<T>,
    pub b_up: Vec<T>,
    pub w_down: Vec<T>,
    pub b_down: Vec<T>,
}

/// All learned weights. Matrices are row-major and applied as `x · W`,
/// except the classifier which is `[C × d_model]` and applied as `W · x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_embedding: Vec<T>,
    pub position_embedding: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub classifier: Vec<T>,
}

/// Borrowed view of one named parameter tensor.
pub struct ParamTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

fn uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect()
}

pub fn init_params(config: &ModelConfig) -> Result<ModelParams<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let f = config.d_ff;
    let token_embedding = uniform(&mut rng, config.vocab_size * d, d);
    let position_embedding = uniform(&mut rng, config.seq_len * d, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            norm1_gain: vec![1.0; d],
            norm1_bias: vec![0.0; d],
            w_query: uniform(&mut rng, d * d, d),
            w_key: uniform(&mut rng, d * d, d),
            w_value: uniform(&mut rng, d * d, d),
            w_out: uniform(&mut rng, d * d, d),
            norm2_gain: vec![1.0; d],
            norm2_bias: vec![0.0; d],
            w_up: uniform(&mut rng, d * f, d),
            b_up: vec![0.0; f],
            w_down: uniform(&mut rng, f * d, f),
            b_down: vec![0.0; d],
        })
        .collect();
    let classifier = uniform(&mut rng, config.n_classes * d, d);
    Ok(ModelParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        classifier,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        let z = |n: usize| vec![T::zero(); n];
        Self {
            config: config.clone(),
            token_embedding: z(config.vocab_size * d),
            position_embedding: z(config.seq_len * d),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    norm1_gain: z(d),
                    norm1_bias: z(d),
                    w_query: z(d * d),
                    w_key: z(d * d),
                    w_value: z(d * d),
                    w_out: z(d * d),
                    norm2_gain: z(d),
                    norm2_bias: z(d),
                    w_up: z(d * f),
                    b_up: z(f),
                    w_down: z(f * d),
                    b_down: z(d),
                })
                .collect(),
            classifier: z(config.n_classes * d),
        }
    }

    /// Tensor names and shapes in the fixed checkpoint order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let f = config.d_ff;
        let mut out = vec![
            ("token_embedding".to_string(), vec![config.vocab_size, d]),
            ("position_embedding".to_string(), vec![config.seq_len, d]),
        ];
        for l in 1..=config.n_layers {
            let shapes: [(&str, Vec<usize>); 12] = [
                ("norm1_gain", vec![d]),
                ("norm1_bias", vec![d]),
                ("w_query", vec![d, d]),
                ("w_key", vec![d, d]),
                ("w_value", vec![d, d]),
                ("w_out", vec![d, d]),
                ("norm2_gain", vec![d]),
                ("norm2_bias", vec![d]),
                ("w_up", vec![d, f]),
                ("b_up", vec![f]),
                ("w_down", vec![f, d]),
                ("b_down", vec![d]),
            ];
            out.extend(
                shapes
                    .into_iter()
                    .map(|(name, shape)| (format!("layers.{l}.{name}"), shape)),
            );
        }
        out.push(("classifier".to_string(), vec![config.n_classes, d]));
        out
    }

    pub fn tensors(&self) -> Vec<ParamTensor<'_, T>> {
        let mut data: Vec<&[T]> = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            data.extend_from_slice(&[
                &layer.norm1_gain[..],
                &layer.norm1_bias,
                &layer.w_query,
                &layer.w_key,
                &layer.w_value,
                &layer.w_out,
                &layer.norm2_gain,
                &layer.norm2_bias,
                &layer.w_up,
                &layer.b_up,
                &layer.w_down,
                &layer.b_down,
            ]);
        }
        data.push(&self.classifier);
        Self::layout(&self.config)
            .into_iter()
            .zip(data)
            .map(|((name, shape), data)| ParamTensor { name, shape, data })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.norm1_gain);
            out.push(&mut layer.norm1_bias);
            out.push(&mut layer.w_query);
            out.push(&mut layer.w_key);
            out.push(&mut layer.w_value);
            out.push(&mut layer.w_out);
            out.push(&mut layer.norm2_gain);
            out.push(&mut layer.norm2_bias);
            out.push(&mut layer.w_up);
            out.push(&mut layer.b_up);
            out.push(&mut layer.w_down);
            out.push(&mut layer.b_down);
        }
        out.push(&mut self.classifier);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d = U::lit(s.to_f64_lossy());
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for ((name, shape), t) in Self::layout(&self.config).iter().zip(self.tensors()) {
            let want: usize = shape.iter().product();
            if t.data.len() != want {
                return Err(Error::Shape(format!(
                    "{name}: expected {want} values, found {}",
                    t.data.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HookPoint {
    /// Input to layer `l`'s attention sublayer, `l` in `1..=L`.
    ResidPre(usize),
    /// Input to layer `l`'s MLP sublayer.
    ResidMid(usize),
    ResidFinal,
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::ResidPre(l) => write!(f, "resid_pre({l})"),
            HookPoint::ResidMid(l) => write!(f, "resid_mid({l})"),
            HookPoint::ResidFinal => write!(f, "resid_final"),
        }
    }
}

/// Which residual-stream edit the forward pass performs.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum InterventionSpec {
    #[default]
    None,
    /// Project one direction out of every residual vector at every hook point.
    SingleGlobal { direction: UnitDirection },
    /// Project `field[l, t]` out of position `t` at both hooks of layer `l`,
    /// and `field[L, t]` out of `resid_final`.
    FullField { field: SteeringField },
    /// `x ← x − alpha·r̂` at the same hook points as `SingleGlobal`.
    Subtract {
        direction: UnitDirection,
        alpha: f32,
    },
}

impl InterventionSpec {
    pub fn describe(&self) -> String {
        match self {
            InterventionSpec::None => "none".to_string(),
            InterventionSpec::SingleGlobal { .. } => "single".to_string(),
            InterventionSpec::FullField { .. } => "full".to_string(),
            InterventionSpec::Subtract { alpha, .. } => format!("subtract(alpha={alpha})"),
        }
    }
}

enum Resolved<'a, T> {
    None,
    Global(Vec<T>),
    Field {
        directions: Vec<T>,
        mask: &'a [bool],
    },
    Subtract {
        direction: Vec<T>,
        alpha: T,
    },
}

fn to_scalar<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

/// `x ← x − r (rᵀx)` for one residual vector.
#[inline]
pub(crate) fn project_out<T: Scalar>(x: &mut [T], r: &[T]) {
    let c = dot(r, x);
    for (xi, ri) in x.iter_mut().zip(r) {
        *xi = *xi - *ri * c;
    }
}

impl<'a, T: Scalar> Resolved<'a, T> {
    fn new(spec: &'a InterventionSpec, config: &ModelConfig) -> Result<Self> {
        let d = config.d_model;
        let check_dim = |n: usize| {
            if n != d {
                Err(Error::Shape(format!(
                    "steering direction has dimension {n}, model has d_model {d}"
                )))
            } else {
                Ok(())
            }
        };
        Ok(match spec {
            InterventionSpec::None => Resolved::None,
            InterventionSpec::SingleGlobal { direction } => {
                check_dim(direction.dim())?;
                Resolved::Global(to_scalar(direction.as_slice()))
            }
            InterventionSpec::Subtract { direction, alpha } => {
                check_dim(direction.dim())?;
                Resolved::Subtract {
                    direction: to_scalar(direction.as_slice()),
                    alpha: T::lit(*alpha as f64),
                }
            }
            InterventionSpec::FullField { field } => {
                if field.n_layers() != config.n_layers
                    || field.seq_len() != config.seq_len
                    || field.d_model() != d
                {
                    return Err(Error::Shape(format!(
                        "steering field is [{} × {} × {}], model expects [{} × {} × {}]",
                        field.n_layers(),
                        field.seq_len(),
                        field.d_model(),
                        config.n_layers,
                        config.seq_len,
                        d
                    )));
                }
                Resolved::Field {
                    directions: to_scalar(field.directions()),
                    mask: field.mask(),
                }
            }
        })
    }

    /// Applies the intervention to the `[T × d]` residual block at `hook`.
    fn apply(&self, hook: HookPoint, x: &mut [T], seq_len: usize, d: usize) {
        match self {
            Resolved::None => {}
            Resolved::Global(r) => x.chunks_exact_mut(d).for_each(|row| project_out(row, r)),
            Resolved::Subtract { direction, alpha } => {
                for row in x.chunks_exact_mut(d) {
                    for (xi, ri) in row.iter_mut().zip(direction) {
                        *xi = *xi - *alpha * *ri;
                    }
                }
            }
            Resolved::Field { directions, mask } => {
                // resid_final is what layer L writes, so it reuses layer L's rows.
                let l = match hook {
                    HookPoint::ResidPre(l) | HookPoint::ResidMid(l) => l - 1,
                    HookPoint::ResidFinal => mask.len() / seq_len - 1,
                };
                for (t, row) in x.chunks_exact_mut(d).enumerate() {
                    let slot = l * seq_len + t;
                    if !mask[slot] {
                        project_out(row, &directions[slot * d..(slot + 1) * d]);
                    }
                }
            }
        }
    }

    /// Pulls a gradient back through the intervention at `hook` (projections are symmetric).
    fn backward(&self, hook: HookPoint, g: &mut [T], seq_len: usize, d: usize) {
        match self {
            Resolved::None | Resolved::Subtract { .. } => {}
            _ => self.apply(hook, g, seq_len, d),
        }
    }
}

/// Residual-stream activations captured during a forward pass (after any intervention).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    /// `[L × T × d_model]`
    pub resid_pre: Vec<T>,
    /// `[L × T × d_model]`
    pub resid_mid: Vec<T>,
    /// `[T × d_model]`
    pub resid_final: Vec<T>,
    /// Norm of each residual row just before the intervention, `[(2L + 1) × T]`
    /// following [`ForwardTrace::hook_points`] order.
    pub input_norms: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Activation vector at a hook point and position. Layers are 1-based.
    pub fn at(&self, hook: HookPoint, position: usize) -> &[T] {
        let d = self.d_model;
        match hook {
            HookPoint::ResidPre(l) => {
                let o = ((l - 1) * self.seq_len + position) * d;
                &self.resid_pre[o..o + d]
            }
            HookPoint::ResidMid(l) => {
                let o = ((l - 1) * self.seq_len + position) * d;
                &self.resid_mid[o..o + d]
            }
            HookPoint::ResidFinal => &self.resid_final[position * d..(position + 1) * d],
        }
    }

    /// `‖x‖` at a hook point and position before any intervention was applied.
    pub fn input_norm(&self, hook: HookPoint, position: usize) -> T {
        let slot = match hook {
            HookPoint::ResidPre(l) => 2 * (l - 1),
            HookPoint::ResidMid(l) => 2 * (l - 1) + 1,
            HookPoint::ResidFinal => 2 * self.n_layers,
        };
        self.input_norms[slot * self.seq_len + position]
    }

    pub fn hook_points(&self) -> Vec<HookPoint> {
        let mut hooks = Vec::with_capacity(2 * self.n_layers + 1);
        for l in 1..=self.n_layers {
            hooks.push(HookPoint::ResidPre(l));
            hooks.push(HookPoint::ResidMid(l));
        }
        hooks.push(HookPoint::ResidFinal);
        hooks
    }
}

struct NormCache<T> {
    normed: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize) -> NormCache<T> {
    let rows = x.len() / d;
    let mut normed = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::lit(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + T::lit(NORM_EPS)).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let n = (row[i] - mean) * s;
            normed[r * d + i] = n;
            out[r * d + i] = n * gain[i] + bias[i];
        }
    }
    NormCache { normed, rstd, out }
}

fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &[T],
    dout: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
    d: usize,
) {
    let rows = dout.len() / d;
    let inv_d = T::lit(1.0 / d as f64);
    let mut dn = vec![T::zero(); d];
    for r in 0..rows {
        let n = &cache.normed[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        for i in 0..d {
            dgain[i] += dy[i] * n[i];
            dbias[i] += dy[i];
            dn[i] = dy[i] * gain[i];
        }
        let mean_dn = dn.iter().copied().sum::<T>() * inv_d;
        let mean_dn_n = dot(&dn, n) * inv_d;
        let s = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] += s * (dn[i] - mean_dn - n[i] * mean_dn_n);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(u: T) -> T {
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_K) * u * u * u);
    T::lit(0.5) * u * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(u: T) -> T {
    let inner = T::lit(GELU_C) * (u + T::lit(GELU_K) * u * u * u);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * u * u);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * u * (T::one() - t * t) * dinner
}

struct LayerCache<T> {
    x_pre: Vec<T>,
    norm1: NormCache<T>,
    query: Vec<T>,
    key: Vec<T>,
    value: Vec<T>,
    /// `[H × T × T]`
    probs: Vec<T>,
    heads: Vec<T>,
    x_mid: Vec<T>,
    norm2: NormCache<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

struct ForwardCache<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    /// Row norms before each intervention, `[(2L + 1) × T]` in hook order.
    input_norms: Vec<T>,
    x_final: Vec<T>,
    logits: Vec<T>,
}

fn row_norms<T: Scalar>(x: &[T], d: usize, out: &mut Vec<T>) {
    out.extend(x.chunks_exact(d).map(l2_norm));
}

fn check_finite<T: Scalar>(hook: HookPoint, x: &[T]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            hook: hook.to_string(),
            detail: format!("non-finite activation at flat index {i}"),
        });
    }
    Ok(())
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() != config.input_len() {
        return Err(Error::Shape(format!(
            "expected {} tokens (seq_len {} minus CLS), got {}",
            config.input_len(),
            config.seq_len,
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Shape(format!(
            "token id {t} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn forward_cached<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    intervention: &Resolved<'_, T>,
) -> Result<ForwardCache<T>> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    let (n, d, f, h) = (cfg.seq_len, cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = cfg.d_head();
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let mut full_tokens = Vec::with_capacity(n);
    full_tokens.push(CLS_TOKEN);
    full_tokens.extend_from_slice(tokens);

    let mut x = vec![T::zero(); n * d];
    for (t, &tok) in full_tokens.iter().enumerate() {
        let e = &params.token_embedding[tok as usize * d..(tok as usize + 1) * d];
        let p = &params.position_embedding[t * d..(t + 1) * d];
        for i in 0..d {
            x[t * d + i] = e[i] + p[i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut input_norms = Vec::with_capacity((2 * cfg.n_layers + 1) * n);
    let mut tmp = vec![T::zero(); n * d];
    for (li, lp) in params.layers.iter().enumerate() {
        let l = li + 1;
        row_norms(&x, d, &mut input_norms);
        intervention.apply(HookPoint::ResidPre(l), &mut x, n, d);
        check_finite(HookPoint::ResidPre(l), &x)?;
        let x_pre = x.clone();

        let norm1 = layer_norm(&x, &lp.norm1_gain, &lp.norm1_bias, d);
        let mut query = vec![T::zero(); n * d];
        let mut key = vec![T::zero(); n * d];
        let mut value = vec![T::zero(); n * d];
        matmul(&norm1.out, &lp.w_query, &mut query, n, d, d);
        matmul(&norm1.out, &lp.w_key, &mut key, n, d, d);
        matmul(&norm1.out, &lp.w_value, &mut value, n, d, d);

        let mut probs = vec![T::zero(); h * n * n];
        let mut heads = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); n];
        for hh in 0..h {
            let off = hh * dh;
            for i in 0..n {
                let qi = &query[i * d + off..i * d + off + dh];
                for j in 0..n {
                    scores[j] = dot(qi, &key[j * d + off..j * d + off + dh]) * scale;
                }
                let p = &mut probs[(hh * n + i) * n..(hh * n + i + 1) * n];
                softmax_into(&scores, p);
                let out = &mut heads[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let pj = p[j];
                    let vj = &value[j * d + off..j * d + off + dh];
                    for (o, v) in out.iter_mut().zip(vj) {
                        *o += pj * *v;
                    }
                }
            }
        }
        matmul(&heads, &lp.w_out, &mut tmp, n, d, d);
        for (xi, a) in x.iter_mut().zip(&tmp) {
            *xi += *a;
        }

        row_norms(&x, d, &mut input_norms);
        intervention.apply(HookPoint::ResidMid(l), &mut x, n, d);
        check_finite(HookPoint::ResidMid(l), &x)?;
        let x_mid = x.clone();

        let norm2 = layer_norm(&x, &lp.norm2_gain, &lp.norm2_bias, d);
        let mut hidden_pre = vec![T::zero(); n * f];
        matmul(&norm2.out, &lp.w_up, &mut hidden_pre, n, d, f);
        for row in hidden_pre.chunks_exact_mut(f) {
            for (v, b) in row.iter_mut().zip(&lp.b_up) {
                *v += *b;
            }
        }
        let hidden: Vec<T> = hidden_pre.iter().map(|&u| gelu(u)).collect();
        matmul(&hidden, &lp.w_down, &mut tmp, n, f, d);
        for (t, row) in tmp.chunks_exact(d).enumerate() {
            for i in 0..d {
                x[t * d + i] += row[i] + lp.b_down[i];
            }
        }

        layers.push(LayerCache {
            x_pre,
            norm1,
            query,
            key,
            value,
            probs,
            heads,
            x_mid,
            norm2,
            hidden_pre,
            hidden,
        });
    }

    row_norms(&x, d, &mut input_norms);
    intervention.apply(HookPoint::ResidFinal, &mut x, n, d);
    check_finite(HookPoint::ResidFinal, &x)?;
    let cls = &x[..d];
    let logits: Vec<T> = params
        .classifier
        .chunks_exact(d)
        .map(|w| dot(w, cls))
        .collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            hook: "logits".to_string(),
            detail: "non-finite logit".to_string(),
        });
    }
    Ok(ForwardCache {
        tokens: full_tokens,
        layers,
        input_norms,
        x_final: x,
        logits,
    })
}

/// Runs the classifier on one token sequence (CLS is prepended internally).
///
/// When `capture` is set, the residual stream at every hook point is returned
/// as it stands after the intervention.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    intervention: &InterventionSpec,
    capture: bool,
) -> Result<(Vec<T>, Option<ForwardTrace<T>>)> {
    let resolved = Resolved::new(intervention, &params.config)?;
    let cache = forward_cached(params, tokens, &resolved)?;
    let trace = capture.then(|| {
        let cfg = &params.config;
        let mut resid_pre = Vec::with_capacity(cfg.n_layers * cfg.seq_len * cfg.d_model);
        let mut resid_mid = Vec::with_capacity(resid_pre.capacity());
        for layer in &cache.layers {
            resid_pre.extend_from_slice(&layer.x_pre);
            resid_mid.extend_from_slice(&layer.x_mid);
        }
        ForwardTrace {
            n_layers: cfg.n_layers,
            seq_len: cfg.seq_len,
            d_model: cfg.d_model,
            resid_pre,
            resid_mid,
            resid_final: cache.x_final.clone(),
            input_norms: cache.input_norms.clone(),
            logits: cache.logits.clone(),
        }
    });
    Ok((cache.logits, trace))
}

/// Softmax over logits with max subtraction.
pub fn classify<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Shape("no logits to classify".to_string()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            hook: "logits".to_string(),
            detail: "non-finite logit passed to classify".to_string(),
        });
    }
    let mut p = vec![T::zero(); logits.len()];
    softmax_into(logits, &mut p);
    Ok(p)
}

/// Index of the largest logit; ties go to the lower class index.
pub fn predict<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy loss `−log softmax(logits)[y]` and its gradient `p − onehot(y)`.
pub fn cross_entropy<T: Scalar>(logits: &[T], y: usize) -> Result<(T, Vec<T>)> {
    if y >= logits.len() {
        return Err(Error::Data(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    let mut p = classify(logits)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    let loss = lse - logits[y];
    p[y] -= T::one();
    Ok((loss, p))
}

fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    intervention: &Resolved<'_, T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
) {
    let cfg = &params.config;
    let (n, d, f, h) = (cfg.seq_len, cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = cfg.d_head();
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let mut dx = vec![T::zero(); n * d];
    for (c, &g) in dlogits.iter().enumerate() {
        let w = &params.classifier[c * d..(c + 1) * d];
        let gw = &mut grads.classifier[c * d..(c + 1) * d];
        for i in 0..d {
            gw[i] += g * cache.x_final[i];
            dx[i] += g * w[i];
        }
    }
    intervention.backward(HookPoint::ResidFinal, &mut dx, n, d);

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let l = li + 1;
        let gl = &mut grads.layers[li];

        // MLP branch: x_next = x_mid + W_down·gelu(W_up·LN2(x_mid) + b_up) + b_down
        let mut dhidden = vec![T::zero(); n * f];
        for row in dx.chunks_exact(d) {
            for (gb, r) in gl.b_down.iter_mut().zip(row) {
                *gb += *r;
            }
        }
        matmul_backward(
            &lc.hidden,
            &lp.w_down,
            &dx,
            &mut dhidden,
            &mut gl.w_down,
            n,
            f,
            d,
        );
        for (g, &u) in dhidden.iter_mut().zip(&lc.hidden_pre) {
            *g *= gelu_grad(u);
        }
        for row in dhidden.chunks_exact(f) {
            for (gb, r) in gl.b_up.iter_mut().zip(row) {
                *gb += *r;
            }
        }
        let mut dnorm2 = vec![T::zero(); n * d];
        matmul_backward(
            &lc.norm2.out,
            &lp.w_up,
            &dhidden,
            &mut dnorm2,
            &mut gl.w_up,
            n,
            d,
            f,
        );
        layer_norm_backward(
            &lc.norm2,
            &lp.norm2_gain,
            &dnorm2,
            &mut dx,
            &mut gl.norm2_gain,
            &mut gl.norm2_bias,
            d,
        );
        intervention.backward(HookPoint::ResidMid(l), &mut dx, n, d);

        // Attention branch.
        let mut dheads = vec![T::zero(); n * d];
        matmul_backward(
            &lc.heads,
            &lp.w_out,
            &dx,
            &mut dheads,
            &mut gl.w_out,
            n,
            d,
            d,
        );
        let mut dquery = vec![T::zero(); n * d];
        let mut dkey = vec![T::zero(); n * d];
        let mut dvalue = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for hh in 0..h {
            let off = hh * dh;
            for i in 0..n {
                let p = &lc.probs[(hh * n + i) * n..(hh * n + i + 1) * n];
                let dout = &dheads[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let vj = &lc.value[j * d + off..j * d + off + dh];
                    dp[j] = dot(dout, vj);
                    let dv = &mut dvalue[j * d + off..j * d + off + dh];
                    for (g, o) in dv.iter_mut().zip(dout) {
                        *g += p[j] * *o;
                    }
                }
                let pdp = dot(p, &dp);
                for j in 0..n {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    for k in 0..dh {
                        dquery[i * d + off + k] += ds * lc.key[j * d + off + k];
                        dkey[j * d + off + k] += ds * lc.query[i * d + off + k];
                    }
                }
            }
        }
        let mut dnorm1 = vec![T::zero(); n * d];
        matmul_backward(
            &lc.norm1.out,
            &lp.w_query,
            &dquery,
            &mut dnorm1,
            &mut gl.w_query,
            n,
            d,
            d,
        );
        matmul_backward(
            &lc.norm1.out,
            &lp.w_key,
            &dkey,
            &mut dnorm1,
            &mut gl.w_key,
            n,
            d,
            d,
        );
        matmul_backward(
            &lc.norm1.out,
            &lp.w_value,
            &dvalue,
            &mut dnorm1,
            &mut gl.w_value,
            n,
            d,
            d,
        );
        layer_norm_backward(
            &lc.norm1,
            &lp.norm1_gain,
            &dnorm1,
            &mut dx,
            &mut gl.norm1_gain,
            &mut gl.norm1_bias,
            d,
        );
        intervention.backward(HookPoint::ResidPre(l), &mut dx, n, d);
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        let te = &mut grads.token_embedding[tok as usize * d..(tok as usize + 1) * d];
        for (g, r) in te.iter_mut().zip(row) {
            *g += *r;
        }
        let pe = &mut grads.position_embedding[t * d..(t + 1) * d];
        for (g, r) in pe.iter_mut().zip(row) {
            *g += *r;
        }
    }
}

/// Cross-entropy loss of one example; gradients are accumulated into `grads`.
pub fn accumulate_gradient<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    label: usize,
    intervention: &InterventionSpec,
    grads: &mut ModelParams<T>,
) -> Result<(T, Vec<T>)> {
    let resolved = Resolved::new(intervention, &params.config)?;
    let cache = forward_cached(params, tokens, &resolved)?;
    let (loss, dlogits) = cross_entropy(&cache.logits, label)?;
    backward(params, &cache, &resolved, &dlogits, grads);
    Ok((loss, cache.logits))
}

/// Mean cross-entropy over a batch and its gradient with respect to every parameter.
pub fn batch_loss_and_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Example],
) -> Result<(T, ModelParams<T>)> {
    let mut grads = ModelParams::zeros(&params.config);
    let mut total = T::zero();
    for ex in batch {
        let (loss, _) = accumulate_gradient(
            params,
            &ex.tokens,
            ex.y as usize,
            &InterventionSpec::None,
            &mut grads,
        )?;
        total += loss;
    }
    let inv = T::one() / T::lit(batch.len() as f64);
    grads.scale(inv);
    Ok((total * inv, grads))
}

fn batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &[Example]) -> Result<T> {
    let mut total = T::zero();
    for ex in batch {
        let (logits, _) = forward(params, &ex.tokens, &InterventionSpec::None, false)?;
        total += cross_entropy(&logits, ex.y as usize)?.0;
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// Minimum number of coordinates probed per parameter tensor.
pub const GRAD_CHECK_SAMPLES: usize = 50;

/// One probed coordinate of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradProbe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<GradProbe>,
}

/// Compares analytic gradients of the mean cross-entropy against central
/// finite differences, both in 64-bit arithmetic.
///
/// Relative error is `|a − n| / max(|a| + |n|, 1e-6)`; the floor keeps
/// coordinates with vanishing gradient from dividing rounding noise by zero.
/// Coordinates are sampled with a generator seeded from `params.config.seed`.
pub fn grad_check(
    params: &ModelParams<f32>,
    batch: &[Example],
    epsilon: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Data(
            "gradient check needs a nonempty batch".to_string(),
        ));
    }
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::Contract(format!(
            "epsilon {epsilon} outside [1e-5, 1e-3]"
        )));
    }
    let base = params.cast::<f64>();
    let (_, analytic) = batch_loss_and_gradient(&base, batch)?;
    let analytic_tensors: Vec<Vec<f64>> =
        analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let names: Vec<String> = base.tensors().iter().map(|t| t.name.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed);
    let mut probes = Vec::new();
    let mut work = base.clone();
    for (ti, grad) in analytic_tensors.iter().enumerate() {
        let len = grad.len();
        let mut indices: Vec<usize> = if len <= GRAD_CHECK_SAMPLES {
            (0..len).collect()
        } else {
            sample(&mut rng, len, GRAD_CHECK_SAMPLES).into_vec()
        };
        indices.sort_unstable();
        for idx in indices {
            let original = work.tensors_mut()[ti][idx];
            work.tensors_mut()[ti][idx] = original + epsilon;
            let plus = batch_loss(&work, batch)?;
            work.tensors_mut()[ti][idx] = original - epsilon;
            let minus = batch_loss(&work, batch)?;
            work.tensors_mut()[ti][idx] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad[idx];
            let rel_error = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            probes.push(GradProbe {
                tensor: names[ti].clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        probes,
    })
}
