//! Sub-computations of one AdaMCT layer.
//!
//! A layer runs two branches over its input: a causal multi-head
//! self-attention branch (global) and a same-length 1-D convolution branch
//! (local). Each branch output is re-weighted per position by a
//! squeeze-excitation block, and the two are blended with a per-sequence
//! coefficient before a residual projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, Initializer, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Activation, Mode, PoolAxis, Real, Tape, Tensor, Var, MASK_VALUE};

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Normalization applied to squeeze-excitation scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreActivation {
    #[default]
    Sigmoid,
    /// Softmax over valid positions.
    Softmax,
}

impl fmt::Display for ScoreActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreActivation::Sigmoid => "sigmoid",
            ScoreActivation::Softmax => "softmax",
        })
    }
}

impl FromStr for ScoreActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(ScoreActivation::Sigmoid),
            "softmax" => Ok(ScoreActivation::Softmax),
            other => Err(Error::Config(format!("unknown score activation `{other}`"))),
        }
    }
}

/// Zero-padding alignment of the convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvPadding {
    /// `(k−1)/2` zeros on each side; the window is centred on its position.
    #[default]
    Same,
    /// `k−1` zeros before the sequence; the window ends at its position.
    Causal,
}

impl ConvPadding {
    pub fn pad_left(self, k: usize) -> usize {
        match self {
            ConvPadding::Same => (k - 1) / 2,
            ConvPadding::Causal => k - 1,
        }
    }
}

impl fmt::Display for ConvPadding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvPadding::Same => "same",
            ConvPadding::Causal => "causal",
        })
    }
}

impl FromStr for ConvPadding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(ConvPadding::Same),
            "causal" => Ok(ConvPadding::Causal),
            other => Err(Error::Config(format!("unknown conv padding `{other}`"))),
        }
    }
}

/// How the local and global branch outputs are combined.
///
/// Serialized as `adaptive`, `sum`, or `fixed:<alpha>`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum MixtureMode {
    /// `α` is predicted from the layer input for each sequence.
    #[default]
    Adaptive,
    /// Constant weight on the local branch; the global branch gets `1 − α`.
    Fixed(f64),
    /// Unweighted sum of both branches.
    Sum,
}

impl fmt::Display for MixtureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixtureMode::Adaptive => f.write_str("adaptive"),
            MixtureMode::Sum => f.write_str("sum"),
            MixtureMode::Fixed(a) => write!(f, "fixed:{a}"),
        }
    }
}

impl FromStr for MixtureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "adaptive" => return Ok(MixtureMode::Adaptive),
            "sum" => return Ok(MixtureMode::Sum),
            _ => {}
        }
        let alpha = s
            .strip_prefix("fixed:")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("unknown mixture mode `{s}`")))?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("fixed mixture weight {alpha} outside [0, 1]")));
        }
        Ok(MixtureMode::Fixed(alpha))
    }
}

impl Serialize for MixtureMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixtureMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormWeights {
    fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[width])),
        }
    }
}

/// Square projection `x·W + b` with its own layer norm.
#[derive(Clone, Copy, Debug)]
pub struct EncoderWeights {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: LayerNormWeights,
}

impl EncoderWeights {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, init: &mut Initializer) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), init.truncated_normal(&[d, d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
            norm: LayerNormWeights::declare(store, &format!("{prefix}.norm"), d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    /// Per-head `[d × d/h]` projections.
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    /// `[d × d]` output projection.
    pub output: ParamId,
    pub norm: LayerNormWeights,
}

impl AttentionWeights {
    pub fn declare<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let mut proj = |name: &str, store: &mut ParamStore<T>| -> Vec<ParamId> {
            (0..heads)
                .map(|i| store.add(format!("{prefix}.head{i}.{name}"), init.truncated_normal(&[d, dh])))
                .collect()
        };
        let query = proj("query", store);
        let key = proj("key", store);
        let value = proj("value", store);
        Ok(Self {
            query,
            key,
            value,
            output: store.add(format!("{prefix}.output"), init.truncated_normal(&[d, d])),
            norm: LayerNormWeights::declare(store, &format!("{prefix}.norm"), d),
        })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvWeights {
    /// `[m × k × d]`: filter `i` is the `k × d` slab at index `i`.
    pub filters: ParamId,
    pub bias: ParamId,
    pub norm: LayerNormWeights,
    pub kernel: usize,
    pub activation: Activation,
    pub padding: ConvPadding,
}

impl ConvWeights {
    pub fn declare<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        kernel: usize,
        activation: Activation,
        padding: ConvPadding,
        init: &mut Initializer,
    ) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd and positive, got {kernel}")));
        }
        Ok(Self {
            filters: store.add(format!("{prefix}.filters"), init.truncated_normal(&[d, kernel, d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
            norm: LayerNormWeights::declare(store, &format!("{prefix}.norm"), d),
            kernel,
            activation,
            padding,
        })
    }
}

/// Squeeze-excitation over sequence positions.
#[derive(Clone, Copy, Debug)]
pub struct SeAttWeights {
    /// `[b × N]` with `b = ⌈N/r⌉`.
    pub squeeze: ParamId,
    pub squeeze_bias: ParamId,
    /// `[N × b]`.
    pub excite: ParamId,
    pub excite_bias: ParamId,
    pub max_len: usize,
    pub bottleneck: usize,
    pub scores: ScoreActivation,
}

pub fn bottleneck_width(max_len: usize, reduction: usize) -> usize {
    max_len.div_ceil(reduction)
}

impl SeAttWeights {
    pub fn declare<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        max_len: usize,
        reduction: usize,
        scores: ScoreActivation,
        init: &mut Initializer,
    ) -> Result<Self> {
        if reduction == 0 || max_len == 0 {
            return Err(Error::Config(format!(
                "reduction ratio and max length must be positive, got r={reduction}, N={max_len}"
            )));
        }
        let b = bottleneck_width(max_len, reduction);
        Ok(Self {
            squeeze: store.add(format!("{prefix}.squeeze"), init.truncated_normal(&[b, max_len])),
            squeeze_bias: store.add(format!("{prefix}.squeeze_bias"), Tensor::zeros(&[b])),
            excite: store.add(format!("{prefix}.excite"), init.truncated_normal(&[max_len, b])),
            excite_bias: store.add(format!("{prefix}.excite_bias"), Tensor::zeros(&[max_len])),
            max_len,
            bottleneck: b,
            scores,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MixtureWeights {
    /// `[d × 1]` weight and `[1]` bias; present only in adaptive mode.
    pub gate: Option<(ParamId, ParamId)>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub norm: LayerNormWeights,
    pub mode: MixtureMode,
}

impl MixtureWeights {
    pub fn declare<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        mode: MixtureMode,
        init: &mut Initializer,
    ) -> Self {
        let gate = (mode == MixtureMode::Adaptive).then(|| {
            (
                store.add(format!("{prefix}.gate.weight"), init.truncated_normal(&[d, 1])),
                store.add(format!("{prefix}.gate.bias"), Tensor::zeros(&[1])),
            )
        });
        Self {
            gate,
            out_weight: store.add(format!("{prefix}.out.weight"), init.truncated_normal(&[d, d])),
            out_bias: store.add(format!("{prefix}.out.bias"), Tensor::zeros(&[d])),
            norm: LayerNormWeights::declare(store, &format!("{prefix}.norm"), d),
            mode,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub encoder: EncoderWeights,
    pub attention: AttentionWeights,
    pub seatt: Option<SeAttWeights>,
}

#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub encoder: EncoderWeights,
    pub conv: ConvWeights,
    pub seatt: Option<SeAttWeights>,
}

/// One layer's weights. A branch is `None` when it is ablated away.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub global: Option<GlobalBranch>,
    pub local: Option<LocalBranch>,
    pub mixture: MixtureWeights,
}

/// Shape and variant choices needed to declare one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub d_model: usize,
    pub heads: usize,
    pub kernel: usize,
    pub reduction: usize,
    pub max_len: usize,
    pub conv_activation: Activation,
    pub conv_padding: ConvPadding,
    pub seatt_global: ScoreActivation,
    pub seatt_local: ScoreActivation,
    pub mixture: MixtureMode,
    pub use_global: bool,
    pub use_local: bool,
    pub use_seatt: bool,
}

impl LayerWeights {
    /// Declares the layer's tensors under `prefix` in a fixed order:
    /// global branch, local branch, mixture.
    pub fn declare<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &LayerSpec,
        init: &mut Initializer,
    ) -> Result<Self> {
        let d = spec.d_model;
        let global = if spec.use_global {
            let encoder = EncoderWeights::declare(store, &format!("{prefix}.global.encoder"), d, init);
            let attention = AttentionWeights::declare(store, &format!("{prefix}.global.attention"), d, spec.heads, init)?;
            let seatt = spec
                .use_seatt
                .then(|| {
                    SeAttWeights::declare(
                        store,
                        &format!("{prefix}.global.seatt"),
                        spec.max_len,
                        spec.reduction,
                        spec.seatt_global,
                        init,
                    )
                })
                .transpose()?;
            Some(GlobalBranch {
                encoder,
                attention,
                seatt,
            })
        } else {
            None
        };
        let local = if spec.use_local {
            let encoder = EncoderWeights::declare(store, &format!("{prefix}.local.encoder"), d, init);
            let conv = ConvWeights::declare(
                store,
                &format!("{prefix}.local.conv"),
                d,
                spec.kernel,
                spec.conv_activation,
                spec.conv_padding,
                init,
            )?;
            let seatt = spec
                .use_seatt
                .then(|| {
                    SeAttWeights::declare(
                        store,
                        &format!("{prefix}.local.seatt"),
                        spec.max_len,
                        spec.reduction,
                        spec.seatt_local,
                        init,
                    )
                })
                .transpose()?;
            Some(LocalBranch { encoder, conv, seatt })
        } else {
            None
        };
        if global.is_none() && local.is_none() {
            return Err(Error::Config("a layer needs at least one branch".into()));
        }
        // the coefficient only exists when there is something to blend
        let mode = match spec.mixture {
            MixtureMode::Adaptive if !(spec.use_global && spec.use_local) => MixtureMode::Sum,
            m => m,
        };
        let mixture = MixtureWeights::declare(store, &format!("{prefix}.mixture"), d, mode, init);
        Ok(Self { global, local, mixture })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dropouts {
    /// Applied after every projection, the convolution and the residual path.
    pub hidden: f64,
    /// Applied to attention probabilities.
    pub attention: f64,
}

/// `[n×n]` additive mask: `0` on and below the diagonal, [`MASK_VALUE`] above.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let m = T::of(MASK_VALUE);
    let data = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { m } else { T::zero() }))
        .collect();
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Adds key padding to `mask`: a valid query may not attend to an invalid
/// key. Queries at invalid positions keep `mask` unchanged.
pub fn attention_mask<T: Real>(mask: &Tensor<T>, key_valid: &[bool]) -> Result<Vec<T>> {
    let n = key_valid.len();
    if mask.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "attention mask {:?} for {n} positions",
            mask.shape()
        )));
    }
    let m = T::of(MASK_VALUE);
    let half = T::of(MASK_VALUE / 2.0);
    let mut out = mask.data().to_vec();
    for i in (0..n).filter(|&i| key_valid[i]) {
        let row = &mut out[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            if !key_valid[j] {
                *v = *v + m;
            }
        }
        if row.iter().all(|&v| v < half) {
            return Err(Error::Domain(format!("query {i} has no key to attend to")));
        }
    }
    Ok(out)
}

/// Forward-pass context shared by the block functions.
pub struct Pass<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub params: &'a Binding,
    pub mode: Mode,
    pub dropout: Dropouts,
}

/// Intermediate values of one layer, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub global: Option<Var>,
    pub local: Option<Var>,
    pub global_scores: Option<Var>,
    pub local_scores: Option<Var>,
    /// `[1]`; `None` when the branches are summed or only one is present.
    pub alpha: Option<Var>,
    pub mixed: Var,
    pub output: Var,
}

impl<'a, T: Real> Pass<'a, T> {
    fn p(&self, id: ParamId) -> Var {
        self.params[id]
    }

    fn norm(&self, x: Var, w: &LayerNormWeights) -> Result<Var> {
        self.tape.layer_norm(x, self.p(w.gamma), self.p(w.beta), LN_EPS)
    }

    fn hidden_dropout(&self, x: Var, rng: &mut RngState) -> Result<Var> {
        self.tape.dropout(x, self.dropout.hidden, self.mode, rng)
    }

    /// `LN(Dpt(x·W + b))`.
    pub fn branch_encode(&self, w: &EncoderWeights, x: Var, rng: &mut RngState) -> Result<Var> {
        let t = self.tape;
        let y = t.add_row_bias(t.matmul(x, self.p(w.weight))?, self.p(w.bias))?;
        let y = self.hidden_dropout(y, rng)?;
        self.norm(y, &w.norm)
    }

    /// Concatenated head outputs projected by the output matrix, before
    /// dropout and normalization. `mask` must already include key padding.
    pub fn attention_projection(&self, w: &AttentionWeights, x: Var, mask: &[T], rng: &mut RngState) -> Result<Var> {
        let t = self.tape;
        let shape = t.shape(x);
        let d = shape[1];
        let scale = T::of(1.0 / ((d / w.heads()) as f64).sqrt());
        let mut heads = Vec::with_capacity(w.heads());
        for i in 0..w.heads() {
            let q = t.matmul(x, self.p(w.query[i]))?;
            let k = t.matmul(x, self.p(w.key[i]))?;
            let v = t.matmul(x, self.p(w.value[i]))?;
            let scores = t.affine(t.matmul_nt(q, k)?, scale, T::zero());
            let probs = t.softmax(t.add_const(scores, mask)?)?;
            let probs = t.dropout(probs, self.dropout.attention, self.mode, rng)?;
            heads.push(t.matmul(probs, v)?);
        }
        let concat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads)? };
        t.matmul(concat, self.p(w.output))
    }

    /// `LN(Dpt(Concat(head_1..head_h)·W_O))` with `mask [n×n]` combined with
    /// key padding from `key_valid`.
    pub fn multi_head_self_attention(
        &self,
        w: &AttentionWeights,
        x: Var,
        mask: &Tensor<T>,
        key_valid: &[bool],
        rng: &mut RngState,
    ) -> Result<Var> {
        let full = attention_mask(mask, key_valid)?;
        let y = self.attention_projection(w, x, &full, rng)?;
        let y = self.hidden_dropout(y, rng)?;
        self.norm(y, &w.norm)
    }

    /// `Φ(window_j(x)·Fᵢ + bᵢ)` for every position `j` and filter `i`.
    /// Rows where `row_valid` is false are zeroed before the windows are read.
    pub fn conv_pre_norm(&self, w: &ConvWeights, x: Var, row_valid: &[bool]) -> Result<Var> {
        let t = self.tape;
        let shape = t.shape(x);
        let (n, d) = (shape[0], shape[1]);
        if row_valid.len() != n {
            return Err(Error::Shape(format!("mask of length {} for {n} rows", row_valid.len())));
        }
        let x = if row_valid.iter().all(|&v| v) {
            x
        } else {
            let keep = row_valid
                .iter()
                .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, d))
                .collect();
            t.mul_const(x, keep)?
        };
        let windows = t.unfold(x, w.kernel, w.padding.pad_left(w.kernel))?;
        let filters = t.reshape(self.p(w.filters), &[d, w.kernel * d])?;
        let y = t.add_row_bias(t.matmul_nt(windows, filters)?, self.p(w.bias))?;
        t.activation(y, w.activation)
    }

    /// `LN(Dpt(conv(x)))`, preserving the number of rows.
    pub fn local_conv(&self, w: &ConvWeights, x: Var, row_valid: &[bool], rng: &mut RngState) -> Result<Var> {
        let y = self.conv_pre_norm(w, x, row_valid)?;
        let y = self.hidden_dropout(y, rng)?;
        self.norm(y, &w.norm)
    }

    /// Returns `(scores [n], scaled [n×d])`: each row of `x` multiplied by
    /// its position score.
    pub fn seatt(&self, w: &SeAttWeights, x: Var, valid: &[bool]) -> Result<(Var, Var)> {
        let t = self.tape;
        let n = t.shape(x)[0];
        if n > w.max_len {
            return Err(Error::Shape(format!("{n} positions exceed max length {}", w.max_len)));
        }
        let z = t.mean_pool(x, PoolAxis::Cols, Some(valid))?;
        let z = t.reshape(t.pad_tail(z, w.max_len)?, &[w.max_len, 1])?;
        let hidden = t.reshape(t.matmul(self.p(w.squeeze), z)?, &[w.bottleneck])?;
        let hidden = t.activation(t.add(hidden, self.p(w.squeeze_bias))?, Activation::Relu)?;
        let hidden = t.reshape(hidden, &[w.bottleneck, 1])?;
        let logits = t.reshape(t.matmul(self.p(w.excite), hidden)?, &[w.max_len])?;
        let logits = t.add(logits, self.p(w.excite_bias))?;
        let logits = if n < w.max_len { t.slice(logits, 0, n)? } else { logits };
        let scores = match w.scores {
            ScoreActivation::Sigmoid => t.activation(logits, Activation::Sigmoid)?,
            ScoreActivation::Softmax => {
                let mask: Vec<T> = valid
                    .iter()
                    .map(|&v| if v { T::zero() } else { T::of(MASK_VALUE) })
                    .collect();
                t.softmax(t.add_const(logits, &mask)?)?
            }
        };
        Ok((scores, t.mul_rows(x, scores)?))
    }

    /// Weight on the local branch, shape `[1]`.
    ///
    /// Adaptive mode computes `sigmoid(mean(h_prev over valid rows)·w + b)`;
    /// fixed mode returns the stored constant.
    pub fn adaptive_coefficient(&self, w: &MixtureWeights, h_prev: Var, valid: &[bool]) -> Result<Var> {
        let t = self.tape;
        match (w.mode, w.gate) {
            (MixtureMode::Adaptive, Some((weight, bias))) => {
                let d = t.shape(h_prev)[1];
                let pooled = t.reshape(t.mean_pool(h_prev, PoolAxis::Rows, Some(valid))?, &[1, d])?;
                let logit = t.reshape(t.matmul(pooled, self.p(weight))?, &[1])?;
                t.activation(t.add(logit, self.p(bias))?, Activation::Sigmoid)
            }
            (MixtureMode::Fixed(a), _) => {
                if !valid.iter().any(|&v| v) {
                    return Err(Error::Domain("no valid positions".into()));
                }
                Ok(t.constant(&Tensor::scalar(T::of(a))))
            }
            _ => Err(Error::Config(format!("mixture mode {} has no coefficient", w.mode))),
        }
    }

    /// `α·local + (1 − α)·global`.
    pub fn mix_branches(&self, local: Var, global: Var, alpha: Var) -> Result<Var> {
        let t = self.tape;
        let l = t.scale_by(local, alpha)?;
        let g = t.scale_by(global, t.one_minus(alpha))?;
        t.add(l, g)
    }

    /// Full layer: both branches, mixture, and `LN(h_prev + Dpt(M·W + b))`.
    pub fn layer_forward(&self, w: &LayerWeights, h_prev: Var, valid: &[bool], rng: &mut RngState) -> Result<LayerTrace> {
        let t = self.tape;
        let n = t.shape(h_prev)[0];
        if valid.len() != n {
            return Err(Error::Shape(format!("mask of length {} for {n} rows", valid.len())));
        }
        let mut trace = LayerTrace {
            global: None,
            local: None,
            global_scores: None,
            local_scores: None,
            alpha: None,
            mixed: h_prev,
            output: h_prev,
        };
        if let Some(g) = &w.global {
            let x = self.branch_encode(&g.encoder, h_prev, rng)?;
            let y = self.multi_head_self_attention(&g.attention, x, &causal_mask(n), valid, rng)?;
            trace.global = Some(match &g.seatt {
                Some(se) => {
                    let (s, y) = self.seatt(se, y, valid)?;
                    trace.global_scores = Some(s);
                    y
                }
                None => y,
            });
        }
        if let Some(l) = &w.local {
            let x = self.branch_encode(&l.encoder, h_prev, rng)?;
            let y = self.local_conv(&l.conv, x, valid, rng)?;
            trace.local = Some(match &l.seatt {
                Some(se) => {
                    let (s, y) = self.seatt(se, y, valid)?;
                    trace.local_scores = Some(s);
                    y
                }
                None => y,
            });
        }
        trace.mixed = match (trace.local, trace.global) {
            (Some(l), Some(g)) => match w.mixture.mode {
                MixtureMode::Sum => t.add(l, g)?,
                _ => {
                    let alpha = self.adaptive_coefficient(&w.mixture, h_prev, valid)?;
                    trace.alpha = Some(alpha);
                    self.mix_branches(l, g, alpha)?
                }
            },
            (Some(b), None) | (None, Some(b)) => b,
            (None, None) => return Err(Error::Config("a layer needs at least one branch".into())),
        };
        let m = &w.mixture;
        let y = t.add_row_bias(t.matmul(trace.mixed, self.p(m.out_weight))?, self.p(m.out_bias))?;
        let y = self.hidden_dropout(y, rng)?;
        trace.output = self.norm(t.add(h_prev, y)?, &m.norm)?;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_mode_round_trips_through_text() {
        for m in [MixtureMode::Adaptive, MixtureMode::Sum, MixtureMode::Fixed(0.8)] {
            assert_eq!(m.to_string().parse::<MixtureMode>().unwrap(), m);
        }
        assert!("fixed:1.5".parse::<MixtureMode>().is_err());
        assert!("blend".parse::<MixtureMode>().is_err());
    }

    #[test]
    fn bottleneck_rounds_up() {
        assert_eq!(bottleneck_width(50, 2), 25);
        assert_eq!(bottleneck_width(50, 3), 17);
        assert_eq!(bottleneck_width(8, 20), 1);
    }

    #[test]
    fn causal_mask_n3() {
        let m = causal_mask::<f64>(3);
        let x = MASK_VALUE;
        assert_eq!(m.data(), &[0.0, x, x, 0.0, 0.0, x, 0.0, 0.0, 0.0]);
        assert_eq!(causal_mask::<f64>(1).data(), &[0.0]);
    }

    #[test]
    fn attention_mask_rejects_starved_query() {
        let mut m = causal_mask::<f64>(2);
        m.data_mut()[0] = MASK_VALUE;
        assert!(matches!(attention_mask(&m, &[true, true]), Err(Error::Domain(_))));
        // left padding: valid query 1 only sees itself
        let out = attention_mask(&causal_mask::<f64>(2), &[false, true]).unwrap();
        assert_eq!(out[2], MASK_VALUE);
        assert_eq!(out[3], 0.0);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = RngState::new(0);
        let mut init = Initializer::new(&mut rng, 0.02);
        let r = ConvWeights::declare(&mut store, "c", 4, 4, Activation::Relu, ConvPadding::Same, &mut init);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
