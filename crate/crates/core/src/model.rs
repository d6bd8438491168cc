//! Embeddings, stacked layers and the shared-table prediction head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    bottleneck_width, ConvPadding, Dropouts, LayerSpec, LayerTrace, LayerWeights, MixtureMode, Pass, ScoreActivation,
};
use crate::error::{Error, Result};
use crate::params::{Binding, Initializer, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Activation, Mode, Real, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Catalog size; item ids run `1..=num_items`, `0` is padding.
    pub num_items: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub kernel_size: usize,
    pub reduction_ratio: usize,
    pub conv_activation: Activation,
    pub max_len: usize,
    pub hidden_dropout: f64,
    pub attn_dropout: f64,
    pub seatt_global: ScoreActivation,
    pub seatt_local: ScoreActivation,
    pub mixture: MixtureMode,
    pub conv_padding: ConvPadding,
    pub use_global: bool,
    pub use_local: bool,
    pub use_seatt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_items: 0,
            d_model: 32,
            num_layers: 2,
            num_heads: 4,
            kernel_size: 3,
            reduction_ratio: 2,
            conv_activation: Activation::Gelu,
            max_len: 50,
            hidden_dropout: 0.5,
            attn_dropout: 0.5,
            seatt_global: ScoreActivation::Sigmoid,
            seatt_local: ScoreActivation::Sigmoid,
            mixture: MixtureMode::Adaptive,
            conv_padding: ConvPadding::Same,
            use_global: true,
            use_local: true,
            use_seatt: true,
        }
    }
}

impl ModelConfig {
    /// Reports every violated constraint at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_items == 0 {
            bad.push("num_items must be at least 1".to_string());
        }
        if self.d_model == 0 {
            bad.push("d_model must be at least 1".to_string());
        }
        if self.num_layers == 0 {
            bad.push("num_layers must be at least 1".to_string());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            bad.push(format!(
                "d_model ({}) must be divisible by num_heads ({})",
                self.d_model, self.num_heads
            ));
        }
        if self.max_len == 0 {
            bad.push("max_len must be at least 1".to_string());
        }
        if self.kernel_size % 2 == 0 || self.kernel_size > self.max_len {
            bad.push(format!(
                "kernel_size ({}) must be odd and between 1 and max_len ({})",
                self.kernel_size, self.max_len
            ));
        }
        if self.reduction_ratio == 0 {
            bad.push("reduction_ratio must be at least 1".to_string());
        }
        if self.conv_activation == Activation::Softmax {
            bad.push("conv_activation must be element-wise".to_string());
        }
        for (name, rate) in [("hidden_dropout", self.hidden_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                bad.push(format!("{name} ({rate}) must lie in [0, 1)"));
            }
        }
        if let MixtureMode::Fixed(a) = self.mixture {
            if !(0.0..=1.0).contains(&a) {
                bad.push(format!("mixture fixed weight ({a}) must lie in [0, 1]"));
            }
        }
        if !self.use_global && !self.use_local {
            bad.push("use_global / use_local: at least one branch must be enabled".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec {
            d_model: self.d_model,
            heads: self.num_heads,
            kernel: self.kernel_size,
            reduction: self.reduction_ratio,
            max_len: self.max_len,
            conv_activation: self.conv_activation,
            conv_padding: self.conv_padding,
            seatt_global: self.seatt_global,
            seatt_local: self.seatt_local,
            mixture: self.mixture,
            use_global: self.use_global,
            use_local: self.use_local,
            use_seatt: self.use_seatt,
        }
    }

    pub fn dropouts(&self) -> Dropouts {
        Dropouts {
            hidden: self.hidden_dropout,
            attention: self.attn_dropout,
        }
    }

    /// Parameter count implied by the configuration alone.
    pub fn expected_parameter_count(&self) -> usize {
        let (v, d, n, k) = (self.num_items, self.d_model, self.max_len, self.kernel_size);
        let b = bottleneck_width(n, self.reduction_ratio);
        let encoder = d * d + 3 * d;
        let seatt = if self.use_seatt { 2 * b * n + b + n } else { 0 };
        let global = if self.use_global { encoder + 4 * d * d + 2 * d + seatt } else { 0 };
        let local = if self.use_local { encoder + k * d * d + 3 * d + seatt } else { 0 };
        let gate = if self.use_global && self.use_local && self.mixture == MixtureMode::Adaptive {
            d + 1
        } else {
            0
        };
        let mixture = d * d + 3 * d + gate;
        let layer = global + local + mixture;
        (v + 1 + n) * d + self.num_layers * layer + d * d + d + (v + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub pred_weight: ParamId,
    pub pred_bias: ParamId,
    /// `[|V|+1]`; the padding entry never reaches the loss.
    pub output_bias: ParamId,
    /// Item table read by the head. Always the embedding table itself.
    pub table: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    /// `[(|V|+1) × d]`, row 0 is padding.
    pub item_table: ParamId,
    /// `[N × d]`.
    pub pos_table: ParamId,
    pub layers: Vec<LayerWeights>,
    pub head: HeadWeights,
}

/// Coarse parameter group a tensor name belongs to.
pub fn param_group(name: &str) -> &'static str {
    const GROUPS: [(&str, &str); 8] = [
        (".global.encoder", "global_encoder"),
        (".local.encoder", "local_encoder"),
        (".global.attention", "attention"),
        (".local.conv", "conv"),
        (".global.seatt", "global_seatt"),
        (".local.seatt", "local_seatt"),
        (".mixture", "mixture"),
        ("head.", "output_head"),
    ];
    if name == "embedding.item" {
        return "embeddings";
    }
    if name == "embedding.position" {
        return "positional";
    }
    GROUPS
        .iter()
        .find(|(pat, _)| name.contains(pat))
        .map_or("other", |(_, g)| g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub tensors: Vec<TensorCount>,
    pub groups: BTreeMap<String, usize>,
    pub total: usize,
}

/// Forward-pass products for one sequence.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[|V|]`; entry `i` scores item `i + 1`.
    pub logits: Var,
    /// `[1×d]` head activation that is multiplied with the item table.
    pub features: Var,
    pub embedded: Var,
    pub traces: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: ModelLayout,
}

/// Declares every tensor in checkpoint order with fresh initial values.
pub fn declare_model<T: Real>(config: &ModelConfig, rng: &mut RngState) -> Result<(ParamStore<T>, ModelLayout)> {
    config.validate()?;
    let (v, d, n) = (config.num_items, config.d_model, config.max_len);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(rng, INIT_STD);
    let mut items: Tensor<T> = init.truncated_normal(&[v + 1, d]);
    items.row_mut(0).fill(T::zero());
    let item_table = store.add("embedding.item", items);
    let pos_table = store.add("embedding.position", init.truncated_normal(&[n, d]));
    let spec = config.layer_spec();
    let layers = (0..config.num_layers)
        .map(|l| LayerWeights::declare(&mut store, &format!("layers.{l}"), &spec, &mut init))
        .collect::<Result<Vec<_>>>()?;
    let head = HeadWeights {
        pred_weight: store.add("head.pred.weight", init.truncated_normal(&[d, d])),
        pred_bias: store.add("head.pred.bias", Tensor::zeros(&[d])),
        output_bias: store.add("head.output_bias", Tensor::zeros(&[v + 1])),
        table: item_table,
    };
    Ok((
        store,
        ModelLayout {
            item_table,
            pos_table,
            layers,
            head,
        },
    ))
}

/// Builds a freshly initialized model.
///
/// Weight matrices and embeddings are drawn from a normal distribution with
/// standard deviation [`INIT_STD`] truncated at two standard deviations;
/// biases start at zero, layer-norm scales at one, and the padding row of
/// the item table at zero.
pub fn init_model<T: Real>(config: &ModelConfig, rng: &mut RngState) -> Result<Model<T>> {
    let (params, layout) = declare_model(config, rng)?;
    Ok(Model {
        config: config.clone(),
        params,
        layout,
    })
}

/// `true` for every non-padding slot.
pub fn valid_mask(items: &[usize]) -> Vec<bool> {
    items.iter().map(|&id| id != 0).collect()
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn count_parameters(&self) -> ParamReport {
        let tensors: Vec<TensorCount> = self
            .params
            .iter()
            .map(|(name, t)| TensorCount {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                count: t.numel(),
            })
            .collect();
        let mut groups = BTreeMap::new();
        for t in &tensors {
            *groups.entry(param_group(&t.name).to_string()).or_insert(0) += t.count;
        }
        let total = tensors.iter().map(|t| t.count).sum();
        ParamReport { tensors, groups, total }
    }

    /// `item_table[id_t] + pos_table[t]` for each of the `N` slots.
    pub fn embed_sequence(&self, tape: &Tape<T>, params: &Binding, items: &[usize]) -> Result<Var> {
        let n = self.config.max_len;
        if items.len() != n {
            return Err(Error::Data(format!("expected {n} padded slots, got {}", items.len())));
        }
        if let Some((pos, &id)) = items.iter().enumerate().find(|(_, &id)| id > self.config.num_items) {
            return Err(Error::Data(format!(
                "item id {id} at slot {pos} exceeds catalog size {}",
                self.config.num_items
            )));
        }
        let rows = tape.gather_rows(params[self.layout.item_table], items)?;
        tape.add(rows, params[self.layout.pos_table])
    }

    /// Runs the layer stack over a left-padded sequence of `N` ids and scores
    /// every real item from the final slot.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        params: &Binding,
        items: &[usize],
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<ForwardOutput> {
        let embedded = self.embed_sequence(tape, params, items)?;
        if items[self.config.max_len - 1] == 0 {
            return Err(Error::Data("sequence has no item in its final slot".into()));
        }
        let valid = valid_mask(items);
        let pass = Pass {
            tape,
            params,
            mode,
            dropout: self.config.dropouts(),
        };
        let mut h = embedded;
        let mut traces = Vec::with_capacity(self.layout.layers.len());
        for layer in &self.layout.layers {
            let tr = pass.layer_forward(layer, h, &valid, rng)?;
            h = tr.output;
            traces.push(tr);
        }
        let head = &self.layout.head;
        let last = tape.select_row(h, self.config.max_len - 1)?;
        let z = tape.add_row_bias(tape.matmul(last, params[head.pred_weight])?, params[head.pred_bias])?;
        let z = tape.activation(z, Activation::Gelu)?;
        let all = tape.add_row_bias(tape.matmul_nt(z, params[head.table])?, params[head.output_bias])?;
        let logits = tape.slice(all, 1, self.config.num_items)?;
        Ok(ForwardOutput {
            logits,
            features: z,
            embedded,
            traces,
        })
    }

    /// Eval-mode logits for one sequence.
    pub fn logits(&self, items: &[usize]) -> Result<Vec<T>> {
        let tape = Tape::new();
        let params = self.params.bind(&tape);
        let out = self.forward(&tape, &params, items, Mode::Eval, &mut RngState::new(0))?;
        Ok(tape.data(out.logits))
    }
}

/// `−log softmax(logits)[target]` for a 1-based item id.
pub fn cross_entropy_loss<T: Real>(tape: &Tape<T>, logits: Var, target: usize) -> Result<Var> {
    let n = tape.numel(logits);
    if target == 0 || target > n {
        return Err(Error::Data(format!("target item {target} outside 1..={n}")));
    }
    tape.cross_entropy(logits, target - 1)
}
