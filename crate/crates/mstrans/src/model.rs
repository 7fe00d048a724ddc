//! Encoder stacks: the multi-scale layer stack and the vanilla baseline.
//!
//! A multi-scale layer replaces both the attention sublayer and the FFN:
//!
//! ```text
//! H[l+1] = layer_norm(H[l] + relu(msmsa(H[l], scales[l])))
//! ```
//!
//! The vanilla layer keeps the classic two-sublayer form
//! `norm(H + msa(H))` then `norm(Z + ffn(Z))`. With `ffn = false` the
//! activation moves onto the attention output, `norm(H + relu(msa(H)))`,
//! which makes the FFN-free vanilla stack directly comparable to a
//! multi-scale stack whose windows cover the whole sequence.
//!
//! A learned `[CLS]` row can be prepended at position 0; it attends and is
//! attended to exactly like any token. The sentence representation
//! concatenates the final `[CLS]` state with a max-pool over all final
//! states (the pool includes the `[CLS]` row).

use crate::attention::{self, HeadVars, ScaleSpec};
use crate::config::ConfigDoc;
use crate::planner::{plan_scales, LayerPlan};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::SeedableRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ── Configuration ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Stacked multi-scale attention layers (no FFN).
    MultiScale,
    /// Standard transformer encoder layers.
    Vanilla { ffn: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    /// Token ids embedded through a learned table.
    Tokens { vocab_size: usize },
    /// Real-valued rows projected linearly into the hidden space.
    Vectors { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    /// Two-layer MLP over the sentence representation.
    Classifier { classes: usize, mlp_hidden: usize },
    /// Single linear map over the sentence representation.
    Regressor { out_dim: usize },
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub alpha: f64,
    pub candidates: Vec<ScaleSpec>,
    pub use_cls: bool,
    pub use_positional: bool,
    pub dropout: f64,
    pub input: InputSpec,
    pub task: TaskHead,
    /// Longest sequence (including the CLS position) the positional table
    /// supports.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden_dim == 0 || self.head_dim == 0 {
            return Err(Error::invalid("model config", "layers, heads and dims must be >= 1"));
        }
        if self.candidates.is_empty() {
            return Err(Error::invalid("model config", "scale candidate list is empty"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model config", format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("model config", "alpha must be finite"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("model config", "max_len must be >= 1"));
        }
        Ok(())
    }

    /// Width of the sentence representation fed to the task head.
    pub fn representation_dim(&self) -> usize {
        if self.use_cls {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    /// Echoes the architecture into a `[model]` section.
    pub fn to_doc(&self, doc: &mut ConfigDoc) {
        let s = "model";
        let arch = match self.arch {
            Arch::MultiScale => "multi-scale",
            Arch::Vanilla { ffn: true } => "vanilla",
            Arch::Vanilla { ffn: false } => "vanilla-noffn",
        };
        doc.set(s, "arch", arch);
        doc.set(s, "layers", &self.layers.to_string());
        doc.set(s, "heads", &self.heads.to_string());
        doc.set(s, "hidden_dim", &self.hidden_dim.to_string());
        doc.set(s, "head_dim", &self.head_dim.to_string());
        doc.set(s, "alpha", &format!("{}", self.alpha));
        let scales: Vec<String> = self.candidates.iter().map(|c| c.to_string()).collect();
        doc.set(s, "scales", &scales.join(","));
        doc.set(s, "use_cls", if self.use_cls { "true" } else { "false" });
        doc.set(s, "use_positional", if self.use_positional { "true" } else { "false" });
        doc.set(s, "dropout", &format!("{}", self.dropout));
        doc.set(s, "max_len", &self.max_len.to_string());
        match self.input {
            InputSpec::Tokens { vocab_size } => {
                doc.set(s, "input", "tokens");
                doc.set(s, "vocab_size", &vocab_size.to_string());
            }
            InputSpec::Vectors { dim } => {
                doc.set(s, "input", "vectors");
                doc.set(s, "input_dim", &dim.to_string());
            }
        }
        match self.task {
            TaskHead::Classifier { classes, mlp_hidden } => {
                doc.set(s, "task", "classifier");
                doc.set(s, "classes", &classes.to_string());
                doc.set(s, "mlp_hidden", &mlp_hidden.to_string());
            }
            TaskHead::Regressor { out_dim } => {
                doc.set(s, "task", "regressor");
                doc.set(s, "out_dim", &out_dim.to_string());
            }
        }
    }

    /// Keys accepted in a `[model]` section.
    pub const DOC_KEYS: &'static [&'static str] = &[
        "arch", "layers", "heads", "hidden_dim", "head_dim", "alpha", "scales", "use_cls",
        "use_positional", "dropout", "max_len", "input", "vocab_size", "input_dim", "task",
        "classes", "mlp_hidden", "out_dim",
    ];

    /// Reads a `[model]` section, using `defaults` for absent keys.
    pub fn from_doc(doc: &ConfigDoc, defaults: &ModelConfig) -> Result<ModelConfig> {
        let s = "model";
        let arch = match doc.get_str(s, "arch", match defaults.arch {
            Arch::MultiScale => "multi-scale",
            Arch::Vanilla { ffn: true } => "vanilla",
            Arch::Vanilla { ffn: false } => "vanilla-noffn",
        }).as_str() {
            "multi-scale" => Arch::MultiScale,
            "vanilla" => Arch::Vanilla { ffn: true },
            "vanilla-noffn" => Arch::Vanilla { ffn: false },
            other => return Err(Error::Config(format!("unknown arch {other:?}"))),
        };
        let candidates = match doc.get(s, "scales") {
            None => defaults.candidates.clone(),
            Some(list) => list
                .split(',')
                .map(|tok| ScaleSpec::parse(tok))
                .collect::<Result<Vec<_>>>()?,
        };
        let input = match doc.get_str(s, "input", match defaults.input {
            InputSpec::Tokens { .. } => "tokens",
            InputSpec::Vectors { .. } => "vectors",
        }).as_str() {
            "tokens" => InputSpec::Tokens {
                vocab_size: doc.get_usize(s, "vocab_size", match defaults.input {
                    InputSpec::Tokens { vocab_size } => vocab_size,
                    _ => 0,
                })?,
            },
            "vectors" => InputSpec::Vectors {
                dim: doc.get_usize(s, "input_dim", match defaults.input {
                    InputSpec::Vectors { dim } => dim,
                    _ => 0,
                })?,
            },
            other => return Err(Error::Config(format!("unknown input kind {other:?}"))),
        };
        let task = match doc.get_str(s, "task", match defaults.task {
            TaskHead::Classifier { .. } => "classifier",
            TaskHead::Regressor { .. } => "regressor",
        }).as_str() {
            "classifier" => {
                let (dc, dh) = match defaults.task {
                    TaskHead::Classifier { classes, mlp_hidden } => (classes, mlp_hidden),
                    _ => (2, defaults.hidden_dim),
                };
                TaskHead::Classifier {
                    classes: doc.get_usize(s, "classes", dc)?,
                    mlp_hidden: doc.get_usize(s, "mlp_hidden", dh)?,
                }
            }
            "regressor" => {
                let dd = match defaults.task {
                    TaskHead::Regressor { out_dim } => out_dim,
                    _ => 1,
                };
                TaskHead::Regressor { out_dim: doc.get_usize(s, "out_dim", dd)? }
            }
            other => return Err(Error::Config(format!("unknown task {other:?}"))),
        };
        let cfg = ModelConfig {
            arch,
            layers: doc.get_usize(s, "layers", defaults.layers)?,
            heads: doc.get_usize(s, "heads", defaults.heads)?,
            hidden_dim: doc.get_usize(s, "hidden_dim", defaults.hidden_dim)?,
            head_dim: doc.get_usize(s, "head_dim", defaults.head_dim)?,
            alpha: doc.get_f64(s, "alpha", defaults.alpha)?,
            candidates,
            use_cls: doc.get_bool(s, "use_cls", defaults.use_cls)?,
            use_positional: doc.get_bool(s, "use_positional", defaults.use_positional)?,
            dropout: doc.get_f64(s, "dropout", defaults.dropout)?,
            input,
            task,
            max_len: doc.get_usize(s, "max_len", defaults.max_len)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Parameter storage ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters in creation order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-graph cache of parameter leaves, so each parameter becomes exactly
/// one node no matter how many layers reference it.
pub struct Binding {
    vars: Vec<Option<Var>>,
    training: bool,
}

impl Binding {
    pub fn new(params: &ParamSet, training: bool) -> Self {
        Binding { vars: vec![None; params.len()], training }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn var(&mut self, g: &mut Graph, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = params.get(id);
        let v = if self.training { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Binding whose slots are pre-bound to existing graph leaves, for
    /// gradient checks that perturb parameters externally. Slot order must
    /// match `ParamId` order.
    pub fn rebound(vars: &[Var]) -> Binding {
        Binding { vars: vars.iter().map(|v| Some(*v)).collect(), training: true }
    }

    /// Gradients per parameter after a backward pass, in `ParamId` order.
    /// Parameters never touched by the forward pass yield `None`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|slot| slot.and_then(|v| g.grad(v).map(|s| s.to_vec())))
            .collect()
    }
}

// ── Attention retention ───────────────────────────────────────────────

/// One head's post-softmax attention rows: `(absolute start, weights)` per
/// query position.
#[derive(Debug, Clone)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Collects attention maps during a forward pass. Retention is opt-in; the
/// encoder skips it (and its copies) when no sink is supplied.
#[derive(Debug, Default)]
pub struct AttentionSink {
    pub heads: Vec<HeadAttention>,
}

impl AttentionSink {
    pub fn new() -> Self {
        Self::default()
    }
}

// ── Encoder ───────────────────────────────────────────────────────────

struct HeadIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    scale: Option<ScaleSpec>,
}

struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

struct LayerIds {
    heads: Vec<HeadIds>,
    wo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    ffn: Option<FfnIds>,
}

enum InputIds {
    Embed(ParamId),
    Project(ParamId),
}

enum TaskIds {
    Classifier { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Regressor { w: ParamId, b: ParamId },
}

/// Model input: token ids or raw feature rows.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    Vectors(&'a Tensor),
}

/// Supervision target matching the task head.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Label(usize),
    Vector(&'a Tensor),
}

/// An encoder stack plus task head with its parameters.
pub struct Encoder {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub plans: Vec<LayerPlan>,
    input: InputIds,
    cls: Option<ParamId>,
    positional: Option<ParamId>,
    layers: Vec<LayerIds>,
    task: TaskIds,
}

impl Encoder {
    /// Builds and initializes a model. Embeddings and the CLS/positional
    /// tables draw from `U(-0.1, 0.1)`; projections from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.hidden_dim;
        let dh = config.head_dim;

        let proj = |rng: &mut StdRng, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Tensor::uniform(vec![rows, cols], -bound, bound, rng)
        };

        let input = match config.input {
            InputSpec::Tokens { vocab_size } => {
                if vocab_size == 0 {
                    return Err(Error::invalid("model config", "vocab_size must be >= 1"));
                }
                let t = Tensor::uniform(vec![vocab_size, d], -0.1, 0.1, &mut rng);
                InputIds::Embed(params.add("embed.table".into(), t))
            }
            InputSpec::Vectors { dim } => {
                if dim == 0 {
                    return Err(Error::invalid("model config", "input_dim must be >= 1"));
                }
                let t = proj(&mut rng, dim, d);
                InputIds::Project(params.add("embed.project".into(), t))
            }
        };
        let cls = config.use_cls.then(|| {
            let t = Tensor::uniform(vec![1, d], -0.1, 0.1, &mut rng);
            params.add("embed.cls".into(), t)
        });
        let positional = config.use_positional.then(|| {
            let t = Tensor::uniform(vec![config.max_len, d], -0.1, 0.1, &mut rng);
            params.add("embed.positional".into(), t)
        });

        let plans = match config.arch {
            Arch::MultiScale => plan_scales(config.alpha, config.layers, config.heads, &config.candidates)?,
            Arch::Vanilla { .. } => Vec::new(),
        };

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let scales: Vec<Option<ScaleSpec>> = match config.arch {
                Arch::MultiScale => plans[l].head_scales().into_iter().map(Some).collect(),
                Arch::Vanilla { .. } => vec![None; config.heads],
            };
            let mut heads = Vec::with_capacity(scales.len());
            for (hidx, scale) in scales.into_iter().enumerate() {
                let prefix = format!("layer{l}.head{hidx}");
                heads.push(HeadIds {
                    wq: params.add(format!("{prefix}.wq"), proj(&mut rng, d, dh)),
                    wk: params.add(format!("{prefix}.wk"), proj(&mut rng, d, dh)),
                    wv: params.add(format!("{prefix}.wv"), proj(&mut rng, d, dh)),
                    scale,
                });
            }
            let concat_dim = heads.len() * dh;
            let wo = params.add(format!("layer{l}.wo"), proj(&mut rng, concat_dim, d));
            let ln_gain = params.add(format!("layer{l}.ln1.gain"), ones(d));
            let ln_bias = params.add(format!("layer{l}.ln1.bias"), Tensor::zeros(vec![d]));
            let ffn = match config.arch {
                Arch::Vanilla { ffn: true } => {
                    let hidden = 4 * d;
                    Some(FfnIds {
                        w1: params.add(format!("layer{l}.ffn.w1"), proj(&mut rng, d, hidden)),
                        b1: params.add(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![hidden])),
                        w2: params.add(format!("layer{l}.ffn.w2"), proj(&mut rng, hidden, d)),
                        b2: params.add(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d])),
                        ln_gain: params.add(format!("layer{l}.ln2.gain"), ones(d)),
                        ln_bias: params.add(format!("layer{l}.ln2.bias"), Tensor::zeros(vec![d])),
                    })
                }
                _ => None,
            };
            layers.push(LayerIds { heads, wo, ln_gain, ln_bias, ffn });
        }

        let rep = config.representation_dim();
        let task = match config.task {
            TaskHead::Classifier { classes, mlp_hidden } => {
                if classes < 2 {
                    return Err(Error::invalid("model config", "classifier needs >= 2 classes"));
                }
                TaskIds::Classifier {
                    w1: params.add("head.w1".into(), proj(&mut rng, rep, mlp_hidden)),
                    b1: params.add("head.b1".into(), Tensor::zeros(vec![mlp_hidden])),
                    w2: params.add("head.w2".into(), proj(&mut rng, mlp_hidden, classes)),
                    b2: params.add("head.b2".into(), Tensor::zeros(vec![classes])),
                }
            }
            TaskHead::Regressor { out_dim } => {
                if out_dim == 0 {
                    return Err(Error::invalid("model config", "regressor needs out_dim >= 1"));
                }
                TaskIds::Regressor {
                    w: params.add("head.w".into(), proj(&mut rng, rep, out_dim)),
                    b: params.add("head.b".into(), Tensor::zeros(vec![out_dim])),
                }
            }
        };

        Ok(Encoder { config, params, plans, input, cls, positional, layers, task })
    }

    /// Runs the stack over one sequence, returning the top hidden states
    /// `[(N + cls) x D]`. The CLS row, when enabled, is position 0 and
    /// counts toward the sequence length that ratio scales resolve against.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        input: Input<'_>,
        mut sink: Option<&mut AttentionSink>,
    ) -> Result<Var> {
        let training = b.training();
        let embedded = match (&self.input, input) {
            (InputIds::Embed(table), Input::Tokens(ids)) => {
                if ids.is_empty() {
                    return Err(Error::Data("empty token sequence".into()));
                }
                let table = b.var(g, &self.params, *table);
                g.embedding(table, ids)?
            }
            (InputIds::Project(w), Input::Vectors(x)) => {
                if x.shape().len() != 2 {
                    return Err(Error::Data(format!("vector input must be rank 2, got {:?}", x.shape())));
                }
                let xv = g.constant(x);
                let w = b.var(g, &self.params, *w);
                g.matmul(xv, w)?
            }
            _ => return Err(Error::Data("input kind does not match model input spec".into())),
        };
        let mut h = match self.cls {
            Some(cls) => {
                let cls = b.var(g, &self.params, cls);
                g.concat_rows(&[cls, embedded])?
            }
            None => embedded,
        };
        let n_total = g.value(h).shape()[0];
        if let Some(pos) = self.positional {
            if n_total > self.config.max_len {
                return Err(Error::Data(format!(
                    "sequence length {n_total} exceeds positional table {}",
                    self.config.max_len
                )));
            }
            let table = b.var(g, &self.params, pos);
            let rows = g.slice_rows(table, 0, n_total)?;
            h = g.add(h, rows)?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            h = match self.config.arch {
                Arch::MultiScale => self.ms_layer(g, b, h, l, layer, training, sink.as_deref_mut())?,
                Arch::Vanilla { ffn } => {
                    self.vanilla_layer(g, b, h, l, layer, ffn, training, sink.as_deref_mut())?
                }
            };
        }
        Ok(h)
    }

    fn head_vars(&self, g: &mut Graph, b: &mut Binding, ids: &HeadIds) -> HeadVars {
        HeadVars {
            wq: b.var(g, &self.params, ids.wq),
            wk: b.var(g, &self.params, ids.wk),
            wv: b.var(g, &self.params, ids.wv),
        }
    }

    fn ms_layer(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        h: Var,
        l: usize,
        layer: &LayerIds,
        training: bool,
        sink: Option<&mut AttentionSink>,
    ) -> Result<Var> {
        let pairs: Vec<(HeadVars, ScaleSpec)> = layer
            .heads
            .iter()
            .map(|ids| (self.head_vars(g, b, ids), ids.scale.expect("multi-scale head has a scale")))
            .collect();
        let wo = b.var(g, &self.params, layer.wo);
        let (proj, head_nodes) = attention::msmsa(g, h, &pairs, wo)?;
        if let Some(sink) = sink {
            for (hidx, node) in head_nodes.iter().enumerate() {
                let rows = g.attention_rows(*node).expect("window attention node");
                sink.heads.push(HeadAttention { layer: l, head: hidx, rows });
            }
        }
        let act = g.relu(proj);
        let act = self.maybe_dropout(g, act, training)?;
        let sum = g.add(h, act)?;
        let gain = b.var(g, &self.params, layer.ln_gain);
        let bias = b.var(g, &self.params, layer.ln_bias);
        g.layer_norm(sum, gain, bias, LAYER_NORM_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn vanilla_layer(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        h: Var,
        l: usize,
        layer: &LayerIds,
        ffn: bool,
        training: bool,
        sink: Option<&mut AttentionSink>,
    ) -> Result<Var> {
        let heads: Vec<HeadVars> = layer.heads.iter().map(|ids| self.head_vars(g, b, ids)).collect();
        let wo = b.var(g, &self.params, layer.wo);
        let (proj, attns) = attention::msa_standard(g, h, &heads, wo)?;
        if let Some(sink) = sink {
            for (hidx, attn) in attns.iter().enumerate() {
                let t = g.value(*attn);
                let rows = (0..t.shape()[0]).map(|j| (0, t.row(j).to_vec())).collect();
                sink.heads.push(HeadAttention { layer: l, head: hidx, rows });
            }
        }
        let gain = b.var(g, &self.params, layer.ln_gain);
        let bias = b.var(g, &self.params, layer.ln_bias);
        if !ffn {
            let act = g.relu(proj);
            let act = self.maybe_dropout(g, act, training)?;
            let sum = g.add(h, act)?;
            return g.layer_norm(sum, gain, bias, LAYER_NORM_EPS);
        }
        let attn_out = self.maybe_dropout(g, proj, training)?;
        let sum = g.add(h, attn_out)?;
        let z = g.layer_norm(sum, gain, bias, LAYER_NORM_EPS)?;
        let f = layer.ffn.as_ref().expect("ffn ids exist when ffn enabled");
        let w1 = b.var(g, &self.params, f.w1);
        let b1 = b.var(g, &self.params, f.b1);
        let w2 = b.var(g, &self.params, f.w2);
        let b2 = b.var(g, &self.params, f.b2);
        let h1 = g.matmul(z, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, w2)?;
        let h2 = g.add(h2, b2)?;
        let h2 = self.maybe_dropout(g, h2, training)?;
        let sum2 = g.add(z, h2)?;
        let gain2 = b.var(g, &self.params, f.ln_gain);
        let bias2 = b.var(g, &self.params, f.ln_bias);
        g.layer_norm(sum2, gain2, bias2, LAYER_NORM_EPS)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, training: bool) -> Result<Var> {
        if training && self.config.dropout > 0.0 {
            g.dropout(x, self.config.dropout, true)
        } else {
            Ok(x)
        }
    }

    /// Task-head output: class logits `[C]` or regression prediction `[d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        input: Input<'_>,
        sink: Option<&mut AttentionSink>,
    ) -> Result<Var> {
        let top = self.encode(g, b, input, sink)?;
        let rep = sentence_representation(g, top, self.config.use_cls)?;
        let rep_dim = g.value(rep).numel();
        let rep = g.reshape(rep, vec![1, rep_dim])?;
        match &self.task {
            TaskIds::Classifier { w1, b1, w2, b2 } => {
                let w1 = b.var(g, &self.params, *w1);
                let b1 = b.var(g, &self.params, *b1);
                let w2 = b.var(g, &self.params, *w2);
                let b2 = b.var(g, &self.params, *b2);
                let h1 = g.matmul(rep, w1)?;
                let h1 = g.add(h1, b1)?;
                let h1 = g.relu(h1);
                let logits = g.matmul(h1, w2)?;
                let logits = g.add(logits, b2)?;
                let c = g.value(logits).numel();
                g.reshape(logits, vec![c])
            }
            TaskIds::Regressor { w, b: bias } => {
                let w = b.var(g, &self.params, *w);
                let bias = b.var(g, &self.params, *bias);
                let out = g.matmul(rep, w)?;
                let out = g.add(out, bias)?;
                let d = g.value(out).numel();
                g.reshape(out, vec![d])
            }
        }
    }

    /// Scalar task loss: cross-entropy for labels, MSE for vectors.
    pub fn loss(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        input: Input<'_>,
        target: Target<'_>,
    ) -> Result<Var> {
        let out = self.forward(g, b, input, None)?;
        match target {
            Target::Label(label) => g.cross_entropy(out, label),
            Target::Vector(t) => g.mse_loss(out, t),
        }
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d]).expect("shape matches data")
}

/// Sentence representation from the top hidden states: with CLS, the
/// concatenation of the CLS row and a max-pool over all rows (CLS
/// included), giving `2D` features; without, the max-pool alone (`D`).
pub fn sentence_representation(g: &mut Graph, h_top: Var, use_cls: bool) -> Result<Var> {
    let pooled = g.max_over_positions(h_top)?;
    if !use_cls {
        return Ok(pooled);
    }
    let d = g.value(pooled).numel();
    let cls = g.slice_rows(h_top, 0, 1)?;
    let cls = g.reshape(cls, vec![d])?;
    g.concat_last(&[cls, pooled])
}

/// Pairwise feature vector `concat(r1, r2, |r1 - r2|, r1 - r2)` for
/// two same-dimension sentence representations. The absolute difference is
/// elementwise, so the output has `4d` features.
pub fn pair_features(g: &mut Graph, r1: Var, r2: Var) -> Result<Var> {
    let (s1, s2) = (g.value(r1).shape().to_vec(), g.value(r2).shape().to_vec());
    if s1 != s2 || s1.len() != 1 {
        return Err(Error::Shape { op: "pair_features", lhs: s1, rhs: s2 });
    }
    let neg_r2 = g.scale(r2, -1.0);
    let diff = g.add(r1, neg_r2)?;
    let neg_diff = g.scale(diff, -1.0);
    let pos_part = g.relu(diff);
    let neg_part = g.relu(neg_diff);
    let abs = g.add(pos_part, neg_part)?;
    g.concat_last(&[r1, r2, abs, diff])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, DEFAULT_H};

    fn vec_config(arch: Arch, layers: usize, heads: usize, scales: Vec<ScaleSpec>) -> ModelConfig {
        ModelConfig {
            arch,
            layers,
            heads,
            hidden_dim: 8,
            head_dim: 4,
            alpha: 0.0,
            candidates: scales,
            use_cls: true,
            use_positional: false,
            dropout: 0.0,
            input: InputSpec::Vectors { dim: 3 },
            task: TaskHead::Regressor { out_dim: 3 },
            max_len: 64,
        }
    }

    fn fixed3() -> Vec<ScaleSpec> {
        vec![ScaleSpec::fixed(3).unwrap()]
    }

    fn sample_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = StdRng::seed_from_u64(seed);
        Tensor::uniform(vec![n, d], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn ms_layer_with_zero_wo_is_layer_norm_of_input() {
        let cfg = vec_config(Arch::MultiScale, 1, 2, fixed3());
        let mut enc = Encoder::new(cfg, 3).unwrap();
        // Zero the output projection: msmsa output becomes 0, relu(0)=0,
        // so the layer reduces to layer_norm(H).
        for (name, t) in enc.params.iter_mut() {
            if name.ends_with(".wo") {
                t.data_mut().fill(0.0);
            }
        }
        let x = sample_input(5, 3, 1);
        let mut g = Graph::new();
        let mut b = Binding::new(&enc.params, false);
        let top = enc.encode(&mut g, &mut b, Input::Vectors(&x), None).unwrap();

        // Reference: embed, prepend CLS, layer_norm.
        let mut g2 = Graph::new();
        let xv = g2.constant(&x);
        let w = g2.constant(enc.params.get(match &enc.input {
            InputIds::Project(p) => *p,
            _ => unreachable!(),
        }));
        let emb = g2.matmul(xv, w).unwrap();
        let cls = g2.constant(enc.params.get(enc.cls.unwrap()));
        let h0 = g2.concat_rows(&[cls, emb]).unwrap();
        let gain = g2.constant(enc.params.get(enc.layers[0].ln_gain));
        let bias = g2.constant(enc.params.get(enc.layers[0].ln_bias));
        let expect = g2.layer_norm(h0, gain, bias, LAYER_NORM_EPS).unwrap();

        assert_eq!(g.value(top).data(), g2.value(expect).data());
    }

    #[test]
    fn encode_preserves_shape_and_adds_cls_row() {
        let cfg = vec_config(Arch::MultiScale, 2, 3, fixed3());
        let enc = Encoder::new(cfg, 5).unwrap();
        for n in [1, 2, 7] {
            let x = sample_input(n, 3, n as u64);
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let top = enc.encode(&mut g, &mut b, Input::Vectors(&x), None).unwrap();
            assert_eq!(g.value(top).shape(), &[n + 1, 8]);
        }
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let cfg = vec_config(Arch::MultiScale, 2, 4, fixed3());
        let enc = Encoder::new(cfg, 11).unwrap();
        let x = sample_input(6, 3, 2);
        let run = || {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let top = enc.encode(&mut g, &mut b, Input::Vectors(&x), None).unwrap();
            g.value(top).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cls_row_reacts_to_any_token_change() {
        // Scales must cover the sequence for the CLS row to see every token:
        // half the heads run at width 3, half at the full window.
        let scales = vec![ScaleSpec::fixed(3).unwrap(), ScaleSpec::ratio(1).unwrap()];
        let mut cfg = vec_config(Arch::MultiScale, 2, 4, scales);
        cfg.input = InputSpec::Tokens { vocab_size: 12 };
        let enc = Encoder::new(cfg, 17).unwrap();
        let base = [3usize, 5, 7, 2, 9, 1];
        let encode_cls = |ids: &[usize]| {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let top = enc.encode(&mut g, &mut b, Input::Tokens(ids), None).unwrap();
            g.value(top).row(0).to_vec()
        };
        let reference = encode_cls(&base);
        for pos in 0..base.len() {
            let mut changed = base;
            changed[pos] = 11;
            let cls = encode_cls(&changed);
            let diff: f64 = cls
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-9, "position {pos} did not influence CLS");
        }
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let mut cfg = vec_config(Arch::MultiScale, 1, 2, fixed3());
        cfg.input = InputSpec::Tokens { vocab_size: 10 };
        let enc = Encoder::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let mut b = Binding::new(&enc.params, false);
        assert!(enc.encode(&mut g, &mut b, Input::Tokens(&[]), None).is_err());
        assert!(enc.encode(&mut g, &mut b, Input::Tokens(&[3, 10]), None).is_err());
        let x = sample_input(3, 3, 0);
        assert!(enc.encode(&mut g, &mut b, Input::Vectors(&x), None).is_err());
    }

    #[test]
    fn vanilla_without_positional_is_permutation_equivariant() {
        let mut cfg = vec_config(Arch::Vanilla { ffn: true }, 2, 2, fixed3());
        cfg.use_cls = false;
        cfg.use_positional = false;
        let enc = Encoder::new(cfg, 23).unwrap();
        let x = sample_input(5, 3, 9);
        let perm = [4usize, 2, 0, 3, 1];
        let mut xp = Tensor::zeros(vec![5, 3]);
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * 3..(dst + 1) * 3].copy_from_slice(x.row(src));
        }
        let encode = |inp: &Tensor| {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let top = enc.encode(&mut g, &mut b, Input::Vectors(inp), None).unwrap();
            g.value(top).data().to_vec()
        };
        let out = encode(&x);
        let outp = encode(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = outp[dst * 8 + c];
                let b = out[src * 8 + c];
                assert!((a - b).abs() <= 1e-12, "row {dst} col {c}");
            }
        }
    }

    #[test]
    fn vanilla_with_positional_is_not_permutation_equivariant() {
        let mut cfg = vec_config(Arch::Vanilla { ffn: true }, 1, 2, fixed3());
        cfg.use_cls = false;
        cfg.use_positional = true;
        let enc = Encoder::new(cfg, 29).unwrap();
        let x = sample_input(4, 3, 13);
        let mut xp = Tensor::zeros(vec![4, 3]);
        let perm = [3usize, 1, 0, 2];
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * 3..(dst + 1) * 3].copy_from_slice(x.row(src));
        }
        let encode = |inp: &Tensor| {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let top = enc.encode(&mut g, &mut b, Input::Vectors(inp), None).unwrap();
            g.value(top).data().to_vec()
        };
        let out = encode(&x);
        let outp = encode(&xp);
        let mut any_diff = false;
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                if (outp[dst * 8 + c] - out[src * 8 + c]).abs() > 1e-9 {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff, "positional embeddings should break equivariance");
    }

    #[test]
    fn ms_layer_grad_check_small() {
        // One layer over a 7x12 hidden state, three heads of width 3/3/5.
        let (n, d, dh) = (7, 12, 4);
        let mut rng = StdRng::seed_from_u64(31);
        let mut leaves = vec![Tensor::uniform(vec![n, d], -1.0, 1.0, &mut rng)];
        for _ in 0..3 {
            for _ in 0..3 {
                leaves.push(Tensor::uniform(vec![d, dh], -0.5, 0.5, &mut rng));
            }
        }
        leaves.push(Tensor::uniform(vec![3 * dh, d], -0.5, 0.5, &mut rng));
        leaves.push(ones(d));
        leaves.push(Tensor::zeros(vec![d]));
        let widths = [3usize, 3, 5];
        let r = grad_check(
            |g, vars| {
                let h = vars[0];
                let pairs: Vec<(HeadVars, ScaleSpec)> = (0..3)
                    .map(|i| {
                        (
                            HeadVars {
                                wq: vars[1 + 3 * i],
                                wk: vars[2 + 3 * i],
                                wv: vars[3 + 3 * i],
                            },
                            ScaleSpec::fixed(widths[i]).unwrap(),
                        )
                    })
                    .collect();
                let wo = vars[10];
                let (proj, _) = attention::msmsa(g, h, &pairs, wo)?;
                let act = g.relu(proj);
                let sum = g.add(h, act)?;
                let normed = g.layer_norm(sum, vars[11], vars[12], LAYER_NORM_EPS)?;
                let sq = g.mul(normed, normed)?;
                Ok(g.sum(sq))
            },
            &leaves,
            DEFAULT_H,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn end_to_end_grad_check_through_task_head() {
        let mut cfg = vec_config(Arch::MultiScale, 2, 2, fixed3());
        cfg.hidden_dim = 6;
        cfg.head_dim = 3;
        cfg.input = InputSpec::Tokens { vocab_size: 9 };
        cfg.task = TaskHead::Classifier { classes: 3, mlp_hidden: 5 };
        let enc = Encoder::new(cfg, 37).unwrap();
        let ids = [1usize, 4, 7, 2];
        let leaves: Vec<Tensor> = enc.params.iter().map(|(_, t)| t.clone()).collect();
        let r = grad_check(
            |g, vars| {
                // Rebind the encoder's parameters to the perturbed leaves.
                let mut b = Binding::rebound(vars);
                enc.loss(g, &mut b, Input::Tokens(&ids), Target::Label(2))
            },
            &leaves,
            DEFAULT_H,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn sentence_representation_shapes_and_cases() {
        let mut g = Graph::new();
        // Single row, CLS off: the representation is that row.
        let single = g.leaf(Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let rep = sentence_representation(&mut g, single, false).unwrap();
        assert_eq!(g.value(rep).data(), &[0.5, -1.0, 2.0, 0.0]);

        // All rows equal: max-pool equals that row.
        let same = g.leaf(Tensor::new(vec![3, 2], vec![0.25, -0.5, 0.25, -0.5, 0.25, -0.5]).unwrap());
        let rep = sentence_representation(&mut g, same, false).unwrap();
        assert_eq!(g.value(rep).data(), &[0.25, -0.5]);

        // With CLS: dim doubles and the first half is the CLS row.
        let h = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 0.0, 6.0]).unwrap());
        let rep = sentence_representation(&mut g, h, true).unwrap();
        assert_eq!(g.value(rep).data(), &[1.0, 2.0, 3.0, 4.0, 2.0, 6.0]);
    }

    #[test]
    fn pair_features_hand_cases() {
        let mut g = Graph::new();
        let r1 = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let r2 = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let p = pair_features(&mut g, r1, r2).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 3.0, 2.0, -2.0]);

        // Swapping flips the sign of the last block, keeps the third.
        let q = pair_features(&mut g, r2, r1).unwrap();
        assert_eq!(g.value(q).data(), &[3.0, 1.0, 2.0, 2.0]);

        // Equal inputs produce zero difference blocks.
        let same = pair_features(&mut g, r1, r1).unwrap();
        assert_eq!(g.value(same).data(), &[1.0, 1.0, 0.0, 0.0]);

        // Dimension mismatch is an error.
        let r3 = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(pair_features(&mut g, r1, r3).is_err());
    }

    #[test]
    fn config_doc_roundtrip() {
        let cfg = vec_config(Arch::MultiScale, 3, 10, vec![
            ScaleSpec::fixed(3).unwrap(),
            ScaleSpec::ratio(16).unwrap(),
            ScaleSpec::ratio(2).unwrap(),
        ]);
        let mut doc = ConfigDoc::new();
        cfg.to_doc(&mut doc);
        let parsed = ConfigDoc::parse(&doc.to_text()).unwrap();
        let back = ModelConfig::from_doc(&parsed, &cfg).unwrap();
        assert_eq!(back, cfg);
    }
}
