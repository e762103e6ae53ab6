//! Named parameters and the forward computation for every variant.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_embeddings::{random_table, AttributeEmbeddingTable};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{TrainConfig, Variant};
use crate::corpus::{span_text, AttributeVocab, LabeledExample, Token};
use crate::crf;
use crate::decoder::{
    emissions_graph, gate_graph, generate_linear_graph, mix_transition_graph, DecoderInstance,
    HyperVars, MoeVars, LABELS,
};
use crate::encoder::{bilstm_graph, init_word_table, CellVars, StaticVectors, WordVocab, GATES};
use crate::error::{Error, Result};
use crate::tagging::{tags_to_spans, ExpandedTagSet, TagSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Word embeddings and BiLSTM weights.
    Encoder,
    /// Hypernetwork producing the emission layer.
    Hyper,
    /// Gate and expert transition matrices.
    Moe,
    /// Attribute embedding table.
    Attribute,
    /// Directly learned CRF decoders of the baseline variants.
    Decoder,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Hyper => "hyper",
            Group::Moe => "moe",
            Group::Attribute => "attribute",
            Group::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Words,
    Attributes,
    Uniform(f64),
}

/// Name, group and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, param: Param) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Data(format!("duplicate parameter `{}`", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    /// Copy with every tensor rounded to the nearest `f32`.
    pub fn rounded_to_f32(&self) -> ParamStore {
        let mut out = self.clone();
        for p in &mut out.params {
            p.value = p.value.round_to_f32();
        }
        out
    }

    /// Per-parameter flag: not frozen and accepted by `filter`.
    pub fn trainable_mask(&self, filter: impl Fn(&Param) -> bool) -> Vec<bool> {
        self.params.iter().map(|p| !p.frozen && filter(p)).collect()
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::from_entries(
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.group, p.value.shape().to_vec(), p.frozen)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub elements: usize,
    pub frozen: bool,
}

/// Element counts per tensor and per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub groups: BTreeMap<String, usize>,
    pub tensors: Vec<TensorCount>,
}

impl ParamCount {
    fn from_entries(entries: impl Iterator<Item = (String, Group, Vec<usize>, bool)>) -> Self {
        let mut count = ParamCount {
            total: 0,
            trainable: 0,
            groups: BTreeMap::new(),
            tensors: Vec::new(),
        };
        for (name, group, shape, frozen) in entries {
            let elements = shape.iter().product();
            count.total += elements;
            if !frozen {
                count.trainable += elements;
            }
            *count.groups.entry(group.as_str().to_string()).or_default() += elements;
            count.tensors.push(TensorCount {
                name,
                group,
                shape,
                elements,
                frozen,
            });
        }
        count
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorCount> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self
            .tensors
            .iter()
            .map(|t| t.name.len())
            .max()
            .unwrap_or(4)
            .max(6);
        let mut out = String::new();
        for t in &self.tensors {
            out += &format!(
                "{:<width$}  {:<9}  {:>12}  {:?}{}\n",
                t.name,
                t.group.as_str(),
                t.elements,
                t.shape,
                if t.frozen { "  (frozen)" } else { "" }
            );
        }
        out += "\n";
        for (g, n) in &self.groups {
            out += &format!("{:<width$}  {:>23}\n", g, n);
        }
        out += &format!("{:<width$}  {:>23}\n", "total", self.total);
        out += &format!("{:<width$}  {:>23}\n", "trainable", self.trainable);
        out
    }
}

/// Parameter names, groups and shapes for a configuration. Attribute ids
/// prefix the names of per-attribute tensors.
pub fn param_specs(
    config: &TrainConfig,
    n_words: usize,
    attributes: &AttributeVocab,
    d_r: usize,
) -> Vec<ParamSpec> {
    let hidden = config.d_h / 2;
    let lstm_scale = 1.0 / ((config.d_word + hidden) as f64).sqrt();
    let mut specs = Vec::new();
    let mut push = |name: String, group: Group, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name,
            group,
            shape,
            init,
        })
    };
    let word = |push: &mut dyn FnMut(String, Group, Vec<usize>, Init), prefix: &str| {
        push(
            format!("{prefix}.word"),
            Group::Encoder,
            vec![n_words, config.d_word],
            Init::Words,
        )
    };
    let lstm = |push: &mut dyn FnMut(String, Group, Vec<usize>, Init), prefix: &str| {
        for dir in ["fwd", "bwd"] {
            for gate in GATES {
                push(
                    format!("{prefix}.{dir}.w_{gate}"),
                    Group::Encoder,
                    vec![hidden, config.d_word + hidden],
                    Init::Uniform(lstm_scale),
                );
                push(
                    format!("{prefix}.{dir}.b_{gate}"),
                    Group::Encoder,
                    vec![hidden],
                    Init::Uniform(lstm_scale),
                );
            }
        }
    };
    let fixed =
        |push: &mut dyn FnMut(String, Group, Vec<usize>, Init), prefix: &str, labels: usize| {
            let s = 1.0 / (config.d_h as f64).sqrt();
            let st = 1.0 / (labels as f64).sqrt();
            push(
                format!("{prefix}.weight"),
                Group::Decoder,
                vec![labels, config.d_h],
                Init::Uniform(s),
            );
            push(
                format!("{prefix}.bias"),
                Group::Decoder,
                vec![labels],
                Init::Uniform(s),
            );
            push(
                format!("{prefix}.transitions"),
                Group::Decoder,
                vec![labels, labels],
                Init::Uniform(st),
            );
        };

    let ids = attributes.ids();
    match config.variant {
        Variant::Adatag | Variant::AdatagRandomEmb => {
            word(&mut push, "encoder");
            lstm(&mut push, "encoder");
            let sr = 1.0 / (d_r as f64).sqrt();
            push(
                "attribute.table".into(),
                Group::Attribute,
                vec![ids.len(), d_r],
                Init::Attributes,
            );
            push(
                "hyper.weight_w".into(),
                Group::Hyper,
                vec![LABELS * config.d_h, d_r],
                Init::Uniform(sr),
            );
            push(
                "hyper.weight_b".into(),
                Group::Hyper,
                vec![LABELS * config.d_h],
                Init::Uniform(sr),
            );
            push(
                "hyper.bias_w".into(),
                Group::Hyper,
                vec![LABELS, d_r],
                Init::Uniform(sr),
            );
            push(
                "hyper.bias_b".into(),
                Group::Hyper,
                vec![LABELS],
                Init::Uniform(sr),
            );
            push(
                "moe.gate_w".into(),
                Group::Moe,
                vec![config.k, d_r],
                Init::Uniform(sr),
            );
            push(
                "moe.gate_b".into(),
                Group::Moe,
                vec![config.k],
                Init::Uniform(sr),
            );
            push(
                "moe.experts".into(),
                Group::Moe,
                vec![config.k, LABELS, LABELS],
                Init::Uniform(1.0 / (LABELS as f64).sqrt()),
            );
        }
        Variant::BilstmMulticrf => {
            word(&mut push, "encoder");
            lstm(&mut push, "encoder");
            for id in ids {
                fixed(&mut push, &format!("{id}/decoder"), LABELS);
            }
        }
        Variant::NTagSets => {
            word(&mut push, "encoder");
            lstm(&mut push, "encoder");
            fixed(&mut push, "decoder", 3 * ids.len() + 1);
        }
        Variant::PerAttribute => {
            for id in ids {
                word(&mut push, &format!("{id}/encoder"));
                lstm(&mut push, &format!("{id}/encoder"));
                fixed(&mut push, &format!("{id}/decoder"), LABELS);
            }
        }
        Variant::BilstmCrfSharedEmb => {
            word(&mut push, "encoder");
            for id in ids {
                lstm(&mut push, &format!("{id}/encoder"));
                fixed(&mut push, &format!("{id}/decoder"), LABELS);
            }
        }
    }
    specs
}

/// Counts for a configuration without building the model.
pub fn count_config(
    config: &TrainConfig,
    n_words: usize,
    attributes: &AttributeVocab,
) -> ParamCount {
    ParamCount::from_entries(
        param_specs(config, n_words, attributes, config.d_r)
            .into_iter()
            .map(|s| {
                let frozen = s.init == Init::Attributes && config.variant == Variant::Adatag;
                (s.name, s.group, s.shape, frozen)
            }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellIdx {
    weights: [usize; 4],
    biases: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StackIdx {
    word: usize,
    forward: CellIdx,
    backward: CellIdx,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum HeadIdx {
    Adaptive {
        table: usize,
        hyper: [usize; 4],
        moe: [usize; 3],
    },
    Fixed {
        weight: usize,
        bias: usize,
        transitions: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stacks: Vec<StackIdx>,
    heads: Vec<HeadIdx>,
    expanded: Option<ExpandedTagSet>,
}

impl Layout {
    fn resolve(variant: Variant, store: &ParamStore, attributes: &AttributeVocab) -> Result<Self> {
        let idx = |name: String| {
            store
                .index_of(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        let cell = |prefix: &str| -> Result<CellIdx> {
            let mut weights = [0; 4];
            let mut biases = [0; 4];
            for (k, gate) in GATES.iter().enumerate() {
                weights[k] = idx(format!("{prefix}.w_{gate}"))?;
                biases[k] = idx(format!("{prefix}.b_{gate}"))?;
            }
            Ok(CellIdx { weights, biases })
        };
        let stack = |word: &str, lstm: &str| -> Result<StackIdx> {
            Ok(StackIdx {
                word: idx(format!("{word}.word"))?,
                forward: cell(&format!("{lstm}.fwd"))?,
                backward: cell(&format!("{lstm}.bwd"))?,
            })
        };
        let fixed = |prefix: &str| -> Result<HeadIdx> {
            Ok(HeadIdx::Fixed {
                weight: idx(format!("{prefix}.weight"))?,
                bias: idx(format!("{prefix}.bias"))?,
                transitions: idx(format!("{prefix}.transitions"))?,
            })
        };
        let mut stacks = Vec::new();
        let mut heads = Vec::new();
        let mut expanded = None;
        for id in attributes.ids() {
            let (s, h) = match variant {
                Variant::Adatag | Variant::AdatagRandomEmb => (
                    stack("encoder", "encoder")?,
                    HeadIdx::Adaptive {
                        table: idx("attribute.table".into())?,
                        hyper: [
                            idx("hyper.weight_w".into())?,
                            idx("hyper.weight_b".into())?,
                            idx("hyper.bias_w".into())?,
                            idx("hyper.bias_b".into())?,
                        ],
                        moe: [
                            idx("moe.gate_w".into())?,
                            idx("moe.gate_b".into())?,
                            idx("moe.experts".into())?,
                        ],
                    },
                ),
                Variant::BilstmMulticrf => (
                    stack("encoder", "encoder")?,
                    fixed(&format!("{id}/decoder"))?,
                ),
                Variant::NTagSets => (stack("encoder", "encoder")?, fixed("decoder")?),
                Variant::PerAttribute => {
                    let p = format!("{id}/encoder");
                    (stack(&p, &p)?, fixed(&format!("{id}/decoder"))?)
                }
                Variant::BilstmCrfSharedEmb => (
                    stack("encoder", &format!("{id}/encoder"))?,
                    fixed(&format!("{id}/decoder"))?,
                ),
            };
            stacks.push(s);
            heads.push(h);
        }
        if variant == Variant::NTagSets {
            expanded = Some(ExpandedTagSet::new(attributes.ids().to_vec())?);
        }
        Ok(Layout {
            stacks,
            heads,
            expanded,
        })
    }
}

/// One training sequence: token rows and gold label indices. `attribute`
/// is `None` for the expanded tag set, where one sequence covers all
/// attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub attribute: Option<usize>,
    pub words: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub words: WordVocab,
    pub attributes: AttributeVocab,
    pub params: ParamStore,
    /// Training examples with at least one value, per attribute.
    pub train_counts: BTreeMap<String, usize>,
    layout: Layout,
}

impl Model {
    /// Freshly initialized model. Adaptive variants take their attribute
    /// vectors from `table` (`adatag`) or draw a random trainable table
    /// (`adatag_random_emb`). Every tensor starts at `f32` precision.
    pub fn new(
        config: &TrainConfig,
        words: WordVocab,
        attributes: AttributeVocab,
        vectors: Option<&StaticVectors>,
        table: Option<&AttributeEmbeddingTable>,
    ) -> Result<Model> {
        config.validate()?;
        let mut config = config.clone();
        let attributes = match &config.attributes {
            Some(keep) => attributes.restrict(keep)?,
            None => attributes,
        };
        if attributes.is_empty() {
            return Err(Error::Config("no attributes to model".into()));
        }
        let table = match config.variant {
            Variant::Adatag => Some(table.cloned().ok_or_else(|| {
                Error::Config("variant adatag needs an attribute embedding table".into())
            })?),
            Variant::AdatagRandomEmb => Some(random_table(&attributes, config.d_r, config.seed)?),
            _ => None,
        };
        if let Some(t) = &table {
            config.d_r = t.d_r();
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        for spec in param_specs(&config, words.len(), &attributes, config.d_r) {
            let (value, frozen) = match spec.init {
                Init::Words => (
                    init_word_table(&words, config.d_word, vectors, &mut rng)?,
                    false,
                ),
                Init::Attributes => {
                    let t = table.as_ref().expect("adaptive variants have a table");
                    (t.to_tensor(&attributes)?, t.frozen())
                }
                Init::Uniform(s) => (Tensor::uniform(&spec.shape, s, &mut rng), false),
            };
            store.push(Param {
                name: spec.name,
                group: spec.group,
                value: value.round_to_f32(),
                frozen,
            })?;
        }
        Model::from_parts(config, words, attributes, store, BTreeMap::new())
    }

    /// Assembles a model from stored parts, checking every tensor against
    /// the shapes the configuration implies.
    pub fn from_parts(
        config: TrainConfig,
        words: WordVocab,
        attributes: AttributeVocab,
        params: ParamStore,
        train_counts: BTreeMap<String, usize>,
    ) -> Result<Model> {
        let specs = param_specs(&config, words.len(), &attributes, config.d_r);
        if specs.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(params.params()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let layout = Layout::resolve(config.variant, &params, &attributes)?;
        Ok(Model {
            layout,
            config,
            words,
            attributes,
            params,
            train_counts,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn count(&self) -> ParamCount {
        self.params.count()
    }

    /// Registers every parameter in `g`: as a differentiable leaf where
    /// `trainable` says so, otherwise as a constant.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: Option<&[bool]>) -> Vec<Var> {
        self.params
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| match trainable {
                Some(mask) if mask[i] => g.leaf(&p.value),
                _ => g.constant_ref(&p.value),
            })
            .collect()
    }

    pub fn attribute_index(&self, attribute: &str) -> Result<usize> {
        self.attributes
            .index_of(attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    /// Converts labeled examples into training sequences. The expanded tag
    /// set merges all examples sharing an id and text into one sequence.
    pub fn instances(&self, examples: &[LabeledExample]) -> Result<Vec<Instance>> {
        let Some(expanded) = &self.layout.expanded else {
            return examples
                .iter()
                .map(|ex| {
                    Ok(Instance {
                        id: ex.id.clone(),
                        attribute: Some(self.attribute_index(&ex.attribute)?),
                        words: self.words.lookup_all(&ex.token_texts()),
                        labels: ex.tags.indices(),
                    })
                })
                .collect();
        };
        let mut grouped: BTreeMap<(&str, &str), Vec<&LabeledExample>> = BTreeMap::new();
        for ex in examples {
            self.attribute_index(&ex.attribute)?;
            grouped.entry((&ex.id, &ex.text)).or_default().push(ex);
        }
        let mut dropped = 0;
        let mut out = Vec::with_capacity(grouped.len());
        for ((id, _), group) in grouped {
            let n = group[0].tokens.len();
            let parts: Vec<(usize, &TagSeq)> = group
                .iter()
                .map(|ex| {
                    (
                        self.attributes.index_of(&ex.attribute).expect("checked"),
                        &ex.tags,
                    )
                })
                .collect();
            let (labels, d) = expanded.merge(n, &parts)?;
            dropped += d;
            out.push(Instance {
                id: id.to_string(),
                attribute: None,
                words: self.words.lookup_all(&group[0].token_texts()),
                labels,
            });
        }
        if dropped > 0 {
            log::warn!("{dropped} overlapping spans dropped while merging tag sets");
        }
        Ok(out)
    }

    fn encode<'p>(
        &self,
        g: &mut Graph<'p>,
        vars: &[Var],
        stack: &StackIdx,
        words: &[usize],
    ) -> Result<Vec<Var>> {
        let cell = |c: &CellIdx| CellVars {
            weights: c.weights.map(|i| vars[i]),
            biases: c.biases.map(|i| vars[i]),
        };
        let x = g.gather(vars[stack.word], words)?;
        let xs = (0..words.len())
            .map(|i| g.row(x, i))
            .collect::<Result<Vec<_>>>()?;
        bilstm_graph(g, &cell(&stack.forward), &cell(&stack.backward), &xs)
    }

    fn head<'p>(
        &self,
        g: &mut Graph<'p>,
        vars: &[Var],
        head: &HeadIdx,
        attribute: usize,
    ) -> Result<(Var, Var, Var)> {
        match *head {
            HeadIdx::Adaptive { table, hyper, moe } => {
                let r = g.row(vars[table], attribute)?;
                let hv = HyperVars {
                    weight_w: vars[hyper[0]],
                    weight_b: vars[hyper[1]],
                    bias_w: vars[hyper[2]],
                    bias_b: vars[hyper[3]],
                };
                let mv = MoeVars {
                    gate_w: vars[moe[0]],
                    gate_b: vars[moe[1]],
                    experts: vars[moe[2]],
                };
                let (w, b) = generate_linear_graph(g, &hv, r)?;
                let lambda = gate_graph(g, &mv, r)?;
                let t = mix_transition_graph(g, mv.experts, lambda)?;
                Ok((w, b, t))
            }
            HeadIdx::Fixed {
                weight,
                bias,
                transitions,
            } => Ok((vars[weight], vars[bias], vars[transitions])),
        }
    }

    /// Records the CRF negative log-likelihood of one instance. `vars` are
    /// the parameter handles in store order, as returned by [`Model::bind`].
    pub fn loss_graph<'p>(
        &self,
        g: &mut Graph<'p>,
        vars: &[Var],
        instance: &Instance,
    ) -> Result<Var> {
        let layout = &self.layout;
        let a = instance.attribute.unwrap_or(0);
        if a >= layout.stacks.len() {
            return Err(Error::UnknownAttribute(format!("#{a}")));
        }
        if instance.words.is_empty() {
            return Err(Error::Data(format!(
                "example `{}` has no tokens",
                instance.id
            )));
        }
        let hs = self.encode(g, vars, &layout.stacks[a], &instance.words)?;
        let (w, b, t) = self.head(g, vars, &layout.heads[a], a)?;
        let e = emissions_graph(g, &hs, w, b)?;
        crf::nll_op(g, e, t, &instance.labels)
    }

    /// Negative log-likelihood of one instance, without gradients.
    pub fn nll(&self, instance: &Instance) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, None);
        let loss = self.loss_graph(&mut g, &vars, instance)?;
        Ok(g.scalar(loss))
    }

    /// Inference handle with every attribute's decoder generated up front.
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        let layout = &self.layout;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, None);
        let n_heads = if layout.expanded.is_some() {
            1
        } else {
            layout.heads.len()
        };
        let mut heads = Vec::with_capacity(n_heads);
        for a in 0..n_heads {
            let (w, b, t) = self.head(&mut g, &vars, &layout.heads[a], a)?;
            heads.push(DecoderInstance {
                weight: g.value(w).clone(),
                bias: g.value(b).clone(),
                transitions: g.value(t).clone(),
            });
        }
        Ok(Predictor { model: self, heads })
    }
}

/// Read-only inference over a model; safe to share across threads.
pub struct Predictor<'m> {
    model: &'m Model,
    heads: Vec<DecoderInstance>,
}

impl Predictor<'_> {
    pub fn model(&self) -> &Model {
        self.model
    }

    /// Cached decoder of an attribute (the shared one for the expanded tag set).
    pub fn decoder(&self, attribute: &str) -> Result<&DecoderInstance> {
        let a = self.model.attribute_index(attribute)?;
        Ok(&self.heads[if self.model.layout.expanded.is_some() {
            0
        } else {
            a
        }])
    }

    /// Encoder output `[n, d_h]` for the attribute's encoder stack.
    pub fn encode<S: AsRef<str>>(&self, attribute: &str, tokens: &[S]) -> Result<Tensor> {
        let a = self.model.attribute_index(attribute)?;
        let words = self.model.words.lookup_all(tokens);
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, None);
        let hs = self
            .model
            .encode(&mut g, &vars, &self.model.layout.stacks[a], &words)?;
        let d_h = self.model.config.d_h;
        let data = hs
            .iter()
            .flat_map(|&h| g.value(h).data().to_vec())
            .collect();
        Tensor::matrix(hs.len(), d_h, data)
    }

    /// Viterbi tags for one attribute.
    pub fn predict_tags<S: AsRef<str>>(&self, attribute: &str, tokens: &[S]) -> Result<TagSeq> {
        let a = self.model.attribute_index(attribute)?;
        if tokens.is_empty() {
            return Ok(TagSeq::all_outside(0));
        }
        let hidden = self.encode(attribute, tokens)?;
        let (labels, _) = self.decoder(attribute)?.decode(&hidden)?;
        match &self.model.layout.expanded {
            Some(expanded) => Ok(expanded.project(&labels, a)),
            None => TagSeq::from_indices(&labels),
        }
    }

    /// Predicted value strings (span tokens joined by single spaces).
    pub fn extract(&self, attribute: &str, tokens: &[Token]) -> Result<BTreeSet<String>> {
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let tags = self.predict_tags(attribute, &texts)?;
        Ok(tags_to_spans(&tags)
            .into_iter()
            .map(|s| span_text(tokens, s))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute_embeddings::Provenance;
    use crate::autodiff::log_sum_exp;

    fn vocab(n: usize) -> AttributeVocab {
        let ids: Vec<String> = (0..n).map(|i| format!("Attr{i}")).collect();
        AttributeVocab::from_ids(&ids).unwrap()
    }

    fn table(attrs: &AttributeVocab, d_r: usize) -> AttributeEmbeddingTable {
        let entries = attrs
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| {
                (
                    id.clone(),
                    (0..d_r).map(|j| ((i * 7 + j) as f64).sin()).collect(),
                )
            })
            .collect();
        AttributeEmbeddingTable::new(Provenance::Uncontextualized, true, entries).unwrap()
    }

    fn small(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            d_h: 4,
            d_word: 3,
            k: 2,
            d_r: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_hypernetwork_size() {
        let c = count_config(&TrainConfig::default(), 100, &vocab(12));
        assert_eq!(c.tensor("hyper.weight_w").unwrap().elements, 1_228_800);
        assert_eq!(c.tensor("moe.experts").unwrap().elements, 48);
        assert_eq!(c.groups["attribute"], 12 * 1536);
        assert!(c.tensor("attribute.table").unwrap().frozen);
        assert_eq!(c.total - c.trainable, 12 * 1536);
    }

    #[test]
    fn expanded_tag_set_transition_size() {
        let c = count_config(&small(Variant::NTagSets), 10, &vocab(12));
        assert_eq!(c.tensor("decoder.transitions").unwrap().shape, vec![37, 37]);
        assert_eq!(c.tensor("decoder.transitions").unwrap().elements, 1369);
    }

    #[test]
    fn multicrf_has_one_encoder_and_a_decoder_per_attribute() {
        let c = count_config(&small(Variant::BilstmMulticrf), 10, &vocab(2));
        let decoders: Vec<&str> = c
            .tensors
            .iter()
            .filter(|t| t.group == Group::Decoder)
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(
            decoders,
            [
                "Attr0/decoder.weight",
                "Attr0/decoder.bias",
                "Attr0/decoder.transitions",
                "Attr1/decoder.weight",
                "Attr1/decoder.bias",
                "Attr1/decoder.transitions"
            ]
        );
        assert_eq!(
            c.tensors
                .iter()
                .filter(|t| t.name.ends_with(".word"))
                .count(),
            1
        );
        assert_eq!(
            c.tensors
                .iter()
                .filter(|t| t.name.ends_with("fwd.w_i"))
                .count(),
            1
        );
    }

    #[test]
    fn adatag_groups_are_encoder_hyper_moe_plus_frozen_table() {
        let attrs = vocab(2);
        let words = WordVocab::new(["a", "b"]);
        let m = Model::new(
            &small(Variant::Adatag),
            words,
            attrs.clone(),
            None,
            Some(&table(&attrs, 5)),
        )
        .unwrap();
        let groups: BTreeSet<&str> = m
            .params
            .params()
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.group.as_str())
            .collect();
        assert_eq!(groups, ["encoder", "hyper", "moe"].into_iter().collect());
        assert!(m.params.get("attribute.table").unwrap().frozen);
    }

    #[test]
    fn separate_stacks_per_attribute() {
        let c = count_config(&small(Variant::PerAttribute), 10, &vocab(2));
        assert_eq!(
            c.tensors
                .iter()
                .filter(|t| t.name.ends_with(".word"))
                .count(),
            2
        );
        let c = count_config(&small(Variant::BilstmCrfSharedEmb), 10, &vocab(2));
        assert_eq!(
            c.tensors
                .iter()
                .filter(|t| t.name.ends_with(".word"))
                .count(),
            1
        );
        assert_eq!(
            c.tensors
                .iter()
                .filter(|t| t.name.ends_with("fwd.w_i"))
                .count(),
            2
        );
    }

    #[test]
    fn adatag_requires_a_table() {
        let err = Model::new(
            &small(Variant::Adatag),
            WordVocab::new(["a"]),
            vocab(1),
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_model_gives_uniform_crf() {
        for variant in Variant::ALL {
            let attrs = vocab(2);
            let mut m = Model::new(
                &small(variant),
                WordVocab::new(["a", "b"]),
                attrs.clone(),
                None,
                Some(&table(&attrs, 5)),
            )
            .unwrap();
            for i in 0..m.params.len() {
                let v = m.params.value_mut(i);
                *v = Tensor::zeros(v.shape());
            }
            let labels = if variant == Variant::NTagSets { 7 } else { 4 };
            let inst = Instance {
                id: "x".into(),
                attribute: if variant == Variant::NTagSets {
                    None
                } else {
                    Some(1)
                },
                words: vec![2, 3],
                labels: vec![0, labels - 1],
            };
            let expected = log_sum_exp(&vec![0.0; labels * labels]);
            assert!(
                (m.nll(&inst).unwrap() - expected).abs() < 1e-12,
                "{variant}"
            );
        }
        let four = 16f64.ln();
        assert!((four - 2.772589).abs() < 1e-6);
    }

    #[test]
    fn predictor_extracts_through_decoder() {
        let attrs = vocab(2);
        let m = Model::new(
            &small(Variant::Adatag),
            WordVocab::new(["dry", "skin"]),
            attrs.clone(),
            None,
            Some(&table(&attrs, 5)),
        )
        .unwrap();
        let p = m.predictor().unwrap();
        let tags = p.predict_tags("Attr0", &["dry", "skin"]).unwrap();
        assert_eq!(tags.len(), 2);
        assert!(p.predict_tags("Nope", &["dry"]).is_err());
        assert_eq!(p.predict_tags("Attr1", &[] as &[&str]).unwrap().len(), 0);
    }
}
