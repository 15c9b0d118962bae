//! STEER and STEER+ classifiers.
//!
//! Token, position and turn embeddings are each projected to `d_model` and
//! summed. STEER+ appends one extra position per parse-tree node of the
//! context turn (or a single pooled position) after the query, with segment
//! id 2 and no positional embedding. A post-norm encoder stack, masked mean
//! pooling and a linear head produce two logits: follow-up, steering.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use steer_nn::{
    par, Bags, DropoutRng, Embedding, EncoderLayer, Graph, Linear, ParamStore, Scalar, SeqLayout,
    Tensor, Var,
};

use crate::error::{Result, SteerError};
use crate::sampler::{Label, LabeledPair};
use crate::seeds;
use crate::spt::{self, LinearizedSpt, NodeVocabulary, SptCaps};
use crate::textproc::{tokenize, TokenVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "steer")]
    Steer,
    #[serde(rename = "steer+")]
    SteerPlus,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Steer => "steer",
            Variant::SteerPlus => "steer+",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Steer => "STEER",
            Variant::SteerPlus => "STEER+",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = SteerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "steer" => Ok(Variant::Steer),
            "steer+" | "steer_plus" | "steerplus" => Ok(Variant::SteerPlus),
            other => Err(SteerError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// How node, depth and sibling embeddings become one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SptCombine {
    /// Sum the three (equal-width) embeddings, then project.
    Sum,
    /// Concatenate, then project; computed as a sum of per-part projections.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SptFusion {
    /// One appended position per node.
    PerNode,
    /// All node vectors averaged into a single appended position.
    PooledSingle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub max_spt_nodes: usize,
    pub dropout: f64,
    pub token_vocab_size: usize,
    pub node_vocab_size: usize,
    pub depth_cap: usize,
    pub sibling_cap: usize,
    pub clamp_spt: bool,
    pub token_dim: usize,
    pub position_dim: usize,
    pub turn_dim: usize,
    pub node_dim: usize,
    pub depth_dim: usize,
    pub sibling_dim: usize,
    pub spt_combine: SptCombine,
    pub spt_fusion: SptFusion,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Steer,
            num_layers: 4,
            d_model: 128,
            num_heads: 8,
            ffn_dim: 512,
            max_seq_len: 64,
            max_spt_nodes: 32,
            dropout: 0.1,
            token_vocab_size: 2,
            node_vocab_size: 2,
            depth_cap: spt::DEFAULT_CAP,
            sibling_cap: spt::DEFAULT_CAP,
            clamp_spt: true,
            token_dim: 128,
            position_dim: 128,
            turn_dim: 128,
            node_dim: 128,
            depth_dim: 128,
            sibling_dim: 128,
            spt_combine: SptCombine::Sum,
            spt_fusion: SptFusion::PerNode,
        }
    }
}

pub const NUM_TURN_IDS: usize = 3;
pub const SPT_SEGMENT: usize = 2;
pub const NUM_CLASSES: usize = 2;

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SteerError::Config(m));
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return err(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.max_seq_len < 2 {
            return err("layers, ffn_dim and max_seq_len (>= 2) must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if self.token_vocab_size < 2 || self.node_vocab_size < 2 {
            return err("vocabularies must include the reserved ids".into());
        }
        let dims = [
            self.token_dim,
            self.position_dim,
            self.turn_dim,
            self.node_dim,
            self.depth_dim,
            self.sibling_dim,
        ];
        if dims.contains(&0) || self.depth_cap == 0 || self.sibling_cap == 0 {
            return err("embedding dims and caps must be positive".into());
        }
        if self.variant == Variant::SteerPlus
            && self.spt_combine == SptCombine::Sum
            && !(self.node_dim == self.depth_dim && self.depth_dim == self.sibling_dim)
        {
            return err("SUM combine needs equal node, depth and sibling dims".into());
        }
        Ok(())
    }

    fn caps(&self) -> SptCaps {
        SptCaps {
            depth: self.depth_cap,
            sibling: self.sibling_cap,
            clamp: self.clamp_spt,
        }
    }
}

/// Closed-form number of scalar parameters for `c`.
pub fn parameter_count(c: &SteerConfig) -> usize {
    let d = c.d_model;
    let f = c.ffn_dim;
    let inputs = c.token_vocab_size * c.token_dim
        + c.max_seq_len * c.position_dim
        + NUM_TURN_IDS * c.turn_dim
        + (c.token_dim + c.position_dim + c.turn_dim) * d;
    // Q, K, V, O with biases; two FFN maps with biases; two norms.
    let layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
    let head = d * NUM_CLASSES + NUM_CLASSES;
    let spt = match c.variant {
        Variant::Steer => 0,
        Variant::SteerPlus => {
            let tables = c.node_vocab_size * c.node_dim
                + c.depth_cap * c.depth_dim
                + c.sibling_cap * c.sibling_dim;
            let proj = match c.spt_combine {
                SptCombine::Sum => c.node_dim * d,
                SptCombine::ConcatProject => (c.node_dim + c.depth_dim + c.sibling_dim) * d,
            };
            tables + proj
        }
    };
    inputs + c.num_layers * layer + head + spt
}

/// Token and node vocabularies a model is bound to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub tokens: TokenVocab,
    pub nodes: NodeVocabulary,
}

impl Vocabs {
    /// Builds both vocabularies from training pairs, in pair order.
    pub fn build(pairs: &[LabeledPair], min_count: usize) -> Result<Self> {
        let token_seqs: Vec<Vec<String>> = pairs
            .iter()
            .flat_map(|p| [tokenize(&p.context_text), tokenize(&p.followup_text)])
            .collect();
        let tokens = TokenVocab::build(token_seqs.iter().map(Vec::as_slice), min_count)?;
        let mut nodes = NodeVocabulary::new();
        for p in pairs {
            if let Some(src) = &p.context_spt {
                for (n, _, _) in spt::parse(src)?.preorder() {
                    nodes.insert(&n.label);
                }
            }
        }
        Ok(Self { tokens, nodes })
    }
}

/// Model-ready indices for one pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputSequence {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub turn_ids: Vec<usize>,
    pub spt: Option<LinearizedSpt>,
}

impl InputSequence {
    pub fn query_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Number of appended parse-tree positions under `fusion`.
    pub fn spt_positions(&self, fusion: SptFusion) -> usize {
        match (&self.spt, fusion) {
            (None, _) => 0,
            (Some(l), _) if l.is_empty() => 0,
            (Some(_), SptFusion::PooledSingle) => 1,
            (Some(l), SptFusion::PerNode) => l.len(),
        }
    }
}

/// Tokenizes and indexes a pair. The context is kept whole when it fits; the
/// follow-up is cut from the right to fit `max_seq_len`, keeping at least one
/// token. A context longer than `max_seq_len - 1` keeps its last tokens.
pub fn encode_inputs(pair: &LabeledPair, vocabs: &Vocabs, config: &SteerConfig) -> Result<InputSequence> {
    let mut ctx = tokenize(&pair.context_text);
    let mut fol = tokenize(&pair.followup_text);
    if ctx.is_empty() {
        return Err(SteerError::Contract("context has no tokens".into()));
    }
    if fol.is_empty() {
        return Err(SteerError::Contract("follow-up has no tokens".into()));
    }
    let max = config.max_seq_len;
    if ctx.len() > max - 1 {
        ctx.drain(..ctx.len() - (max - 1));
    }
    fol.truncate(max - ctx.len());

    let n = ctx.len() + fol.len();
    let mut token_ids = vocabs.tokens.encode(&ctx);
    token_ids.extend(vocabs.tokens.encode(&fol));
    let mut turn_ids = vec![0; ctx.len()];
    turn_ids.resize(n, 1);

    let spt = match (config.variant, &pair.context_spt) {
        (Variant::SteerPlus, Some(src)) => {
            let tree = spt::parse(src)?;
            let mut lin = spt::linearize_encode(&tree, &vocabs.nodes, config.caps())?;
            if lin.len() > config.max_spt_nodes {
                log::debug!("parse tree truncated from {} to {} nodes", lin.len(), config.max_spt_nodes);
                lin.node_ids.truncate(config.max_spt_nodes);
                lin.depth_ids.truncate(config.max_spt_nodes);
                lin.sibling_ids.truncate(config.max_spt_nodes);
            }
            Some(lin)
        }
        _ => None,
    };
    Ok(InputSequence {
        token_ids,
        position_ids: (0..n).collect(),
        turn_ids,
        spt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Softmax probability of `label`.
    pub probability: f64,
    pub p_steer: f64,
}

impl Prediction {
    fn from_logits<T: Scalar>(row: &[T]) -> Self {
        let (a, b) = (row[0].as_f64(), row[1].as_f64());
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let p_steer = eb / (ea + eb);
        let class = usize::from(b > a);
        let label = Label::from_class(class);
        let probability = if class == 1 { p_steer } else { 1.0 - p_steer };
        Self {
            label,
            probability,
            p_steer,
        }
    }
}

#[derive(Clone, Debug)]
struct SptParts {
    nodes: Embedding,
    depths: Embedding,
    siblings: Embedding,
    /// One projection for SUM, three for CONCAT_PROJECT.
    proj: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct Parts {
    tokens: Embedding,
    positions: Embedding,
    turns: Embedding,
    proj_token: Linear,
    proj_position: Linear,
    proj_turn: Linear,
    spt: Option<SptParts>,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

/// A classifier instance: configuration, parameters and the handles that
/// address them.
#[derive(Clone, Debug)]
pub struct SteerModel<T: Scalar = f32> {
    config: SteerConfig,
    store: ParamStore<T>,
    parts: Parts,
}

/// Batch of sequences laid out for one forward pass.
struct Batch<T> {
    layout: Arc<SeqLayout>,
    tokens: Arc<Bags<T>>,
    positions: Arc<Bags<T>>,
    turns: Arc<Bags<T>>,
    spt: Option<[Arc<Bags<T>>; 3]>,
}

impl<T: Scalar> SteerModel<T> {
    pub fn new(config: SteerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seed, seeds::stream::INIT);
        let rng: &mut dyn RngCore = &mut rng;
        let c = &config;
        let d = c.d_model;
        let mut s = ParamStore::new();
        let tokens = Embedding::new(&mut s, "embed.token", c.token_vocab_size, c.token_dim, rng)?;
        let positions = Embedding::new(&mut s, "embed.position", c.max_seq_len, c.position_dim, rng)?;
        let turns = Embedding::new(&mut s, "embed.turn", NUM_TURN_IDS, c.turn_dim, rng)?;
        let proj_token = Linear::new(&mut s, "embed.token.proj", c.token_dim, d, false, rng)?;
        let proj_position = Linear::new(&mut s, "embed.position.proj", c.position_dim, d, false, rng)?;
        let proj_turn = Linear::new(&mut s, "embed.turn.proj", c.turn_dim, d, false, rng)?;
        let spt = match c.variant {
            Variant::Steer => None,
            Variant::SteerPlus => {
                let nodes = Embedding::new(&mut s, "spt.node", c.node_vocab_size, c.node_dim, rng)?;
                let depths = Embedding::new(&mut s, "spt.depth", c.depth_cap, c.depth_dim, rng)?;
                let siblings = Embedding::new(&mut s, "spt.sibling", c.sibling_cap, c.sibling_dim, rng)?;
                let proj = match c.spt_combine {
                    SptCombine::Sum => vec![Linear::new(&mut s, "spt.proj", c.node_dim, d, false, rng)?],
                    SptCombine::ConcatProject => vec![
                        Linear::new(&mut s, "spt.node.proj", c.node_dim, d, false, rng)?,
                        Linear::new(&mut s, "spt.depth.proj", c.depth_dim, d, false, rng)?,
                        Linear::new(&mut s, "spt.sibling.proj", c.sibling_dim, d, false, rng)?,
                    ],
                };
                Some(SptParts {
                    nodes,
                    depths,
                    siblings,
                    proj,
                })
            }
        };
        let layers = (0..c.num_layers)
            .map(|i| {
                EncoderLayer::new(&mut s, &format!("encoder.{i}"), d, c.num_heads, c.ffn_dim, c.dropout, rng)
            })
            .collect::<steer_nn::Result<Vec<_>>>()?;
        let head = Linear::new(&mut s, "head", d, NUM_CLASSES, true, rng)?;
        Ok(Self {
            config,
            store: s,
            parts: Parts {
                tokens,
                positions,
                turns,
                proj_token,
                proj_position,
                proj_turn,
                spt,
                layers,
                head,
            },
        })
    }

    pub fn config(&self) -> &SteerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> SteerModel<U> {
        SteerModel {
            config: self.config.clone(),
            store: self.store.cast(),
            parts: self.parts.clone(),
        }
    }

    fn layout(&self, inputs: &[InputSequence]) -> Result<Batch<T>> {
        if inputs.is_empty() {
            return Err(SteerError::Contract("empty batch".into()));
        }
        let fusion = self.config.spt_fusion;
        let plus = self.parts.spt.is_some();
        let len = inputs
            .iter()
            .map(|s| s.query_len() + if plus { s.spt_positions(fusion) } else { 0 })
            .max()
            .unwrap_or(0);
        let mut valid = Vec::with_capacity(inputs.len() * len);
        let mut tokens = Bags::new();
        let mut positions = Bags::new();
        let mut turns = Bags::new();
        let mut spt_bags = [Bags::new(), Bags::new(), Bags::new()];
        for s in inputs {
            let q = s.query_len();
            if q == 0 || q > self.config.max_seq_len || s.position_ids.len() != q || s.turn_ids.len() != q {
                return Err(SteerError::Contract(format!(
                    "input sequence of {q} tokens does not fit the model"
                )));
            }
            for i in 0..q {
                tokens.push_single(s.token_ids[i]);
                positions.push_single(s.position_ids[i]);
                turns.push_single(s.turn_ids[i]);
                spt_bags.iter_mut().for_each(Bags::push_empty);
            }
            let extra = if plus { s.spt_positions(fusion) } else { 0 };
            if let (true, Some(lin)) = (extra > 0, &s.spt) {
                let columns = [&lin.node_ids, &lin.depth_ids, &lin.sibling_ids];
                match fusion {
                    SptFusion::PerNode => {
                        for k in 0..lin.len() {
                            for (bag, col) in spt_bags.iter_mut().zip(columns) {
                                bag.push_single(col[k]);
                            }
                        }
                    }
                    SptFusion::PooledSingle => {
                        let w = T::lit(1.0 / lin.len() as f64);
                        for (bag, col) in spt_bags.iter_mut().zip(columns) {
                            let entries: Vec<(usize, T)> = col.iter().map(|&id| (id, w)).collect();
                            bag.push(&entries);
                        }
                    }
                }
                for _ in 0..extra {
                    tokens.push_empty();
                    positions.push_empty();
                    turns.push_single(SPT_SEGMENT);
                }
            }
            let used = q + extra;
            valid.extend((0..len).map(|i| i < used));
            for _ in used..len {
                tokens.push_empty();
                positions.push_empty();
                turns.push_empty();
                spt_bags.iter_mut().for_each(Bags::push_empty);
            }
        }
        let layout = Arc::new(SeqLayout::new(inputs.len(), len, valid)?);
        Ok(Batch {
            layout,
            tokens: Arc::new(tokens),
            positions: Arc::new(positions),
            turns: Arc::new(turns),
            spt: plus.then(|| spt_bags.map(Arc::new)),
        })
    }

    fn embed(&self, g: &mut Graph<'_, T>, batch: &Batch<T>) -> Result<Var> {
        let p = &self.parts;
        let tok = p.tokens.lookup(g, Arc::clone(&batch.tokens))?;
        let pos = p.positions.lookup(g, Arc::clone(&batch.positions))?;
        let turn = p.turns.lookup(g, Arc::clone(&batch.turns))?;
        let tok = p.proj_token.forward(g, tok)?;
        let pos = p.proj_position.forward(g, pos)?;
        let turn = p.proj_turn.forward(g, turn)?;
        let x = g.add(tok, pos)?;
        let mut x = g.add(x, turn)?;
        if let (Some(sp), Some([nb, db, sb])) = (&p.spt, &batch.spt) {
            let n = sp.nodes.lookup(g, Arc::clone(nb))?;
            let dd = sp.depths.lookup(g, Arc::clone(db))?;
            let sib = sp.siblings.lookup(g, Arc::clone(sb))?;
            let v = match sp.proj.as_slice() {
                [proj] => {
                    let s = g.add(n, dd)?;
                    let s = g.add(s, sib)?;
                    proj.forward(g, s)?
                }
                [pn, pd, ps] => {
                    let a = pn.forward(g, n)?;
                    let b = pd.forward(g, dd)?;
                    let c = ps.forward(g, sib)?;
                    let s = g.add(a, b)?;
                    g.add(s, c)?
                }
                _ => unreachable!("one or three projections"),
            };
            x = g.add(x, v)?;
        }
        Ok(x)
    }

    /// Records the forward pass on `g` and returns `[batch, 2]` logits.
    /// Dropout is active only when `rng` is `Some`.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[InputSequence],
        mut rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let batch = self.layout(inputs)?;
        let mut x = self.embed(g, &batch)?;
        for layer in &self.parts.layers {
            x = layer.forward(g, x, &batch.layout, &mut rng)?;
        }
        let pooled = g.mean_pool(x, &batch.layout)?;
        Ok(self.parts.head.forward(g, pooled)?)
    }

    /// Mean cross-entropy of `inputs` against class `labels`.
    pub fn loss(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[InputSequence],
        labels: &[usize],
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let logits = self.forward(g, inputs, rng)?;
        Ok(g.cross_entropy(logits, labels)?)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, inputs: &[InputSequence]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let v = self.forward(&mut g, inputs, None)?;
        Ok(g.value(v).clone())
    }

    pub fn predict_inputs(&self, inputs: &[InputSequence]) -> Result<Vec<Prediction>> {
        let logits = self.logits(inputs)?;
        Ok(logits.data().chunks(NUM_CLASSES).map(Prediction::from_logits).collect())
    }

    /// Evaluation-mode predictions, computed in chunks of `chunk` sequences
    /// (in parallel when enabled). Output order follows input order.
    pub fn predict_many(&self, inputs: &[InputSequence], chunk: usize) -> Result<Vec<Prediction>> {
        let chunks: Vec<&[InputSequence]> = inputs.chunks(chunk.max(1)).collect();
        let results = par::map(&chunks, |c| self.predict_inputs(c));
        let mut out = Vec::with_capacity(inputs.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn predict(&self, pair: &LabeledPair, vocabs: &Vocabs) -> Result<Prediction> {
        let input = encode_inputs(pair, vocabs, &self.config)?;
        Ok(self.predict_inputs(std::slice::from_ref(&input))?[0])
    }
}
