//! The assembled detector: feature encoder, three role decoders, query
//! filtering, box-encoded entity queries, interaction decoder and heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decoder_layer, interaction_decoder, DecoderLayerParams, InteractionLayerParams, PairStateInTerms, QuerySet,
    ReasonerInput, Role,
};
use crate::error::{Error, Result};
use crate::geometry::{box_pe_graph, pe_frequencies, Relation};
use crate::nn::{
    FeedForwardParams, Init, LayerNormParams, Linear, LinearParams, ParamGroup, ParamId, ParamStore, Session,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub d: usize,
    /// Queries per role `N`; filtering keeps `N/2`.
    pub n: usize,
    /// Interaction-decoder layers `L`.
    pub layers: usize,
    /// Layers of each role decoder.
    pub dec_layers: usize,
    pub encoder_layers: usize,
    pub ffn_hidden: usize,
    /// Width of the box encoding attached to kept entity queries.
    pub pe_dims: usize,
    pub feature_dim: usize,
    pub num_actions: usize,
    pub num_objects: usize,
    pub num_relations: usize,
    /// Logic-loss weight.
    pub alpha: f64,
    pub pair_state: PairStateInTerms,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n: 8,
            layers: 3,
            dec_layers: 3,
            encoder_layers: 1,
            ffn_hidden: 128,
            pe_dims: 32,
            feature_dim: 32,
            num_actions: 8,
            num_objects: 8,
            num_relations: Relation::ALL.len(),
            alpha: 0.2,
            pair_state: PairStateInTerms::Mean,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration worth gradient-checking end to end.
    pub fn minimal() -> Self {
        ModelConfig {
            d: 8,
            n: 4,
            layers: 1,
            dec_layers: 1,
            encoder_layers: 1,
            ffn_hidden: 16,
            pe_dims: 8,
            feature_dim: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 != 0 {
            return Err(Error::Config(format!("queries per role must be even and positive, got {}", self.n)));
        }
        if self.layers == 0 {
            return Err(Error::Config("the interaction decoder needs L ≥ 1".into()));
        }
        if self.d == 0 || self.ffn_hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.num_actions == 0 || self.num_objects == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if self.num_relations != Relation::ALL.len() {
            return Err(Error::Config(format!("{} relations are defined", Relation::ALL.len())));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        pe_frequencies(self.pe_dims)?;
        Ok(())
    }
}

/// Fixed class descriptors the heads score against. Rows of `interactions`
/// define the interaction classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    /// `(V, A)`
    pub verbs: Tensor,
    /// `(O, A)`
    pub objects: Tensor,
    /// `(C, B)`
    pub interactions: Tensor,
}

impl Descriptors {
    pub fn num_interactions(&self) -> usize {
        self.interactions.shape()[0]
    }
}

/// Which attention updates the pair state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    Triplet,
    /// Self-attention over pre-composed human-object pairs.
    Pairwise,
}

/// Scores `proj(x) · descriptorsᵀ`, optionally followed by one free "none" logit.
#[derive(Clone, Copy, Debug)]
struct DescriptorHeadParams {
    proj: LinearParams,
    none: Option<LinearParams>,
}

impl DescriptorHeadParams {
    fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        (d, width): (usize, usize),
        none: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DescriptorHeadParams {
            proj: LinearParams::new(store, &format!("{name}.proj"), group, (d, width), false, rng),
            none: none.then(|| LinearParams::new(store, &format!("{name}.none"), group, (d, 1), true, rng)),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, descriptors: &Tensor) -> Result<Var> {
        let p = self.proj.bind(s).forward(&mut s.graph, x)?;
        let dt = transpose(descriptors);
        let dt = s.graph.constant(dt);
        let logits = s.graph.matmul(p, dt)?;
        match self.none {
            Some(lin) => {
                let none = lin.bind(s).forward(&mut s.graph, x)?;
                let axis = s.graph.shape(logits).len() - 1;
                s.graph.concat(&[logits, none], axis)
            }
            None => Ok(logits),
        }
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transposed shape")
}

#[derive(Clone, Copy, Debug)]
struct BoxHeadParams {
    hidden: LinearParams,
    out: LinearParams,
}

impl BoxHeadParams {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, rng: &mut ChaCha8Rng) -> Self {
        BoxHeadParams {
            hidden: LinearParams::new(store, &format!("{name}.hidden"), group, (d, d), true, rng),
            out: LinearParams::new(store, &format!("{name}.out"), group, (d, 4), true, rng),
        }
    }

    /// `(N, D) → (N, 4)` boxes in `(0, 1)`.
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.hidden.bind(s).forward(&mut s.graph, x)?;
        let h = s.graph.relu(h);
        let o = self.out.bind(s).forward(&mut s.graph, h)?;
        Ok(s.graph.sigmoid(o))
    }
}

#[derive(Clone, Debug)]
struct RoleDecoderParams {
    queries: ParamId,
    layers: Vec<DecoderLayerParams>,
    norm: LayerNormParams,
}

impl RoleDecoderParams {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        RoleDecoderParams {
            queries: store.add(format!("{name}.queries"), group, &[cfg.n, cfg.d], Init::Normal(1.0), rng),
            layers: (0..cfg.dec_layers)
                .map(|l| DecoderLayerParams::new(store, &format!("{name}.layer{l}"), group, cfg.d, cfg.ffn_hidden, rng))
                .collect(),
            norm: LayerNormParams::new(store, &format!("{name}.norm"), group, cfg.d, rng),
        }
    }

    fn forward(&self, s: &mut Session, memory: Var) -> Result<Var> {
        let mut q = s.param(self.queries);
        for l in &self.layers {
            let w = l.bind(s);
            q = decoder_layer(&mut s.graph, q, memory, &w)?;
        }
        self.norm.bind(s).forward(&mut s.graph, q)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayerParams {
    norm_attn: LayerNormParams,
    attn: crate::attention::AttentionParams,
    norm_ffn: LayerNormParams,
    ffn: FeedForwardParams,
}

/// Everything the model predicts for one scene.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `(N, 2)`: human, no-object.
    pub human_logits: Var,
    /// `(N, 4)` as `(cx, cy, w, h)`.
    pub human_boxes: Var,
    /// `(N, O + 1)`, no-object last.
    pub object_logits: Var,
    pub object_boxes: Var,
    /// `(N, V)`
    pub action_logits: Var,
    /// `(N,)`
    pub action_objectness: Var,
    /// Query indices kept by filtering, ascending.
    pub kept_humans: Vec<usize>,
    pub kept_objects: Vec<usize>,
    pub kept_actions: Vec<usize>,
    /// `(N/2, N/2, C + 1)`, background last.
    pub interaction_logits: Var,
    /// Action attention of the last triplet layer, `(N/2, N/2, N/2)`.
    pub action_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub reasoner: ReasonerKind,
    pub descriptors: Descriptors,
    pub store: ParamStore,
    input: LinearParams,
    encoder: Vec<EncoderLayerParams>,
    encoder_norm: LayerNormParams,
    human: RoleDecoderParams,
    object: RoleDecoderParams,
    action: RoleDecoderParams,
    human_class: LinearParams,
    human_box: BoxHeadParams,
    object_class: DescriptorHeadParams,
    object_box: BoxHeadParams,
    action_class: DescriptorHeadParams,
    action_objectness: LinearParams,
    human_pe: LinearParams,
    object_pe: LinearParams,
    human_slot: ParamId,
    object_slot: ParamId,
    pair_compose: Option<LinearParams>,
    interaction: Vec<InteractionLayerParams>,
    interaction_norm: LayerNormParams,
    interaction_class: DescriptorHeadParams,
}

impl Model {
    pub fn new(config: ModelConfig, reasoner: ReasonerKind, descriptors: Descriptors, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (v, a) = (descriptors.verbs.shape()[0], descriptors.verbs.shape()[1]);
        if descriptors.verbs.rank() != 2 || v != c.num_actions {
            return Err(Error::shape("Model::new", descriptors.verbs.shape(), &[c.num_actions, a]));
        }
        if descriptors.objects.rank() != 2 || descriptors.objects.shape()[0] != c.num_objects {
            return Err(Error::shape("Model::new", descriptors.objects.shape(), &[c.num_objects, 0]));
        }
        if descriptors.interactions.rank() != 2 || descriptors.num_interactions() == 0 {
            return Err(Error::shape("Model::new", descriptors.interactions.shape(), &[0, 0]));
        }
        let (d, h) = (c.d, c.ffn_hidden);
        let mut s = ParamStore::new();
        let store = &mut s;
        use ParamGroup::*;

        let input = LinearParams::new(store, "encoder.input", Encoder, (c.feature_dim, d), true, rng);
        let encoder = (0..c.encoder_layers)
            .map(|l| {
                let name = format!("encoder.layer{l}");
                EncoderLayerParams {
                    norm_attn: LayerNormParams::new(store, &format!("{name}.norm_attn"), Encoder, d, rng),
                    attn: crate::attention::AttentionParams::new(store, &format!("{name}.attn"), Encoder, d, rng),
                    norm_ffn: LayerNormParams::new(store, &format!("{name}.norm_ffn"), Encoder, d, rng),
                    ffn: FeedForwardParams::new(store, &format!("{name}.ffn"), Encoder, d, h, rng),
                }
            })
            .collect();
        let encoder_norm = LayerNormParams::new(store, "encoder.norm", Encoder, d, rng);

        let human = RoleDecoderParams::new(store, "human", HumanDecoder, c, rng);
        let object = RoleDecoderParams::new(store, "object", ObjectDecoder, c, rng);
        let action = RoleDecoderParams::new(store, "action", ActionDecoder, c, rng);

        let human_class = LinearParams::new(store, "heads.human_class", Heads, (d, 2), true, rng);
        let human_box = BoxHeadParams::new(store, "heads.human_box", Heads, d, rng);
        let object_class =
            DescriptorHeadParams::new(store, "heads.object_class", Heads, (d, descriptors.objects.shape()[1]), true, rng);
        let object_box = BoxHeadParams::new(store, "heads.object_box", Heads, d, rng);
        let action_class = DescriptorHeadParams::new(store, "heads.action_class", Heads, (d, a), false, rng);
        let action_objectness = LinearParams::new(store, "heads.action_objectness", Heads, (d, 1), true, rng);

        let half = c.n / 2;
        let human_pe = LinearParams::new(store, "reasoner.human_pe", Reasoner, (d + c.pe_dims, d), true, rng);
        let object_pe = LinearParams::new(store, "reasoner.object_pe", Reasoner, (d + c.pe_dims, d), true, rng);
        let human_slot = store.add("reasoner.human_slot", Reasoner, &[half, d], Init::Normal(0.1), rng);
        let object_slot = store.add("reasoner.object_slot", Reasoner, &[half, d], Init::Normal(0.1), rng);
        let pair_compose = (reasoner == ReasonerKind::Pairwise)
            .then(|| LinearParams::new(store, "reasoner.pair_compose", Reasoner, (2 * d, d), true, rng));
        let interaction = (0..c.layers)
            .map(|l| {
                InteractionLayerParams::new(
                    store,
                    &format!("reasoner.layer{l}"),
                    d,
                    h,
                    reasoner == ReasonerKind::Triplet,
                    rng,
                )
            })
            .collect();
        let interaction_norm = LayerNormParams::new(store, "reasoner.norm", Reasoner, d, rng);
        let interaction_class = DescriptorHeadParams::new(
            store,
            "reasoner.interaction_class",
            Reasoner,
            (d, descriptors.interactions.shape()[1]),
            true,
            rng,
        );

        Ok(Model {
            config,
            reasoner,
            descriptors,
            store: s,
            input,
            encoder,
            encoder_norm,
            human,
            object,
            action,
            human_class,
            human_box,
            object_class,
            object_box,
            action_class,
            action_objectness,
            human_pe,
            object_pe,
            human_slot,
            object_slot,
            pair_compose,
            interaction,
            interaction_norm,
            interaction_class,
        })
    }

    pub fn num_interactions(&self) -> usize {
        self.descriptors.num_interactions()
    }

    /// Builds the forward pass for one scene on `s`'s tape.
    pub fn forward(&self, s: &mut Session, features: &Tensor) -> Result<Predictions> {
        let c = &self.config;
        if features.rank() != 2 || features.shape()[1] != c.feature_dim || features.shape()[0] == 0 {
            return Err(Error::shape("Model::forward", features.shape(), &[0, c.feature_dim]));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("non-finite input features".into()));
        }
        let x = s.graph.constant(features.clone());
        let mut x = self.input.bind(s).forward(&mut s.graph, x)?;
        for l in &self.encoder {
            let norm = l.norm_attn.bind(s);
            let attn = l.attn.bind(s);
            let n = norm.forward(&mut s.graph, x)?;
            let a = crate::attention::cross_attention(&mut s.graph, n, n, &attn)?;
            x = s.graph.add(x, a)?;
            let norm = l.norm_ffn.bind(s);
            let ffn = l.ffn.bind(s);
            let n = norm.forward(&mut s.graph, x)?;
            let f = ffn.forward(&mut s.graph, n)?;
            x = s.graph.add(x, f)?;
        }
        let memory = self.encoder_norm.bind(s).forward(&mut s.graph, x)?;

        let dh = self.human.forward(s, memory)?;
        let dobj = self.object.forward(s, memory)?;
        let da = self.action.forward(s, memory)?;

        let human_logits = self.human_class.bind(s).forward(&mut s.graph, dh)?;
        let human_boxes = self.human_box.forward(s, dh)?;
        let object_logits = self.object_class.forward(s, dobj, &self.descriptors.objects)?;
        let object_boxes = self.object_box.forward(s, dobj)?;
        let action_logits = self.action_class.forward(s, da, &self.descriptors.verbs)?;
        let objectness = self.action_objectness.bind(s).forward(&mut s.graph, da)?;
        let action_objectness = s.graph.reshape(objectness, &[c.n])?;

        let g = &mut s.graph;
        let hp = g.softmax(human_logits, 1)?;
        let human_scores = g.narrow(hp, 1, 0, 1)?;
        let human_scores = g.reshape(human_scores, &[c.n])?;
        let op = g.softmax(object_logits, 1)?;
        let none = g.narrow(op, 1, c.num_objects, 1)?;
        let object_scores = g.one_minus(none);
        let object_scores = g.reshape(object_scores, &[c.n])?;
        let action_scores = g.sigmoid(action_objectness);

        let (humans, kept_humans) = filter_queries(g, &QuerySet { role: Role::Human, embeddings: dh, scores: human_scores })?;
        let (objects, kept_objects) =
            filter_queries(g, &QuerySet { role: Role::Object, embeddings: dobj, scores: object_scores })?;
        let (actions, kept_actions) =
            filter_queries(g, &QuerySet { role: Role::Action, embeddings: da, scores: action_scores })?;

        let hb = g.index_select(human_boxes, 0, &kept_humans)?;
        let ob = g.index_select(object_boxes, 0, &kept_objects)?;
        let humans = attach_box_pe(s, &humans, hb, c.pe_dims, &self.human_pe)?;
        let objects = attach_box_pe(s, &objects, ob, c.pe_dims, &self.object_pe)?;

        let half = c.n / 2;
        let hs = s.param(self.human_slot);
        let os = s.param(self.object_slot);
        let g = &mut s.graph;
        let hs = g.expand(hs, 1, half)?;
        let os = g.expand(os, 0, half)?;
        let x0 = g.add(hs, os)?;

        let layers: Vec<_> = self.interaction.iter().map(|l| l.bind(s)).collect();
        let out = match self.pair_compose {
            None => interaction_decoder(
                &mut s.graph,
                memory,
                ReasonerInput::Triplet {
                    human: &humans,
                    action: &actions,
                    object: &objects,
                    mode: c.pair_state,
                },
                x0,
                &layers,
            )?,
            Some(compose) => {
                let lin = compose.bind(s);
                let g = &mut s.graph;
                let he = g.expand(humans.embeddings, 1, half)?;
                let oe = g.expand(objects.embeddings, 0, half)?;
                let cat = g.concat(&[he, oe], 2)?;
                let pair_queries = lin.forward(g, cat)?;
                interaction_decoder(g, memory, ReasonerInput::Pairwise { pair_queries }, x0, &layers)?
            }
        };
        let y = self.interaction_norm.bind(s).forward(&mut s.graph, out.pairs.embeddings)?;
        let interaction_logits = self.interaction_class.forward(s, y, &self.descriptors.interactions)?;

        Ok(Predictions {
            human_logits,
            human_boxes,
            object_logits,
            object_boxes,
            action_logits,
            action_objectness,
            kept_humans,
            kept_objects,
            kept_actions,
            interaction_logits,
            action_weights: out.action_weights,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            reasoner: self.reasoner,
            params: self.store.clone(),
        }
    }

    /// Loads weights by name; the architecture must match.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config != self.config || ckpt.reasoner != self.reasoner {
            return Err(Error::Config("checkpoint architecture differs from the model".into()));
        }
        self.store.load_from(&ckpt.params)
    }
}

/// Serialized weights: the model config plus every named tensor with its group,
/// shape and row-major data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub reasoner: ReasonerKind,
    pub params: ParamStore,
}

/// Indices of the `N/2` highest scores in ascending index order; ties go to the
/// lower index.
pub fn top_half(scores: &[f64]) -> Result<Vec<usize>> {
    let n = scores.len();
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("query filtering needs an even count, got {n}")));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("query score {bad}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..n / 2].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Keeps the higher-scoring half of a query bank. Gradients reach kept
/// embeddings only.
pub fn filter_queries(g: &mut Graph, qs: &QuerySet) -> Result<(QuerySet, Vec<usize>)> {
    let n = g.shape(qs.embeddings)[0];
    if g.shape(qs.scores) != [n] {
        return Err(Error::shape("filter_queries", g.shape(qs.scores), &[n]));
    }
    let kept = top_half(g.value(qs.scores).data())?;
    let embeddings = g.index_select(qs.embeddings, 0, &kept)?;
    let scores = g.index_select(qs.scores, 0, &kept)?;
    Ok((
        QuerySet {
            role: qs.role,
            embeddings,
            scores,
        },
        kept,
    ))
}

/// `proj(concat(embedding, box_pe(box)))` for boxes `(n, 4)` on the tape.
pub fn attach_box_pe(
    s: &mut Session,
    qs: &QuerySet,
    boxes: Var,
    pe_dims: usize,
    proj: &LinearParams,
) -> Result<QuerySet> {
    let n = s.graph.shape(qs.embeddings)[0];
    if s.graph.shape(boxes) != [n, 4] {
        return Err(Error::shape("attach_box_pe", s.graph.shape(boxes), &[n, 4]));
    }
    let lin: Linear = proj.bind(s);
    let g = &mut s.graph;
    let pe = box_pe_graph(g, boxes, pe_dims)?;
    let cat = g.concat(&[qs.embeddings, pe], 1)?;
    let embeddings = lin.forward(g, cat)?;
    Ok(QuerySet {
        role: qs.role,
        embeddings,
        scores: qs.scores,
    })
}
