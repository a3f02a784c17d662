//! Single-head attention blocks: pairwise self-attention over pre-composed
//! human-object pairs, cross-attention decoder layers, and triplet-reasoning
//! attention whose softmax runs over a shared action axis.
//!
//! Row-vector convention throughout: a projection is `x · W` with `W` of shape
//! `(D, D)`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    FeedForward, FeedForwardParams, LayerNorm, LayerNormParams, LinearParams, ParamGroup,
    ParamStore, Session,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Action,
    Object,
}

/// A bank of query embeddings `(N, D)` for one role, with per-query scores `(N,)`.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet {
    pub role: Role,
    pub embeddings: Var,
    pub scores: Var,
}

/// Interaction state over the human × object grid, shape `(N_h, N_o, D)`.
#[derive(Clone, Copy, Debug)]
pub struct PairQuerySet {
    pub embeddings: Var,
}

/// Projections of a standard single-head attention: `W^q`, `W^k`, `W^v`, `W^{v'}`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out: Var,
}

/// Projections of triplet-reasoning attention: `W^q`, `W^k`, `W^v_h`, `W^v_o`, `W^{v'}`.
#[derive(Clone, Copy, Debug)]
pub struct TripletWeights {
    pub query: Var,
    pub key: Var,
    pub value_human: Var,
    pub value_object: Var,
    pub out: Var,
}

/// How the pair state `X (N_h, N_o, D)` enters the two pair terms of the
/// query and key embeddings, which live on different grids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStateInTerms {
    /// Human-action term gets `mean_j X[i, j]`, action-object term gets `mean_i X[i, j]`.
    #[default]
    Mean,
    /// `X` only enters the value embedding.
    Omit,
}

fn last_dim(g: &Graph, v: Var) -> usize {
    *g.shape(v).last().unwrap_or(&0)
}

fn require_rank(g: &Graph, v: Var, rank: usize, op: &'static str) -> Result<()> {
    if g.shape(v).len() != rank {
        let mut expected = vec![0; rank];
        expected.iter_mut().zip(g.shape(v)).for_each(|(e, s)| *e = *s);
        return Err(Error::shape(op, g.shape(v), &expected));
    }
    Ok(())
}

fn check_square(g: &Graph, w: Var, d: usize, op: &'static str) -> Result<()> {
    if g.shape(w) != [d, d] {
        return Err(Error::shape(op, g.shape(w), &[d, d]));
    }
    Ok(())
}

/// Scaled dot-product attention of `(N, D)` queries over `(M, D)` keys/values.
fn attend(g: &mut Graph, fq: Var, fk: Var, fv: Var) -> Result<(Var, Var)> {
    let d = last_dim(g, fq) as f64;
    let kt = g.transpose(fk)?;
    let logits = g.matmul(fq, kt)?;
    let logits = g.mul_scalar(logits, 1.0 / d.sqrt());
    let weights = g.softmax(logits, 1)?;
    let mixed = g.matmul(weights, fv)?;
    Ok((mixed, weights))
}

/// Self-attention over `N` pre-composed pair embeddings.
///
/// `F^{q,k,v} = (X + Q^{h-o}) · W^{q,k,v}` and
/// `X'_i = Σ_n softmax_n(F^q_i · F^k_n / √D) F^v_n · W^{v'}`.
pub fn self_attention(g: &mut Graph, x: Var, pair_queries: Var, w: &AttentionWeights) -> Result<Var> {
    require_rank(g, x, 2, "self_attention")?;
    if g.shape(x) != g.shape(pair_queries) {
        return Err(Error::shape("self_attention", g.shape(x), g.shape(pair_queries)));
    }
    let d = last_dim(g, x);
    for m in [w.query, w.key, w.value, w.out] {
        check_square(g, m, d, "self_attention")?;
    }
    let s = g.add(x, pair_queries)?;
    let fq = g.matmul(s, w.query)?;
    let fk = g.matmul(s, w.key)?;
    let fv = g.matmul(s, w.value)?;
    let (mixed, _) = attend(g, fq, fk, fv)?;
    g.matmul(mixed, w.out)
}

/// Cross-attention of `(N, D)` queries over `(M, D)` memory.
pub fn cross_attention(g: &mut Graph, queries: Var, memory: Var, w: &AttentionWeights) -> Result<Var> {
    require_rank(g, queries, 2, "cross_attention")?;
    require_rank(g, memory, 2, "cross_attention")?;
    let d = last_dim(g, queries);
    if last_dim(g, memory) != d {
        return Err(Error::shape("cross_attention", g.shape(queries), g.shape(memory)));
    }
    let fq = g.matmul(queries, w.query)?;
    let fk = g.matmul(memory, w.key)?;
    let fv = g.matmul(memory, w.value)?;
    let (mixed, _) = attend(g, fq, fk, fv)?;
    g.matmul(mixed, w.out)
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_cross: LayerNorm,
    pub cross: AttentionWeights,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// One pre-norm decoder layer: cross-attention over `memory`, then a
/// feed-forward block, each with a residual connection.
pub fn decoder_layer(g: &mut Graph, queries: Var, memory: Var, w: &DecoderLayer) -> Result<Var> {
    require_rank(g, queries, 2, "decoder_layer")?;
    if last_dim(g, memory) != last_dim(g, queries) {
        return Err(Error::shape("decoder_layer", g.shape(queries), g.shape(memory)));
    }
    let n = w.norm_cross.forward(g, queries)?;
    let c = cross_attention(g, n, memory, &w.cross)?;
    let x = g.add(queries, c)?;
    let n = w.norm_ffn.forward(g, x)?;
    let f = w.ffn.forward(g, n)?;
    g.add(x, f)
}

/// Query, key and value embeddings of triplet-reasoning attention.
#[derive(Clone, Copy, Debug)]
pub struct TripletQkv {
    /// Human-action terms, `(N_h, N_a, D)`.
    pub query: Var,
    /// Action-object terms, `(N_a, N_o, D)`.
    pub key: Var,
    /// Triplet values, `(N_h, N_a, N_o, D)`.
    pub value: Var,
}

/// Builds the triplet embeddings from the pair state and the three query banks.
///
/// * `F^q[i,n] = (X̃_h[i] + Q^h[i] + Q^a[n]) · W^q`
/// * `F^k[n,j] = (Q^a[n] + Q^o[j] + X̃_o[j]) · W^k`
/// * `F^v[i,n,j] = ((X[i,j] + Q^h[i] + Q^a[n]) · W^v_h) ⊙ ((X[i,j] + Q^a[n] + Q^o[j]) · W^v_o)`
///
/// where `X̃` is set by `mode`. The value projections are applied to each summand
/// before broadcasting, which is the same linear map.
pub fn build_triplet_qkv(
    g: &mut Graph,
    x: Var,
    human: Var,
    action: Var,
    object: Var,
    w: &TripletWeights,
    mode: PairStateInTerms,
) -> Result<TripletQkv> {
    for v in [human, action, object] {
        require_rank(g, v, 2, "build_triplet_qkv")?;
    }
    require_rank(g, x, 3, "build_triplet_qkv")?;
    let (nh, na, no) = (g.shape(human)[0], g.shape(action)[0], g.shape(object)[0]);
    let d = last_dim(g, human);
    if last_dim(g, action) != d || last_dim(g, object) != d {
        return Err(Error::shape("build_triplet_qkv", g.shape(human), g.shape(action)));
    }
    if g.shape(x) != [nh, no, d] {
        return Err(Error::shape("build_triplet_qkv", g.shape(x), &[nh, no, d]));
    }
    for m in [w.query, w.key, w.value_human, w.value_object] {
        check_square(g, m, d, "build_triplet_qkv")?;
    }

    let (h_term, o_term) = match mode {
        PairStateInTerms::Mean => {
            let xh = g.mean(x, 1)?;
            let xo = g.mean(x, 0)?;
            (g.add(xh, human)?, g.add(xo, object)?)
        }
        PairStateInTerms::Omit => (human, object),
    };
    // (N_h, 1, D) + (1, N_a, D)
    let hq = g.unsqueeze(h_term, 1)?;
    let aq = g.unsqueeze(action, 0)?;
    let ha = g.add(hq, aq)?;
    let query = g.matmul(ha, w.query)?;
    // (N_a, 1, D) + (1, N_o, D)
    let ak = g.unsqueeze(action, 1)?;
    let ok = g.unsqueeze(o_term, 0)?;
    let ao = g.add(ak, ok)?;
    let key = g.matmul(ao, w.key)?;

    let left = {
        let xw = g.matmul(x, w.value_human)?;
        let xw = g.unsqueeze(xw, 1)?; // (N_h, 1, N_o, D)
        let hw = g.matmul(human, w.value_human)?;
        let hw = g.reshape(hw, &[nh, 1, 1, d])?;
        let aw = g.matmul(action, w.value_human)?;
        let aw = g.reshape(aw, &[1, na, 1, d])?;
        let s = g.add(xw, hw)?;
        g.add(s, aw)?
    };
    let right = {
        let xw = g.matmul(x, w.value_object)?;
        let xw = g.unsqueeze(xw, 1)?;
        let aw = g.matmul(action, w.value_object)?;
        let aw = g.reshape(aw, &[1, na, 1, d])?;
        let ow = g.matmul(object, w.value_object)?;
        let ow = g.reshape(ow, &[1, 1, no, d])?;
        let s = g.add(xw, aw)?;
        g.add(s, ow)?
    };
    let value = g.mul(left, right)?;
    Ok(TripletQkv { query, key, value })
}

#[derive(Clone, Copy, Debug)]
pub struct TripletOutput {
    /// Updated pair state `(N_h, N_o, D)`.
    pub output: Var,
    /// Attention over actions for each pair, `(N_h, N_a, N_o)`; sums to 1 over axis 1.
    pub weights: Var,
}

/// `X'_{ij} = Σ_n softmax_n(F^q_{in} · F^k_{nj} / √D) F^v_{inj} · W^{v'}`.
pub fn triplet_attention(g: &mut Graph, qkv: &TripletQkv, out: Var) -> Result<TripletOutput> {
    require_rank(g, qkv.query, 3, "triplet_attention")?;
    require_rank(g, qkv.key, 3, "triplet_attention")?;
    require_rank(g, qkv.value, 4, "triplet_attention")?;
    let (nh, na, d) = {
        let s = g.shape(qkv.query);
        (s[0], s[1], s[2])
    };
    let (na_k, no) = (g.shape(qkv.key)[0], g.shape(qkv.key)[1]);
    if na_k != na || last_dim(g, qkv.key) != d {
        return Err(Error::shape("triplet_attention", g.shape(qkv.query), g.shape(qkv.key)));
    }
    if g.shape(qkv.value) != [nh, na, no, d] {
        return Err(Error::shape("triplet_attention", g.shape(qkv.value), &[nh, na, no, d]));
    }
    check_square(g, out, d, "triplet_attention")?;

    let q = g.unsqueeze(qkv.query, 2)?; // (N_h, N_a, 1, D)
    let k = g.unsqueeze(qkv.key, 0)?; // (1, N_a, N_o, D)
    let prod = g.mul(q, k)?;
    let logits = g.sum(prod, 3)?;
    let logits = g.mul_scalar(logits, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(logits, 1)?;
    let w4 = g.unsqueeze(weights, 3)?;
    let weighted = g.mul(w4, qkv.value)?;
    let mixed = g.sum(weighted, 1)?; // (N_h, N_o, D)
    let output = g.matmul(mixed, out)?;
    Ok(TripletOutput { output, weights })
}

/// Loop-by-loop evaluation of triplet-reasoning attention on plain tensors,
/// sharing no code with [`triplet_attention`].
pub fn triplet_oracle(fq: &Tensor, fk: &Tensor, fv: &Tensor, out: &Tensor) -> Result<Tensor> {
    let [nh, na, d] = fq.shape() else {
        return Err(Error::shape("triplet_oracle", fq.shape(), &[0, 0, 0]));
    };
    let (nh, na, d) = (*nh, *na, *d);
    if fk.rank() != 3 || fk.shape()[0] != na || fk.shape()[2] != d {
        return Err(Error::shape("triplet_oracle", fq.shape(), fk.shape()));
    }
    let no = fk.shape()[1];
    if fv.shape() != [nh, na, no, d] {
        return Err(Error::shape("triplet_oracle", fv.shape(), &[nh, na, no, d]));
    }
    if out.shape() != [d, d] {
        return Err(Error::shape("triplet_oracle", out.shape(), &[d, d]));
    }
    let scale = (d as f64).sqrt();
    let mut result = vec![0.0; nh * no * d];
    for i in 0..nh {
        for j in 0..no {
            let mut logits = vec![0.0; na];
            for (n, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += fq.at(&[i, n, c]) * fk.at(&[n, j, c]);
                }
                *l = dot / scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut mixed = vec![0.0; d];
            for n in 0..na {
                let a = exps[n] / z;
                for (c, m) in mixed.iter_mut().enumerate() {
                    *m += a * fv.at(&[i, n, j, c]);
                }
            }
            for c in 0..d {
                let mut acc = 0.0;
                for (r, m) in mixed.iter().enumerate() {
                    acc += m * out.at(&[r, c]);
                }
                result[(i * no + j) * d + c] = acc;
            }
        }
    }
    Tensor::new(vec![nh, no, d], result)
}

/// One layer of the interaction decoder.
#[derive(Clone, Copy, Debug)]
pub struct InteractionLayer {
    pub norm_pair: LayerNorm,
    pub reasoning: Reasoning,
    pub norm_cross: LayerNorm,
    pub cross: AttentionWeights,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// The attention that updates the pair state.
#[derive(Clone, Copy, Debug)]
pub enum Reasoning {
    Triplet(TripletWeights),
    /// Baseline: self-attention over the flattened pair grid.
    Pairwise(AttentionWeights),
}

/// What the reasoning attention consumes besides the pair state.
#[derive(Clone, Copy, Debug)]
pub enum ReasonerInput<'a> {
    Triplet {
        human: &'a QuerySet,
        action: &'a QuerySet,
        object: &'a QuerySet,
        mode: PairStateInTerms,
    },
    /// Pre-composed pair embeddings `Q^{h-o}`, `(N_h, N_o, D)`.
    Pairwise { pair_queries: Var },
}

/// Output of the interaction decoder plus the action attention of its last
/// triplet layer (if any).
#[derive(Clone, Copy, Debug)]
pub struct InteractionOutput {
    pub pairs: PairQuerySet,
    pub action_weights: Option<Var>,
}

/// Runs `layers` over the pair state `x0`. Each layer applies the reasoning
/// attention, cross-attention over `memory` and a feed-forward block, all pre-norm
/// with residual connections.
pub fn interaction_decoder(
    g: &mut Graph,
    memory: Var,
    input: ReasonerInput<'_>,
    x0: Var,
    layers: &[InteractionLayer],
) -> Result<InteractionOutput> {
    if layers.is_empty() {
        return Err(Error::Config("interaction decoder needs at least one layer".into()));
    }
    require_rank(g, x0, 3, "interaction_decoder")?;
    let (nh, no, d) = {
        let s = g.shape(x0);
        (s[0], s[1], s[2])
    };
    if last_dim(g, memory) != d {
        return Err(Error::shape("interaction_decoder", g.shape(x0), g.shape(memory)));
    }
    let mut x = x0;
    let mut action_weights = None;
    for layer in layers {
        let n = layer.norm_pair.forward(g, x)?;
        let update = match (layer.reasoning, input) {
            (
                Reasoning::Triplet(tw),
                ReasonerInput::Triplet {
                    human,
                    action,
                    object,
                    mode,
                },
            ) => {
                let qkv = build_triplet_qkv(
                    g,
                    n,
                    human.embeddings,
                    action.embeddings,
                    object.embeddings,
                    &tw,
                    mode,
                )?;
                let t = triplet_attention(g, &qkv, tw.out)?;
                action_weights = Some(t.weights);
                t.output
            }
            (Reasoning::Pairwise(aw), ReasonerInput::Pairwise { pair_queries }) => {
                if g.shape(pair_queries) != [nh, no, d] {
                    return Err(Error::shape(
                        "interaction_decoder",
                        g.shape(pair_queries),
                        &[nh, no, d],
                    ));
                }
                let flat = g.reshape(n, &[nh * no, d])?;
                let pq = g.reshape(pair_queries, &[nh * no, d])?;
                let s = self_attention(g, flat, pq, &aw)?;
                g.reshape(s, &[nh, no, d])?
            }
            _ => {
                return Err(Error::Config(
                    "reasoning weights do not match the reasoner input".into(),
                ))
            }
        };
        x = g.add(x, update)?;
        let n = layer.norm_cross.forward(g, x)?;
        let flat = g.reshape(n, &[nh * no, d])?;
        let c = cross_attention(g, flat, memory, &layer.cross)?;
        let c = g.reshape(c, &[nh, no, d])?;
        x = g.add(x, c)?;
        let n = layer.norm_ffn.forward(g, x)?;
        let f = layer.ffn.forward(g, n)?;
        x = g.add(x, f)?;
    }
    Ok(InteractionOutput {
        pairs: PairQuerySet { embeddings: x },
        action_weights,
    })
}

// ----- parameter-level counterparts -----

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |suffix: &str| {
            LinearParams::new(store, &format!("{name}.{suffix}"), group, (d, d), false, rng)
        };
        AttentionParams {
            query: lin("q"),
            key: lin("k"),
            value: lin("v"),
            out: lin("out"),
        }
    }

    pub fn bind(&self, s: &mut Session) -> AttentionWeights {
        AttentionWeights {
            query: s.param(self.query.weight),
            key: s.param(self.key.weight),
            value: s.param(self.value.weight),
            out: s.param(self.out.weight),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TripletParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value_human: LinearParams,
    pub value_object: LinearParams,
    pub out: LinearParams,
}

impl TripletParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |suffix: &str| {
            LinearParams::new(store, &format!("{name}.{suffix}"), group, (d, d), false, rng)
        };
        TripletParams {
            query: lin("q"),
            key: lin("k"),
            value_human: lin("v_h"),
            value_object: lin("v_o"),
            out: lin("out"),
        }
    }

    pub fn bind(&self, s: &mut Session) -> TripletWeights {
        TripletWeights {
            query: s.param(self.query.weight),
            key: s.param(self.key.weight),
            value_human: s.param(self.value_human.weight),
            value_object: s.param(self.value_object.weight),
            out: s.param(self.out.weight),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub norm_cross: LayerNormParams,
    pub cross: AttentionParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl DecoderLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderLayerParams {
            norm_cross: LayerNormParams::new(store, &format!("{name}.norm_cross"), group, d, rng),
            cross: AttentionParams::new(store, &format!("{name}.cross"), group, d, rng),
            norm_ffn: LayerNormParams::new(store, &format!("{name}.norm_ffn"), group, d, rng),
            ffn: FeedForwardParams::new(store, &format!("{name}.ffn"), group, d, hidden, rng),
        }
    }

    pub fn bind(&self, s: &mut Session) -> DecoderLayer {
        DecoderLayer {
            norm_cross: self.norm_cross.bind(s),
            cross: self.cross.bind(s),
            norm_ffn: self.norm_ffn.bind(s),
            ffn: self.ffn.bind(s),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ReasoningParams {
    Triplet(TripletParams),
    Pairwise(AttentionParams),
}

#[derive(Clone, Copy, Debug)]
pub struct InteractionLayerParams {
    pub norm_pair: LayerNormParams,
    pub reasoning: ReasoningParams,
    pub norm_cross: LayerNormParams,
    pub cross: AttentionParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl InteractionLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        triplet: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let group = ParamGroup::Reasoner;
        let norm_pair = LayerNormParams::new(store, &format!("{name}.norm_pair"), group, d, rng);
        let reasoning = if triplet {
            ReasoningParams::Triplet(TripletParams::new(store, &format!("{name}.triplet"), group, d, rng))
        } else {
            ReasoningParams::Pairwise(AttentionParams::new(store, &format!("{name}.pairwise"), group, d, rng))
        };
        InteractionLayerParams {
            norm_pair,
            reasoning,
            norm_cross: LayerNormParams::new(store, &format!("{name}.norm_cross"), group, d, rng),
            cross: AttentionParams::new(store, &format!("{name}.cross"), group, d, rng),
            norm_ffn: LayerNormParams::new(store, &format!("{name}.norm_ffn"), group, d, rng),
            ffn: FeedForwardParams::new(store, &format!("{name}.ffn"), group, d, hidden, rng),
        }
    }

    pub fn bind(&self, s: &mut Session) -> InteractionLayer {
        InteractionLayer {
            norm_pair: self.norm_pair.bind(s),
            reasoning: match &self.reasoning {
                ReasoningParams::Triplet(t) => Reasoning::Triplet(t.bind(s)),
                ReasoningParams::Pairwise(a) => Reasoning::Pairwise(a.bind(s)),
            },
            norm_cross: self.norm_cross.bind(s),
            cross: self.cross.bind(s),
            norm_ffn: self.norm_ffn.bind(s),
            ffn: self.ffn.bind(s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{random_normal, seeded_rng};

    fn weights(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
        let mut m = || g.constant(random_normal(&[d, d], 0.5, rng));
        AttentionWeights {
            query: m(),
            key: m(),
            value: m(),
            out: m(),
        }
    }

    #[test]
    fn single_key_self_attention_is_closed_form() {
        let mut rng = seeded_rng(3);
        let mut g = Graph::new();
        let w = weights(&mut g, 4, &mut rng);
        let x = g.constant(random_normal(&[1, 4], 1.0, &mut rng));
        let q = g.constant(random_normal(&[1, 4], 1.0, &mut rng));
        let out = self_attention(&mut g, x, q, &w).unwrap();
        let s = g.add(x, q).unwrap();
        let fv = g.matmul(s, w.value).unwrap();
        let expect = g.matmul(fv, w.out).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut rng = seeded_rng(4);
        let mut g = Graph::new();
        let w = weights(&mut g, 4, &mut rng);
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let q = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(self_attention(&mut g, x, q, &w), Err(Error::Shape { .. })));
        let mem = g.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(cross_attention(&mut g, x, mem, &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn triplet_na_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3, 4]));
        let k = g.constant(Tensor::zeros(&[2, 2, 4]));
        let v = g.constant(Tensor::zeros(&[2, 3, 2, 4]));
        let o = g.constant(Tensor::zeros(&[4, 4]));
        let qkv = TripletQkv { query: q, key: k, value: v };
        assert!(matches!(triplet_attention(&mut g, &qkv, o), Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_layer_stack_is_config_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 4]));
        let mem = g.constant(Tensor::zeros(&[3, 4]));
        let pq = g.constant(Tensor::zeros(&[2, 2, 4]));
        let r = interaction_decoder(&mut g, mem, ReasonerInput::Pairwise { pair_queries: pq }, x, &[]);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
