//! Named parameters, their binding onto a [`Graph`], and small layer building blocks.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    HumanDecoder,
    ActionDecoder,
    ObjectDecoder,
    Heads,
    /// The interaction decoder and its readout; the only group the logic loss updates.
    Reasoner,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::HumanDecoder => "human_decoder",
            ParamGroup::ActionDecoder => "action_decoder",
            ParamGroup::ObjectDecoder => "object_decoder",
            ParamGroup::Heads => "heads",
            ParamGroup::Reasoner => "reasoner",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    #[serde(flatten)]
    pub value: Tensor,
}

/// All trainable tensors of a model, in registration order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedTensor>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the last two extents.
    Xavier,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [.., a, b] => (*a, *b),
                    [a] => (*a, *a),
                    [] => (1, 1),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.params.push(NamedTensor {
            name: name.into(),
            group,
            value: Tensor::new(shape.to_vec(), data).expect("consistent parameter shape"),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set parameter", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Copy values from `other` by name; shapes must agree and every name must exist.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> =
            other.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut self.params {
            let src = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load parameter", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn param_of(&self, var: Var) -> Option<ParamId> {
        self.bound.iter().position(|b| *b == Some(var)).map(ParamId)
    }

    /// Backward pass whose accumulation is limited to parameters accepted by `keep`.
    pub fn backward_params(
        &self,
        loss: Var,
        keep: impl Fn(ParamGroup) -> bool,
    ) -> Result<ParamGrads> {
        let mut owner: HashMap<Var, ParamId> = HashMap::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                owner.insert(*v, ParamId(i));
            }
        }
        let grads: Gradients = self.graph.backward_filtered(loss, |v| {
            owner.get(&v).is_some_and(|id| keep(self.store.group(*id)))
        })?;
        let mut out = ParamGrads::zeros(self.store);
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(t) = b.and_then(|v| grads.get(v)) {
                out.grads[i] = t.data().to_vec();
            }
        }
        Ok(out)
    }
}

/// Dense per-parameter gradients, aligned with [`ParamStore`] ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_slice()))
    }
}

// ----- layers -----

/// `x · W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        (d_in, d_out): (usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, &[d_in, d_out], Init::Xavier, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, &[d_out], Init::Zeros, rng));
        LinearParams { weight, bias }
    }

    pub fn bind(&self, s: &mut Session) -> Linear {
        Linear {
            weight: s.param(self.weight),
            bias: self.bias.map(|b| s.param(b)),
        }
    }
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, rng: &mut ChaCha8Rng) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), group, &[d], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), group, &[d], Init::Zeros, rng),
        }
    }

    pub fn bind(&self, s: &mut Session) -> LayerNorm {
        LayerNorm {
            gamma: s.param(self.gamma),
            beta: s.param(self.beta),
        }
    }
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS)?;
        let s = g.mul(n, self.gamma)?;
        g.add(s, self.beta)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForwardParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForwardParams {
            up: LinearParams::new(store, &format!("{name}.up"), group, (d, hidden), true, rng),
            down: LinearParams::new(store, &format!("{name}.down"), group, (hidden, d), true, rng),
        }
    }

    pub fn bind(&self, s: &mut Session) -> FeedForward {
        FeedForward {
            up: self.up.bind(s),
            down: self.down.bind(s),
        }
    }
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor, for tests and synthetic data.
pub fn random_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}
