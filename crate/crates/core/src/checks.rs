//! Finite-difference suites behind `hoi gradcheck`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention, decoder_layer, interaction_decoder, self_attention, AttentionParams, DecoderLayerParams,
    InteractionLayerParams, PairStateInTerms, QuerySet, ReasonerInput, Role,
};
use crate::error::{Error, Result};
use crate::geometry::{giou_graph, BBox, Relation};
use crate::logic::{logic_loss, Formula, ObjectScore, QuantifierConfig, Rule, RuleSet, ScoreTable, Trigger};
use crate::model::ModelConfig;
use crate::nn::{random_normal, seeded_rng, Init, ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::gradcheck::{grad_check_many, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{
    batch_objective, build_model, Ablation, Objective, RunConfig, SplitSpec, ScenePurpose, World, WorldConfig,
    DESK_RULES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    TensorOps,
    Attention,
    Logic,
    FullModel,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::TensorOps, Scope::Attention, Scope::Logic, Scope::FullModel];

    pub fn name(self) -> &'static str {
        match self {
            Scope::TensorOps => "tensor-ops",
            Scope::Attention => "attention",
            Scope::Logic => "logic",
            Scope::FullModel => "full-model",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::TensorOps | Scope::Attention => 1e-4,
            Scope::Logic => 1e-6,
            Scope::FullModel => 1e-3,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScopeReport {
    pub scope: Scope,
    pub cases: Vec<CaseReport>,
}

impl ScopeReport {
    pub fn worst(&self) -> Option<&CaseReport> {
        self.cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self) -> bool {
        self.cases
            .iter()
            .all(|c| c.checked > 0 && c.max_rel_error < self.scope.tolerance())
    }
}

impl fmt::Display for ScopeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "  {:<28} max rel error {:.3e} over {} coordinates{}",
                c.name,
                c.max_rel_error,
                c.checked,
                if c.flagged > 0 { format!(" ({} on kinks skipped)", c.flagged) } else { String::new() }
            )?;
        }
        let worst = self.worst().map_or(0.0, |c| c.max_rel_error);
        write!(
            f,
            "{}: {} worst {:.3e} (tolerance {:.0e})",
            self.scope,
            if self.passes() { "PASS" } else { "FAIL" },
            worst,
            self.scope.tolerance()
        )
    }
}

fn merge(name: &str, reports: &[GradCheckReport]) -> CaseReport {
    CaseReport {
        name: name.to_string(),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        flagged: reports.iter().map(|r| r.flagged.len()).sum(),
    }
}

/// Finite-difference check of `f` with respect to the listed parameter
/// coordinates, perturbing the store in place of graph inputs.
pub fn grad_check_store<F>(store: &ParamStore, f: F, h: f64, coords: &[(ParamId, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::new(store);
        let out = f(&mut s)?;
        let v = s.graph.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("gradient check needs a scalar, got {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function evaluated to {v}")));
        }
        Ok(v)
    };
    let (base, grads, kinked) = {
        let mut s = Session::new(store);
        let out = f(&mut s)?;
        let base = s.graph.value(out).item();
        (base, s.backward_params(out, |_| true)?, s.graph.tie_count() > 0)
    };
    if !base.is_finite() {
        return Err(Error::Numeric(format!("function evaluated to {base}")));
    }
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        flagged: Vec::new(),
    };
    for &(id, j) in coords {
        let analytic = grads.get(id)[j];
        let orig = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let (right, left) = ((plus - base) / h, (base - minus) / h);
        // Discrete choices (matching, query filtering, relation labels) can
        // switch inside the stencil; such coordinates are reported, not scored.
        let tol = if kinked { 1e-3 } else { 1e-2 };
        if (right - left).abs() > tol * right.abs().max(left.abs()).max(1.0) {
            report.flagged.push((id.index(), j));
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((id.index(), j));
        }
    }
    Ok(report)
}

/// Every coordinate of every parameter when there are at most `max`, else a
/// random subset of `max` that still touches each parameter tensor.
pub fn sample_coords(store: &ParamStore, max: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |j| (id, j)))
        .collect();
    if all.len() <= max {
        return all;
    }
    let mut picked: Vec<(ParamId, usize)> = store
        .ids()
        .map(|id| (id, rng.random_range(0..store.get(id).numel())))
        .collect();
    let mut rest: Vec<(ParamId, usize)> = all.into_iter().filter(|c| !picked.contains(c)).collect();
    rest.shuffle(rng);
    picked.extend(rest.into_iter().take(max.saturating_sub(picked.len())));
    picked
}

pub fn run_scope(scope: Scope) -> Result<ScopeReport> {
    let cases = match scope {
        Scope::TensorOps => tensor_ops()?,
        Scope::Attention => attention()?,
        Scope::Logic => logic()?,
        Scope::FullModel => vec![full_model(&ModelConfig::minimal(), 400, 0)?],
    };
    Ok(ScopeReport { scope, cases })
}

fn composed(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let (x, w, b) = (v[0], v[1], v[2]);
    let h = g.matmul(x, w)?;
    let h = g.add(h, b)?;
    let n = g.layer_norm(h, 1e-5)?;
    let s = g.softmax(n, 0)?;
    let ls = g.log_softmax(h, 1)?;
    let e = g.expand(s, 1, 2)?;
    let es = g.sum(e, 1)?;
    let m = g.mean(es, 0)?;
    let sig = g.sigmoid(h);
    let sp = g.softplus(h);
    let ex = g.exp(sig);
    let lg = g.log(ex);
    let d = g.div(sp, ex)?;
    let mx = g.max(d, 1)?;
    let t = g.transpose(h)?;
    let tn = g.narrow(t, 1, 1, 2)?;
    let sel = g.index_select(tn, 0, &[3, 0, 3])?;
    let cat = g.concat(&[sel, sel], 1)?;
    let p = g.pow_scalar(sig, 1.7);
    let hi = g.maximum(p, lg)?;
    let lo = g.minimum(p, lg)?;
    let diff = g.sub(hi, lo)?;
    let r = g.reshape(diff, &[12])?;
    let a = g.abs(ls);
    let terms = [g.sum_all(m), g.sum_all(mx), g.sum_all(cat), g.sum_all(r), g.mean_all(a)];
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_scalar(acc, 0.5))
}

fn tensor_ops() -> Result<Vec<CaseReport>> {
    let mut rng = seeded_rng(11);
    let mut reports = Vec::new();
    for _ in 0..20 {
        let inputs = [
            random_normal(&[3, 5], 1.0, &mut rng),
            random_normal(&[5, 4], 1.0, &mut rng),
            random_normal(&[1, 4], 1.0, &mut rng),
        ];
        reports.push(grad_check_many(composed, &inputs, 1e-5)?);
    }
    let mut out = vec![merge("composed ops, 20 points", &reports)];

    let n = 6;
    let mut giou = Vec::new();
    for _ in 0..10 {
        let boxes = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let mut data = Vec::with_capacity(4 * n);
            for _ in 0..n {
                let b = BBox::new(
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.1..0.5),
                    rng.random_range(0.1..0.5),
                )?;
                data.extend(b.to_array());
            }
            Tensor::new(vec![n, 4], data)
        };
        let (a, b) = (boxes(&mut rng)?, boxes(&mut rng)?);
        giou.push(grad_check_many(
            |g, x| {
                let v = giou_graph(g, x[0], x[1])?;
                Ok(g.sum_all(v))
            },
            &[a, b],
            1e-6,
        )?);
    }
    out.push(merge("giou", &giou));
    Ok(out)
}

fn perturb_store(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let noise = random_normal(store.get(id).shape(), std, rng);
        for (p, e) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += e;
        }
    }
}

fn attention() -> Result<Vec<CaseReport>> {
    let d = 4;
    let mut out = Vec::new();

    let mut rng = seeded_rng(21);
    let mut store = ParamStore::new();
    let w = AttentionParams::new(&mut store, "attn", ParamGroup::Reasoner, d, &mut rng);
    let x = store.add("x", ParamGroup::Reasoner, &[5, d], Init::Normal(1.0), &mut rng);
    let pq = store.add("pair_queries", ParamGroup::Reasoner, &[5, d], Init::Normal(1.0), &mut rng);
    let mem = store.add("memory", ParamGroup::Reasoner, &[3, d], Init::Normal(1.0), &mut rng);
    let target = random_normal(&[5, d], 1.0, &mut rng);
    let coords = sample_coords(&store, usize::MAX, &mut rng);
    let r_self = grad_check_store(
        &store,
        |s| {
            let w = w.bind(s);
            let (x, pq, mem) = (s.param(x), s.param(pq), s.param(mem));
            let g = &mut s.graph;
            let a = self_attention(g, x, pq, &w)?;
            let c = cross_attention(g, a, mem, &w)?;
            let t = g.constant(target.clone());
            let p = g.mul(c, t)?;
            Ok(g.sum_all(p))
        },
        1e-5,
        &coords,
    )?;
    out.push(merge("self + cross attention", &[r_self]));

    let mut rng = seeded_rng(22);
    let mut store = ParamStore::new();
    let layer = DecoderLayerParams::new(&mut store, "dec", ParamGroup::HumanDecoder, d, 8, &mut rng);
    perturb_store(&mut store, 0.2, &mut rng);
    let q = store.add("queries", ParamGroup::HumanDecoder, &[3, d], Init::Normal(1.0), &mut rng);
    let mem = store.add("memory", ParamGroup::Encoder, &[4, d], Init::Normal(1.0), &mut rng);
    let target = random_normal(&[3, d], 1.0, &mut rng);
    let coords = sample_coords(&store, usize::MAX, &mut rng);
    let r_dec = grad_check_store(
        &store,
        |s| {
            let w = layer.bind(s);
            let (q, mem) = (s.param(q), s.param(mem));
            let g = &mut s.graph;
            let y = decoder_layer(g, q, mem, &w)?;
            let t = g.constant(target.clone());
            let p = g.mul(y, t)?;
            Ok(g.sum_all(p))
        },
        1e-5,
        &coords,
    )?;
    out.push(merge("decoder layer", &[r_dec]));

    for (triplet, name) in [(true, "triplet interaction decoder"), (false, "pairwise interaction decoder")] {
        let mut reports = Vec::new();
        for seed in 0..2 {
            reports.push(interaction_case(triplet, 30 + seed)?);
        }
        out.push(merge(name, &reports));
    }
    Ok(out)
}

fn interaction_case(triplet: bool, seed: u64) -> Result<GradCheckReport> {
    let d = 4;
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let layers: Vec<InteractionLayerParams> = (0..2)
        .map(|l| InteractionLayerParams::new(&mut store, &format!("layer{l}"), d, 8, triplet, &mut rng))
        .collect();
    perturb_store(&mut store, 0.2, &mut rng);
    let g0 = ParamGroup::Reasoner;
    let qh = store.add("qh", g0, &[2, d], Init::Normal(1.0), &mut rng);
    let qa = store.add("qa", g0, &[3, d], Init::Normal(1.0), &mut rng);
    let qo = store.add("qo", g0, &[2, d], Init::Normal(1.0), &mut rng);
    let mem = store.add("memory", g0, &[3, d], Init::Normal(1.0), &mut rng);
    let x0 = store.add("x0", g0, &[2, 2, d], Init::Normal(0.5), &mut rng);
    let target = random_normal(&[2, 2, d], 1.0, &mut rng);
    let coords = sample_coords(&store, usize::MAX, &mut rng);
    grad_check_store(
        &store,
        |s| {
            let bound: Vec<_> = layers.iter().map(|l| l.bind(s)).collect();
            let (h, a, o, mem, x0) = (s.param(qh), s.param(qa), s.param(qo), s.param(mem), s.param(x0));
            let g = &mut s.graph;
            let set = |role, v| QuerySet { role, embeddings: v, scores: v };
            let (hs, as_, os) = (set(Role::Human, h), set(Role::Action, a), set(Role::Object, o));
            let input = if triplet {
                ReasonerInput::Triplet { human: &hs, action: &as_, object: &os, mode: PairStateInTerms::Mean }
            } else {
                let hh = g.unsqueeze(h, 1)?;
                let oo = g.unsqueeze(o, 0)?;
                ReasonerInput::Pairwise { pair_queries: g.add(hh, oo)? }
            };
            let y = interaction_decoder(g, mem, input, x0, &bound)?;
            let t = g.constant(target.clone());
            let p = g.mul(y.pairs.embeddings, t)?;
            let sq = g.mul(p, p)?;
            let (a, b) = (g.sum_all(p), g.mean_all(sq));
            g.add(a, b)
        },
        1e-5,
        &coords,
    )
}

fn logic() -> Result<Vec<CaseReport>> {
    let mut rng = seeded_rng(41);
    let k = 5;
    let mut out = Vec::new();

    let (a, b, c) = (Formula::pred("a", "x"), Formula::pred("b", "x"), Formula::pred("c", "x"));
    let formulas = [
        Formula::forall("x", a.clone().and(b.clone()).implies(c.clone().not())),
        Formula::exists("x", a.clone().or(b.clone().not()).and(c.clone().or(a.clone()))),
        Formula::forall("x", a.clone().implies(b.clone()).or(c.clone().and(b.clone()).not())),
    ];
    let mut connective = Vec::new();
    for q in [1.0, 2.0, 5.0] {
        let cfg = QuantifierConfig::new(q)?;
        for f in &formulas {
            let inputs: Vec<Tensor> = (0..3)
                .map(|_| Tensor::from_vec((0..k).map(|_| rng.random_range(0.05..0.95)).collect()))
                .collect();
            connective.push(grad_check_many(
                |g, v| {
                    let world: HashMap<String, Var> =
                        ["a", "b", "c"].iter().zip(v).map(|(n, &v)| (n.to_string(), v)).collect();
                    f.eval(g, &world, &cfg)
                },
                &inputs,
                1e-6,
            )?);
        }
    }
    out.push(merge("connectives + quantifiers", &connective));

    let (c, verb_of) = (5, [0, 0, 1, 1, 2]);
    let rules = RuleSet {
        rules: vec![
            Rule { trigger: Trigger::Action(1), relation: Relation::Above, forbid: vec![0, 4] },
            Rule { trigger: Trigger::Action(2), relation: Relation::Below, forbid: vec![1] },
            Rule { trigger: Trigger::Object(0), relation: Relation::Above, forbid: vec![2, 3] },
            Rule { trigger: Trigger::Object(1), relation: Relation::Below, forbid: vec![0, 1, 2] },
        ],
    };
    let mut grounded = Vec::new();
    for (q, object_score) in [(1.0, ObjectScore::Object), (3.0, ObjectScore::Object), (1.0, ObjectScore::ActionOfForbidden)] {
        let cfg = QuantifierConfig::new(q)?;
        let uniform = |rng: &mut ChaCha8Rng, w: usize| {
            Tensor::new(vec![k, w], (0..k * w).map(|_| rng.random_range(0.05..0.95)).collect())
        };
        let (sv, so, sh) = (uniform(&mut rng, 3)?, uniform(&mut rng, 2)?, uniform(&mut rng, c)?);
        let mut p = vec![0.0; k * Relation::ALL.len()];
        for i in 0..k {
            p[i * Relation::ALL.len() + rng.random_range(0..2)] = 1.0;
        }
        let rel = Tensor::new(vec![k, Relation::ALL.len()], p)?;
        grounded.push(grad_check_many(
            |g, v| {
                let t = ScoreTable::new(g, v[0], v[1], v[2], rel.clone())?;
                Ok(logic_loss(g, &rules, &t, &cfg, object_score, &verb_of)?.total)
            },
            &[sv, so, sh],
            1e-6,
        )?);
    }
    out.push(merge("affordance/proxemics losses", &grounded));
    Ok(out)
}

/// Gradient of the full training objective (detection, interaction and logic
/// terms) on one synthetic scene, over `max_coords` sampled parameters.
pub fn full_model(config: &ModelConfig, max_coords: usize, seed: u64) -> Result<CaseReport> {
    let world = World::new(
        WorldConfig {
            feature_dim: config.feature_dim,
            max_humans: 1,
            max_objects: 2,
            max_interactions: 1,
            ..WorldConfig::default()
        },
        DESK_RULES,
    )?;
    let split = SplitSpec::regular();
    // A scene with exactly four tokens.
    let scene = (seed..seed + 1000)
        .map(|s| world.generate_scene(s, &split, ScenePurpose::Train))
        .find(|s| s.as_ref().map_or(true, |s| s.features.shape()[0] == 4))
        .ok_or_else(|| Error::Generation("no four-token scene".into()))??;
    let cfg = RunConfig {
        model: config.clone(),
        ablation: Ablation::new(true, true),
        ..RunConfig::default()
    };
    let model = build_model(&cfg, &world, seed)?;
    let mut store = model.store.clone();
    perturb_store(&mut store, 0.05, &mut seeded_rng(seed ^ 0xfd));
    let obj = Objective::from_config(&cfg);
    let mut rng = seeded_rng(seed ^ 0xc0);
    let coords = sample_coords(&store, max_coords, &mut rng);
    let r = grad_check_store(
        &store,
        |s| {
            let (o, _) = batch_objective(&model, s, &world, &[&scene], &obj)?;
            Ok(o.total)
        },
        1e-6,
        &coords,
    )?;
    Ok(merge("full model objective", &[r]))
}
