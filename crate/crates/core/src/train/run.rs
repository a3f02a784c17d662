use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    batch_logic_loss, box_rows, hoi_terms, match_scene, predicted_box, LogicConfig, LossWeights,
};
use super::optim::{Adam, AdamConfig};
use super::world::{Manifest, Scene, ScenePurpose, SplitSpec, World, WorldConfig};
use crate::error::{Error, Result};
use crate::geometry::classify_relation;
use crate::model::{Checkpoint, Descriptors, Model, ModelConfig, Predictions, ReasonerKind};
use crate::nn::{seeded_rng, ParamGrads, ParamGroup, Session};
use crate::tensor::{Graph, Var};

/// Which of the two components are active. `lvp`/`lop` pick the rule families
/// inside the logic loss and default to on whenever `lrl` is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub tra: bool,
    pub lrl: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lvp: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lop: Option<bool>,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::new(true, true)
    }
}

impl Ablation {
    pub fn new(tra: bool, lrl: bool) -> Self {
        Ablation {
            tra,
            lrl,
            lvp: None,
            lop: None,
        }
    }

    pub fn families(tra: bool, lvp: bool, lop: bool) -> Self {
        Ablation {
            tra,
            lrl: lvp || lop,
            lvp: Some(lvp),
            lop: Some(lop),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lrl && (self.lvp == Some(true) || self.lop == Some(true)) {
            return Err(Error::Config("lvp/lop require lrl".into()));
        }
        if self.lrl && self.lvp == Some(false) && self.lop == Some(false) {
            return Err(Error::Config("lrl with both rule families disabled".into()));
        }
        Ok(())
    }

    pub fn use_vp(&self) -> bool {
        self.lrl && self.lvp.unwrap_or(true)
    }

    pub fn use_op(&self) -> bool {
        self.lrl && self.lop.unwrap_or(true)
    }

    pub fn reasoner(&self) -> ReasonerKind {
        if self.tra {
            ReasonerKind::Triplet
        } else {
            ReasonerKind::Pairwise
        }
    }

    pub fn label(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let mut s = format!("tra={} lrl={}", on(self.tra), on(self.lrl));
        if self.lrl && (self.lvp.is_some() || self.lop.is_some()) {
            s.push_str(&format!(" vp={} op={}", on(self.use_vp()), on(self.use_op())));
        }
        s
    }
}

/// One training run, minus its seed. Also the on-disk config format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub world: WorldConfig,
    /// Model-initialization and batching seeds; one run per seed.
    pub seeds: Vec<u64>,
    /// Seeds the scene manifest, shared by every run of the config.
    pub data_seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    pub batch: usize,
    pub split: SplitSpec,
    /// Rules file; the built-in desk rules when absent.
    pub rules_path: Option<String>,
    pub ablation: Ablation,
    pub output_dir: String,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub logic: LogicConfig,
    /// Evaluate every this many steps (and always at the first and last).
    pub eval_every: usize,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            seeds: vec![0],
            data_seed: 0,
            train_scenes: 2000,
            eval_scenes: 200,
            steps: 2000,
            batch: 4,
            split: SplitSpec::default(),
            rules_path: None,
            ablation: Ablation::default(),
            output_dir: "runs".into(),
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            logic: LogicConfig::default(),
            eval_every: 500,
            top_k: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ablation.validate()?;
        self.optimizer.validate()?;
        self.logic.quantifier.validate()?;
        if self.model.feature_dim != self.world.feature_dim {
            return Err(Error::Config(format!(
                "model feature width {} differs from the world's {}",
                self.model.feature_dim, self.world.feature_dim
            )));
        }
        if self.model.num_actions != self.world.verbs.len() || self.model.num_objects != self.world.objects.len() {
            return Err(Error::Config("model vocabulary sizes differ from the world's".into()));
        }
        if self.batch == 0 || self.train_scenes == 0 || self.top_k == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch, train_scenes, top_k and eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new(self.data_seed, self.train_scenes, self.eval_scenes, self.split.clone())
    }
}

/// Decomposed objective of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls_human: f64,
    pub l_cls_object: f64,
    pub l_box_l1: f64,
    pub l_box_giou: f64,
    pub l_action: f64,
    pub l_interaction: f64,
    /// Weighted sum of the detection terms.
    pub l_hoi: f64,
    pub l_vp: f64,
    pub l_op: f64,
    /// The enabled families' sum, `l_vp + l_op` when both are on.
    pub l_log: f64,
    /// Effective logic weight, zero when the logic loss is off.
    pub alpha: f64,
    /// `l_hoi + alpha · l_log`
    pub total: f64,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.6} = hoi {:.6} + {} · log {:.6} [cls_h {:.4} cls_o {:.4} l1 {:.4} giou {:.4} act {:.4} int {:.4} vp {:.4} op {:.4}]",
            self.total,
            self.l_hoi,
            self.alpha,
            self.l_log,
            self.l_cls_human,
            self.l_cls_object,
            self.l_box_l1,
            self.l_box_giou,
            self.l_action,
            self.l_interaction,
            self.l_vp,
            self.l_op
        )
    }
}

/// The tape handles of a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective {
    pub hoi: Var,
    pub vp: Var,
    pub op: Var,
    pub log: Var,
    pub total: Var,
}

/// What a training step optimizes, besides the data.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub weights: LossWeights,
    pub logic: LogicConfig,
    pub alpha: f64,
    pub vp: bool,
    pub op: bool,
}

impl Objective {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Objective {
            weights: cfg.loss,
            logic: cfg.logic,
            alpha: cfg.model.alpha,
            vp: cfg.ablation.use_vp(),
            op: cfg.ablation.use_op(),
        }
    }

    fn logic_active(&self) -> bool {
        self.alpha > 0.0 && (self.vp || self.op)
    }
}

/// Builds the batch objective on `s` and the report of its values.
pub fn batch_objective(
    model: &Model,
    s: &mut Session,
    world: &World,
    scenes: &[&Scene],
    obj: &Objective,
) -> Result<(BatchObjective, LossReport)> {
    if scenes.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let w = &obj.weights;
    let mut preds = Vec::with_capacity(scenes.len());
    let mut terms = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let p = model.forward(s, &scene.features)?;
        let m = match_scene(&s.graph, &p, scene, w)?;
        terms.push(hoi_terms(&mut s.graph, world, &p, scene, &m, w)?);
        preds.push(p);
    }
    let g = &mut s.graph;
    let inv = 1.0 / scenes.len() as f64;
    let mean = |g: &mut Graph, pick: &dyn Fn(&super::loss::HoiTerms) -> Var| -> Result<Var> {
        let mut acc = pick(&terms[0]);
        for t in &terms[1..] {
            acc = g.add(acc, pick(t))?;
        }
        Ok(g.mul_scalar(acc, inv))
    };
    let cls_h = mean(g, &|t| t.cls_human)?;
    let cls_o = mean(g, &|t| t.cls_object)?;
    let l1 = mean(g, &|t| t.box_l1)?;
    let gi = mean(g, &|t| t.box_giou)?;
    let act = mean(g, &|t| t.action)?;
    let int = mean(g, &|t| t.interaction)?;
    let mut hoi = g.mul_scalar(cls_h, w.class);
    for (v, k) in [(cls_o, w.class), (l1, w.l1), (gi, w.giou), (act, w.action), (int, w.interaction)] {
        let sv = g.mul_scalar(v, k);
        hoi = g.add(hoi, sv)?;
    }
    let pr: Vec<&_> = preds.iter().collect();
    let logic = batch_logic_loss(g, world, &pr, &obj.logic)?;
    let log = match (obj.vp, obj.op) {
        (true, true) => logic.total,
        (true, false) => logic.action,
        (false, true) => logic.object,
        (false, false) => g.scalar(0.0),
    };
    let alpha = if obj.logic_active() { obj.alpha } else { 0.0 };
    let weighted = g.mul_scalar(log, alpha);
    let total = g.add(hoi, weighted)?;
    let val = |v: Var| g.value(v).item();
    let report = LossReport {
        l_cls_human: val(cls_h),
        l_cls_object: val(cls_o),
        l_box_l1: val(l1),
        l_box_giou: val(gi),
        l_action: val(act),
        l_interaction: val(int),
        l_hoi: val(hoi),
        l_vp: val(logic.action),
        l_op: val(logic.object),
        l_log: val(log),
        alpha,
        total: val(total),
    };
    Ok((
        BatchObjective {
            hoi,
            vp: logic.action,
            op: logic.object,
            log,
            total,
        },
        report,
    ))
}

/// Gradients of one step: full-model `∇L_HOI` plus `α ∇L_LOG` restricted to the
/// reasoner group. Also returns the logic part alone (zero when inactive).
pub fn step_gradients(
    model: &Model,
    world: &World,
    scenes: &[&Scene],
    obj: &Objective,
) -> Result<(ParamGrads, ParamGrads, LossReport)> {
    let mut s = Session::new(&model.store);
    let (o, report) = batch_objective(model, &mut s, world, scenes, obj)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {report}")));
    }
    let mut grads = s.backward_params(o.hoi, |_| true)?;
    let logic = if obj.logic_active() {
        let lg = s.backward_params(o.log, |g| g == ParamGroup::Reasoner)?;
        grads.add_scaled(&lg, obj.alpha);
        lg
    } else {
        ParamGrads::zeros(&model.store)
    };
    if !grads.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at loss {report}")));
    }
    Ok((grads, logic, report))
}

pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    world: &World,
    scenes: &[&Scene],
    obj: &Objective,
) -> Result<LossReport> {
    let (grads, _, report) = step_gradients(model, world, scenes, obj)?;
    opt.step(&mut model.store, &grads)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub interaction_accuracy: f64,
    pub rule_violation_rate: f64,
    /// Accuracy on held-out classes; absent for a regular split.
    pub unseen_accuracy: Option<f64>,
    pub seen_accuracy: Option<f64>,
    pub interactions: usize,
    pub unseen_interactions: usize,
}

/// One decoded triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub cell: (usize, usize),
    pub class: usize,
    pub score: f64,
}

/// Greedy per-pair decoding: each kept cell's best non-background class, then
/// the `top_k` highest-scoring cells (ties to the earlier cell).
pub fn decode(g: &Graph, interaction_logits: Var, top_k: usize) -> Vec<Detection> {
    let t = g.value(interaction_logits);
    let (nh, no, c1) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut dets = Vec::with_capacity(nh * no);
    for i in 0..nh {
        for j in 0..no {
            let row = &t.data()[(i * no + j) * c1..(i * no + j + 1) * c1];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let mut best = 0;
            for k in 1..c1 - 1 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            dets.push(Detection {
                cell: (i, j),
                class: best,
                score: (row[best] - m).exp() / z,
            });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(top_k);
    dets
}

/// Per-scene counts behind [`Metrics`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub hits: usize,
    pub total: usize,
    pub unseen_hits: usize,
    pub unseen_total: usize,
    pub violations: usize,
    pub decoded: usize,
}

impl std::ops::AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        self.hits += o.hits;
        self.total += o.total;
        self.unseen_hits += o.unseen_hits;
        self.unseen_total += o.unseen_total;
        self.violations += o.violations;
        self.decoded += o.decoded;
    }
}

/// Scores one scene's predictions. A ground-truth triplet is a hit when the
/// cell of its matched human and object queries is among the `top_k`
/// detections with the right class; every detection is checked against the
/// rules at the relation of its predicted boxes.
pub fn score_scene(
    g: &Graph,
    world: &World,
    p: &Predictions,
    scene: &Scene,
    split: &SplitSpec,
    top_k: usize,
    w: &LossWeights,
) -> Result<Tally> {
    let mut t = Tally::default();
    let m = match_scene(g, p, scene, w)?;
    let dets = decode(g, p.interaction_logits, top_k);
    for gt in &scene.interactions {
        let class = scene.interaction_class(&world.vocab, gt);
        let unseen = split.is_unseen(&world.vocab, class);
        let cell = (
            p.kept_humans.iter().position(|&q| m.human_of(q) == Some(gt.human)),
            p.kept_objects.iter().position(|&q| m.object_of(q) == Some(gt.object)),
        );
        let hit = match cell {
            (Some(i), Some(j)) => dets.iter().any(|d| d.cell == (i, j) && d.class == class),
            _ => false,
        };
        t.total += 1;
        t.hits += hit as usize;
        if unseen {
            t.unseen_total += 1;
            t.unseen_hits += hit as usize;
        }
    }
    let hb = box_rows(g.value(p.human_boxes));
    let ob = box_rows(g.value(p.object_boxes));
    for d in &dets {
        let (v, o) = world.vocab.interactions[d.class];
        let rel = classify_relation(
            &predicted_box(&hb[p.kept_humans[d.cell.0]]),
            &predicted_box(&ob[p.kept_objects[d.cell.1]]),
            &world.config.thresholds,
        );
        t.decoded += 1;
        t.violations += world.rules.violated_by(v, o, rel, d.class) as usize;
    }
    Ok(t)
}

impl Metrics {
    pub fn from_tally(t: &Tally, split: &SplitSpec) -> Metrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let held_out = split.kind != super::world::SplitKind::Regular;
        Metrics {
            interaction_accuracy: ratio(t.hits, t.total),
            rule_violation_rate: ratio(t.violations, t.decoded),
            unseen_accuracy: (held_out && t.unseen_total > 0).then(|| ratio(t.unseen_hits, t.unseen_total)),
            seen_accuracy: held_out.then(|| ratio(t.hits - t.unseen_hits, t.total - t.unseen_total)),
            interactions: t.total,
            unseen_interactions: t.unseen_total,
        }
    }
}

pub fn evaluate(model: &Model, world: &World, scenes: &[Scene], split: &SplitSpec, top_k: usize, w: &LossWeights) -> Result<Metrics> {
    let mut tally = Tally::default();
    for scene in scenes {
        let mut s = Session::new(&model.store);
        let p = model.forward(&mut s, &scene.features)?;
        tally += score_scene(&s.graph, world, &p, scene, split, top_k, w)?;
    }
    Ok(Metrics::from_tally(&tally, split))
}

/// One `metrics.csv` row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_total: f64,
    pub l_hoi: f64,
    pub l_vp: f64,
    pub l_op: f64,
    pub interaction_accuracy: f64,
    pub rule_violation_rate: f64,
    pub unseen_accuracy: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,l_total,l_hoi,l_vp,l_op,interaction_accuracy,rule_violation_rate,unseen_accuracy";

    pub fn csv(&self) -> String {
        let unseen = self.unseen_accuracy.map(|u| format!("{u:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.step,
            self.l_total,
            self.l_hoi,
            self.l_vp,
            self.l_op,
            self.interaction_accuracy,
            self.rule_violation_rate,
            unseen
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub steps: usize,
    pub ablation: Ablation,
    pub split: SplitSpec,
    pub final_loss: LossReport,
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub checkpoint: Checkpoint,
}

pub fn descriptors(world: &World) -> Descriptors {
    Descriptors {
        verbs: world.verb_descriptors.clone(),
        objects: world.object_descriptors.clone(),
        interactions: world.interaction_descriptors.clone(),
    }
}

pub fn build_model(cfg: &RunConfig, world: &World, seed: u64) -> Result<Model> {
    let mut rng = seeded_rng(seed);
    Model::new(cfg.model.clone(), cfg.ablation.reasoner(), descriptors(world), &mut rng)
}

/// Scenes of a run's manifest, generated once and shared by all its seeds.
pub struct Data {
    pub manifest: Manifest,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Data {
    pub fn generate(cfg: &RunConfig, world: &World) -> Result<Self> {
        let manifest = cfg.manifest();
        Ok(Data {
            train: manifest.scenes(world, ScenePurpose::Train)?,
            eval: manifest.scenes(world, ScenePurpose::Eval)?,
            manifest,
        })
    }
}

/// Trains one seed. `on_row` sees each metrics row as it is produced.
pub fn run(
    cfg: &RunConfig,
    world: &World,
    data: &Data,
    seed: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut model = build_model(cfg, world, seed)?;
    let mut opt = Adam::new(&model.store, cfg.optimizer)?;
    let obj = Objective::from_config(cfg);
    let mut rng = seeded_rng(seed ^ 0x5eed_ba7c);
    let eval_set: &[Scene] = if data.eval.is_empty() { &data.train } else { &data.eval };
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<&Scene> {
        (0..cfg.batch).map(|_| &data.train[rng.random_range(0..data.train.len())]).collect()
    };
    let mut rows = Vec::new();
    let mut last = {
        let batch = draw(&mut rng);
        let mut s = Session::new(&model.store);
        batch_objective(&model, &mut s, world, &batch, &obj)?.1
    };
    let mut metrics = evaluate(&model, world, eval_set, &cfg.split, cfg.top_k, &cfg.loss)?;
    let mut record = |step: usize, l: &LossReport, m: &Metrics, rows: &mut Vec<MetricsRow>| {
        let row = MetricsRow {
            step,
            l_total: l.total,
            l_hoi: l.l_hoi,
            l_vp: l.l_vp,
            l_op: l.l_op,
            interaction_accuracy: m.interaction_accuracy,
            rule_violation_rate: m.rule_violation_rate,
            unseen_accuracy: m.unseen_accuracy,
        };
        on_row(&row);
        rows.push(row);
    };
    record(0, &last, &metrics, &mut rows);
    for step in 1..=cfg.steps {
        let batch = draw(&mut rng);
        last = train_step(&mut model, &mut opt, world, &batch, &obj)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            metrics = evaluate(&model, world, eval_set, &cfg.split, cfg.top_k, &cfg.loss)?;
            record(step, &last, &metrics, &mut rows);
        }
    }
    Ok(RunOutput {
        rows,
        summary: Summary {
            seed,
            steps: cfg.steps,
            ablation: cfg.ablation,
            split: cfg.split.clone(),
            final_loss: last,
            metrics,
        },
        checkpoint: model.checkpoint(),
    })
}
