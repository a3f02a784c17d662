use serde::{Deserialize, Serialize};

use super::matching::hungarian_match;
use super::world::{Scene, World};
use crate::error::{Error, Result};
use crate::geometry::{classify_relation, giou, giou_graph, BBox, Relation, RelationThresholds};
use crate::logic::{logic_loss, ObjectScore, QuantifierConfig, ScoreTable};
use crate::model::Predictions;
use crate::tensor::{Graph, Tensor, Var};

/// Relative weights of the detection terms. Class, ℓ1 and GIoU follow the
/// usual 1/5/2 set-prediction ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weight of the no-object class in the entity class losses.
    pub no_object: f64,
    pub action: f64,
    pub interaction: f64,
    /// Weight of the background class in the interaction loss.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
            action: 1.0,
            interaction: 1.0,
            background: 0.1,
        }
    }
}

/// Which prediction answers which ground-truth entity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneMatch {
    /// `(query, gt human)`
    pub humans: Vec<(usize, usize)>,
    /// `(query, gt object)`
    pub objects: Vec<(usize, usize)>,
}

impl SceneMatch {
    pub fn human_of(&self, query: usize) -> Option<usize> {
        self.humans.iter().find(|m| m.0 == query).map(|m| m.1)
    }

    pub fn object_of(&self, query: usize) -> Option<usize> {
        self.objects.iter().find(|m| m.0 == query).map(|m| m.1)
    }
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data()
        .chunks(w)
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

pub(crate) fn box_rows(t: &Tensor) -> Vec<[f64; 4]> {
    t.data().chunks(4).map(|r| [r[0], r[1], r[2], r[3]]).collect()
}

/// A predicted box as a valid [`BBox`]; degenerate extents are floored.
pub(crate) fn predicted_box(r: &[f64; 4]) -> BBox {
    BBox::new(r[0], r[1], r[2].max(1e-6), r[3].max(1e-6)).expect("sigmoid outputs are finite")
}

fn box_cost(pred: &[f64; 4], gt: &BBox, w: &LossWeights) -> f64 {
    let l1: f64 = pred.iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum();
    let gi = giou(&predicted_box(pred), gt).unwrap_or(-1.0);
    w.l1 * l1 - w.giou * gi
}

/// Hungarian assignment over a row-major `(p, gts)` cost list; empty when
/// either side is.
fn assign(p: usize, gts: usize, cost: Vec<f64>) -> Result<Vec<(usize, usize)>> {
    if p == 0 || gts == 0 {
        return Ok(Vec::new());
    }
    hungarian_match(&Tensor::new(vec![p, gts], cost)?)
}

/// Per-role Hungarian matching with class, ℓ1 and GIoU costs.
pub fn match_scene(g: &Graph, pred: &Predictions, scene: &Scene, w: &LossWeights) -> Result<SceneMatch> {
    let hp = softmax_rows(g.value(pred.human_logits));
    let hb = box_rows(g.value(pred.human_boxes));
    let n = hp.len();
    let mut cost = Vec::with_capacity(n * scene.humans.len());
    for i in 0..n {
        for gt in &scene.humans {
            cost.push(-w.class * hp[i][0] + box_cost(&hb[i], gt, w));
        }
    }
    let humans = assign(n, scene.humans.len(), cost)?;

    let op = softmax_rows(g.value(pred.object_logits));
    let ob = box_rows(g.value(pred.object_boxes));
    let mut cost = Vec::with_capacity(n * scene.objects.len());
    for i in 0..n {
        for gt in &scene.objects {
            cost.push(-w.class * op[i][gt.class] + box_cost(&ob[i], &gt.bbox, w));
        }
    }
    let objects = assign(n, scene.objects.len(), cost)?;
    Ok(SceneMatch { humans, objects })
}

/// Weighted cross-entropy: `−Σ_i w_i log p_i[t_i] / Σ_i w_i` over the rows of
/// `logits`, classes on the last axis.
fn weighted_ce(g: &mut Graph, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let c = *shape.last().expect("rank ≥ 1");
    let rows = targets.len();
    if shape.iter().product::<usize>() != rows * c {
        return Err(Error::shape("weighted_ce", &shape, &[rows, c]));
    }
    let flat = g.reshape(logits, &[rows, c])?;
    let ls = g.log_softmax(flat, 1)?;
    let total: f64 = weights.iter().sum();
    let mut mask = vec![0.0; rows * c];
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        mask[r * c + t] = -w / total;
    }
    let mask = g.constant(Tensor::new(vec![rows, c], mask)?);
    let picked = g.mul(ls, mask)?;
    Ok(g.sum_all(picked))
}

/// Mean binary cross-entropy with logits.
fn bce_logits(g: &mut Graph, z: Var, y: &[f64]) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let t = g.constant(Tensor::new(shape, y.to_vec())?);
    let sp = g.softplus(z);
    let yz = g.mul(t, z)?;
    let l = g.sub(sp, yz)?;
    Ok(g.mean_all(l))
}

/// Detection terms of one scene, as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct HoiTerms {
    pub cls_human: Var,
    pub cls_object: Var,
    pub box_l1: Var,
    pub box_giou: Var,
    pub action: Var,
    pub interaction: Var,
}

/// Grid target of every kept `(human, object)` cell: the interaction class of
/// the matched pair, or background (`C`).
pub fn grid_targets(world: &World, pred: &Predictions, scene: &Scene, m: &SceneMatch) -> Vec<usize> {
    let c = world.num_interactions();
    let mut out = Vec::with_capacity(pred.kept_humans.len() * pred.kept_objects.len());
    for &qh in &pred.kept_humans {
        for &qo in &pred.kept_objects {
            let t = match (m.human_of(qh), m.object_of(qo)) {
                (Some(a), Some(b)) => scene
                    .interactions
                    .iter()
                    .find(|i| i.human == a && i.object == b)
                    .map(|i| scene.interaction_class(&world.vocab, i))
                    .unwrap_or(c),
                _ => c,
            };
            out.push(t);
        }
    }
    out
}

pub fn hoi_terms(
    g: &mut Graph,
    world: &World,
    pred: &Predictions,
    scene: &Scene,
    m: &SceneMatch,
    w: &LossWeights,
) -> Result<HoiTerms> {
    let n = g.shape(pred.human_logits)[0];
    let o = world.vocab.objects.len();

    let mut t = vec![1; n];
    let mut wt = vec![w.no_object; n];
    for &(q, _) in &m.humans {
        t[q] = 0;
        wt[q] = 1.0;
    }
    let cls_human = weighted_ce(g, pred.human_logits, &t, &wt)?;

    let mut t = vec![o; n];
    let mut wt = vec![w.no_object; n];
    for &(q, b) in &m.objects {
        t[q] = scene.objects[b].class;
        wt[q] = 1.0;
    }
    let cls_object = weighted_ce(g, pred.object_logits, &t, &wt)?;

    let matched = m.humans.len() + m.objects.len();
    let (box_l1, box_giou) = if matched == 0 {
        (g.scalar(0.0), g.scalar(0.0))
    } else {
        let hq: Vec<usize> = m.humans.iter().map(|x| x.0).collect();
        let oq: Vec<usize> = m.objects.iter().map(|x| x.0).collect();
        let ph = g.index_select(pred.human_boxes, 0, &hq)?;
        let po = g.index_select(pred.object_boxes, 0, &oq)?;
        let p = g.concat(&[ph, po], 0)?;
        let gt: Vec<f64> = m
            .humans
            .iter()
            .map(|x| scene.humans[x.1])
            .chain(m.objects.iter().map(|x| scene.objects[x.1].bbox))
            .flat_map(|b| b.to_array())
            .collect();
        let gt = g.constant(Tensor::new(vec![matched, 4], gt)?);
        let diff = g.sub(p, gt)?;
        let ad = g.abs(diff);
        let l1 = g.sum_all(ad);
        let l1 = g.mul_scalar(l1, 1.0 / matched as f64);
        let gi = giou_graph(g, p, gt)?;
        let one_minus = g.one_minus(gi);
        (l1, g.mean_all(one_minus))
    };

    // Image-level verbs, max-pooled over action queries, plus objectness of the
    // queries matched to ground-truth interactions by verb score.
    let v = world.vocab.verbs.len();
    let present = scene.verbs_present();
    let y: Vec<f64> = (0..v).map(|k| if present.contains(&k) { 1.0 } else { 0.0 }).collect();
    let pooled = g.max(pred.action_logits, 0)?;
    let image = bce_logits(g, pooled, &y)?;
    let al = g.value(pred.action_logits).clone();
    let gi = scene.interactions.len();
    let mut cost = Vec::with_capacity(n * gi);
    for q in 0..n {
        for i in &scene.interactions {
            let z = al.at(&[q, i.verb]);
            cost.push(-1.0 / (1.0 + (-z).exp()));
        }
    }
    let assigned = assign(n, gi, cost)?;
    let mut y = vec![0.0; n];
    for (q, _) in assigned {
        y[q] = 1.0;
    }
    let objectness = bce_logits(g, pred.action_objectness, &y)?;
    let action = g.add(image, objectness)?;

    let targets = grid_targets(world, pred, scene, m);
    let bg = world.num_interactions();
    let wt: Vec<f64> = targets.iter().map(|&t| if t == bg { w.background } else { 1.0 }).collect();
    let interaction = weighted_ce(g, pred.interaction_logits, &targets, &wt)?;

    Ok(HoiTerms {
        cls_human,
        cls_object,
        box_l1,
        box_giou,
        action,
        interaction,
    })
}

/// Predicate degrees of every kept cell of one scene, `K = N/2 · N/2` rows.
pub struct CellScores {
    pub action: Var,
    pub object: Var,
    pub interaction: Var,
    pub relation: Tensor,
}

pub fn cell_scores(g: &mut Graph, pred: &Predictions, num_objects: usize, t: &RelationThresholds) -> Result<CellScores> {
    let (nh, no) = (pred.kept_humans.len(), pred.kept_objects.len());
    let k = nh * no;
    let pooled = g.max(pred.action_logits, 0)?;
    let sv = g.sigmoid(pooled);
    let action = g.expand(sv, 0, k)?;

    let op = g.softmax(pred.object_logits, 1)?;
    let op = g.narrow(op, 1, 0, num_objects)?;
    let op = g.index_select(op, 0, &pred.kept_objects)?;
    let op = g.expand(op, 0, nh)?;
    let object = g.reshape(op, &[k, num_objects])?;

    let c1 = *g.shape(pred.interaction_logits).last().expect("rank 3");
    let ip = g.softmax(pred.interaction_logits, 2)?;
    let ip = g.narrow(ip, 2, 0, c1 - 1)?;
    let interaction = g.reshape(ip, &[k, c1 - 1])?;

    let hb = box_rows(g.value(pred.human_boxes));
    let ob = box_rows(g.value(pred.object_boxes));
    let mut rel = vec![0.0; k * Relation::ALL.len()];
    for (a, &qh) in pred.kept_humans.iter().enumerate() {
        for (b, &qo) in pred.kept_objects.iter().enumerate() {
            let r = classify_relation(&predicted_box(&hb[qh]), &predicted_box(&ob[qo]), t);
            rel[(a * no + b) * Relation::ALL.len() + r.index()] = 1.0;
        }
    }
    Ok(CellScores {
        action,
        object,
        interaction,
        relation: Tensor::new(vec![k, Relation::ALL.len()], rel)?,
    })
}

/// Logic-loss settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogicConfig {
    pub quantifier: QuantifierConfig,
    pub object_score: ObjectScore,
}

/// `L_{v,p}` and `L_{o,p}` over the kept cells of a batch.
pub fn batch_logic_loss(
    g: &mut Graph,
    world: &World,
    preds: &[&Predictions],
    cfg: &LogicConfig,
) -> Result<crate::logic::LogicLoss> {
    let mut parts = Vec::new();
    for p in preds {
        parts.push(cell_scores(g, p, world.vocab.objects.len(), &world.config.thresholds)?);
    }
    let cat = |g: &mut Graph, f: &dyn Fn(&CellScores) -> Var| -> Result<Var> {
        let vs: Vec<Var> = parts.iter().map(f).collect();
        if vs.len() == 1 {
            Ok(vs[0])
        } else {
            g.concat(&vs, 0)
        }
    };
    let action = cat(g, &|c| c.action)?;
    let object = cat(g, &|c| c.object)?;
    let interaction = cat(g, &|c| c.interaction)?;
    let width = Relation::ALL.len();
    let rel: Vec<f64> = parts.iter().flat_map(|c| c.relation.data().iter().copied()).collect();
    let relation = Tensor::new(vec![rel.len() / width, width], rel)?;
    let table = ScoreTable::new(g, action, object, interaction, relation)?;
    logic_loss(g, &world.rules, &table, &cfg.quantifier, cfg.object_score, &world.verb_of())
}
