use serde::{Deserialize, Serialize};

use super::rules::{Rule, RuleSet, Trigger};
use super::{quantify, Quantifier, QuantifierConfig};
use crate::error::{Error, Result};
use crate::geometry::Relation;
use crate::tensor::{Graph, Tensor, Var};

/// Per-sample predicate degrees for `K` samples.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    /// `s_k[v]`, `(K, V)`.
    pub action: Var,
    /// `s_k[o]`, `(K, O)`.
    pub object: Var,
    /// `s_k[h]`, `(K, C)`.
    pub interaction: Var,
    /// One-hot `p_k` over [`Relation::ALL`], `(K, 5)`.
    pub relation: Tensor,
}

impl ScoreTable {
    pub fn new(g: &Graph, action: Var, object: Var, interaction: Var, relation: Tensor) -> Result<Self> {
        let k = relation.shape().first().copied().unwrap_or(0);
        if relation.shape() != [k, Relation::ALL.len()] {
            return Err(Error::shape("ScoreTable", relation.shape(), &[k, Relation::ALL.len()]));
        }
        for v in [action, object, interaction] {
            let s = g.shape(v);
            if s.len() != 2 || s[0] != k {
                return Err(Error::shape("ScoreTable", s, &[k, 0]));
            }
            if let Some(bad) = g.value(v).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Domain(format!("score {bad} outside [0, 1]")));
            }
        }
        if relation.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Domain("relation indicators must be 0 or 1".into()));
        }
        Ok(ScoreTable {
            action,
            object,
            interaction,
            relation,
        })
    }

    pub fn samples(&self) -> usize {
        self.relation.shape()[0]
    }
}

/// Which score gates an object rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectScore {
    /// The object's own class score `s_k[o]`.
    #[default]
    Object,
    /// The action score of each forbidden interaction's verb, `s_k[v_n]`.
    ActionOfForbidden,
}

/// Satisfaction degree of one rule:
/// `G = ∀_k (1 − mean_m t_k·p_k·s_k[h_m])`, which at `q = 1` is
/// `1 − (1/M) Σ_m (1/K) Σ_k t_k·s_k[h_m]·p_k`.
pub fn ground_rule(g: &mut Graph, rule: &Rule, scores: &ScoreTable, cfg: &QuantifierConfig) -> Result<Var> {
    let k = scores.samples();
    let classes = g.shape(scores.interaction)[1];
    if rule.forbid.is_empty() {
        return Err(Error::Vocabulary("rule with an empty forbid list".into()));
    }
    if let Some(h) = rule.forbid.iter().find(|&&h| h >= classes) {
        return Err(Error::Vocabulary(format!("interaction id {h} not among {classes} classes")));
    }
    let trigger = match rule.trigger {
        Trigger::Action(v) => {
            check_column(g, scores.action, v, "verb")?;
            g.index_select(scores.action, 1, &[v])?
        }
        Trigger::Object(o) => {
            check_column(g, scores.object, o, "object")?;
            g.index_select(scores.object, 1, &[o])?
        }
    };
    let h = g.index_select(scores.interaction, 1, &rule.forbid)?;
    gated(g, trigger, h, scores, rule, k, cfg)
}

fn check_column(g: &Graph, v: Var, col: usize, what: &str) -> Result<()> {
    if col >= g.shape(v)[1] {
        return Err(Error::Vocabulary(format!("{what} id {col} out of range")));
    }
    Ok(())
}

fn gated(g: &mut Graph, trigger: Var, h: Var, scores: &ScoreTable, rule: &Rule, k: usize, cfg: &QuantifierConfig) -> Result<Var> {
    let p: Vec<f64> = (0..k).map(|i| scores.relation.at(&[i, rule.relation.index()])).collect();
    let p = g.constant(Tensor::new(vec![k, 1], p)?);
    let th = g.mul(trigger, h)?;
    let joint = g.mul(th, p)?;
    let violation = g.mean(joint, 1)?;
    let psi = g.one_minus(violation);
    quantify(g, Quantifier::ForAll, psi, 0, cfg)
}

/// [`ground_rule`] where object rules may be gated by the verb of each forbidden
/// interaction; `verb_of[h]` is the verb id of interaction class `h`.
pub fn ground_rule_with_verbs(
    g: &mut Graph,
    rule: &Rule,
    scores: &ScoreTable,
    cfg: &QuantifierConfig,
    object_score: ObjectScore,
    verb_of: &[usize],
) -> Result<Var> {
    match (rule.trigger, object_score) {
        (Trigger::Object(_), ObjectScore::ActionOfForbidden) => {
            let k = scores.samples();
            let classes = g.shape(scores.interaction)[1];
            if rule.forbid.is_empty() {
                return Err(Error::Vocabulary("rule with an empty forbid list".into()));
            }
            if let Some(h) = rule.forbid.iter().find(|&&h| h >= classes || h >= verb_of.len()) {
                return Err(Error::Vocabulary(format!("interaction id {h} out of range")));
            }
            let verbs: Vec<usize> = rule.forbid.iter().map(|&h| verb_of[h]).collect();
            if let Some(&v) = verbs.iter().max() {
                check_column(g, scores.action, v, "verb")?;
            }
            let trigger = g.index_select(scores.action, 1, &verbs)?;
            let h = g.index_select(scores.interaction, 1, &rule.forbid)?;
            gated(g, trigger, h, scores, rule, k, cfg)
        }
        _ => ground_rule(g, rule, scores, cfg),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogicLoss {
    /// `L_{v,p}`: mean of `1 − G` over action rules.
    pub action: Var,
    /// `L_{o,p}`: mean of `1 − G` over object rules.
    pub object: Var,
    /// `L_LOG = L_{v,p} + L_{o,p}`.
    pub total: Var,
}

pub fn logic_loss(
    g: &mut Graph,
    rules: &RuleSet,
    scores: &ScoreTable,
    cfg: &QuantifierConfig,
    object_score: ObjectScore,
    verb_of: &[usize],
) -> Result<LogicLoss> {
    let family = |g: &mut Graph, rs: Vec<&Rule>| -> Result<Var> {
        if rs.is_empty() {
            return Ok(g.scalar(0.0));
        }
        let mut acc: Option<Var> = None;
        for r in &rs {
            let gr = ground_rule_with_verbs(g, r, scores, cfg, object_score, verb_of)?;
            let l = g.one_minus(gr);
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        Ok(g.mul_scalar(acc.expect("non-empty"), 1.0 / rs.len() as f64))
    };
    let action = family(g, rules.action_rules().collect())?;
    let object = family(g, rules.object_rules().collect())?;
    let total = g.add(action, object)?;
    Ok(LogicLoss { action, object, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Relation;

    fn table(g: &mut Graph, sv: f64, sh: f64, p: bool) -> ScoreTable {
        let a = g.constant(Tensor::new(vec![1, 1], vec![sv]).unwrap());
        let o = g.constant(Tensor::new(vec![1, 1], vec![sv]).unwrap());
        let h = g.constant(Tensor::new(vec![1, 1], vec![sh]).unwrap());
        let mut rel = vec![0.0; 5];
        rel[Relation::Above.index()] = if p { 1.0 } else { 0.0 };
        ScoreTable::new(g, a, o, h, Tensor::new(vec![1, 5], rel).unwrap()).unwrap()
    }

    fn rule(trigger: Trigger) -> Rule {
        Rule {
            trigger,
            relation: Relation::Above,
            forbid: vec![0],
        }
    }

    #[test]
    fn grounding_examples() {
        let cfg = QuantifierConfig::default();
        let mut g = Graph::new();
        let t = table(&mut g, 1.0, 0.0, true);
        let v = ground_rule(&mut g, &rule(Trigger::Action(0)), &t, &cfg).unwrap();
        assert_eq!(g.value(v).item(), 1.0);
        let t = table(&mut g, 1.0, 1.0, true);
        let v = ground_rule(&mut g, &rule(Trigger::Action(0)), &t, &cfg).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let t = table(&mut g, 0.5, 0.4, true);
        let v = ground_rule(&mut g, &rule(Trigger::Action(0)), &t, &cfg).unwrap();
        assert!((g.value(v).item() - 0.8).abs() < 1e-15);
        let t = table(&mut g, 1.0, 1.0, false);
        let v = ground_rule(&mut g, &rule(Trigger::Action(0)), &t, &cfg).unwrap();
        assert_eq!(g.value(v).item(), 1.0);
    }

    #[test]
    fn loss_examples() {
        let cfg = QuantifierConfig::default();
        let mut g = Graph::new();
        let t = table(&mut g, 0.5, 0.4, true);
        let empty = logic_loss(&mut g, &RuleSet::default(), &t, &cfg, ObjectScore::Object, &[0]).unwrap();
        for v in [empty.action, empty.object, empty.total] {
            assert_eq!(g.value(v).item(), 0.0);
        }
        let rs = RuleSet {
            rules: vec![rule(Trigger::Action(0))],
        };
        let l = logic_loss(&mut g, &rs, &t, &cfg, ObjectScore::Object, &[0]).unwrap();
        assert!((g.value(l.action).item() - 0.2).abs() < 1e-15);
        assert_eq!(g.value(l.object).item(), 0.0);
        assert!((g.value(l.total).item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn unknown_interaction_is_vocabulary_error() {
        let cfg = QuantifierConfig::default();
        let mut g = Graph::new();
        let t = table(&mut g, 0.5, 0.4, true);
        let mut r = rule(Trigger::Action(0));
        r.forbid = vec![3];
        assert!(matches!(
            ground_rule(&mut g, &r, &t, &cfg),
            Err(Error::Vocabulary(_))
        ));
    }
}
