//! Differentiable first-order logic over product-logic connectives and
//! generalized-mean quantifiers.
//!
//! A [`Formula`] is evaluated either on plain truth degrees
//! ([`Formula::eval_ground`]) or on the tape ([`Formula::eval`]), where every
//! bound variable owns a tensor axis over a shared finite domain.

mod ground;
mod rules;

pub use ground::{ground_rule, ground_rule_with_verbs, logic_loss, LogicLoss, ObjectScore, ScoreTable};
pub use rules::{parse_rules, Rule, RuleSet, Trigger, Vocabulary};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Connective {
    And,
    Or,
    Implies,
}

fn check_degree(v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::Domain(format!("truth degree {v} outside [0, 1]")))
    }
}

pub fn not(a: f64) -> Result<f64> {
    Ok(1.0 - check_degree(a)?)
}

pub fn connect(op: Connective, a: f64, b: f64) -> Result<f64> {
    let (a, b) = (check_degree(a)?, check_degree(b)?);
    let v = match op {
        Connective::And => a * b,
        Connective::Or => a + b - a * b,
        Connective::Implies => 1.0 - a + a * b,
    };
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quantifier {
    ForAll,
    Exists,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantifierConfig {
    pub q: f64,
}

impl Default for QuantifierConfig {
    fn default() -> Self {
        QuantifierConfig { q: 1.0 }
    }
}

impl QuantifierConfig {
    pub fn new(q: f64) -> Result<Self> {
        let c = QuantifierConfig { q };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q.is_finite() && self.q >= 1.0) {
            return Err(Error::Config(format!("quantifier exponent must be ≥ 1, got {}", self.q)));
        }
        Ok(())
    }
}

/// `∃: (mean ψ^q)^{1/q}`, `∀: 1 − (mean (1−ψ)^q)^{1/q}`.
pub fn eval_quantifier(kind: Quantifier, values: &[f64], cfg: &QuantifierConfig) -> Result<f64> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Contract("quantifier over an empty domain".into()));
    }
    let q = cfg.q;
    let k = values.len() as f64;
    let power_mean = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        if q == 1.0 {
            it.sum::<f64>() / k
        } else {
            (it.map(|v| v.powf(q)).sum::<f64>() / k).powf(1.0 / q)
        }
    };
    for &v in values {
        check_degree(v)?;
    }
    Ok(match kind {
        Quantifier::Exists => power_mean(&mut values.iter().copied()),
        Quantifier::ForAll => 1.0 - power_mean(&mut values.iter().map(|v| 1.0 - v)),
    })
}

/// Tape version of [`eval_quantifier`], reducing `values` along `axis`.
pub fn quantify(g: &mut Graph, kind: Quantifier, values: Var, axis: usize, cfg: &QuantifierConfig) -> Result<Var> {
    cfg.validate()?;
    let x = match kind {
        Quantifier::Exists => values,
        Quantifier::ForAll => g.one_minus(values),
    };
    let m = if cfg.q == 1.0 {
        g.mean(x, axis)?
    } else {
        let p = g.pow_scalar(x, cfg.q);
        let m = g.mean(p, axis)?;
        g.pow_scalar(m, 1.0 / cfg.q)
    };
    Ok(match kind {
        Quantifier::Exists => m,
        Quantifier::ForAll => g.one_minus(m),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Formula {
    Pred { name: String, var: String },
    Not(Box<Formula>),
    Binary(Connective, Box<Formula>, Box<Formula>),
    Quant(Quantifier, String, Box<Formula>),
}

impl Formula {
    pub fn pred(name: impl Into<String>, var: impl Into<String>) -> Self {
        Formula::Pred {
            name: name.into(),
            var: var.into(),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Formula::Not(Box::new(self))
    }

    pub fn and(self, other: Formula) -> Self {
        Formula::Binary(Connective::And, Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Formula) -> Self {
        Formula::Binary(Connective::Or, Box::new(self), Box::new(other))
    }

    pub fn implies(self, other: Formula) -> Self {
        Formula::Binary(Connective::Implies, Box::new(self), Box::new(other))
    }

    pub fn forall(var: impl Into<String>, body: Formula) -> Self {
        Formula::Quant(Quantifier::ForAll, var.into(), Box::new(body))
    }

    pub fn exists(var: impl Into<String>, body: Formula) -> Self {
        Formula::Quant(Quantifier::Exists, var.into(), Box::new(body))
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::Pred { .. } => 0,
            Formula::Not(f) | Formula::Quant(_, _, f) => 1 + f.depth(),
            Formula::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Truth degree of a quantifier-free formula with leaf degrees from `leaf(name)`.
    pub fn eval_ground(&self, leaf: &impl Fn(&str) -> Option<f64>) -> Result<f64> {
        match self {
            Formula::Pred { name, .. } => {
                let v = leaf(name).ok_or_else(|| Error::Vocabulary(format!("no truth degree for `{name}`")))?;
                check_degree(v)
            }
            Formula::Not(f) => not(f.eval_ground(leaf)?),
            Formula::Binary(op, a, b) => connect(*op, a.eval_ground(leaf)?, b.eval_ground(leaf)?),
            Formula::Quant(..) => Err(Error::Contract(
                "eval_ground takes quantifier-free formulas".into(),
            )),
        }
    }

    /// Bound variables in binding order; each must be bound exactly once and
    /// every predicate variable must be bound.
    pub fn bound_variables(&self) -> Result<Vec<String>> {
        fn walk(f: &Formula, scope: &mut Vec<String>, seen: &mut Vec<String>) -> Result<()> {
            match f {
                Formula::Pred { var, name } => {
                    if !scope.contains(var) {
                        return Err(Error::Contract(format!("free variable `{var}` in {name}({var})")));
                    }
                    Ok(())
                }
                Formula::Not(a) => walk(a, scope, seen),
                Formula::Binary(_, a, b) => {
                    walk(a, scope, seen)?;
                    walk(b, scope, seen)
                }
                Formula::Quant(_, v, body) => {
                    if seen.contains(v) {
                        return Err(Error::Contract(format!("variable `{v}` bound twice")));
                    }
                    seen.push(v.clone());
                    scope.push(v.clone());
                    walk(body, scope, seen)?;
                    scope.pop();
                    Ok(())
                }
            }
        }
        let mut seen = Vec::new();
        walk(self, &mut Vec::new(), &mut seen)?;
        Ok(seen)
    }

    /// Evaluates a closed formula on the tape. Every variable ranges over the
    /// same `K` samples and `world[name]` holds that predicate's `(K,)` degrees.
    pub fn eval(&self, g: &mut Graph, world: &HashMap<String, Var>, cfg: &QuantifierConfig) -> Result<Var> {
        let vars = self.bound_variables()?;
        let rank = vars.len();
        if rank == 0 {
            return Err(Error::Contract("formula binds no variable".into()));
        }
        let mut k = None;
        for v in world.values() {
            let s = g.shape(*v);
            if s.len() != 1 || k.is_some_and(|k| k != s[0]) {
                return Err(Error::shape("Formula::eval", s, &[k.unwrap_or(0)]));
            }
            k = Some(s[0]);
        }
        let out = self.eval_node(g, world, cfg, &vars)?;
        g.reshape(out, &[])
    }

    fn eval_node(&self, g: &mut Graph, world: &HashMap<String, Var>, cfg: &QuantifierConfig, vars: &[String]) -> Result<Var> {
        let axis_of = |v: &str| vars.iter().position(|x| x == v).expect("bound");
        match self {
            Formula::Pred { name, var } => {
                let values = *world
                    .get(name)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown predicate `{name}`")))?;
                if let Some(bad) = g.value(values).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Domain(format!("{name} has truth degree {bad}")));
                }
                let mut shape = vec![1; vars.len()];
                shape[axis_of(var)] = g.shape(values)[0];
                g.reshape(values, &shape)
            }
            Formula::Not(f) => {
                let a = f.eval_node(g, world, cfg, vars)?;
                Ok(g.one_minus(a))
            }
            Formula::Binary(op, a, b) => {
                let a = a.eval_node(g, world, cfg, vars)?;
                let b = b.eval_node(g, world, cfg, vars)?;
                let ab = g.mul(a, b)?;
                let v = match op {
                    Connective::And => ab,
                    Connective::Or => {
                        let s = g.add(a, b)?;
                        g.sub(s, ab)?
                    }
                    Connective::Implies => {
                        let na = g.one_minus(a);
                        g.add(na, ab)?
                    }
                };
                Ok(g.clamp_straight_through(v, 0.0, 1.0))
            }
            Formula::Quant(kind, var, body) => {
                let b = body.eval_node(g, world, cfg, vars)?;
                let axis = axis_of(var);
                let r = quantify(g, *kind, b, axis, cfg)?;
                g.unsqueeze(r, axis)
            }
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Pred { name, var } => write!(f, "{name}({var})"),
            Formula::Not(a) => write!(f, "¬{a}"),
            Formula::Binary(op, a, b) => {
                let sym = match op {
                    Connective::And => "∧",
                    Connective::Or => "∨",
                    Connective::Implies => "→",
                };
                write!(f, "({a} {sym} {b})")
            }
            Formula::Quant(q, v, body) => {
                let sym = match q {
                    Quantifier::ForAll => "∀",
                    Quantifier::Exists => "∃",
                };
                write!(f, "{sym}{v} {body}")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn connective_examples() {
        assert_eq!(connect(Connective::And, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(connect(Connective::Or, 1.0, 0.0).unwrap(), 1.0);
        assert!((not(0.3).unwrap() - 0.7).abs() < 1e-15);
        for b in [0.0, 0.2, 1.0] {
            assert_eq!(connect(Connective::Implies, 0.0, b).unwrap(), 1.0);
        }
        assert!((connect(Connective::Implies, 0.7, 0.5).unwrap() - 0.65).abs() < 1e-15);
        assert!(matches!(connect(Connective::And, 1.2, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn quantifier_examples() {
        let c1 = QuantifierConfig::default();
        let v = [0.2, 0.4, 0.6];
        assert!((eval_quantifier(Quantifier::Exists, &v, &c1).unwrap() - 0.4).abs() < 1e-15);
        assert!((eval_quantifier(Quantifier::ForAll, &v, &c1).unwrap() - 0.4).abs() < 1e-15);
        let c2 = QuantifierConfig::new(2.0).unwrap();
        let e = eval_quantifier(Quantifier::Exists, &[0.0, 1.0], &c2).unwrap();
        assert!((e - 0.5f64.sqrt()).abs() < 1e-15);
        for q in [1.0, 3.0, 17.0] {
            let c = QuantifierConfig::new(q).unwrap();
            assert_eq!(eval_quantifier(Quantifier::ForAll, &[1.0; 3], &c).unwrap(), 1.0);
            assert_eq!(eval_quantifier(Quantifier::Exists, &[0.0; 2], &c).unwrap(), 0.0);
        }
        assert!(matches!(eval_quantifier(Quantifier::Exists, &[], &c1), Err(Error::Contract(_))));
        assert!(matches!(QuantifierConfig::new(0.5), Err(Error::Config(_))));
    }

    #[test]
    fn binding_rules() {
        let free = Formula::pred("a", "x");
        assert!(free.bound_variables().is_err());
        let twice = Formula::forall("x", Formula::exists("x", Formula::pred("a", "x")));
        assert!(twice.bound_variables().is_err());
        let ok = Formula::forall("x", Formula::exists("y", Formula::pred("a", "x").and(Formula::pred("b", "y"))));
        assert_eq!(ok.bound_variables().unwrap(), ["x", "y"]);
    }

    #[test]
    fn two_variable_formula_uses_separate_axes() {
        // ∀x ∃y (a(x) ∧ b(y)) at q=1 equals mean(a)·mean(b).
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![0.2, 0.9, 0.5]));
        let b = g.constant(Tensor::from_vec(vec![0.4, 0.1, 1.0]));
        let world = HashMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        let f = Formula::forall("x", Formula::exists("y", Formula::pred("a", "x").and(Formula::pred("b", "y"))));
        let v = f.eval(&mut g, &world, &QuantifierConfig::default()).unwrap();
        let expect = (1.6 / 3.0) * (1.5 / 3.0);
        assert!((g.value(v).item() - expect).abs() < 1e-12);
    }
}
