use std::collections::{HashMap, HashSet};

use hoi_core::geometry::Relation;
use hoi_core::logic::*;
use hoi_core::logic::{connect, eval_quantifier, not, Connective, Formula, Quantifier, QuantifierConfig};
use hoi_core::nn::seeded_rng;
use hoi_core::tensor::gradcheck::grad_check_many;
use hoi_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

const OPS: [Connective; 3] = [Connective::And, Connective::Or, Connective::Implies];

fn classical(op: Connective, a: bool, b: bool) -> bool {
    match op {
        Connective::And => a && b,
        Connective::Or => a || b,
        Connective::Implies => !a || b,
    }
}

fn to_f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[test]
fn binary_tables_on_boolean_inputs() {
    for op in OPS {
        for a in [false, true] {
            for b in [false, true] {
                assert_eq!(connect(op, to_f(a), to_f(b)).unwrap(), to_f(classical(op, a, b)));
            }
        }
    }
    assert_eq!(not(0.0).unwrap(), 1.0);
    assert_eq!(not(1.0).unwrap(), 0.0);
}

/// Every formula over `{a, b, c}` of depth ≤ 4 is one of the 256 Boolean
/// functions of three inputs, and its fuzzy value on each assignment depends
/// only on its children's values. So closing the leaf truth tables under the
/// connectives four times reaches every depth-≤4 formula's truth table; each
/// step is compared against the classical operator exactly.
#[test]
fn exhaustive_boolean_reduction_to_depth_4() {
    type Table = [u8; 8];
    let leaf = |bit: usize| -> Table { std::array::from_fn(|row| ((row >> bit) & 1) as u8) };
    let mut level: HashSet<Table> = (0..3).map(leaf).collect();
    let mut checked = 0usize;
    for _depth in 1..=4 {
        let prev: Vec<Table> = level.iter().copied().collect();
        for x in &prev {
            let t: Table = std::array::from_fn(|r| {
                let v = not(x[r] as f64).unwrap();
                assert_eq!(v, to_f(x[r] == 0));
                v as u8
            });
            level.insert(t);
            for y in &prev {
                for op in OPS {
                    let t: Table = std::array::from_fn(|r| {
                        let v = connect(op, x[r] as f64, y[r] as f64).unwrap();
                        assert_eq!(v, to_f(classical(op, x[r] == 1, y[r] == 1)));
                        checked += 1;
                        v as u8
                    });
                    level.insert(t);
                }
            }
        }
    }
    assert!(checked > 0);
    // ¬, ∧, ∨ are functionally complete, so depth 4 already reaches all 256 tables.
    assert_eq!(level.len(), 256);
}

fn leaves() -> Vec<Formula> {
    ["a", "b", "c"].iter().map(|n| Formula::pred(*n, "x")).collect()
}

fn grow(prev: &[Formula]) -> Vec<Formula> {
    let mut out = prev.to_vec();
    for f in prev {
        out.push(f.clone().not());
        for g in prev {
            out.push(f.clone().and(g.clone()));
            out.push(f.clone().or(g.clone()));
            out.push(f.clone().implies(g.clone()));
        }
    }
    out
}

fn classical_eval(f: &Formula, env: &HashMap<&str, bool>) -> bool {
    match f {
        Formula::Pred { name, .. } => env[name.as_str()],
        Formula::Not(a) => !classical_eval(a, env),
        Formula::Binary(op, a, b) => classical(*op, classical_eval(a, env), classical_eval(b, env)),
        Formula::Quant(..) => unreachable!(),
    }
}

fn assignments() -> Vec<HashMap<&'static str, bool>> {
    (0..8)
        .map(|r| HashMap::from([("a", r & 1 == 1), ("b", r & 2 == 2), ("c", r & 4 == 4)]))
        .collect()
}

#[test]
fn every_depth_2_formula_matches_classical_semantics() {
    let all = grow(&grow(&leaves()));
    assert_eq!(all.len(), 3333);
    for f in &all {
        for env in assignments() {
            let fuzzy = f.eval_ground(&|n| env.get(n).map(|&b| to_f(b))).unwrap();
            assert_eq!(fuzzy, to_f(classical_eval(f, &env)), "{f}");
        }
    }
}

fn random_formula(depth: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Formula {
    if depth == 0 {
        return leaves().swap_remove(rng.random_range(0..3));
    }
    let sub = |rng: &mut rand_chacha::ChaCha8Rng| {
        let d = rng.random_range(0..depth);
        random_formula(d, rng)
    };
    match rng.random_range(0..4) {
        0 => random_formula(depth - 1, rng).not(),
        k => {
            let (a, b) = if rng.random_bool(0.5) {
                (random_formula(depth - 1, rng), sub(rng))
            } else {
                (sub(rng), random_formula(depth - 1, rng))
            };
            match k {
                1 => a.and(b),
                2 => a.or(b),
                _ => a.implies(b),
            }
        }
    }
}

#[test]
fn sampled_depth_4_formulas_on_the_tape() {
    // The tape evaluator with one-element domains must agree with classical logic too.
    let mut rng = seeded_rng(400);
    for _ in 0..2000 {
        let f = random_formula(4, &mut rng);
        assert_eq!(f.depth(), 4);
        let closed = Formula::forall("x", f.clone());
        for env in assignments() {
            let mut g = Graph::new();
            let world: HashMap<String, _> = env
                .iter()
                .map(|(n, &b)| (n.to_string(), g.constant(Tensor::from_vec(vec![to_f(b)]))))
                .collect();
            let v = closed.eval(&mut g, &world, &QuantifierConfig::default()).unwrap();
            assert_eq!(g.value(v).item(), to_f(classical_eval(&f, &env)), "{f}");
        }
    }
}

#[test]
fn out_of_range_leaf_is_domain_error() {
    let f = Formula::pred("a", "x").and(Formula::pred("b", "x"));
    let r = f.eval_ground(&|n| Some(if n == "a" { 1.5 } else { 0.5 }));
    assert!(matches!(r, Err(hoi_core::Error::Domain(_))));
}

#[test]
fn quantifier_q1_is_the_mean() {
    let mut rng = seeded_rng(401);
    let cfg = QuantifierConfig::default();
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!((eval_quantifier(Quantifier::Exists, &v, &cfg).unwrap() - mean).abs() < 1e-12);
        assert!((eval_quantifier(Quantifier::ForAll, &v, &cfg).unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn large_q_exists_approaches_max() {
    let mut rng = seeded_rng(402);
    let cfg = QuantifierConfig::new(64.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let max = v.iter().cloned().fold(0.0, f64::max);
        worst = worst.max((eval_quantifier(Quantifier::Exists, &v, &cfg).unwrap() - max).abs());
    }
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn tape_quantifier_matches_scalar() {
    let mut rng = seeded_rng(403);
    for q in [1.0, 2.0, 5.5] {
        let cfg = QuantifierConfig::new(q).unwrap();
        let v: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        for kind in [Quantifier::Exists, Quantifier::ForAll] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(v.clone()));
            let r = hoi_core::logic::quantify(&mut g, kind, x, 0, &cfg).unwrap();
            let s = eval_quantifier(kind, &v, &cfg).unwrap();
            assert!((g.value(r).item() - s).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn quantifiers_monotone_in_values(
        v in prop::collection::vec(0.0f64..1.0, 1..12),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
        q in 1.0f64..10.0,
    ) {
        let cfg = QuantifierConfig::new(q).unwrap();
        let i = idx.index(v.len());
        let mut w = v.clone();
        w[i] = (w[i] + bump).min(1.0);
        for kind in [Quantifier::Exists, Quantifier::ForAll] {
            let a = eval_quantifier(kind, &v, &cfg).unwrap();
            let b = eval_quantifier(kind, &w, &cfg).unwrap();
            prop_assert!(b >= a - 1e-12);
        }
    }

    #[test]
    fn exists_non_decreasing_in_q(
        v in prop::collection::vec(0.0f64..1.0, 1..12),
        q in 1.0f64..20.0,
        dq in 0.0f64..20.0,
    ) {
        let lo = eval_quantifier(Quantifier::Exists, &v, &QuantifierConfig::new(q).unwrap()).unwrap();
        let hi = eval_quantifier(Quantifier::Exists, &v, &QuantifierConfig::new(q + dq).unwrap()).unwrap();
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn satisfaction_bounded_and_zero_loss_iff_no_joint_mass(
        sv in prop::collection::vec(0.0f64..1.0, 6),
        sh in prop::collection::vec(0.0f64..1.0, 12),
        rel in prop::collection::vec(0usize..5, 6),
        zero_mask in prop::collection::vec(any::<bool>(), 6),
        q in 1.0f64..4.0,
    ) {
        // K = 6 samples, 2 interaction classes; the rule forbids both.
        let sh: Vec<f64> = sh.chunks(2).zip(&zero_mask).flat_map(|(c, &z)| if z { vec![0.0, 0.0] } else { c.to_vec() }).collect();
        let mut g = Graph::new();
        let t = table(&mut g, &sv, &sv, &sh, &rel, 2);
        let rule = Rule { trigger: Trigger::Action(0), relation: Relation::Above, forbid: vec![0, 1] };
        let cfg = QuantifierConfig::new(q).unwrap();
        let gv = ground_rule(&mut g, &rule, &t, &cfg).unwrap();
        let gv = g.value(gv).item();
        prop_assert!((0.0..=1.0).contains(&gv));
        let rs = RuleSet { rules: vec![rule] };
        let l = logic_loss(&mut g, &rs, &t, &cfg, ObjectScore::Object, &[0, 0]).unwrap();
        let loss = g.value(l.total).item();
        prop_assert!(loss >= 0.0);
        let mass = (0..6).any(|k| rel[k] == Relation::Above.index() && sv[k] > 0.0 && (sh[2 * k] > 0.0 || sh[2 * k + 1] > 0.0));
        prop_assert_eq!(loss == 0.0, !mass);
    }
}

/// Score table over `K` samples with a single verb/object column and `c` interaction classes.
fn table(g: &mut Graph, sv: &[f64], so: &[f64], sh: &[f64], rel: &[usize], c: usize) -> ScoreTable {
    let k = sv.len();
    let a = g.leaf(Tensor::new(vec![k, 1], sv.to_vec()).unwrap());
    let o = g.leaf(Tensor::new(vec![k, 1], so.to_vec()).unwrap());
    let h = g.leaf(Tensor::new(vec![k, c], sh.to_vec()).unwrap());
    let mut p = vec![0.0; k * 5];
    for (i, &r) in rel.iter().enumerate() {
        p[i * 5 + r] = 1.0;
    }
    ScoreTable::new(g, a, o, h, Tensor::new(vec![k, 5], p).unwrap()).unwrap()
}

#[test]
fn action_loss_gradient_matches_closed_form() {
    // Two action rules (R = 2), each forbidding M = 3 of 4 classes, K = 5.
    let mut rng = seeded_rng(404);
    let (k, c) = (5, 4);
    let sv: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
    let sh: Vec<f64> = (0..k * c).map(|_| rng.random_range(0.05..0.95)).collect();
    let rel: Vec<usize> = (0..k).map(|i| if i % 2 == 0 { Relation::Above.index() } else { Relation::Around.index() }).collect();
    let mut g = Graph::new();
    let t = table(&mut g, &sv, &sv, &sh, &rel, c);
    let rules = RuleSet {
        rules: vec![
            Rule { trigger: Trigger::Action(0), relation: Relation::Above, forbid: vec![0, 1, 2] },
            Rule { trigger: Trigger::Action(0), relation: Relation::Below, forbid: vec![1, 2, 3] },
        ],
    };
    let l = logic_loss(&mut g, &rules, &t, &QuantifierConfig::default(), ObjectScore::Object, &[0; 4]).unwrap();
    let grads = g.backward(l.action).unwrap();
    let dh = grads.get(t.interaction).unwrap();
    let (m, r) = (3.0, 2.0);
    for i in 0..k {
        for h in 0..c {
            let p = if rel[i] == Relation::Above.index() && h < 3 { 1.0 } else { 0.0 };
            let expect = sv[i] * p / (m * k as f64 * r);
            assert!((dh.at(&[i, h]) - expect).abs() < 1e-15, "({i},{h})");
            assert!(dh.at(&[i, h]) >= 0.0);
        }
    }
}

#[test]
fn logic_losses_pass_finite_differences() {
    let mut rng = seeded_rng(405);
    let (k, c) = (6, 5);
    let verb_of = [0, 0, 1, 1, 2];
    for (q, object_score) in [(1.0, ObjectScore::Object), (2.0, ObjectScore::Object), (1.0, ObjectScore::ActionOfForbidden)] {
        let sv = Tensor::new(vec![k, 3], (0..k * 3).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let so = Tensor::new(vec![k, 2], (0..k * 2).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let sh = Tensor::new(vec![k, c], (0..k * c).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let mut p = vec![0.0; k * 5];
        for i in 0..k {
            p[i * 5 + rng.random_range(0..2)] = 1.0;
        }
        let rel = Tensor::new(vec![k, 5], p).unwrap();
        let rules = RuleSet {
            rules: vec![
                Rule { trigger: Trigger::Action(1), relation: Relation::Above, forbid: vec![0, 4] },
                Rule { trigger: Trigger::Action(2), relation: Relation::Below, forbid: vec![1] },
                Rule { trigger: Trigger::Object(0), relation: Relation::Above, forbid: vec![2, 3] },
                Rule { trigger: Trigger::Object(1), relation: Relation::Below, forbid: vec![0, 1, 2] },
            ],
        };
        let cfg = QuantifierConfig::new(q).unwrap();
        let r = grad_check_many(
            |g, v| {
                let t = ScoreTable::new(g, v[0], v[1], v[2], rel.clone())?;
                let l = logic_loss(g, &rules, &t, &cfg, object_score, &verb_of)?;
                Ok(l.total)
            },
            &[sv, so, sh],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "q={q} {object_score:?}: {r:?}");
    }
}

#[test]
fn raising_infeasible_score_raises_loss() {
    let mut rng = seeded_rng(406);
    for _ in 0..50 {
        let sv: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
        let sh: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.9)).collect();
        let rel = vec![Relation::Within.index(); 3];
        let rule = Rule { trigger: Trigger::Action(0), relation: Relation::Within, forbid: vec![0] };
        let loss = |sh: &[f64]| {
            let mut g = Graph::new();
            let t = table(&mut g, &sv, &sv, sh, &rel, 1);
            let gv = ground_rule(&mut g, &rule, &t, &QuantifierConfig::default()).unwrap();
            1.0 - g.value(gv).item()
        };
        let mut up = sh.clone();
        up[1] += 0.05;
        assert!(loss(&up) > loss(&sh));
    }
}

#[test]
fn single_class_rule_formula_agrees_with_grounding() {
    // With one forbidden interaction the rule's formula reduces to the grounded form.
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let vocab = Vocabulary::complete(s(&["ride", "feed"]), s(&["horse", "fish"])).unwrap();
    let rs = parse_rules("action ride @ above => forbid (human,feed,fish)", &vocab).unwrap();
    let rule = &rs.rules[0];
    let h = vocab.interaction_id(1, 1).unwrap();
    let mut rng = seeded_rng(407);
    let k = 8;
    let sv: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let sh: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let rel: Vec<usize> = (0..k).map(|_| rng.random_range(0..5)).collect();
    for q in [1.0, 3.0] {
        let cfg = QuantifierConfig::new(q).unwrap();
        let mut g = Graph::new();
        let mut full_h = vec![0.0; k * 4];
        for i in 0..k {
            full_h[i * 4 + h] = sh[i];
        }
        let verbs: Vec<f64> = sv.iter().flat_map(|&v| [v, 0.0]).collect();
        let a = g.constant(Tensor::new(vec![k, 2], verbs).unwrap());
        let o = g.constant(Tensor::zeros(&[k, 2]));
        let hv = g.constant(Tensor::new(vec![k, 4], full_h).unwrap());
        let mut p = vec![0.0; k * 5];
        for i in 0..k {
            p[i * 5 + rel[i]] = 1.0;
        }
        let t = ScoreTable::new(&g, a, o, hv, Tensor::new(vec![k, 5], p.clone()).unwrap()).unwrap();
        let grounded = ground_rule(&mut g, rule, &t, &cfg).unwrap();

        let mut world = HashMap::new();
        let col = |g: &mut Graph, v: Vec<f64>| g.constant(Tensor::from_vec(v));
        world.insert("ride".to_string(), col(&mut g, sv.clone()));
        world.insert("above".to_string(), col(&mut g, (0..k).map(|i| p[i * 5]).collect()));
        world.insert(vocab.interaction_name(h), col(&mut g, sh.clone()));
        let f = rule.to_formula(&vocab);
        let evaluated = f.eval(&mut g, &world, &cfg).unwrap();
        assert!((g.value(grounded).item() - g.value(evaluated).item()).abs() < 1e-12);
    }
}
