//! Synthetic scenes: humans, objects and rule-consistent interactions, rendered
//! as noisy feature tokens.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_pe, classify_relation, BBox, Relation, RelationThresholds};
use crate::logic::{parse_rules, RuleSet, Trigger, Vocabulary};
use crate::nn::{random_normal, seeded_rng};
use crate::tensor::Tensor;

pub const DESK_RULES: &str = include_str!("../../assets/desk.rules");

const DESK_VERBS: [&str; 8] = ["ride", "hold", "carry", "fly", "launch", "push", "sit_on", "feed"];
const DESK_OBJECTS: [&str; 8] = ["horse", "kite", "boat", "bicycle", "umbrella", "fish", "bench", "cup"];
const DESK_AFFORDANCES: [(&str, &[&str]); 8] = [
    ("horse", &["ride", "hold", "sit_on", "feed"]),
    ("kite", &["hold", "carry", "fly", "launch"]),
    ("boat", &["ride", "launch", "push", "sit_on"]),
    ("bicycle", &["ride", "carry", "push", "sit_on"]),
    ("umbrella", &["hold", "carry", "fly", "push"]),
    ("fish", &["hold", "carry", "launch", "feed"]),
    ("bench", &["hold", "carry", "push", "sit_on"]),
    ("cup", &["hold", "carry", "push", "feed"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    /// `[verb, object]` pairs that may occur at all.
    pub affordances: Vec<[String; 2]>,
    /// Width of a feature token.
    pub feature_dim: usize,
    /// Width of the verb and object descriptors.
    pub attribute_dim: usize,
    /// Weight of the pair-specific part of an interaction descriptor.
    pub pair_specificity: f64,
    /// Per-coordinate standard deviation of token noise.
    pub noise: f64,
    pub box_pe_dims: usize,
    pub max_humans: usize,
    pub max_objects: usize,
    pub max_interactions: usize,
    /// Dirichlet concentration of each verb's relation preferences.
    pub relation_concentration: f64,
    /// Share of eval interactions drawn from held-out classes, when any exist.
    pub eval_unseen_fraction: f64,
    pub thresholds: RelationThresholds,
    /// Seeds codes, descriptors and preferences; scenes have their own seeds.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            verbs: DESK_VERBS.iter().map(|s| s.to_string()).collect(),
            objects: DESK_OBJECTS.iter().map(|s| s.to_string()).collect(),
            affordances: DESK_AFFORDANCES
                .iter()
                .flat_map(|(o, vs)| vs.iter().map(move |v| [v.to_string(), o.to_string()]))
                .collect(),
            feature_dim: 32,
            attribute_dim: 12,
            pair_specificity: 0.0,
            noise: 0.2,
            box_pe_dims: 16,
            max_humans: 2,
            max_objects: 3,
            max_interactions: 3,
            relation_concentration: 0.5,
            eval_unseen_fraction: 0.5,
            thresholds: RelationThresholds::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Regular,
    UnseenCombination,
    UnseenObject,
    UnseenVerb,
}

/// Which interaction classes are withheld from training. `held_out` holds
/// interaction ids, object ids or verb ids depending on `kind`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    #[serde(default)]
    pub held_out: Vec<usize>,
}

impl SplitSpec {
    pub fn regular() -> Self {
        SplitSpec::default()
    }

    /// The held-out sets used by the desk experiments.
    pub fn desk(kind: SplitKind, vocab: &Vocabulary) -> Result<Self> {
        let v = |n: &str| vocab.verb_id(n).ok_or_else(|| Error::Vocabulary(format!("no verb `{n}`")));
        let o = |n: &str| vocab.object_id(n).ok_or_else(|| Error::Vocabulary(format!("no object `{n}`")));
        let held_out = match kind {
            SplitKind::Regular => vec![],
            SplitKind::UnseenCombination => {
                let pairs = [
                    ("ride", "bicycle"),
                    ("hold", "kite"),
                    ("carry", "fish"),
                    ("fly", "umbrella"),
                    ("launch", "boat"),
                    ("push", "bench"),
                    ("sit_on", "horse"),
                    ("feed", "cup"),
                ];
                let mut ids = Vec::new();
                for (a, b) in pairs {
                    let (a, b) = (v(a)?, o(b)?);
                    ids.push(
                        vocab
                            .interaction_id(a, b)
                            .ok_or_else(|| Error::Vocabulary(format!("no interaction ({a}, {b})")))?,
                    );
                }
                ids
            }
            SplitKind::UnseenObject => vec![o("umbrella")?],
            SplitKind::UnseenVerb => vec![v("ride")?],
        };
        Ok(SplitSpec { kind, held_out })
    }

    /// Is interaction class `c` withheld from training?
    pub fn is_unseen(&self, vocab: &Vocabulary, c: usize) -> bool {
        let (v, o) = vocab.interactions[c];
        match self.kind {
            SplitKind::Regular => false,
            SplitKind::UnseenCombination => self.held_out.contains(&c),
            SplitKind::UnseenObject => self.held_out.contains(&o),
            SplitKind::UnseenVerb => self.held_out.contains(&v),
        }
    }

    fn object_allowed_in_training(&self, o: usize) -> bool {
        !(self.kind == SplitKind::UnseenObject && self.held_out.contains(&o))
    }

    pub fn validate(&self, vocab: &Vocabulary, afforded: &[bool]) -> Result<()> {
        let limit = match self.kind {
            SplitKind::Regular => {
                if !self.held_out.is_empty() {
                    return Err(Error::Config("regular split holds nothing out".into()));
                }
                return Ok(());
            }
            SplitKind::UnseenCombination => vocab.interactions.len(),
            SplitKind::UnseenObject => vocab.objects.len(),
            SplitKind::UnseenVerb => vocab.verbs.len(),
        };
        if self.held_out.is_empty() {
            return Err(Error::Config(format!("{:?} split with nothing held out", self.kind)));
        }
        if let Some(bad) = self.held_out.iter().find(|&&i| i >= limit) {
            return Err(Error::Config(format!("held-out id {bad} out of range")));
        }
        if self.kind == SplitKind::UnseenCombination {
            // Each constituent must still be seen in some other class.
            for &c in &self.held_out {
                let (v, o) = vocab.interactions[c];
                let seen = |pred: &dyn Fn(usize, usize) -> bool| {
                    (0..vocab.interactions.len()).any(|k| {
                        let (kv, ko) = vocab.interactions[k];
                        afforded[k] && !self.held_out.contains(&k) && pred(kv, ko)
                    })
                };
                if !seen(&|kv, _| kv == v) || !seen(&|_, ko| ko == o) {
                    return Err(Error::Config(format!(
                        "held-out {} leaves a constituent unseen",
                        vocab.interaction_name(c)
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GtInteraction {
    pub human: usize,
    pub verb: usize,
    pub object: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `(M, feature_dim)` tokens in shuffled order.
    pub features: Tensor,
    pub humans: Vec<BBox>,
    pub objects: Vec<SceneObject>,
    pub interactions: Vec<GtInteraction>,
    /// Relation of every `(human, object)` pair, human-major.
    pub relations: Vec<Relation>,
}

impl Scene {
    pub fn relation(&self, human: usize, object: usize) -> Relation {
        self.relations[human * self.objects.len() + object]
    }

    pub fn interaction_class(&self, vocab: &Vocabulary, gt: &GtInteraction) -> usize {
        vocab
            .interaction_id(gt.verb, self.objects[gt.object].class)
            .expect("generated interactions are in the vocabulary")
    }

    pub fn verbs_present(&self) -> BTreeSet<usize> {
        self.interactions.iter().map(|i| i.verb).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePurpose {
    Train,
    Eval,
}

/// Fixed parts of the synthetic world: vocabulary, rules, appearance codes and
/// the descriptors the classifiers score against.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    pub rules: RuleSet,
    pub afforded: Vec<bool>,
    /// `(V, A)` unit rows.
    pub verb_descriptors: Tensor,
    /// `(O, A)` unit rows.
    pub object_descriptors: Tensor,
    /// `(C, 3A)` unit rows: verb part, object part, pair-specific part.
    pub interaction_descriptors: Tensor,
    relation_pref: Vec<[f64; 5]>,
    verb_code: Vec<Vec<f64>>,
    object_code: Vec<Vec<f64>>,
    type_code: [Vec<f64>; 3],
    human_box_proj: Tensor,
    object_box_proj: Tensor,
}

impl World {
    pub fn new(config: WorldConfig, rules_text: &str) -> Result<Self> {
        let vocab = Vocabulary::complete(config.verbs.clone(), config.objects.clone())?;
        let rules = parse_rules(rules_text, &vocab)?;
        Self::with_rules(config, vocab, rules)
    }

    pub fn desk() -> Self {
        World::new(WorldConfig::default(), DESK_RULES).expect("desk world is valid")
    }

    pub fn with_rules(config: WorldConfig, vocab: Vocabulary, rules: RuleSet) -> Result<Self> {
        rules.validate(&vocab)?;
        let c = &config;
        if c.feature_dim == 0 || c.attribute_dim == 0 {
            return Err(Error::Config("feature and attribute widths must be positive".into()));
        }
        if c.max_humans == 0 || c.max_objects == 0 || c.max_interactions == 0 {
            return Err(Error::Config("scene limits must be positive".into()));
        }
        if !(c.noise >= 0.0 && c.pair_specificity >= 0.0 && c.relation_concentration > 0.0) {
            return Err(Error::Config("noise, specificity and concentration out of range".into()));
        }
        if !(0.0..=1.0).contains(&c.eval_unseen_fraction) {
            return Err(Error::Config("eval_unseen_fraction must lie in [0, 1]".into()));
        }
        let mut afforded = vec![false; vocab.interactions.len()];
        for [v, o] in &c.affordances {
            let (vi, oi) = (
                vocab.verb_id(v).ok_or_else(|| Error::Vocabulary(format!("unknown verb `{v}`")))?,
                vocab.object_id(o).ok_or_else(|| Error::Vocabulary(format!("unknown object `{o}`")))?,
            );
            afforded[vocab.interaction_id(vi, oi).expect("complete vocabulary")] = true;
        }
        if !afforded.iter().any(|&a| a) {
            return Err(Error::Config("no afforded interactions".into()));
        }

        let mut rng = seeded_rng(c.seed);
        let a = c.attribute_dim;
        let unit_rows = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let r = random_normal(&[a], 1.0, rng).into_data();
                    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    r.iter().map(|x| x / norm).collect()
                })
                .collect()
        };
        let verbs = unit_rows(vocab.verbs.len(), &mut rng);
        let objects = unit_rows(vocab.objects.len(), &mut rng);
        let specific = unit_rows(vocab.interactions.len(), &mut rng);
        let mut inter = Vec::new();
        for (k, &(v, o)) in vocab.interactions.iter().enumerate() {
            let row: Vec<f64> = verbs[v]
                .iter()
                .chain(&objects[o])
                .copied()
                .chain(specific[k].iter().map(|x| x * c.pair_specificity))
                .collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            inter.extend(row.iter().map(|x| x / norm));
        }

        let gamma = Gamma::new(c.relation_concentration, 1.0).expect("positive concentration");
        let relation_pref = (0..vocab.verbs.len())
            .map(|_| {
                let mut w = [0.0; 5];
                for x in &mut w {
                    *x = gamma.sample(&mut rng).max(1e-3);
                }
                w
            })
            .collect();

        let d = c.feature_dim;
        let project = |rows: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            let p = random_normal(&[d, a], 1.0, rng);
            rows.iter()
                .map(|r| (0..d).map(|i| (0..a).map(|j| p.at(&[i, j]) * r[j]).sum()).collect())
                .collect()
        };
        let verb_code = project(&verbs, &mut rng);
        let object_code = project(&objects, &mut rng);
        let type_code = [
            random_normal(&[d], 1.0, &mut rng).into_data(),
            random_normal(&[d], 1.0, &mut rng).into_data(),
            random_normal(&[d], 1.0, &mut rng).into_data(),
        ];
        // A box encoding has squared norm box_pe_dims / 2.
        let pe_std = (2.0 / c.box_pe_dims as f64).sqrt();
        crate::geometry::pe_frequencies(c.box_pe_dims)?;
        let human_box_proj = random_normal(&[c.box_pe_dims, d], pe_std, &mut rng);
        let object_box_proj = random_normal(&[c.box_pe_dims, d], pe_std, &mut rng);

        let flat = |rows: &[Vec<f64>]| Tensor::new(vec![rows.len(), a], rows.concat());
        Ok(World {
            verb_descriptors: flat(&verbs)?,
            object_descriptors: flat(&objects)?,
            interaction_descriptors: Tensor::new(vec![vocab.interactions.len(), 3 * a], inter)?,
            config,
            vocab,
            rules,
            afforded,
            relation_pref,
            verb_code,
            object_code,
            type_code,
            human_box_proj,
            object_box_proj,
        })
    }

    pub fn num_interactions(&self) -> usize {
        self.vocab.interactions.len()
    }

    /// Verb id of every interaction class.
    pub fn verb_of(&self) -> Vec<usize> {
        self.vocab.interactions.iter().map(|&(v, _)| v).collect()
    }

    /// Rule check mirroring the grounding with one-hot scores: a labelled pair
    /// is illegal when a rule fires on any verb present in the scene or on the
    /// pair's object class, matches the pair's relation and forbids its class.
    pub fn scene_is_legal(&self, scene: &Scene) -> bool {
        let present = scene.verbs_present();
        scene.interactions.iter().all(|gt| {
            let class = scene.interaction_class(&self.vocab, gt);
            let relation = scene.relation(gt.human, gt.object);
            let object = scene.objects[gt.object].class;
            !self.rules.rules.iter().any(|r| {
                let fires = match r.trigger {
                    Trigger::Action(v) => present.contains(&v),
                    Trigger::Object(o) => o == object,
                };
                fires && r.relation == relation && r.forbids(class)
            })
        })
    }

    pub fn generate_scene(&self, seed: u64, split: &SplitSpec, purpose: ScenePurpose) -> Result<Scene> {
        split.validate(&self.vocab, &self.afforded)?;
        let c = self.vocab.interactions.len();
        let seen: Vec<usize> = (0..c).filter(|&k| self.afforded[k] && !split.is_unseen(&self.vocab, k)).collect();
        let unseen: Vec<usize> = (0..c).filter(|&k| self.afforded[k] && split.is_unseen(&self.vocab, k)).collect();
        let pool_for = |want_unseen: bool| -> &[usize] {
            if want_unseen && purpose == ScenePurpose::Eval && !unseen.is_empty() {
                &unseen
            } else {
                &seen
            }
        };
        if seen.is_empty() {
            return Err(Error::Generation("split leaves no legal training interaction".into()));
        }
        let mut rng = seeded_rng(seed);
        for _ in 0..200 {
            if let Some(scene) = self.try_scene(seed, &mut rng, split, purpose, &pool_for) {
                return Ok(scene);
            }
        }
        Err(Error::Generation(format!("no rule-consistent scene found for seed {seed}")))
    }

    fn try_scene<'p>(
        &self,
        seed: u64,
        rng: &mut ChaCha8Rng,
        split: &SplitSpec,
        purpose: ScenePurpose,
        pool_for: &dyn Fn(bool) -> &'p [usize],
    ) -> Option<Scene> {
        let cfg = &self.config;
        let n_h = rng.random_range(1..=cfg.max_humans);
        let n_o = rng.random_range(1..=cfg.max_objects);
        let n_i = rng.random_range(1..=cfg.max_interactions.min(n_h * n_o));
        let humans: Vec<BBox> = (0..n_h).map(|_| sample_human(rng)).collect();
        let mut scene = Scene {
            seed,
            features: Tensor::scalar(0.0),
            humans,
            objects: Vec::new(),
            interactions: Vec::new(),
            relations: Vec::new(),
        };

        let mut attempts = 0;
        while scene.interactions.len() < n_i && attempts < 8 * n_i {
            attempts += 1;
            let want_unseen = rng.random::<f64>() < cfg.eval_unseen_fraction;
            let pool = pool_for(want_unseen);
            let h = rng.random_range(0..n_h);
            let reuse = !scene.objects.is_empty() && (scene.objects.len() >= n_o || rng.random::<f64>() < 0.3);
            let candidate = if reuse {
                let b = rng.random_range(0..scene.objects.len());
                if scene.interactions.iter().any(|i| i.human == h && i.object == b) {
                    continue;
                }
                let o = scene.objects[b].class;
                let verbs: Vec<usize> = pool
                    .iter()
                    .filter(|&&k| self.vocab.interactions[k].1 == o)
                    .map(|&k| self.vocab.interactions[k].0)
                    .collect();
                let Some(&v) = verbs.choose(rng) else { continue };
                (b, None, v)
            } else {
                let &k = pool.choose(rng)?;
                let (v, o) = self.vocab.interactions[k];
                let Some(bbox) = self.place_for(rng, &scene.humans[h], v, k) else {
                    continue;
                };
                (scene.objects.len(), Some(SceneObject { class: o, bbox }), v)
            };
            let (b, new_object, verb) = candidate;
            let mut trial = scene.clone();
            if let Some(obj) = new_object {
                trial.objects.push(obj);
            }
            trial.interactions.push(GtInteraction { human: h, verb, object: b });
            trial.relations = relations(&trial.humans, &trial.objects, &cfg.thresholds);
            if self.scene_is_legal(&trial) {
                scene = trial;
            }
        }
        if scene.interactions.is_empty() {
            return None;
        }

        // Distractors never interact.
        let allowed: Vec<usize> = (0..self.vocab.objects.len())
            .filter(|&o| purpose == ScenePurpose::Eval || split.object_allowed_in_training(o))
            .collect();
        while scene.objects.len() < n_o {
            let class = *allowed.choose(rng)?;
            scene.objects.push(SceneObject {
                class,
                bbox: sample_free_box(rng),
            });
        }
        scene.relations = relations(&scene.humans, &scene.objects, &cfg.thresholds);
        debug_assert!(self.scene_is_legal(&scene));
        scene.features = self.render(&scene, rng);
        Some(scene)
    }

    /// Object box for class `k` around `human`, at a relation drawn from the
    /// verb's preferences among those the rules allow.
    fn place_for(&self, rng: &mut ChaCha8Rng, human: &BBox, verb: usize, k: usize) -> Option<BBox> {
        let (_, o) = self.vocab.interactions[k];
        let mut options: Vec<(Relation, f64)> = Relation::ALL
            .iter()
            .filter(|&&r| !self.rules.violated_by(verb, o, r, k))
            .map(|&r| (r, self.relation_pref[verb][r.index()]))
            .collect();
        while !options.is_empty() {
            let total: f64 = options.iter().map(|x| x.1).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = options.len() - 1;
            for (i, (_, w)) in options.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let (rel, _) = options.swap_remove(pick);
            if let Some(b) = place_object(rng, human, rel, &self.config.thresholds) {
                return Some(b);
            }
        }
        None
    }

    fn render(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Tensor {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        let noise = Normal::new(0.0, cfg.noise.max(1e-300)).expect("finite noise");
        let pe = |b: &BBox, proj: &Tensor| -> Vec<f64> {
            let e = box_pe(b, cfg.box_pe_dims).expect("validated width");
            (0..d).map(|j| e.iter().enumerate().map(|(i, x)| x * proj.at(&[i, j])).sum()).collect()
        };
        let mut tokens: Vec<Vec<f64>> = Vec::new();
        for h in &scene.humans {
            tokens.push(sum(&[&self.type_code[0], &pe(h, &self.human_box_proj)]));
        }
        for o in &scene.objects {
            tokens.push(sum(&[&self.type_code[1], &self.object_code[o.class], &pe(&o.bbox, &self.object_box_proj)]));
        }
        for i in &scene.interactions {
            tokens.push(sum(&[
                &self.type_code[2],
                &self.verb_code[i.verb],
                &pe(&scene.humans[i.human], &self.human_box_proj),
                &pe(&scene.objects[i.object].bbox, &self.object_box_proj),
            ]));
        }
        for t in &mut tokens {
            for x in t.iter_mut() {
                *x += if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            }
        }
        tokens.shuffle(rng);
        let m = tokens.len();
        Tensor::new(vec![m, d], tokens.concat()).expect("token widths agree")
    }
}

fn sum(parts: &[&Vec<f64>]) -> Vec<f64> {
    let mut out = parts[0].clone();
    for p in &parts[1..] {
        for (o, x) in out.iter_mut().zip(p.iter()) {
            *o += x;
        }
    }
    out
}

fn relations(humans: &[BBox], objects: &[SceneObject], t: &RelationThresholds) -> Vec<Relation> {
    humans
        .iter()
        .flat_map(|h| objects.iter().map(move |o| classify_relation(h, &o.bbox, t)))
        .collect()
}

fn in_image(b: &BBox) -> bool {
    b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= 1.0 && b.y1() <= 1.0
}

fn sample_human(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.10..0.22);
    let h = rng.random_range(0.22..0.40);
    let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
    BBox::new(cx, cy, w, h).expect("positive extent")
}

fn sample_free_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.3);
    let h = rng.random_range(0.05..0.3);
    let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
    BBox::new(cx, cy, w, h).expect("positive extent")
}

fn place_object(rng: &mut ChaCha8Rng, human: &BBox, rel: Relation, t: &RelationThresholds) -> Option<BBox> {
    for _ in 0..32 {
        let (cx, cy, w, h) = match rel {
            Relation::Above | Relation::Below => {
                let w = rng.random_range(0.06..0.2);
                let h = rng.random_range(0.05..0.15);
                let cx = human.cx + rng.random_range(-0.4..0.4) * human.w;
                let off = human.h * rng.random_range(0.3..0.8);
                let cy = if rel == Relation::Above { human.y0() - off } else { human.y1() + off };
                (cx, cy, w, h)
            }
            Relation::Around => {
                let w = rng.random_range(0.05..0.2);
                let h = rng.random_range(0.05..0.25);
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let cx = human.cx + side * (human.w / 2.0 + w / 2.0 + rng.random_range(0.01..0.12));
                let cy = human.cy + rng.random_range(-0.3..0.3) * human.h;
                (cx, cy, w, h)
            }
            Relation::Within => {
                let w = human.w * rng.random_range(0.3..0.7);
                let h = human.h * rng.random_range(0.2..0.5);
                let cx = human.x0() + w / 2.0 + rng.random::<f64>() * (human.w - w);
                let cy = human.y0() + h / 2.0 + rng.random::<f64>() * (human.h - h);
                (cx, cy, w, h)
            }
            Relation::Containing => {
                let w = human.w * rng.random_range(1.3..2.5);
                let h = human.h * rng.random_range(1.1..1.6);
                let cx = human.cx + rng.random_range(-0.45..0.45) * (w - human.w);
                let cy = human.cy + rng.random_range(-0.45..0.45) * (h - human.h);
                (cx, cy, w, h)
            }
        };
        let Ok(b) = BBox::new(cx, cy, w, h) else { continue };
        if in_image(&b) && classify_relation(human, &b, t) == rel {
            return Some(b);
        }
    }
    None
}

/// Scene seeds for a run, so that data are reproducible from the manifest alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub split: SplitSpec,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
}

impl Manifest {
    pub fn new(data_seed: u64, train: usize, eval: usize, split: SplitSpec) -> Self {
        let mut rng = seeded_rng(data_seed);
        let mut draw = |n: usize| -> Vec<u64> { (0..n).map(|_| rng.random()).collect() };
        let train_seeds = draw(train);
        let eval_seeds = draw(eval);
        Manifest {
            split,
            train_seeds,
            eval_seeds,
        }
    }

    pub fn scenes(&self, world: &World, purpose: ScenePurpose) -> Result<Vec<Scene>> {
        let seeds = match purpose {
            ScenePurpose::Train => &self.train_seeds,
            ScenePurpose::Eval => &self.eval_seeds,
        };
        seeds.iter().map(|&s| world.generate_scene(s, &self.split, purpose)).collect()
    }
}
