//! Affordance/proxemics rules and their line-oriented text format:
//!
//! ```text
//! # comment
//! action launch @ above => forbid (human,launch,boat), (human,ride,boat)
//! object kite @ below => forbid (human,fly,kite)
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Formula;
use crate::error::{Error, Result};
use crate::geometry::Relation;

pub const SUBJECT: &str = "human";

/// Verb and object names plus the interaction classes, each a `(verb, object)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub interactions: Vec<(usize, usize)>,
}

impl Vocabulary {
    pub fn new(verbs: Vec<String>, objects: Vec<String>, interactions: Vec<(usize, usize)>) -> Result<Self> {
        for names in [&verbs, &objects] {
            for (i, n) in names.iter().enumerate() {
                if !is_ident(n) {
                    return Err(Error::Vocabulary(format!("`{n}` is not a valid name")));
                }
                if names[..i].contains(n) {
                    return Err(Error::Vocabulary(format!("duplicate name `{n}`")));
                }
            }
        }
        for (k, &(v, o)) in interactions.iter().enumerate() {
            if v >= verbs.len() || o >= objects.len() {
                return Err(Error::Vocabulary(format!("interaction ({v}, {o}) out of range")));
            }
            if interactions[..k].contains(&(v, o)) {
                return Err(Error::Vocabulary(format!("duplicate interaction ({v}, {o})")));
            }
        }
        Ok(Vocabulary {
            verbs,
            objects,
            interactions,
        })
    }

    /// Every verb paired with every object, verb-major.
    pub fn complete(verbs: Vec<String>, objects: Vec<String>) -> Result<Self> {
        let pairs = (0..verbs.len())
            .flat_map(|v| (0..objects.len()).map(move |o| (v, o)))
            .collect();
        Vocabulary::new(verbs, objects, pairs)
    }

    pub fn verb_id(&self, name: &str) -> Option<usize> {
        self.verbs.iter().position(|v| v == name)
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn interaction_id(&self, verb: usize, object: usize) -> Option<usize> {
        self.interactions.iter().position(|&p| p == (verb, object))
    }

    pub fn interaction_name(&self, id: usize) -> String {
        let (v, o) = self.interactions[id];
        format!("{SUBJECT}-{}-{}", self.verbs[v], self.objects[o])
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Action(usize),
    Object(usize),
}

/// `trigger ∧ relation → ¬h_1 ∧ … ∧ ¬h_M` over interaction ids `forbid`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub trigger: Trigger,
    pub relation: Relation,
    pub forbid: Vec<usize>,
}

impl Rule {
    pub fn forbids(&self, interaction: usize) -> bool {
        self.forbid.contains(&interaction)
    }

    /// `∀x (t(x) ∧ p(x) → ¬h_1(x) ∧ … ∧ ¬h_M(x))`, with predicates named after
    /// the vocabulary entries.
    pub fn to_formula(&self, vocab: &Vocabulary) -> Formula {
        let x = "x";
        let trigger = match self.trigger {
            Trigger::Action(v) => Formula::pred(&vocab.verbs[v], x),
            Trigger::Object(o) => Formula::pred(&vocab.objects[o], x),
        };
        let mut consequent = Formula::pred(vocab.interaction_name(self.forbid[0]), x).not();
        for &h in &self.forbid[1..] {
            consequent = consequent.and(Formula::pred(vocab.interaction_name(h), x).not());
        }
        Formula::forall(x, trigger.and(Formula::pred(self.relation.name(), x)).implies(consequent))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn action_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| matches!(r.trigger, Trigger::Action(_)))
    }

    pub fn object_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| matches!(r.trigger, Trigger::Object(_)))
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for r in &self.rules {
            let ok = match r.trigger {
                Trigger::Action(v) => v < vocab.verbs.len(),
                Trigger::Object(o) => o < vocab.objects.len(),
            };
            if !ok {
                return Err(Error::Vocabulary(format!("rule trigger {:?} out of range", r.trigger)));
            }
            if r.forbid.is_empty() {
                return Err(Error::Vocabulary("rule with an empty forbid list".into()));
            }
            if let Some(h) = r.forbid.iter().find(|&&h| h >= vocab.interactions.len()) {
                return Err(Error::Vocabulary(format!("unknown interaction id {h}")));
            }
        }
        Ok(())
    }

    /// Does any rule fire on `(verb, object, relation)` and forbid `interaction`?
    pub fn violated_by(&self, verb: usize, object: usize, relation: Relation, interaction: usize) -> bool {
        self.rules.iter().any(|r| {
            let fires = match r.trigger {
                Trigger::Action(v) => v == verb,
                Trigger::Object(o) => o == object,
            };
            fires && r.relation == relation && r.forbids(interaction)
        })
    }

    /// Text form accepted by [`parse_rules`].
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        for r in &self.rules {
            let (kind, name) = match r.trigger {
                Trigger::Action(v) => ("action", &vocab.verbs[v]),
                Trigger::Object(o) => ("object", &vocab.objects[o]),
            };
            let forbid: Vec<String> = r
                .forbid
                .iter()
                .map(|&h| {
                    let (v, o) = vocab.interactions[h];
                    format!("({SUBJECT},{},{})", vocab.verbs[v], vocab.objects[o])
                })
                .collect();
            let _ = writeln!(s, "{kind} {name} @ {} => forbid {}", r.relation, forbid.join(", "));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    At,
    Arrow,
    LParen,
    RParen,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::At => "`@`".into(),
            Tok::Arrow => "`=>`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
        }
    }
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            '#' => break,
            c if c.is_whitespace() => i += 1,
            '@' => {
                out.push((Tok::At, col));
                i += 1;
            }
            '(' => {
                out.push((Tok::LParen, col));
                i += 1;
            }
            ')' => {
                out.push((Tok::RParen, col));
                i += 1;
            }
            ',' => {
                out.push((Tok::Comma, col));
                i += 1;
            }
            '=' if chars.get(i + 1) == Some(&'>') => {
                out.push((Tok::Arrow, col));
                i += 2;
            }
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '-') {
                    i += 1;
                }
                out.push((Tok::Ident(chars[start..i].iter().collect()), col));
            }
            other => {
                return Err(Error::Syntax {
                    line: lineno,
                    column: col,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(out)
}

struct LineParser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    end_col: usize,
    vocab: &'a Vocabulary,
}

impl LineParser<'_> {
    fn err(&self, column: usize, message: String) -> Error {
        Error::Syntax {
            line: self.line,
            column,
            message,
        }
    }

    fn vocab_err(&self, column: usize, message: String) -> Error {
        Error::Vocabulary(format!("line {}, column {column}: {message}", self.line))
    }

    fn next(&mut self, what: &str) -> Result<(Tok, usize)> {
        let t = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or_else(|| self.err(self.end_col, format!("expected {what}, found end of line")))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, tok: Tok) -> Result<()> {
        let (t, col) = self.next(&tok.describe())?;
        if t != tok {
            return Err(self.err(col, format!("expected {}, found {}", tok.describe(), t.describe())));
        }
        Ok(())
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize)> {
        match self.next(what)? {
            (Tok::Ident(s), col) => Ok((s, col)),
            (t, col) => Err(self.err(col, format!("expected {what}, found {}", t.describe()))),
        }
    }

    fn triple(&mut self) -> Result<usize> {
        self.expect(Tok::LParen)?;
        let (subject, scol) = self.ident("subject")?;
        self.expect(Tok::Comma)?;
        let (verb, vcol) = self.ident("verb")?;
        self.expect(Tok::Comma)?;
        let (object, ocol) = self.ident("object")?;
        self.expect(Tok::RParen)?;
        if subject != SUBJECT {
            return Err(self.vocab_err(scol, format!("unknown subject `{subject}`")));
        }
        let v = self
            .vocab
            .verb_id(&verb)
            .ok_or_else(|| self.vocab_err(vcol, format!("unknown verb `{verb}`")))?;
        let o = self
            .vocab
            .object_id(&object)
            .ok_or_else(|| self.vocab_err(ocol, format!("unknown object `{object}`")))?;
        self.vocab
            .interaction_id(v, o)
            .ok_or_else(|| self.vocab_err(vcol, format!("({SUBJECT},{verb},{object}) is not an interaction class")))
    }

    fn rule(&mut self) -> Result<Rule> {
        let (kind, kcol) = self.ident("`action` or `object`")?;
        let (name, ncol) = self.ident("a trigger name")?;
        let trigger = match kind.as_str() {
            "action" => Trigger::Action(
                self.vocab
                    .verb_id(&name)
                    .ok_or_else(|| self.vocab_err(ncol, format!("unknown verb `{name}`")))?,
            ),
            "object" => Trigger::Object(
                self.vocab
                    .object_id(&name)
                    .ok_or_else(|| self.vocab_err(ncol, format!("unknown object `{name}`")))?,
            ),
            _ => return Err(self.err(kcol, format!("expected `action` or `object`, found `{kind}`"))),
        };
        self.expect(Tok::At)?;
        let (rel, rcol) = self.ident("a relation")?;
        let relation = rel
            .parse::<Relation>()
            .map_err(|_| self.vocab_err(rcol, format!("unknown relation `{rel}`")))?;
        self.expect(Tok::Arrow)?;
        let (kw, col) = self.ident("`forbid`")?;
        if kw != "forbid" {
            return Err(self.err(col, format!("expected `forbid`, found `{kw}`")));
        }
        let mut forbid = vec![self.triple()?];
        while self.pos < self.toks.len() {
            self.expect(Tok::Comma)?;
            let h = self.triple()?;
            if !forbid.contains(&h) {
                forbid.push(h);
            }
        }
        Ok(Rule {
            trigger,
            relation,
            forbid,
        })
    }
}

pub fn parse_rules(text: &str, vocab: &Vocabulary) -> Result<RuleSet> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks = tokenize(line, i + 1)?;
        if toks.is_empty() {
            continue;
        }
        let mut p = LineParser {
            toks,
            pos: 0,
            line: i + 1,
            end_col: line.chars().count() + 1,
            vocab,
        };
        rules.push(p.rule()?);
    }
    Ok(RuleSet { rules })
}
