//! Synthetic knowledge bases of concept/class implication rules.
//!
//! A rule base holds forward rules `(s_a ∧ s_b ∧ …) → y_k` or `→ ¬y_m`
//! and, for each of them, the converse rule with the same concept set.
//! [`generate`] builds one in two phases:
//!
//! 1. *Core*: every class receives `l` positive rules over distinct random
//!    concept sets of size `q ∈ [q_min, q_max]`. Each positive rule also
//!    spawns `⌊p_neg·(K−1)⌋` negative rules toward other classes, and every
//!    forward rule spawns its converse.
//! 2. *Coverage*: every concept that no positive rule used is injected into
//!    one extra positive rule for a random class.
//!
//! All randomness flows from the seed, so equal parameters give equal rule
//! bases.

mod io;
mod validate;

pub use io::{deserialize, serialize, ParseError, FORMAT_VERSION};
pub use validate::{validate, Violation};

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a support concept, `0 ≤ id < T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// `(⋀ concepts) → literal`
    #[serde(rename = "fwd")]
    Forward,
    /// `literal → (⋀ concepts)`
    #[serde(rename = "conv")]
    Converse,
}

/// `y_k` or `¬y_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassLiteral {
    pub class: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Rule {
    /// Sorted, duplicate-free concept set.
    pub antecedent: Vec<ConceptId>,
    pub consequent: ClassLiteral,
    pub direction: Direction,
    /// Class whose positive rule produced this one.
    pub origin: usize,
}

impl Rule {
    /// Key used for canonical ordering on serialization.
    fn sort_key(&self) -> (usize, Direction, Polarity, usize, &[ConceptId]) {
        (
            self.origin,
            self.direction,
            self.consequent.polarity,
            self.consequent.class,
            &self.antecedent,
        )
    }

    pub fn is_forward(&self) -> bool {
        self.direction == Direction::Forward
    }

    pub fn is_positive(&self) -> bool {
        self.consequent.polarity == Polarity::Positive
    }

    fn converse(&self) -> Rule {
        Rule {
            direction: Direction::Converse,
            ..self.clone()
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let concepts = self
            .antecedent
            .iter()
            .map(|c| format!("s{}", c.0))
            .collect::<Vec<_>>()
            .join(" ∧ ");
        let neg = if self.is_positive() { "" } else { "¬" };
        let literal = format!("{neg}y{}", self.consequent.class);
        match self.direction {
            Direction::Forward => write!(f, "({concepts}) → {literal}"),
            Direction::Converse => write!(f, "{literal} → ({concepts})"),
        }?;
        write!(f, " [origin y{}]", self.origin)
    }
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleBaseParams {
    /// Number of concepts `T`.
    pub concepts: usize,
    /// Number of classes `K`.
    pub classes: usize,
    /// Positive rules per class `l`.
    pub rules_per_class: usize,
    pub q_min: usize,
    pub q_max: usize,
    /// Fraction of the other classes that receive a negative rule.
    pub p_neg: f64,
    pub seed: u64,
    /// Whether coverage-phase rules also spawn negative rules.
    pub phase2_negatives: bool,
}

impl Default for RuleBaseParams {
    fn default() -> Self {
        Self {
            concepts: 100,
            classes: 20,
            rules_per_class: 5,
            q_min: 2,
            q_max: 4,
            p_neg: 1.0,
            seed: 0,
            phase2_negatives: false,
        }
    }
}

impl RuleBaseParams {
    /// Negative rules spawned by one positive rule.
    pub fn negatives_per_positive(&self) -> usize {
        (self.p_neg * (self.classes.saturating_sub(1)) as f64).floor() as usize
    }

    fn check(&self) -> Result<(), RuleBaseError> {
        let mut failed = Vec::new();
        if self.q_min < 1 {
            failed.push("q_min ≥ 1".to_string());
        }
        if self.q_max < self.q_min {
            failed.push(format!("q_max ≥ q_min (got {} < {})", self.q_max, self.q_min));
        }
        if self.concepts < self.q_max {
            failed.push(format!("T ≥ q_max (got {} < {})", self.concepts, self.q_max));
        }
        if self.classes < 2 {
            failed.push(format!("K ≥ 2 (got {})", self.classes));
        }
        if self.rules_per_class < 1 {
            failed.push("l ≥ 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.p_neg) {
            failed.push(format!("p_neg ∈ [0, 1] (got {})", self.p_neg));
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(RuleBaseError::InvalidParams(failed))
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleBaseError {
    #[error("invalid rule-base parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),
    #[error("class {class} cannot receive {wanted} distinct antecedents from {concepts} concepts")]
    NotEnoughCombinations {
        class: usize,
        wanted: usize,
        concepts: usize,
    },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// Per-class rule counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub forward_positive: usize,
    pub forward_negative: usize,
    pub converse_positive: usize,
    pub converse_negative: usize,
}

/// An immutable rule base `R = R_a ∪ R_b`.
#[derive(Clone, Debug)]
pub struct RuleBase {
    params: RuleBaseParams,
    rules: Vec<Rule>,
    usage: Vec<usize>,
}

impl PartialEq for RuleBase {
    /// Rule order is not significant.
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.usage == other.usage
            && self.canonical_rules() == other.canonical_rules()
    }
}

impl RuleBase {
    /// Wraps an explicit rule list. Usage counters are derived from the
    /// forward-positive rules. No invariants are checked; see [`validate`].
    pub fn from_rules(params: RuleBaseParams, rules: Vec<Rule>) -> Self {
        let usage = usage_counts(params.concepts, &rules);
        Self {
            params,
            rules,
            usage,
        }
    }

    pub fn params(&self) -> &RuleBaseParams {
        &self.params
    }

    pub fn concepts(&self) -> usize {
        self.params.concepts
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// How many forward-positive rules mention each concept.
    pub fn usage(&self) -> &[usize] {
        &self.usage
    }

    pub fn canonical_rules(&self) -> Vec<&Rule> {
        let mut sorted: Vec<&Rule> = self.rules.iter().collect();
        sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        sorted
    }

    pub fn forward_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.is_forward())
    }

    pub fn converse_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| !r.is_forward())
    }

    /// Rules whose consequent class is `class`, in stored order.
    pub fn rules_for_class(
        &self,
        class: usize,
        direction: Direction,
        polarity: Polarity,
    ) -> Result<Vec<&Rule>, RuleBaseError> {
        if class >= self.params.classes {
            return Err(RuleBaseError::ClassOutOfRange {
                class,
                classes: self.params.classes,
            });
        }
        Ok(self
            .rules
            .iter()
            .filter(|r| {
                r.consequent.class == class
                    && r.direction == direction
                    && r.consequent.polarity == polarity
            })
            .collect())
    }

    pub fn class_counts(&self) -> Vec<ClassCounts> {
        let mut counts = vec![ClassCounts::default(); self.params.classes];
        for r in &self.rules {
            let Some(c) = counts.get_mut(r.consequent.class) else {
                continue;
            };
            match (r.direction, r.consequent.polarity) {
                (Direction::Forward, Polarity::Positive) => c.forward_positive += 1,
                (Direction::Forward, Polarity::Negative) => c.forward_negative += 1,
                (Direction::Converse, Polarity::Positive) => c.converse_positive += 1,
                (Direction::Converse, Polarity::Negative) => c.converse_negative += 1,
            }
        }
        counts
    }
}

fn usage_counts(concepts: usize, rules: &[Rule]) -> Vec<usize> {
    let mut usage = vec![0; concepts];
    for r in rules.iter().filter(|r| r.is_forward() && r.is_positive()) {
        for c in &r.antecedent {
            if let Some(u) = usage.get_mut(c.0) {
                *u += 1;
            }
        }
    }
    usage
}

/// Up to this many redraws are made to find a fresh antecedent for a class.
const MAX_REDRAWS: usize = 10_000;

struct Builder<'a> {
    params: &'a RuleBaseParams,
    rng: ChaCha8Rng,
    rules: Vec<Rule>,
    usage: Vec<usize>,
}

impl Builder<'_> {
    fn draw_size(&mut self) -> usize {
        self.rng.random_range(self.params.q_min..=self.params.q_max)
    }

    fn sample_concepts(&mut self, q: usize) -> Vec<ConceptId> {
        let mut picked: Vec<ConceptId> = index::sample(&mut self.rng, self.params.concepts, q)
            .into_iter()
            .map(ConceptId)
            .collect();
        picked.sort_unstable();
        picked
    }

    /// Adds `antecedent → y_class`, its negatives and all converses.
    fn add_positive(&mut self, class: usize, antecedent: Vec<ConceptId>, spawn_negatives: bool) {
        for c in &antecedent {
            self.usage[c.0] += 1;
        }
        let positive = Rule {
            antecedent,
            consequent: ClassLiteral {
                class,
                polarity: Polarity::Positive,
            },
            direction: Direction::Forward,
            origin: class,
        };
        let mut spawned = vec![positive];
        let n_neg = self.params.negatives_per_positive();
        if spawn_negatives && n_neg > 0 {
            let others: Vec<usize> = (0..self.params.classes).filter(|&m| m != class).collect();
            let mut targets: Vec<usize> = index::sample(&mut self.rng, others.len(), n_neg)
                .into_iter()
                .map(|i| others[i])
                .collect();
            targets.sort_unstable();
            for m in targets {
                spawned.push(Rule {
                    consequent: ClassLiteral {
                        class: m,
                        polarity: Polarity::Negative,
                    },
                    ..spawned[0].clone()
                });
            }
        }
        for rule in spawned {
            let converse = rule.converse();
            self.rules.push(rule);
            self.rules.push(converse);
        }
    }
}

/// Builds a rule base from `params`; see the module docs for the procedure.
pub fn generate(params: &RuleBaseParams) -> Result<RuleBase, RuleBaseError> {
    build(params, true)
}

/// The core-phase rules alone, without the coverage rules. Its rules are a
/// subset of those of [`generate`] with the same parameters.
pub fn generate_core(params: &RuleBaseParams) -> Result<RuleBase, RuleBaseError> {
    build(params, false)
}

fn build(params: &RuleBaseParams, coverage: bool) -> Result<RuleBase, RuleBaseError> {
    params.check()?;
    let mut b = Builder {
        params,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        rules: Vec::new(),
        usage: vec![0; params.concepts],
    };

    // Core phase: l distinct concept sets per class.
    for class in 0..params.classes {
        let mut seen: BTreeSet<Vec<ConceptId>> = BTreeSet::new();
        for _ in 0..params.rules_per_class {
            let mut attempts = 0;
            let antecedent = loop {
                let q = b.draw_size();
                let candidate = b.sample_concepts(q);
                if seen.insert(candidate.clone()) {
                    break candidate;
                }
                attempts += 1;
                if attempts >= MAX_REDRAWS {
                    return Err(RuleBaseError::NotEnoughCombinations {
                        class,
                        wanted: params.rules_per_class,
                        concepts: params.concepts,
                    });
                }
            };
            b.add_positive(class, antecedent, true);
        }
    }

    // Coverage phase: ground every concept the core phase missed.
    let unused: Vec<usize> = (0..params.concepts).filter(|&s| coverage && b.usage[s] == 0).collect();
    for s in unused {
        let q = b.draw_size();
        let mut antecedent: Vec<ConceptId> =
            index::sample(&mut b.rng, params.concepts - 1, q.saturating_sub(1))
                .into_iter()
                .map(|i| ConceptId(if i >= s { i + 1 } else { i }))
                .collect();
        antecedent.push(ConceptId(s));
        antecedent.sort_unstable();
        let class = b.rng.random_range(0..params.classes);
        b.add_positive(class, antecedent, params.phase2_negatives);
    }

    let Builder {
        mut rules,
        usage,
        mut rng,
        ..
    } = b;
    rules.shuffle(&mut rng);
    Ok(RuleBase {
        params: params.clone(),
        rules,
        usage,
    })
}
