use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{ConceptId, Direction, Polarity, RuleBase};

/// A broken rule-base invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ConceptOutOfRange { rule: usize, concept: usize },
    ClassOutOfRange { rule: usize, class: usize },
    OriginOutOfRange { rule: usize, origin: usize },
    AntecedentNotCanonical { rule: usize },
    AntecedentSize { rule: usize, size: usize },
    /// A positive rule must originate from its own class.
    PositiveOrigin { rule: usize },
    /// A negative rule must negate a class other than its origin, and its
    /// concept set must be one of the origin's positive antecedents.
    NegativeOrigin { rule: usize },
    TooFewPositives { class: usize, have: usize, need: usize },
    NegativeCount { class: usize, have: usize, expected: usize },
    UncoveredConcept { concept: usize },
    UsageMismatch { concept: usize, stored: usize, actual: usize },
    /// Forward and converse rules do not pair up one-to-one.
    Bidirectionality { rule: String, forward: usize, converse: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            ConceptOutOfRange { rule, concept } => {
                write!(f, "rule {rule}: concept s{concept} out of range")
            }
            ClassOutOfRange { rule, class } => write!(f, "rule {rule}: class y{class} out of range"),
            OriginOutOfRange { rule, origin } => {
                write!(f, "rule {rule}: origin y{origin} out of range")
            }
            AntecedentNotCanonical { rule } => {
                write!(f, "rule {rule}: antecedent not sorted or has duplicates")
            }
            AntecedentSize { rule, size } => {
                write!(f, "rule {rule}: antecedent size {size} outside [q_min, q_max]")
            }
            PositiveOrigin { rule } => write!(f, "rule {rule}: positive rule with foreign origin"),
            NegativeOrigin { rule } => {
                write!(f, "rule {rule}: negative rule not derived from an origin positive rule")
            }
            TooFewPositives { class, have, need } => {
                write!(f, "class y{class}: {have} forward-positive rules, need {need}")
            }
            NegativeCount {
                class,
                have,
                expected,
            } => write!(
                f,
                "class y{class}: {have} forward-negative rules, expected {expected}"
            ),
            UncoveredConcept { concept } => {
                write!(f, "coverage: concept s{concept} appears in no positive rule")
            }
            UsageMismatch {
                concept,
                stored,
                actual,
            } => write!(
                f,
                "usage counter for s{concept} is {stored}, rules give {actual}"
            ),
            Bidirectionality {
                rule,
                forward,
                converse,
            } => write!(
                f,
                "bidirectionality: {rule} has {forward} forward and {converse} converse copies"
            ),
        }
    }
}

/// Checks every rule-base invariant. An empty result means valid.
pub fn validate(rb: &RuleBase) -> Vec<Violation> {
    let p = rb.params();
    let (t, k) = (p.concepts, p.classes);
    let mut out = Vec::new();

    for (i, r) in rb.rules().iter().enumerate() {
        for c in &r.antecedent {
            if c.0 >= t {
                out.push(Violation::ConceptOutOfRange {
                    rule: i,
                    concept: c.0,
                });
            }
        }
        if r.consequent.class >= k {
            out.push(Violation::ClassOutOfRange {
                rule: i,
                class: r.consequent.class,
            });
        }
        if r.origin >= k {
            out.push(Violation::OriginOutOfRange {
                rule: i,
                origin: r.origin,
            });
        }
        if r.antecedent.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation::AntecedentNotCanonical { rule: i });
        }
        let size = r.antecedent.len();
        if size == 0 || size < p.q_min || size > p.q_max {
            out.push(Violation::AntecedentSize { rule: i, size });
        }
        if r.is_positive() && r.origin != r.consequent.class {
            out.push(Violation::PositiveOrigin { rule: i });
        }
    }

    // Forward-positive concept sets per origin class.
    let mut positive_sets: BTreeMap<usize, BTreeSet<&[ConceptId]>> = BTreeMap::new();
    for r in rb.forward_rules().filter(|r| r.is_positive()) {
        positive_sets
            .entry(r.origin)
            .or_default()
            .insert(&r.antecedent);
    }
    for (i, r) in rb.rules().iter().enumerate() {
        if !r.is_positive() {
            let derived = r.origin != r.consequent.class
                && positive_sets
                    .get(&r.origin)
                    .is_some_and(|sets| sets.contains(r.antecedent.as_slice()));
            if !derived {
                out.push(Violation::NegativeOrigin { rule: i });
            }
        }
    }

    let counts = rb.class_counts();
    for (class, c) in counts.iter().enumerate() {
        if c.forward_positive < p.rules_per_class {
            out.push(Violation::TooFewPositives {
                class,
                have: c.forward_positive,
                need: p.rules_per_class,
            });
        }
    }
    if p.p_neg == 1.0 {
        // Every spawning positive rule negates all other classes.
        for (class, c) in counts.iter().enumerate() {
            let expected = if p.phase2_negatives {
                counts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != class)
                    .map(|(_, o)| o.forward_positive)
                    .sum()
            } else {
                p.rules_per_class * (k - 1)
            };
            if c.forward_negative != expected {
                out.push(Violation::NegativeCount {
                    class,
                    have: c.forward_negative,
                    expected,
                });
            }
        }
    }

    let actual_usage = super::usage_counts(t, rb.rules());
    for concept in 0..t {
        if actual_usage[concept] == 0 {
            out.push(Violation::UncoveredConcept { concept });
        }
        let stored = rb.usage().get(concept).copied().unwrap_or(0);
        if stored != actual_usage[concept] {
            out.push(Violation::UsageMismatch {
                concept,
                stored,
                actual: actual_usage[concept],
            });
        }
    }

    // Forward and converse copies must agree as multisets.
    type Key<'a> = (&'a [ConceptId], usize, Polarity, usize);
    let mut pairs: BTreeMap<Key, (usize, usize)> = BTreeMap::new();
    for r in rb.rules() {
        let key = (
            r.antecedent.as_slice(),
            r.consequent.class,
            r.consequent.polarity,
            r.origin,
        );
        let entry = pairs.entry(key).or_default();
        match r.direction {
            Direction::Forward => entry.0 += 1,
            Direction::Converse => entry.1 += 1,
        }
    }
    for (key, (forward, converse)) in pairs {
        if forward != converse {
            let example = rb
                .rules()
                .iter()
                .find(|r| {
                    r.antecedent.as_slice() == key.0
                        && r.consequent.class == key.1
                        && r.consequent.polarity == key.2
                        && r.origin == key.3
                })
                .map(|r| r.to_string())
                .unwrap_or_default();
            out.push(Violation::Bidirectionality {
                rule: example,
                forward,
                converse,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{generate, ClassLiteral, Rule, RuleBaseParams};
    use super::*;

    fn small() -> RuleBase {
        generate(&RuleBaseParams {
            concepts: 20,
            classes: 4,
            rules_per_class: 3,
            seed: 5,
            ..RuleBaseParams::default()
        })
        .unwrap()
    }

    #[test]
    fn generated_base_is_valid() {
        assert_eq!(validate(&small()), vec![]);
    }

    #[test]
    fn removed_concept_breaks_coverage() {
        let rb = small();
        // Drop every rule mentioning s0.
        let rules: Vec<Rule> = rb
            .rules()
            .iter()
            .filter(|r| !r.antecedent.contains(&ConceptId(0)))
            .cloned()
            .collect();
        let broken = RuleBase::from_rules(rb.params().clone(), rules);
        let v = validate(&broken);
        assert!(v.contains(&Violation::UncoveredConcept { concept: 0 }), "{v:?}");
    }

    #[test]
    fn orphaned_converse_breaks_bidirectionality() {
        let rb = small();
        let mut rules = rb.rules().to_vec();
        let fwd = rules.iter().position(|r| r.is_forward()).unwrap();
        rules.remove(fwd);
        let broken = RuleBase::from_rules(rb.params().clone(), rules);
        let v = validate(&broken);
        assert!(
            v.iter().any(|x| matches!(
                x,
                Violation::Bidirectionality {
                    forward: 0,
                    converse: 1,
                    ..
                }
            )),
            "{v:?}"
        );
    }

    #[test]
    fn structural_violations_are_named() {
        let params = RuleBaseParams {
            concepts: 3,
            classes: 2,
            rules_per_class: 1,
            q_min: 1,
            q_max: 2,
            p_neg: 0.0,
            ..RuleBaseParams::default()
        };
        let bad = Rule {
            antecedent: vec![ConceptId(2), ConceptId(1), ConceptId(5)],
            consequent: ClassLiteral {
                class: 1,
                polarity: Polarity::Positive,
            },
            direction: Direction::Forward,
            origin: 0,
        };
        let rb = RuleBase::from_rules(params, vec![bad]);
        let v = validate(&rb);
        for expected in [
            Violation::ConceptOutOfRange { rule: 0, concept: 5 },
            Violation::AntecedentNotCanonical { rule: 0 },
            Violation::AntecedentSize { rule: 0, size: 3 },
            Violation::PositiveOrigin { rule: 0 },
            Violation::TooFewPositives {
                class: 0,
                have: 0,
                need: 1,
            },
            Violation::UncoveredConcept { concept: 0 },
        ] {
            assert!(v.contains(&expected), "missing {expected:?} in {v:?}");
        }
        assert!(v.iter().all(|x| !x.to_string().is_empty()));
    }
}
