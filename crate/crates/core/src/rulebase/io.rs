//! Versioned JSON encoding of rule bases.
//!
//! The document carries the generation parameters and one rule object per
//! line, sorted by `(origin, direction, polarity, class, antecedent)`:
//!
//! ```text
//! {"version":1,"header":{…},"T":100,"K":20,"l":5,"q_min":2,"q_max":4,"p_neg":1.0,"seed":0,"phase2_negatives":false,"rules":[
//! {"antecedent":[3,17],"class":0,"polarity":"pos","direction":"fwd","origin":0},
//! …
//! ]}
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClassLiteral, ConceptId, Direction, Polarity, Rule, RuleBase, RuleBaseParams};
use crate::provenance::FileHeader;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed rule base at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unsupported rule-base format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u64, supported: u32 },
}

#[derive(Serialize, Deserialize)]
struct RuleRecord {
    antecedent: Vec<usize>,
    class: usize,
    polarity: Polarity,
    direction: Direction,
    origin: usize,
}

#[derive(Serialize, Deserialize)]
struct Document {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<FileHeader>,
    #[serde(rename = "T")]
    concepts: usize,
    #[serde(rename = "K")]
    classes: usize,
    #[serde(rename = "l")]
    rules_per_class: usize,
    q_min: usize,
    q_max: usize,
    p_neg: f64,
    seed: u64,
    phase2_negatives: bool,
    rules: Vec<RuleRecord>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

fn record(r: &Rule) -> RuleRecord {
    RuleRecord {
        antecedent: r.antecedent.iter().map(|c| c.0).collect(),
        class: r.consequent.class,
        polarity: r.consequent.polarity,
        direction: r.direction,
        origin: r.origin,
    }
}

/// Encodes the rule base; equal rule bases give identical bytes.
pub fn serialize(rb: &RuleBase) -> Vec<u8> {
    let p = rb.params();
    let head = Document {
        version: FORMAT_VERSION,
        header: Some(FileHeader::for_config(p)),
        concepts: p.concepts,
        classes: p.classes,
        rules_per_class: p.rules_per_class,
        q_min: p.q_min,
        q_max: p.q_max,
        p_neg: p.p_neg,
        seed: p.seed,
        phase2_negatives: p.phase2_negatives,
        rules: Vec::new(),
    };
    let mut out = serde_json::to_string(&head).expect("rule base header serializes");
    // Replace the empty `[]}` tail with one rule per line.
    out.truncate(out.len() - "[]}".len());
    out.push('[');
    let rules = rb.canonical_rules();
    for (i, r) in rules.iter().enumerate() {
        out.push('\n');
        out.push_str(&serde_json::to_string(&record(r)).expect("rule serializes"));
        if i + 1 < rules.len() {
            out.push(',');
        }
    }
    out.push_str("\n]}\n");
    out.into_bytes()
}

fn byte_offset(input: &[u8], err: &serde_json::Error) -> usize {
    if err.line() == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, line) in input.split(|&b| b == b'\n').enumerate() {
        if i + 1 == err.line() {
            return (offset + err.column().saturating_sub(1)).min(input.len());
        }
        offset += line.len() + 1;
    }
    input.len()
}

fn syntax(input: &[u8], err: serde_json::Error) -> ParseError {
    ParseError::Syntax {
        offset: byte_offset(input, &err),
        message: err.to_string(),
    }
}

pub fn deserialize(input: &[u8]) -> Result<RuleBase, ParseError> {
    let probe: VersionProbe = serde_json::from_slice(input).map_err(|e| syntax(input, e))?;
    if probe.version != u64::from(FORMAT_VERSION) {
        return Err(ParseError::UnsupportedVersion {
            found: probe.version,
            supported: FORMAT_VERSION,
        });
    }
    let doc: Document = serde_json::from_slice(input).map_err(|e| syntax(input, e))?;
    let params = RuleBaseParams {
        concepts: doc.concepts,
        classes: doc.classes,
        rules_per_class: doc.rules_per_class,
        q_min: doc.q_min,
        q_max: doc.q_max,
        p_neg: doc.p_neg,
        seed: doc.seed,
        phase2_negatives: doc.phase2_negatives,
    };
    let rules = doc
        .rules
        .into_iter()
        .map(|r| Rule {
            antecedent: r.antecedent.into_iter().map(ConceptId).collect(),
            consequent: ClassLiteral {
                class: r.class,
                polarity: r.polarity,
            },
            direction: r.direction,
            origin: r.origin,
        })
        .collect();
    Ok(RuleBase::from_rules(params, rules))
}

#[cfg(test)]
mod tests {
    use super::super::generate;
    use super::*;

    fn sample() -> RuleBase {
        generate(&RuleBaseParams {
            concepts: 12,
            classes: 3,
            rules_per_class: 2,
            seed: 9,
            ..RuleBaseParams::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let rb = sample();
        let bytes = serialize(&rb);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, rb);
        assert_eq!(back.usage(), rb.usage());
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn layout_is_line_per_rule() {
        let rb = sample();
        let text = String::from_utf8(serialize(&rb)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with(r#"{"version":1,"header":{"tool":"klue""#));
        assert!(lines[0].contains(r#""T":12,"K":3,"l":2,"q_min":2,"q_max":4,"p_neg":1.0,"seed":9"#));
        assert_eq!(lines.len(), rb.rules().len() + 2);
        assert_eq!(*lines.last().unwrap(), "]}");
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = serialize(&sample());
        let cut = &bytes[..bytes.len() / 2];
        match deserialize(cut) {
            Err(ParseError::Syntax { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_offset_points_at_error() {
        let bad = b"{\"version\":1,\n  \"T\": x}";
        match deserialize(bad) {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(bad[offset], b'x'),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_explicit() {
        let text = String::from_utf8(serialize(&sample()))
            .unwrap()
            .replacen("\"version\":1", "\"version\":7", 1);
        assert_eq!(
            deserialize(text.as_bytes()),
            Err(ParseError::UnsupportedVersion {
                found: 7,
                supported: 1
            })
        );
    }
}
