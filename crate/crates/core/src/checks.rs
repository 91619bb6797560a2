//! Finite-difference gradient suites over the differentiable components.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck, AutodiffError, GradCheckReport, Graph, Result, Var};
use crate::dku::{self, ConnectorNodes, DkuConfig, RuleIndex};
use crate::fuzzy::{self, ConnectorParams, ConnectorVars, FuzzySemantics};
use crate::model::{self, Backbone, KlueModel, LossWeights, ModelConfig, Variant};
use crate::rulebase::{ClassLiteral, ConceptId, Direction, Polarity, Rule, RuleBase, RuleBaseParams};
use crate::tensor::Tensor;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    Fuzzy,
    Dku,
    Model,
    Loss,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] = [Self::Fuzzy, Self::Dku, Self::Model, Self::Loss];
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fuzzy => "fuzzy",
            Self::Dku => "dku",
            Self::Model => "model",
            Self::Loss => "loss",
        })
    }
}

impl FromStr for CheckTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| format!("unknown gradcheck target `{s}` (expected fuzzy, dku, model or loss)"))
    }
}

/// One checked function.
#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    /// Label per parameter tensor, aligned with `report.params`.
    pub param_names: Vec<String>,
    pub report: GradCheckReport,
}

fn lift<E: fmt::Display>(e: E) -> AutodiffError {
    AutodiffError::Domain {
        op: "gradcheck",
        detail: e.to_string(),
    }
}

fn fuzzy_err(e: fuzzy::FuzzyError) -> AutodiffError {
    match e {
        fuzzy::FuzzyError::Autodiff(a) => a,
        other => lift(other),
    }
}

fn dku_err(e: dku::DkuError) -> AutodiffError {
    match e {
        dku::DkuError::Autodiff(a) => a,
        dku::DkuError::Fuzzy(f) => fuzzy_err(f),
        other => lift(other),
    }
}

fn model_err(e: model::ModelError) -> AutodiffError {
    match e {
        model::ModelError::Autodiff(a) => a,
        model::ModelError::Dku(d) => dku_err(d),
        other => lift(other),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Reduces any output to a scalar with fixed random weights so the whole
/// Jacobian is exercised.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = weights.reshaped(g.value(out).shape())?;
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    g.sum(m)
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Three classes over six concepts with four forward rules and their
/// converses.
pub fn micro_rule_base() -> RuleBase {
    let params = RuleBaseParams {
        concepts: 6,
        classes: 3,
        rules_per_class: 1,
        q_min: 2,
        q_max: 3,
        p_neg: 0.5,
        seed: 0,
        phase2_negatives: false,
    };
    let spec: [(&[usize], usize, Polarity, usize); 4] = [
        (&[0, 1], 0, Polarity::Positive, 0),
        (&[2, 3, 4], 1, Polarity::Positive, 1),
        (&[1, 5], 2, Polarity::Positive, 2),
        (&[2, 3, 4], 2, Polarity::Negative, 1),
    ];
    let mut rules = Vec::new();
    for (ante, class, polarity, origin) in spec {
        for direction in [Direction::Forward, Direction::Converse] {
            rules.push(Rule {
                antecedent: ante.iter().map(|&c| ConceptId(c)).collect(),
                consequent: ClassLiteral { class, polarity },
                direction,
                origin,
            });
        }
    }
    RuleBase::from_rules(params, rules)
}

/// Micro model matching [`micro_rule_base`].
pub fn micro_model(variant: Variant, per_rule: bool, seed: u64) -> KlueModel {
    let config = ModelConfig {
        input_dim: 5,
        embed_dim: 4,
        classes: 3,
        concepts: 6,
        backbone: Backbone::Mlp { hidden: vec![4] },
        variant,
        dku: DkuConfig {
            semantics: variant.default_semantics(),
            per_rule_connector: per_rule,
            ..DkuConfig::default()
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = KlueModel::new(config, 8, &mut rng).expect("valid micro config");
    // Nonzero biases and perturbed connectors so no gradient is trivially zero.
    for p in &mut m.params {
        if p.name.ends_with("bias") || p.name.starts_with("dku.") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

fn micro_batch(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let x = uniform(rng, &[4, 5], -1.0, 1.0);
    let labels = Tensor::from_rows(&[
        vec![1.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])
    .expect("rectangular");
    (x, labels)
}

fn run<F>(name: impl Into<String>, param_names: Vec<String>, f: F, params: &[Tensor]) -> Result<NamedCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(NamedCheck {
        name: name.into(),
        param_names,
        report: gradcheck(f, params, GRAD_STEP, GRAD_TOL)?,
    })
}

fn connector_tensors(per_rule: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    ConnectorParams::default()
        .to_array()
        .into_iter()
        .map(|v| match per_rule {
            Some(n) => Tensor::vector((0..n).map(|_| v + rng.random_range(-0.3..0.3)).collect()),
            None => Tensor::scalar(v + rng.random_range(-0.3..0.3)),
        })
        .collect()
}

fn connector_vars(p: &[Var]) -> ConnectorVars {
    ConnectorVars {
        alpha: p[0],
        beta: p[1],
        gamma: p[2],
        delta: p[3],
    }
}

fn fuzzy_suite(rng: &mut ChaCha8Rng) -> Result<Vec<NamedCheck>> {
    let mut out = Vec::new();
    let shape = [3, 4];
    let w = uniform(rng, &shape, -1.0, 1.0);
    let truth = |rng: &mut ChaCha8Rng| uniform(rng, &shape, 0.05, 0.95);
    let conn_names = || names(&["alpha", "beta", "gamma", "delta"]);

    let mut params = vec![truth(rng), truth(rng)];
    params.extend(connector_tensors(None, rng));
    let mut pn = names(&["x", "y"]);
    pn.extend(conn_names());
    out.push(run(
        "parametric conjunction",
        pn,
        |g, p| {
            let c = connector_vars(&p[2..]);
            let t = fuzzy::conj_parametric(g, p[0], p[1], &c).map_err(fuzzy_err)?;
            weighted_sum(g, t, &w)
        },
        &params,
    )?);

    let mut params = vec![truth(rng), truth(rng), truth(rng)];
    params.extend(connector_tensors(None, rng));
    let mut pn = names(&["a0", "a1", "a2"]);
    pn.extend(conn_names());
    out.push(run(
        "parametric conjunction fold",
        pn,
        |g, p| {
            let c = connector_vars(&p[3..]);
            let t = fuzzy::conj_parametric_fold(g, &p[..3], &c).map_err(fuzzy_err)?;
            weighted_sum(g, t, &w)
        },
        &params,
    )?);

    for yp in [1.5, 2.0, 3.0] {
        let params: Vec<Tensor> = (0..3).map(|_| uniform(rng, &shape, 0.6, 0.95)).collect();
        out.push(run(
            format!("yager t-norm p={yp}"),
            names(&["a0", "a1", "a2"]),
            |g, p| {
                let t = fuzzy::conj_yager(g, p, yp).map_err(fuzzy_err)?;
                weighted_sum(g, t, &w)
            },
            &params,
        )?);
    }

    let params = vec![truth(rng), truth(rng)];
    out.push(run(
        "reichenbach implication",
        names(&["antecedent", "consequent"]),
        |g, p| {
            let t = fuzzy::impl_reichenbach(g, p[0], p[1]).map_err(fuzzy_err)?;
            weighted_sum(g, t, &w)
        },
        &params,
    )?);
    for s in [2.0, 9.0] {
        out.push(run(
            format!("sigmoidal reichenbach s={s}"),
            names(&["antecedent", "consequent"]),
            |g, p| {
                let t = fuzzy::impl_sigmoidal_reichenbach(g, p[0], p[1], s).map_err(fuzzy_err)?;
                weighted_sum(g, t, &w)
            },
            &params,
        )?);
    }

    let wr = uniform(rng, &[3, 1], -1.0, 1.0);
    for tau in [-2.0, 0.0, 1.0, 4.0] {
        out.push(run(
            format!("softmax-wa tau={tau}"),
            names(&["truths"]),
            |g, p| {
                let t = fuzzy::agg_softmax_wa(g, p[0], tau).map_err(fuzzy_err)?;
                weighted_sum(g, t, &wr)
            },
            &[truth(rng)],
        )?);
    }
    for sp in [1.0, 2.0, 4.0] {
        out.push(run(
            format!("sat p-mean p={sp}"),
            names(&["truths"]),
            |g, p| fuzzy::agg_sat_pmean(g, p[0], sp).map_err(fuzzy_err),
            &[truth(rng)],
        )?);
    }
    Ok(out)
}

fn dku_suite(rng: &mut ChaCha8Rng) -> Result<Vec<NamedCheck>> {
    let rb = micro_rule_base();
    let index = RuleIndex::new(&rb, 3, 6).map_err(dku_err)?;
    let (_, labels) = micro_batch(rng);
    let w = uniform(rng, &[4, 3], -1.0, 1.0);
    let mut out = Vec::new();
    for (label, semantics) in [("v1", FuzzySemantics::v1()), ("v2", FuzzySemantics::v2())] {
        for per_rule in [false, true] {
            let cfg = DkuConfig {
                semantics: semantics.clone(),
                per_rule_connector: per_rule,
                ..DkuConfig::default()
            };
            let mut params = vec![uniform(rng, &[4, 3], -2.0, 2.0), uniform(rng, &[4, 6], -2.0, 2.0)];
            params.extend(connector_tensors(per_rule.then_some(index.total_rules()), rng));
            let pn = names(&["class logits", "concept logits", "alpha", "beta", "gamma", "delta"]);
            let tag = if per_rule { "per-rule" } else { "shared" };
            let connector = |p: &[Var]| ConnectorNodes {
                vars: connector_vars(&p[2..]),
                per_rule,
            };
            out.push(run(
                format!("refined probabilities {label} {tag}"),
                pn.clone(),
                |g, p| {
                    let cp = g.sigmoid(p[0])?;
                    let sp = g.sigmoid(p[1])?;
                    let o = dku::forward(g, p[0], cp, sp, &index, &cfg, &connector(p)).map_err(dku_err)?;
                    weighted_sum(g, o.p_delta, &w)
                },
                &params,
            )?);
            for per_sample in [false, true] {
                let mode = if per_sample { "per-sample" } else { "pooled" };
                out.push(run(
                    format!("sat loss {label} {tag} {mode}"),
                    pn.clone(),
                    |g, p| {
                        let cp = g.sigmoid(p[0])?;
                        let sp = g.sigmoid(p[1])?;
                        dku::sat_loss(g, cp, sp, &index, &cfg.semantics, &connector(p), &labels, per_sample)
                            .map_err(dku_err)
                    },
                    &params,
                )?);
            }
        }
    }
    Ok(out)
}

fn model_suite(rng: &mut ChaCha8Rng) -> Result<Vec<NamedCheck>> {
    let mut out = Vec::new();
    let concept_w = uniform(rng, &[6, 4], -1.0, 1.0);
    let class_w = uniform(rng, &[3, 4], -1.0, 1.0);
    for which in ["concept", "class"] {
        out.push(run(
            format!("uniqueness loss ({which})"),
            names(&["concept.weight", "class.weight"]),
            |g, p| {
                let (a, b) = model::uniqueness_losses(g, p[0], p[1]).map_err(model_err)?;
                Ok(if which == "concept" { a } else { b })
            },
            &[concept_w.clone(), class_w.clone()],
        )?);
    }
    let (_, labels) = micro_batch(rng);
    out.push(run(
        "classification loss",
        names(&["class logits"]),
        |g, p| {
            let pr = g.sigmoid(p[0])?;
            model::classification_loss(g, pr, &labels).map_err(model_err)
        },
        &[uniform(rng, &[4, 3], -2.0, 2.0)],
    )?);
    let (x, _) = micro_batch(rng);
    let w = uniform(rng, &[4, 3], -1.0, 1.0);
    let rb = micro_rule_base();
    for variant in [Variant::Baseline, Variant::V1, Variant::V2] {
        let m = micro_model(variant, false, rng.random());
        let index = RuleIndex::new(&rb, 3, 6).map_err(dku_err)?;
        let idx = variant.uses_dku().then_some(&index);
        let params: Vec<Tensor> = m.params.iter().map(|p| p.value.clone()).collect();
        out.push(run(
            format!("model forward {variant}"),
            m.params.iter().map(|p| p.name.clone()).collect(),
            |g, p| {
                let bound = m.bind_vars(p.to_vec());
                let xv = g.constant(x.clone());
                let o = model::forward(g, &m, &bound, xv, idx).map_err(model_err)?;
                weighted_sum(g, o.p_refined, &w)
            },
            &params,
        )?);
    }
    Ok(out)
}

fn loss_suite(rng: &mut ChaCha8Rng) -> Result<Vec<NamedCheck>> {
    let rb = micro_rule_base();
    let index = RuleIndex::new(&rb, 3, 6).map_err(dku_err)?;
    let (x, labels) = micro_batch(rng);
    let weights = LossWeights::default();
    let mut out = Vec::new();
    for (variant, per_rule) in [
        (Variant::Baseline, false),
        (Variant::V1, false),
        (Variant::V1, true),
        (Variant::V2, false),
        (Variant::V2, true),
    ] {
        let m = micro_model(variant, per_rule, rng.random());
        let idx = variant.uses_dku().then_some(&index);
        let params: Vec<Tensor> = m.params.iter().map(|p| p.value.clone()).collect();
        let tag = if per_rule { " per-rule" } else { "" };
        out.push(run(
            format!("total loss {variant}{tag}"),
            m.params.iter().map(|p| p.name.clone()).collect(),
            |g, p| {
                let bound = m.bind_vars(p.to_vec());
                let xv = g.constant(x.clone());
                let o = model::forward(g, &m, &bound, xv, idx).map_err(model_err)?;
                let nodes =
                    model::total_loss(g, &m, &bound, &o, &labels, idx, &weights, true).map_err(model_err)?;
                Ok(nodes.total)
            },
            &params,
        )?);
    }
    Ok(out)
}

/// Runs every check of `target` on inputs drawn from `seed`.
pub fn gradcheck_suite(target: CheckTarget, seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        CheckTarget::Fuzzy => fuzzy_suite(&mut rng),
        CheckTarget::Dku => dku_suite(&mut rng),
        CheckTarget::Model => model_suite(&mut rng),
        CheckTarget::Loss => loss_suite(&mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_rule_base_shape() {
        let rb = micro_rule_base();
        assert_eq!(rb.forward_rules().count(), 4);
        assert_eq!(rb.converse_rules().count(), 4);
        let idx = RuleIndex::new(&rb, 3, 6).unwrap();
        assert_eq!(idx.total_rules(), 8);
        assert_eq!(idx.converse_len(), 4);
    }

    #[test]
    fn every_suite_passes() {
        for target in CheckTarget::ALL {
            let checks = gradcheck_suite(target, 3).unwrap();
            assert!(!checks.is_empty());
            for c in &checks {
                assert!(c.report.passed, "{target} {}: {:?}", c.name, c.report);
                assert_eq!(c.param_names.len(), c.report.params.len());
            }
        }
    }

    #[test]
    fn targets_parse() {
        for t in CheckTarget::ALL {
            assert_eq!(t.to_string().parse::<CheckTarget>().unwrap(), t);
        }
        assert!("bogus".parse::<CheckTarget>().is_err());
    }
}
