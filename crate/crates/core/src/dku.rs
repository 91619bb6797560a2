//! The differentiable knowledge unit.
//!
//! Given class probabilities `p(k|z)` and concept probabilities `p(s|z)`
//! for a batch, the unit evaluates every forward rule, aggregates the
//! positive and negative truths of each class with Softmax-WA, and shifts
//! the class logits by `α_temp · Δ`. The converse rules feed the SAT loss.
//!
//! Rules are compiled once into a [`RuleIndex`] that groups them by
//! antecedent size and consequent polarity, so each group is evaluated on
//! whole `[batch × rules]` matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::fuzzy::{self, ConnectorParams, ConnectorVars, FuzzyError, FuzzySemantics};
use crate::rulebase::{Direction, Polarity, RuleBase};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DkuError {
    #[error("rule {rule} references {what} {index}, but only {limit} exist")]
    Index {
        rule: usize,
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("expected {what} of width {expected}, got shape {shape:?}")]
    Shape {
        what: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Fuzzy(#[from] FuzzyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, DkuError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DkuConfig {
    /// Logit scale `α_temp` in `ẑ = z + α_temp · Δ`.
    pub alpha_temp: f64,
    pub semantics: FuzzySemantics,
    /// Initial connector values.
    pub connector: ConnectorParams,
    /// One connector per rule instead of one shared connector.
    #[serde(default)]
    pub per_rule_connector: bool,
    /// Average the SAT loss per sample instead of pooling the batch.
    #[serde(default)]
    pub sat_per_sample: bool,
}

impl Default for DkuConfig {
    fn default() -> Self {
        Self {
            alpha_temp: 5.0,
            semantics: FuzzySemantics::v1(),
            connector: ConnectorParams::default(),
            per_rule_connector: false,
            sat_per_sample: false,
        }
    }
}

/// Rules with equal antecedent size and polarity, evaluated together.
#[derive(Clone, Debug)]
struct Group {
    polarity: Polarity,
    /// Indices into `RuleBase::rules()`.
    rules: Vec<usize>,
    /// `positions[j][m]` is the j-th antecedent concept of member m.
    positions: Vec<Vec<usize>>,
    classes: Vec<usize>,
}

/// One rule family (forward-positive, forward-negative or converse).
#[derive(Clone, Debug, Default)]
struct RuleSet {
    groups: Vec<Group>,
    /// Output columns per consequent class.
    columns_by_class: Vec<Vec<usize>>,
    /// Consequent class and polarity per output column.
    column_literals: Vec<(usize, Polarity)>,
}

impl RuleSet {
    fn build<'a>(
        rules: impl Iterator<Item = (usize, &'a crate::rulebase::Rule)>,
        classes: usize,
    ) -> Self {
        let mut by_key: BTreeMap<(usize, Polarity), Vec<(usize, &crate::rulebase::Rule)>> =
            BTreeMap::new();
        for (i, r) in rules {
            by_key
                .entry((r.antecedent.len(), r.consequent.polarity))
                .or_default()
                .push((i, r));
        }
        let mut set = RuleSet {
            columns_by_class: vec![Vec::new(); classes],
            ..RuleSet::default()
        };
        let mut column = 0;
        for ((size, polarity), members) in by_key {
            let positions = (0..size)
                .map(|j| members.iter().map(|(_, r)| r.antecedent[j].0).collect())
                .collect();
            for (_, r) in &members {
                set.columns_by_class[r.consequent.class].push(column);
                set.column_literals.push((r.consequent.class, polarity));
                column += 1;
            }
            set.groups.push(Group {
                polarity,
                rules: members.iter().map(|(i, _)| *i).collect(),
                positions,
                classes: members.iter().map(|(_, r)| r.consequent.class).collect(),
            });
        }
        set
    }

    fn len(&self) -> usize {
        self.column_literals.len()
    }
}

/// Rule base compiled for batched evaluation against fixed head widths.
#[derive(Clone, Debug)]
pub struct RuleIndex {
    classes: usize,
    concepts: usize,
    total_rules: usize,
    forward_positive: RuleSet,
    forward_negative: RuleSet,
    converse: RuleSet,
}

impl RuleIndex {
    /// Checks that every rule fits `classes` class outputs and `concepts`
    /// concept outputs.
    pub fn new(rb: &RuleBase, classes: usize, concepts: usize) -> Result<Self> {
        for (i, r) in rb.rules().iter().enumerate() {
            if r.consequent.class >= classes {
                return Err(DkuError::Index {
                    rule: i,
                    what: "class",
                    index: r.consequent.class,
                    limit: classes,
                });
            }
            if let Some(c) = r.antecedent.iter().find(|c| c.0 >= concepts) {
                return Err(DkuError::Index {
                    rule: i,
                    what: "concept",
                    index: c.0,
                    limit: concepts,
                });
            }
        }
        let indexed = || rb.rules().iter().enumerate();
        Ok(Self {
            classes,
            concepts,
            total_rules: rb.rules().len(),
            forward_positive: RuleSet::build(
                indexed().filter(|(_, r)| r.is_forward() && r.is_positive()),
                classes,
            ),
            forward_negative: RuleSet::build(
                indexed().filter(|(_, r)| r.is_forward() && !r.is_positive()),
                classes,
            ),
            converse: RuleSet::build(
                indexed().filter(|(_, r)| r.direction == Direction::Converse),
                classes,
            ),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    /// Number of rules, used to size per-rule connector vectors.
    pub fn total_rules(&self) -> usize {
        self.total_rules
    }

    pub fn converse_len(&self) -> usize {
        self.converse.len()
    }
}

/// Connector parameters on the graph, shared or one per rule.
#[derive(Clone, Copy, Debug)]
pub struct ConnectorNodes {
    pub vars: ConnectorVars,
    /// When set, each var is a vector indexed by rule position.
    pub per_rule: bool,
}

impl ConnectorNodes {
    pub fn shared(vars: ConnectorVars) -> Self {
        Self {
            vars,
            per_rule: false,
        }
    }

    fn for_group(&self, g: &mut Graph, rules: &[usize], batch: usize) -> Result<ConnectorVars> {
        if !self.per_rule {
            return Ok(self.vars);
        }
        let mut pick = |v: Var| -> Result<Var> {
            let sel = g.gather_cols(v, rules)?;
            Ok(g.tile_rows(sel, batch)?)
        };
        Ok(ConnectorVars {
            alpha: pick(self.vars.alpha)?,
            beta: pick(self.vars.beta)?,
            gamma: pick(self.vars.gamma)?,
            delta: pick(self.vars.delta)?,
        })
    }
}

/// Truth values of the forward rules, `[batch × rules]` per polarity.
#[derive(Clone, Debug)]
pub struct RuleTruths {
    pub positive: Option<Var>,
    pub negative: Option<Var>,
    positive_columns: Vec<Vec<usize>>,
    negative_columns: Vec<Vec<usize>>,
    batch: usize,
}

impl RuleTruths {
    /// Columns of `positive`/`negative` that belong to `class`.
    pub fn columns(&self, class: usize, polarity: Polarity) -> &[usize] {
        match polarity {
            Polarity::Positive => &self.positive_columns[class],
            Polarity::Negative => &self.negative_columns[class],
        }
    }

    /// `[batch × n]` truths of one class and polarity, `None` if it has no rules.
    pub fn class_truths(&self, g: &mut Graph, class: usize, polarity: Polarity) -> Result<Option<Var>> {
        let (source, cols) = match polarity {
            Polarity::Positive => (self.positive, &self.positive_columns[class]),
            Polarity::Negative => (self.negative, &self.negative_columns[class]),
        };
        match source {
            Some(m) if !cols.is_empty() => Ok(Some(g.gather_cols(m, cols)?)),
            _ => Ok(None),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn as_rows(g: &mut Graph, v: Var, width: usize, what: &'static str) -> Result<Var> {
    let t = g.value(v);
    if t.cols() != width || t.rank() == 0 || t.rank() > 2 {
        return Err(DkuError::Shape {
            what,
            expected: width,
            shape: t.shape().to_vec(),
        });
    }
    if t.rank() == 1 {
        Ok(g.reshape(v, &[1, width])?)
    } else {
        Ok(v)
    }
}

/// Evaluates one rule family. Output columns follow group order.
fn evaluate_set(
    g: &mut Graph,
    set: &RuleSet,
    direction: Direction,
    class_probs: Var,
    concept_probs: Var,
    semantics: &FuzzySemantics,
    connector: &ConnectorNodes,
) -> Result<Option<Var>> {
    let batch = g.value(class_probs).rows();
    let mut parts = Vec::with_capacity(set.groups.len());
    for group in &set.groups {
        let inputs = group
            .positions
            .iter()
            .map(|cols| g.gather_cols(concept_probs, cols))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let conn = connector.for_group(g, &group.rules, batch)?;
        let antecedent = fuzzy::conjoin(g, &inputs, semantics, &conn)?;
        let class_p = g.gather_cols(class_probs, &group.classes)?;
        let literal = match group.polarity {
            Polarity::Positive => class_p,
            Polarity::Negative => g.one_minus(class_p)?,
        };
        let truth = match direction {
            Direction::Forward => fuzzy::implies(g, antecedent, literal, semantics)?,
            Direction::Converse => fuzzy::implies(g, literal, antecedent, semantics)?,
        };
        parts.push(truth);
    }
    match parts.len() {
        0 => Ok(None),
        1 => Ok(Some(parts[0])),
        _ => Ok(Some(g.concat_cols(&parts)?)),
    }
}

/// Truths of all forward rules. Negative rules `A → ¬y_k` use `1 − p(k|z)`
/// as consequent and are grouped under class k.
pub fn evaluate_forward_rules(
    g: &mut Graph,
    class_probs: Var,
    concept_probs: Var,
    index: &RuleIndex,
    semantics: &FuzzySemantics,
    connector: &ConnectorNodes,
) -> Result<RuleTruths> {
    let class_probs = as_rows(g, class_probs, index.classes, "class probabilities")?;
    let concept_probs = as_rows(g, concept_probs, index.concepts, "concept probabilities")?;
    let batch = g.value(class_probs).rows();
    let positive = evaluate_set(
        g,
        &index.forward_positive,
        Direction::Forward,
        class_probs,
        concept_probs,
        semantics,
        connector,
    )?;
    let negative = evaluate_set(
        g,
        &index.forward_negative,
        Direction::Forward,
        class_probs,
        concept_probs,
        semantics,
        connector,
    )?;
    Ok(RuleTruths {
        positive,
        negative,
        positive_columns: index.forward_positive.columns_by_class.clone(),
        negative_columns: index.forward_negative.columns_by_class.clone(),
        batch,
    })
}

/// `Δ_k = Agg(I⁺_k) − Agg(I⁻_k)` as a `[batch × K]` matrix. A class side
/// without rules contributes 0.
pub fn compute_delta(g: &mut Graph, truths: &RuleTruths, semantics: &FuzzySemantics) -> Result<Var> {
    let classes = truths.positive_columns.len();
    let batch = truths.batch;
    let mut columns = Vec::with_capacity(classes);
    for k in 0..classes {
        let pos = truths.class_truths(g, k, Polarity::Positive)?;
        let neg = truths.class_truths(g, k, Polarity::Negative)?;
        let pos = pos
            .map(|t| fuzzy::agg_softmax_wa(g, t, semantics.tau))
            .transpose()?;
        let neg = neg
            .map(|t| fuzzy::agg_softmax_wa(g, t, semantics.negative_tau()))
            .transpose()?;
        let column = match (pos, neg) {
            (Some(p), Some(n)) => g.sub(p, n)?,
            (Some(p), None) => p,
            (None, Some(n)) => g.neg(n)?,
            (None, None) => {
                log::warn!("class {k} has no forward rules; its adjustment is 0");
                g.constant(Tensor::zeros(&[batch, 1]))
            }
        };
        columns.push(column);
    }
    Ok(g.concat_cols(&columns)?)
}

/// `ẑ = z + α_temp · Δ` and `p_Δ = σ(ẑ)`.
pub fn refine_logits(g: &mut Graph, z: Var, delta: Var, alpha_temp: f64) -> Result<(Var, Var)> {
    let zs = g.value(z).shape().to_vec();
    let ds = g.value(delta).shape().to_vec();
    let delta = if zs != ds && g.value(delta).numel() == g.value(z).numel() {
        g.reshape(delta, &zs)?
    } else {
        delta
    };
    let scaled = g.scale(delta, alpha_temp)?;
    let z_hat = g.add(z, scaled)?;
    let p = g.sigmoid(z_hat)?;
    Ok((z_hat, p))
}

/// Gate of each converse rule per sample: a positive literal is active when
/// the label is 1, a negated one when it is 0.
fn converse_mask(index: &RuleIndex, labels: &Tensor) -> Result<Tensor> {
    if labels.cols() != index.classes {
        return Err(DkuError::Shape {
            what: "labels",
            expected: index.classes,
            shape: labels.shape().to_vec(),
        });
    }
    let lits = &index.converse.column_literals;
    let mut data = Vec::with_capacity(labels.rows() * lits.len());
    for b in 0..labels.rows() {
        let row = labels.row(b);
        data.extend(lits.iter().map(|&(class, pol)| {
            let on = row[class] > 0.5;
            match (pol, on) {
                (Polarity::Positive, true) | (Polarity::Negative, false) => 1.0,
                _ => 0.0,
            }
        }));
    }
    Ok(Tensor::matrix(labels.rows(), lits.len(), data)?)
}

/// `L_SAT = 1 − SAT` over the converse rules that the labels activate.
/// Returns a constant 0 when no rule applies.
#[allow(clippy::too_many_arguments)]
pub fn sat_loss(
    g: &mut Graph,
    class_probs: Var,
    concept_probs: Var,
    index: &RuleIndex,
    semantics: &FuzzySemantics,
    connector: &ConnectorNodes,
    labels: &Tensor,
    per_sample: bool,
) -> Result<Var> {
    let class_probs = as_rows(g, class_probs, index.classes, "class probabilities")?;
    let concept_probs = as_rows(g, concept_probs, index.concepts, "concept probabilities")?;
    let mask = converse_mask(index, labels)?;
    if mask.rows() != g.value(class_probs).rows() {
        return Err(DkuError::Shape {
            what: "label rows",
            expected: g.value(class_probs).rows(),
            shape: labels.shape().to_vec(),
        });
    }
    if mask.data().iter().all(|&m| m == 0.0) {
        return Ok(g.scalar(0.0));
    }
    let truths = evaluate_set(
        g,
        &index.converse,
        Direction::Converse,
        class_probs,
        concept_probs,
        semantics,
        connector,
    )?
    .expect("mask is non-empty, so converse rules exist");
    let p = semantics.sat_p;

    if !per_sample {
        let mean_err = fuzzy::mean_error(g, truths, p, Some(&mask))?;
        let root = g.pow(mean_err, 1.0 / p)?;
        let sat = g.one_minus(root)?;
        return Ok(g.one_minus(sat)?);
    }

    // Per-sample p-mean error, averaged over samples with active rules.
    let err = g.one_minus(truths)?;
    let err = g.clamp(err, 0.0, 1.0)?;
    let err = g.pow(err, p)?;
    let mv = g.constant(mask.clone());
    let err = g.mul(err, mv)?;
    let row_sums = g.sum_rows(err)?;
    let counts: Vec<f64> = (0..mask.rows()).map(|r| mask.row(r).iter().sum()).collect();
    let active = counts.iter().filter(|&&c| c > 0.0).count();
    let inv = Tensor::matrix(
        counts.len(),
        1,
        counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect(),
    )?;
    let inv = g.constant(inv);
    let row_means = g.mul(row_sums, inv)?;
    let roots = g.pow(row_means, 1.0 / p)?;
    let sat_loss_rows = g.sum(roots)?;
    Ok(g.scale(sat_loss_rows, 1.0 / active as f64)?)
}

/// Everything the unit produces for one batch.
#[derive(Clone, Debug)]
pub struct DkuOutput {
    pub truths: RuleTruths,
    pub delta: Var,
    pub z_hat: Var,
    pub p_delta: Var,
}

pub fn forward(
    g: &mut Graph,
    z: Var,
    class_probs: Var,
    concept_probs: Var,
    index: &RuleIndex,
    config: &DkuConfig,
    connector: &ConnectorNodes,
) -> Result<DkuOutput> {
    let truths = evaluate_forward_rules(g, class_probs, concept_probs, index, &config.semantics, connector)?;
    let delta = compute_delta(g, &truths, &config.semantics)?;
    let (z_hat, p_delta) = refine_logits(g, z, delta, config.alpha_temp)?;
    Ok(DkuOutput {
        truths,
        delta,
        z_hat,
        p_delta,
    })
}
