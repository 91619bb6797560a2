//! Backbone, class and concept heads, and the training losses.
//!
//! Parameters live outside any graph as named [`Tensor`]s. Each step binds
//! them into a fresh [`Graph`], builds the forward pass and the losses,
//! runs backward, and hands the gradients to the [`Adam`] optimizer.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::dku::{self, ConnectorNodes, DkuConfig, DkuError, RuleIndex};
use crate::fuzzy::{ConnectorVars, FuzzySemantics};
use crate::tensor::Tensor;

/// Probability clamp used by the classification loss.
pub const PROB_EPS: f64 = 1e-7;
/// Row-norm floor when normalizing head weights.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input has shape {shape:?}, expected {expected} features")]
    InputShape { shape: Vec<usize>, expected: usize },
    #[error("labels have shape {shape:?}, expected [{rows}, {cols}]")]
    LabelShape {
        shape: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    #[error("the {0} variant needs a compiled rule base")]
    MissingRules(Variant),
    #[error("parameter `{name}` became non-finite after step {step}")]
    NonFiniteParam { name: String, step: u64 },
    #[error(transparent)]
    Dku(#[from] DkuError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which predictor is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Class head only; the concept head is unused.
    Baseline,
    /// DKU with the parametric conjunction and Reichenbach implication.
    V1,
    /// DKU with the Yager t-norm and sigmoidal Reichenbach implication.
    V2,
}

impl Variant {
    pub fn uses_dku(self) -> bool {
        self != Variant::Baseline
    }

    pub fn default_semantics(self) -> FuzzySemantics {
        match self {
            Variant::V2 => FuzzySemantics::v2(),
            _ => FuzzySemantics::v1(),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            other => Err(format!("unknown variant `{other}` (expected baseline, v1 or v2)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// `e = x`; needs `embed_dim == input_dim`.
    Identity,
    /// `e = A·x + a`.
    Linear,
    /// tanh hidden layers followed by a linear map to the embedding.
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub concepts: usize,
    pub backbone: Backbone,
    pub variant: Variant,
    pub dku: DkuConfig,
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("classes", self.classes),
            ("concepts", self.concepts),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        match &self.backbone {
            Backbone::Identity if self.embed_dim != self.input_dim => errs.push(format!(
                "identity backbone needs embed_dim == input_dim, got {} and {}",
                self.embed_dim, self.input_dim
            )),
            Backbone::Mlp { hidden } if hidden.is_empty() || hidden.contains(&0) => {
                errs.push("mlp hidden sizes must be non-empty and positive".into())
            }
            _ => {}
        }
        if !self.dku.alpha_temp.is_finite() {
            errs.push("alpha_temp must be finite".into());
        }
        if let Err(e) = self.dku.semantics.check() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(errs.join("; ")))
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match &self.backbone {
            Backbone::Identity => vec![],
            Backbone::Linear => vec![(self.embed_dim, self.input_dim)],
            Backbone::Mlp { hidden } => {
                let mut dims = Vec::new();
                let mut fan_in = self.input_dim;
                for &h in hidden {
                    dims.push((h, fan_in));
                    fan_in = h;
                }
                dims.push((self.embed_dim, fan_in));
                dims
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

const CONNECTOR_NAMES: [&str; 4] = ["dku.alpha", "dku.beta", "dku.gamma", "dku.delta"];

/// Trainable parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlueModel {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl KlueModel {
    /// Zero-mean normal weights with std `1/√fan_in`, zero biases.
    /// `rules` sizes the connector vectors when they are per rule.
    pub fn new<R: Rng>(config: ModelConfig, rules: usize, rng: &mut R) -> Result<Self> {
        config.check()?;
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor| params.push(NamedTensor { name, value });
        for (i, (out, fan_in)) in config.layer_dims().into_iter().enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            push(format!("backbone.{i}.weight"), normal_matrix(rng, out, fan_in, std));
            push(format!("backbone.{i}.bias"), Tensor::zeros(&[out]));
        }
        let std = 1.0 / (config.embed_dim as f64).sqrt();
        push("class.weight".into(), normal_matrix(rng, config.classes, config.embed_dim, std));
        push("class.bias".into(), Tensor::zeros(&[config.classes]));
        push("concept.weight".into(), normal_matrix(rng, config.concepts, config.embed_dim, std));
        push("concept.bias".into(), Tensor::zeros(&[config.concepts]));
        let init = config.dku.connector.to_array();
        for (name, v) in CONNECTOR_NAMES.iter().zip(init) {
            let value = if config.dku.per_rule_connector {
                Tensor::vector(vec![v; rules.max(1)])
            } else {
                Tensor::scalar(v)
            };
            push(name.to_string(), value);
        }
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `g`, as learnable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Wraps existing graph handles, one per entry of `params` in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one handle per parameter");
        let find = |name: &str| {
            let i = self
                .params
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("model has no parameter `{name}`"));
            vars[i]
        };
        let layers = (0..self.config.layer_dims().len())
            .map(|i| (find(&format!("backbone.{i}.weight")), find(&format!("backbone.{i}.bias"))))
            .collect();
        let connector = ConnectorNodes {
            vars: ConnectorVars {
                alpha: find(CONNECTOR_NAMES[0]),
                beta: find(CONNECTOR_NAMES[1]),
                gamma: find(CONNECTOR_NAMES[2]),
                delta: find(CONNECTOR_NAMES[3]),
            },
            per_rule: self.config.dku.per_rule_connector,
        };
        Bound {
            layers,
            class_w: find("class.weight"),
            class_b: find("class.bias"),
            concept_w: find("concept.weight"),
            concept_b: find("concept.bias"),
            connector,
            vars,
        }
    }

    /// Forward pass without gradients over a `[batch × F]` input.
    pub fn predict(&self, x: &Tensor, index: Option<&RuleIndex>) -> Result<Predictions> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, self, &bound, xv, index)?;
        Ok(Predictions {
            p_class: g.value(out.p_class).clone(),
            p_concept: g.value(out.p_concept).clone(),
            p_refined: g.value(out.p_refined).clone(),
            concept_logits: g.value(out.concept_logits).clone(),
        })
    }
}

/// Graph handles of a bound model.
#[derive(Clone, Debug)]
pub struct Bound {
    /// One handle per entry of [`KlueModel::params`], in order.
    pub vars: Vec<Var>,
    layers: Vec<(Var, Var)>,
    pub class_w: Var,
    pub class_b: Var,
    pub concept_w: Var,
    pub concept_b: Var,
    pub connector: ConnectorNodes,
}

/// `x·Wᵀ + b` with `b` repeated over rows.
fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    let bias = g.tile_rows(b, rows)?;
    Ok(g.add(y, bias)?)
}

/// Graph nodes of one forward pass, all `[batch × ·]`.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub embedding: Var,
    pub z: Var,
    pub p_class: Var,
    pub concept_logits: Var,
    pub p_concept: Var,
    /// `ẑ`; equals `z` for the baseline.
    pub z_hat: Var,
    /// `p_Δ`; equals `p_class` for the baseline.
    pub p_refined: Var,
    pub delta: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub p_class: Tensor,
    pub p_concept: Tensor,
    pub p_refined: Tensor,
    pub concept_logits: Tensor,
}

pub fn forward(
    g: &mut Graph,
    model: &KlueModel,
    bound: &Bound,
    x: Var,
    index: Option<&RuleIndex>,
) -> Result<Outputs> {
    let cfg = &model.config;
    let xs = g.value(x);
    if xs.rank() != 2 || xs.cols() != cfg.input_dim {
        return Err(ModelError::InputShape {
            shape: xs.shape().to_vec(),
            expected: cfg.input_dim,
        });
    }
    let mut e = x;
    let last = bound.layers.len().saturating_sub(1);
    for (i, &(w, b)) in bound.layers.iter().enumerate() {
        e = affine(g, e, w, b)?;
        if i < last {
            e = g.tanh(e)?;
        }
    }
    let z = affine(g, e, bound.class_w, bound.class_b)?;
    let p_class = g.sigmoid(z)?;
    let concept_logits = affine(g, e, bound.concept_w, bound.concept_b)?;
    let p_concept = g.sigmoid(concept_logits)?;

    let (z_hat, p_refined, delta) = if cfg.variant.uses_dku() {
        let index = index.ok_or(ModelError::MissingRules(cfg.variant))?;
        let out = dku::forward(g, z, p_class, p_concept, index, &cfg.dku, &bound.connector)?;
        (out.z_hat, out.p_delta, Some(out.delta))
    } else {
        (z, p_class, None)
    };
    Ok(Outputs {
        embedding: e,
        z,
        p_class,
        concept_logits,
        p_concept,
        z_hat,
        p_refined,
        delta,
    })
}

/// `(‖W̃_S W̃_Sᵀ − I‖²_F, ‖W̃_S W̃_Kᵀ‖²_F)` on row-normalized weights.
pub fn uniqueness_losses(g: &mut Graph, concept_w: Var, class_w: Var) -> Result<(Var, Var)> {
    let s = g.normalize_rows(concept_w, NORM_EPS)?;
    let k = g.normalize_rows(class_w, NORM_EPS)?;
    let st = g.transpose(s)?;
    let gram = g.matmul(s, st)?;
    let n = g.value(s).rows();
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let eye = g.constant(eye);
    let off = g.sub(gram, eye)?;
    let l_concept = g.sq_frobenius(off)?;
    let kt = g.transpose(k)?;
    let cross = g.matmul(s, kt)?;
    let l_class = g.sq_frobenius(cross)?;
    Ok((l_concept, l_class))
}

/// Mean binary cross-entropy over all entries, probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn classification_loss(g: &mut Graph, p: Var, labels: &Tensor) -> Result<Var> {
    let ps = g.value(p);
    if ps.shape() != labels.shape() {
        return Err(ModelError::LabelShape {
            shape: labels.shape().to_vec(),
            rows: ps.rows(),
            cols: ps.cols(),
        });
    }
    let y = g.constant(labels.clone());
    let ny = g.constant(labels.map(|v| 1.0 - v));
    let log_p = g.ln_clamped(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = g.one_minus(p)?;
    let log_q = g.ln_clamped(q, PROB_EPS, 1.0 - PROB_EPS)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(ny, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    Ok(g.neg(m)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `λ_class` on the concept/class uniqueness loss.
    pub uniq_class: f64,
    /// `λ_concept` on the concept/concept uniqueness loss.
    pub uniq_concept: f64,
    pub sat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            uniq_class: 0.01,
            uniq_concept: 0.1,
            sat: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            uniq_class: 0.0,
            uniq_concept: 0.0,
            sat: 0.0,
        }
    }
}

/// Loss term values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub classification: f64,
    pub uniq_class: f64,
    pub uniq_concept: f64,
    pub sat: f64,
    pub total: f64,
}

impl LossTerms {
    /// Weighted sum of the individual terms.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.classification
            + w.uniq_class * self.uniq_class
            + w.uniq_concept * self.uniq_concept
            + w.sat * self.sat
    }

    pub fn is_finite(&self) -> bool {
        [
            self.classification,
            self.uniq_class,
            self.uniq_concept,
            self.sat,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossTerms, s: f64) {
        self.classification += s * other.classification;
        self.uniq_class += s * other.uniq_class;
        self.uniq_concept += s * other.uniq_concept;
        self.sat += s * other.sat;
        self.total += s * other.total;
    }
}

#[derive(Clone, Debug)]
pub struct LossNodes {
    pub classification: Var,
    pub uniq_class: Option<Var>,
    pub uniq_concept: Option<Var>,
    pub sat: Option<Var>,
    pub total: Var,
}

impl LossNodes {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        let v = |x: Option<Var>| x.map(|x| g.value(x).data()[0]).unwrap_or(0.0);
        LossTerms {
            classification: g.value(self.classification).data()[0],
            uniq_class: v(self.uniq_class),
            uniq_concept: v(self.uniq_concept),
            sat: v(self.sat),
            total: g.value(self.total).data()[0],
        }
    }
}

/// Total loss `L_class + λ_class·L_uniq_class + λ_concept·L_uniq_concept +
/// λ_SAT·L_SAT` for a KLUE variant, or the classification loss alone for the
/// baseline.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    model: &KlueModel,
    bound: &Bound,
    out: &Outputs,
    labels: &Tensor,
    index: Option<&RuleIndex>,
    weights: &LossWeights,
    enable_sat: bool,
) -> Result<LossNodes> {
    let classification = classification_loss(g, out.p_refined, labels)?;
    if !model.config.variant.uses_dku() {
        return Ok(LossNodes {
            classification,
            uniq_class: None,
            uniq_concept: None,
            sat: None,
            total: classification,
        });
    }
    let (uc, ucl) = uniqueness_losses(g, bound.concept_w, bound.class_w)?;
    let mut total = classification;
    let wc = g.scale(ucl, weights.uniq_class)?;
    total = g.add(total, wc)?;
    let wk = g.scale(uc, weights.uniq_concept)?;
    total = g.add(total, wk)?;
    let sat = if enable_sat {
        let index = index.ok_or(ModelError::MissingRules(model.config.variant))?;
        let cfg = &model.config.dku;
        let l = dku::sat_loss(
            g,
            out.p_class,
            out.p_concept,
            index,
            &cfg.semantics,
            &bound.connector,
            labels,
            cfg.sat_per_sample,
        )?;
        let ws = g.scale(l, weights.sat)?;
        total = g.add(total, ws)?;
        Some(l)
    } else {
        None
    };
    Ok(LossNodes {
        classification,
        uniq_class: Some(ucl),
        uniq_concept: Some(uc),
        sat,
        total,
    })
}

/// Mean pairwise `|cos|` between distinct rows of `a`.
pub fn mean_abs_cosine(a: &Tensor) -> f64 {
    let n = a.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(a.row(i), a.row(j)).abs();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Largest `|cos|` between any row of `a` and any row of `b`.
pub fn max_abs_cross_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            m = m.max(cosine(a.row(i), b.row(j)).abs());
        }
    }
    m
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    dot / (nx * ny)
}

#[cfg(test)]
mod tests;
