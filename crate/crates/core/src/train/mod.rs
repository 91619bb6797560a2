//! Synthetic tasks, the training loop, evaluation and analyses.

mod analysis;
mod metrics;
mod task;

pub use analysis::{auc_matrix, concept_recovery_score, match_concepts, ConceptMatch, ConceptRecovery};
pub use metrics::{
    average_precision, hard_sample_split, hungarian_max, mean_entropy, roc_auc, score_metrics,
    MetricsReport, PercentileError, ScoreMetrics,
};
pub use task::{
    generate_task, Dataset, Formula, Literal, SyntheticTask, TaskError, TaskSpec, DATASET_VERSION,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::dku::{DkuConfig, DkuError, RuleIndex};
use crate::fuzzy::{Conjunction, Implication};
use crate::model::{
    self, Adam, AdamConfig, Backbone, CheckpointError, KlueModel, LossTerms, LossWeights, ModelConfig, ModelError,
    Predictions, Variant,
};
use crate::provenance::{config_hash, FileHeader};
use crate::rulebase::{self, RuleBase, RuleBaseParams};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("non-finite value at step {step} in {term} (largest gradient magnitude so far {max_grad:e})")]
    NonFinite {
        step: u64,
        term: String,
        max_grad: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    RuleBase(#[from] rulebase::RuleBaseError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<DkuError> for TrainError {
    fn from(e: DkuError) -> Self {
        TrainError::Model(ModelError::Dku(e))
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

/// Network shape; input and class counts come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub embed_dim: usize,
    /// Concept heads (`S`).
    pub concepts: usize,
    pub backbone: Backbone,
}

/// A complete, self-describing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub enable_sat: bool,
    /// Seeds model init and batch order.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub task: TaskSpec,
    pub rules: RuleBaseParams,
    pub model: ModelSection,
    pub dku: DkuConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    /// Shuffles of the latent labels for the concept-recovery null.
    pub null_permutations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference(Variant::V1)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: K=6 classes over 12 latent concepts in 64
    /// features, a linear backbone to D=32, S=24 concept heads and a rule
    /// base with 5 positive rules per class.
    pub fn reference(variant: Variant) -> Self {
        let task = TaskSpec::default();
        let concepts = 24;
        Self {
            variant,
            enable_sat: true,
            seed: 0,
            epochs: 30,
            batch_size: 64,
            rules: RuleBaseParams {
                concepts,
                classes: task.classes,
                rules_per_class: 5,
                q_min: 2,
                q_max: 4,
                p_neg: 1.0,
                seed: 0,
                phase2_negatives: false,
            },
            task,
            model: ModelSection {
                embed_dim: 32,
                concepts,
                backbone: Backbone::Linear,
            },
            dku: DkuConfig {
                semantics: variant.default_semantics(),
                ..DkuConfig::default()
            },
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            null_permutations: 20,
        }
    }

    /// The reference setup with 15% of labels flipped and a one-hidden-layer
    /// MLP backbone (128 units) with enough capacity to fit the noise.
    pub fn noisy(variant: Variant) -> Self {
        let mut cfg = Self::reference(variant);
        cfg.task.label_flip_prob = 0.15;
        cfg.model.backbone = Backbone::Mlp { hidden: vec![128] };
        cfg
    }

    /// Switches the variant and the matching fuzzy semantics.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        let tau = self.dku.semantics.tau;
        self.dku.semantics = variant.default_semantics();
        self.dku.semantics.tau = tau;
        self
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn header(&self) -> FileHeader {
        FileHeader::new(self.hash())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.task.input_dim,
            embed_dim: self.model.embed_dim,
            classes: self.task.classes,
            concepts: self.model.concepts,
            backbone: self.model.backbone.clone(),
            variant: self.variant,
            dku: self.dku.clone(),
        }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        for (name, w) in [
            ("uniq_class", self.loss.uniq_class),
            ("uniq_concept", self.loss.uniq_concept),
            ("sat", self.loss.sat),
        ] {
            if !(w >= 0.0) {
                errs.push(format!("loss weight {name} must be ≥ 0, got {w}"));
            }
        }
        let sem = &self.dku.semantics;
        let expected = match self.variant {
            Variant::Baseline => None,
            Variant::V1 => Some((Conjunction::Parametric, Implication::Reichenbach)),
            Variant::V2 => Some((Conjunction::Yager, Implication::SigmoidalReichenbach)),
        };
        if let Some((c, i)) = expected {
            if sem.conjunction != c || sem.implication != i {
                errs.push(format!(
                    "variant {} needs {c:?} conjunction and {i:?} implication",
                    self.variant
                ));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            errs.push("optimizer lr must be positive".into());
        }
        if !errs.is_empty() {
            return Err(TrainError::Config(errs.join("; ")));
        }
        self.task.check()?;
        self.model_config().check()?;
        self.check_dims(self.rules.concepts, self.rules.classes)
    }

    /// Rule base, model and task must agree on `T == S` and `K`.
    pub fn check_dims(&self, rule_concepts: usize, rule_classes: usize) -> Result<(), TrainError> {
        let mut errs = Vec::new();
        if rule_concepts != self.model.concepts {
            errs.push(format!(
                "rule base has T={rule_concepts} concepts but the model has S={} concept heads",
                self.model.concepts
            ));
        }
        if rule_classes != self.task.classes {
            errs.push(format!(
                "rule base has K={rule_classes} classes but the task has K={}",
                self.task.classes
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Dimensions(errs.join("; ")))
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(rename = "mAP_initial")]
    pub map_initial: f64,
    #[serde(rename = "mAP_refined")]
    pub map_refined: f64,
    #[serde(rename = "AUC_initial")]
    pub auc_initial: f64,
    #[serde(rename = "AUC_refined")]
    pub auc_refined: f64,
    pub loss: LossTerms,
}

/// Rows evaluated per graph when predicting whole datasets.
pub const EVAL_CHUNK: usize = 500;

/// Predictions for every row of `x`, computed in chunks.
pub fn predict_dataset(model: &KlueModel, x: &Tensor, index: Option<&RuleIndex>) -> Result<Predictions, ModelError> {
    let n = x.rows();
    let mut parts: Vec<Predictions> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::matrix(end - start, x.cols(), x.data()[start * x.cols()..end * x.cols()].to_vec())
            .expect("sized");
        parts.push(model.predict(&chunk, index)?);
        start = end;
    }
    let cat = |f: fn(&Predictions) -> &Tensor, cols: usize| {
        let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Tensor::matrix(n, cols, data).expect("sized")
    };
    let (k, s) = (model.config.classes, model.config.concepts);
    Ok(Predictions {
        p_class: cat(|p| &p.p_class, k),
        p_concept: cat(|p| &p.p_concept, s),
        p_refined: cat(|p| &p.p_refined, k),
        concept_logits: cat(|p| &p.concept_logits, s),
    })
}

/// mAP and AUC for the class head and the refined output.
pub fn evaluate(model: &KlueModel, data: &Dataset, index: Option<&RuleIndex>) -> Result<(MetricsReport, Predictions), ModelError> {
    let pred = predict_dataset(model, &data.x, index)?;
    let report = MetricsReport {
        initial: score_metrics(&pred.p_class, &data.labels),
        refined: score_metrics(&pred.p_refined, &data.labels),
    };
    Ok((report, pred))
}

/// Loss terms over a dataset, averaged over evaluation chunks by size.
pub fn dataset_loss(
    model: &KlueModel,
    data: &Dataset,
    index: Option<&RuleIndex>,
    cfg: &ExperimentConfig,
) -> Result<LossTerms, ModelError> {
    let n = data.len();
    let mut acc = LossTerms::default();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let chunk = data.select(&rows);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(chunk.x.clone());
        let out = model::forward(&mut g, model, &bound, x, index)?;
        let nodes = model::total_loss(&mut g, model, &bound, &out, &chunk.labels, index, &cfg.loss, cfg.enable_sat)?;
        acc.add_scaled(&nodes.terms(&g), (end - start) as f64 / n as f64);
        start = end;
    }
    Ok(acc)
}

fn record(epoch: usize, split: &str, report: &MetricsReport, loss: LossTerms) -> EpochRecord {
    EpochRecord {
        epoch,
        split: split.to_string(),
        map_initial: report.initial.map,
        map_refined: report.refined.map,
        auc_initial: report.initial.mean_auc,
        auc_refined: report.refined.mean_auc,
        loss,
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: KlueModel,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub rng: ChaCha8Rng,
}

/// Seeded generator for stream `stream` of the experiment seed.
pub fn experiment_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the rule base described by the config.
pub fn rule_base_for(cfg: &ExperimentConfig) -> Result<RuleBase, TrainError> {
    Ok(rulebase::generate(&cfg.rules)?)
}

/// Training state at the end of an epoch.
pub struct EpochState<'a> {
    pub epoch: usize,
    pub model: &'a KlueModel,
    pub optimizer: &'a Adam,
    pub rng: &'a ChaCha8Rng,
}

/// Minibatch training of `total_loss`. After every epoch `on_epoch`
/// receives one record for `train` and one per evaluation split.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &Dataset,
    eval_splits: &[&Dataset],
    rb: &RuleBase,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    train_model_with(cfg, train, eval_splits, rb, on_epoch, |_| Ok(()))
}

/// [`train_model`] with a hook that sees the model, optimizer and shuffle
/// generator after each epoch's records.
pub fn train_model_with(
    cfg: &ExperimentConfig,
    train: &Dataset,
    eval_splits: &[&Dataset],
    rb: &RuleBase,
    mut on_epoch: impl FnMut(&EpochRecord),
    mut on_epoch_end: impl FnMut(&EpochState) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.check()?;
    cfg.check_dims(rb.concepts(), rb.classes())?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    for d in std::iter::once(train).chain(eval_splits.iter().copied()) {
        if d.features() != cfg.task.input_dim || d.classes() != cfg.task.classes {
            return Err(TrainError::Dimensions(format!(
                "split `{}` has F={} K={}, config expects F={} K={}",
                d.name,
                d.features(),
                d.classes(),
                cfg.task.input_dim,
                cfg.task.classes
            )));
        }
    }
    let index = RuleIndex::new(rb, cfg.task.classes, cfg.model.concepts)?;
    let index_ref = cfg.variant.uses_dku().then_some(&index);

    let mut init_rng = experiment_rng(cfg.seed, 1);
    let mut model = KlueModel::new(cfg.model_config(), index.total_rules(), &mut init_rng)?;
    let mut optimizer = Adam::new(cfg.optimizer, &model.params);
    let mut rng = experiment_rng(cfg.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut max_grad: f64 = 0.0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = LossTerms::default();
        for batch_rows in order.chunks(cfg.batch_size) {
            let step = optimizer.step + 1;
            let batch = train.select(batch_rows);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(batch.x.clone());
            let non_finite = |e: ModelError, max_grad: f64| match e {
                ModelError::Autodiff(AutodiffError::NonFinite { op })
                | ModelError::Dku(DkuError::Autodiff(AutodiffError::NonFinite { op })) => TrainError::NonFinite {
                    step,
                    term: op.to_string(),
                    max_grad,
                },
                other => TrainError::Model(other),
            };
            let out = model::forward(&mut g, &model, &bound, x, index_ref).map_err(|e| non_finite(e, max_grad))?;
            let nodes = model::total_loss(&mut g, &model, &bound, &out, &batch.labels, index_ref, &cfg.loss, cfg.enable_sat)
                .map_err(|e| non_finite(e, max_grad))?;
            let terms = nodes.terms(&g);
            if !terms.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    term: format!("{terms:?}"),
                    max_grad,
                });
            }
            g.backward(nodes.total)
                .map_err(|e| non_finite(ModelError::Autodiff(e), max_grad))?;
            let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| g.grad(v).cloned()).collect();
            for gr in grads.iter().flatten() {
                max_grad = max_grad.max(gr.max_abs());
            }
            optimizer.update(&mut model.params, &grads, lr)?;
            epoch_loss.add_scaled(&terms, batch_rows.len() as f64 / train.len() as f64);
            log::debug!("epoch {epoch} step {step} loss {:.6}", terms.total);
        }
        let (train_report, _) = evaluate(&model, train, index_ref)?;
        let rec = record(epoch, "train", &train_report, epoch_loss);
        log::info!(
            "epoch {epoch}: train loss {:.5} mAP {:.4}/{:.4}",
            rec.loss.total,
            rec.map_initial,
            rec.map_refined
        );
        on_epoch(&rec);
        history.push(rec);
        for split in eval_splits {
            let (report, _) = evaluate(&model, split, index_ref)?;
            let loss = dataset_loss(&model, split, index_ref, cfg)?;
            let rec = record(epoch, &split.name, &report, loss);
            log::info!(
                "epoch {epoch}: {} mAP {:.4}/{:.4} AUC {:.4}/{:.4}",
                split.name,
                rec.map_initial,
                rec.map_refined,
                rec.auc_initial,
                rec.auc_refined
            );
            on_epoch(&rec);
            history.push(rec);
        }
        on_epoch_end(&EpochState {
            epoch,
            model: &model,
            optimizer: &optimizer,
            rng: &rng,
        })?;
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        rng,
    })
}

/// Compiles the rule index a model needs for prediction (`None` for the
/// baseline).
pub fn index_for(model: &KlueModel, rb: &RuleBase) -> Result<Option<RuleIndex>, DkuError> {
    if model.config.variant.uses_dku() {
        Ok(Some(RuleIndex::new(rb, model.config.classes, model.config.concepts)?))
    } else {
        Ok(None)
    }
}

/// Refined mAP on the full split and on its hard subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardSampleReport {
    pub hard_indices: Vec<usize>,
    pub map_full: f64,
    pub map_hard: f64,
    pub drop: f64,
}

/// Scores `preds` on `data` and on the rows in `hard`.
pub fn hard_sample_report(preds: &Tensor, data: &Dataset, hard: &[usize]) -> HardSampleReport {
    let full = score_metrics(preds, &data.labels).map;
    let sub_labels = data.select(hard).labels;
    let k = preds.cols();
    let mut sub = Vec::with_capacity(hard.len() * k);
    for &i in hard {
        sub.extend_from_slice(preds.row(i));
    }
    let sub = Tensor::matrix(hard.len(), k, sub).expect("sized");
    let map_hard = score_metrics(&sub, &sub_labels).map;
    HardSampleReport {
        hard_indices: hard.to_vec(),
        map_full: full,
        map_hard,
        drop: full - map_hard,
    }
}

/// Largest decline from the running peak to the final value.
pub fn peak_to_final_decline(series: &[f64]) -> f64 {
    let Some(&last) = series.last() else {
        return 0.0;
    };
    let peak = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    peak - last
}
