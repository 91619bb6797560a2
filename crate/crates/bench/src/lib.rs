//! Fixtures shared by the benchmarks.

use klue::dku::RuleIndex;
use klue::model::{KlueModel, Variant};
use klue::rulebase::{generate, RuleBase};
use klue::train::{rule_base_for, ExperimentConfig};
use klue::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Reference-sized model, its rule base and compiled index.
pub fn reference_model(variant: Variant) -> (ExperimentConfig, KlueModel, RuleBase, RuleIndex) {
    let cfg = ExperimentConfig::reference(variant);
    let rb = rule_base_for(&cfg).expect("reference rules");
    let index = RuleIndex::new(&rb, cfg.task.classes, cfg.model.concepts).expect("index");
    let model = KlueModel::new(cfg.model_config(), index.total_rules(), &mut ChaCha8Rng::seed_from_u64(0))
        .expect("model");
    (cfg, model, rb, index)
}

/// Paper-scale rule base: 100 concepts, 20 classes.
pub fn paper_rules(seed: u64) -> RuleBase {
    generate(&klue::rulebase::RuleBaseParams {
        seed,
        ..Default::default()
    })
    .expect("default params are valid")
}
