use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck;
use crate::rulebase::{generate, RuleBaseParams};

fn config(variant: Variant, backbone: Backbone) -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        embed_dim: 4,
        classes: 3,
        concepts: 6,
        backbone,
        variant,
        dku: DkuConfig {
            semantics: variant.default_semantics(),
            ..DkuConfig::default()
        },
    }
}

fn micro_index() -> (crate::rulebase::RuleBase, RuleIndex) {
    let rb = generate(&RuleBaseParams {
        concepts: 6,
        classes: 3,
        rules_per_class: 1,
        q_min: 2,
        q_max: 3,
        p_neg: 0.5,
        seed: 2,
        phase2_negatives: false,
    })
    .unwrap();
    let index = RuleIndex::new(&rb, 3, 6).unwrap();
    (rb, index)
}

fn batch() -> (Tensor, Tensor) {
    let x = Tensor::from_rows(&[
        vec![0.5, -1.0, 0.3, 0.8],
        vec![-0.2, 0.4, 1.1, -0.6],
        vec![0.9, 0.1, -0.7, 0.2],
    ])
    .unwrap();
    let y = Tensor::from_rows(&[
        vec![1.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 1.0, 0.0],
    ])
    .unwrap();
    (x, y)
}

#[test]
fn zero_parameters_give_half() {
    let mut m = KlueModel::new(
        config(Variant::Baseline, Backbone::Linear),
        0,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for p in &mut m.params {
        p.value = Tensor::zeros_like(&p.value);
    }
    let (x, _) = batch();
    let pred = m.predict(&x, None).unwrap();
    assert!(pred.p_class.data().iter().all(|&p| p == 0.5));
    assert!(pred.p_concept.data().iter().all(|&p| p == 0.5));
}

#[test]
fn identity_backbone_saturates() {
    let mut m = KlueModel::new(
        config(Variant::Baseline, Backbone::Identity),
        0,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let w = m.param_mut("class.weight").unwrap();
    *w = Tensor::zeros(&[3, 4]);
    w.data_mut()[0] = 50.0;
    let x = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let p = m.predict(&x, None).unwrap().p_class;
    assert!(p.at(0, 0) > 1.0 - 1e-12);
    assert_eq!(p.at(0, 1), 0.5);
}

#[test]
fn seeded_init_is_reproducible() {
    let cfg = config(Variant::V1, Backbone::Mlp { hidden: vec![5] });
    let a = KlueModel::new(cfg.clone(), 0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b = KlueModel::new(cfg.clone(), 0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let c = KlueModel::new(cfg, 0, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let (_, index) = micro_index();
    let (x, _) = batch();
    let pa = a.predict(&x, Some(&index)).unwrap();
    assert_eq!(pa, b.predict(&x, Some(&index)).unwrap());
    // Golden values captured from this configuration.
    let golden = [pa.p_class.at(0, 0), pa.p_refined.at(2, 1)];
    assert_eq!(golden, GOLDEN_FORWARD, "{golden:?}");
}

const GOLDEN_FORWARD: [f64; 2] = [0.7031281925398809, 0.542269514283244];

#[test]
fn config_errors() {
    let mut cfg = config(Variant::V1, Backbone::Identity);
    cfg.embed_dim = 3;
    cfg.classes = 0;
    let err = cfg.check().unwrap_err().to_string();
    assert!(err.contains("identity backbone"), "{err}");
    assert!(err.contains("classes must be positive"), "{err}");
    let m = KlueModel::new(
        config(Variant::V1, Backbone::Linear),
        0,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let (x, _) = batch();
    assert!(matches!(m.predict(&x, None), Err(ModelError::MissingRules(Variant::V1))));
    let bad = Tensor::zeros(&[2, 5]);
    assert!(matches!(
        m.predict(&bad, None),
        Err(ModelError::InputShape { expected: 4, .. })
    ));
}

fn uniq(concept: Tensor, class: Tensor) -> (f64, f64) {
    let mut g = Graph::new();
    let s = g.constant(concept);
    let k = g.constant(class);
    let (a, b) = uniqueness_losses(&mut g, s, k).unwrap();
    (g.value(a).item().unwrap(), g.value(b).item().unwrap())
}

#[test]
fn uniqueness_values() {
    let eye = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, -0.5, 0.0]]).unwrap();
    let (lc, _) = uniq(eye.clone(), eye.clone());
    assert_eq!(lc, 0.0);

    let w = Tensor::from_rows(&[vec![0.3, 1.0, -2.0], vec![1.5, 0.2, 0.7], vec![-0.4, 0.9, 0.1]]).unwrap();
    let (_, lk) = uniq(w.clone(), w.clone());
    // Gram of normalized rows with itself; diagonal contributes S.
    let mut expected = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            expected += cosine(w.row(i), w.row(j)).powi(2);
        }
    }
    assert!((lk - expected).abs() < 1e-12);
    let (_, lk_orth) = uniq(eye.clone(), eye);
    assert!((lk_orth - 2.0).abs() < 1e-12);

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let rows = Tensor::from_rows(&[vec![1.0, 0.0], vec![h, h]]).unwrap();
    let (lc, _) = uniq(rows, Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    assert!((lc - 1.0).abs() < 1e-12);
}

#[test]
fn normalized_rows_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = normal_matrix(&mut rng, 7, 9, 3.0);
    let mut g = Graph::new();
    let v = g.constant(w);
    let n = g.normalize_rows(v, NORM_EPS).unwrap();
    let t = g.value(n);
    for r in 0..t.rows() {
        let norm: f64 = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bce_values_and_gradient() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[2, 3], 0.5));
    let l = classification_loss(&mut g, p, &Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap()).unwrap();
    assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

    let mut g = Graph::new();
    let labels = Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
    let p = g.constant(Tensor::matrix(1, 3, vec![1.0 - 1e-7, 1e-7, 1.0]).unwrap());
    let l = classification_loss(&mut g, p, &labels).unwrap();
    let v = g.value(l).item().unwrap();
    assert!((v - 1e-7).abs() < 1e-12, "{v}");

    let mut g = Graph::new();
    let z = g.param(Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap());
    let p = g.sigmoid(z).unwrap();
    let l = classification_loss(&mut g, p, &labels).unwrap();
    g.backward(l).unwrap();
    let pz = g.value(p).clone();
    let grad = g.grad(z).unwrap();
    for k in 0..3 {
        let expected = (pz.data()[k] - labels.data()[k]) / 3.0;
        assert!((grad.data()[k] - expected).abs() < 1e-12);
    }
}

#[test]
fn total_loss_decomposes() {
    let (_, index) = micro_index();
    let (x, y) = batch();
    let model = KlueModel::new(
        config(Variant::V1, Backbone::Linear),
        0,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    for weights in [LossWeights::default(), LossWeights::zero()] {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &model, &bound, xv, Some(&index)).unwrap();
        let nodes = total_loss(&mut g, &model, &bound, &out, &y, Some(&index), &weights, true).unwrap();
        let t = nodes.terms(&g);
        assert!((t.total - t.recombine(&weights)).abs() < 1e-12);
        if weights == LossWeights::zero() {
            assert_eq!(t.total, t.classification);
        }
        assert!(t.uniq_class >= 0.0 && t.uniq_concept >= 0.0 && t.sat >= 0.0);
    }
}

#[test]
fn uniqueness_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = normal_matrix(&mut rng, 5, 4, 1.0);
    let k = normal_matrix(&mut rng, 3, 4, 1.0);
    for which in 0..2 {
        let report = gradcheck(
            |g, p| {
                let (a, b) = uniqueness_losses(g, p[0], p[1]).map_err(|e| match e {
                    ModelError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                Ok(if which == 0 { a } else { b })
            },
            &[s.clone(), k.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn concept_head_receives_gradient() {
    let (_, index) = micro_index();
    let (x, y) = batch();
    let mut cfg = config(Variant::V1, Backbone::Linear);
    let model = KlueModel::new(cfg.clone(), 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &model, &bound, xv, Some(&index)).unwrap();
    let l = classification_loss(&mut g, out.p_refined, &y).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(bound.concept_w).unwrap().max_abs() > 1e-8);

    // The baseline never touches the concept head.
    cfg.variant = Variant::Baseline;
    let model = KlueModel::new(cfg, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x);
    let out = forward(&mut g, &model, &bound, xv, None).unwrap();
    let l = classification_loss(&mut g, out.p_refined, &y).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(bound.concept_w).is_none());
}

#[test]
fn checkpoint_round_trip() {
    use rand::Rng;
    let model = KlueModel::new(
        config(Variant::V2, Backbone::Mlp { hidden: vec![3] }),
        0,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let adam = Adam::new(AdamConfig::default(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let _: u64 = rng.random();
    let ck = Checkpoint::new(crate::provenance::FileHeader::new("abc".into()), 3, &model, &adam, &rng);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let mut restored = back.rng.restore().unwrap();
    assert_eq!(restored.random::<u64>(), rng.random::<u64>());

    let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    v["version"] = 9.into();
    let err = Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap()).unwrap_err();
    assert!(matches!(err, CheckpointError::Version { found: 9 }));
}

#[test]
fn cosine_helpers() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((mean_abs_cosine(&a) - (0.0 + h + h) / 3.0).abs() < 1e-12);
    let b = Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap();
    assert!((max_abs_cross_cosine(&a, &b) - 1.0).abs() < 1e-12);
}
