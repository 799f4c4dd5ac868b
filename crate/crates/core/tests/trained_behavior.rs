//! Behavioral checks on a small trained model: the integrity estimator
//! orders its scores by true completeness, the shared spaces contract
//! across modalities, and predictions stay inside the label range.

use ifusion_core::config::{DataConfig, RunConfig};
use ifusion_core::data::{
    assemble_batch, features_to_tensor, generate_synthetic_dataset, SeqDims, SyntheticSpec,
};
use ifusion_core::evaluation::predict_dataset;
use ifusion_core::graph::Graph;
use ifusion_core::missingness::{apply_missingness, sample_missing_plan, IntraMode};
use ifusion_core::model::completion::similarity_loss;
use ifusion_core::model::{ModelConfig, ModelState, SimilarityConstraint};
use ifusion_core::training::{read_checkpoint, train};
use ifusion_core::{CounterRng, Modality, PerModality, Tensor};

fn toy_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_train: 64,
        n_valid: 16,
        n_test: 16,
        dims: PerModality::new(
            SeqDims { steps: 6, width: 5 },
            SeqDims { steps: 5, width: 4 },
            SeqDims { steps: 7, width: 6 },
        ),
        noise_scale: 0.0,
        ..SyntheticSpec::default()
    }
}

fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataConfig::Synthetic(toy_spec());
    cfg.model = ModelConfig {
        t: 6,
        d: 16,
        heads: 2,
        encoder_depth: 1,
        fusion_layers: 2,
        ff_multiplier: 2,
        dropout: 0.0,
    };
    cfg.missingness.drop_rate = 0.3;
    cfg.training.batch_size = 16;
    cfg.training.epochs = 60;
    cfg.training.stage1_epochs = 12;
    cfg.training.warmup_epochs = 3;
    cfg.training.lr = 2e-3;
    cfg.training.early_stop_patience = 60;
    cfg
}

fn clean_tensors(dataset: &ifusion_core::data::Dataset) -> PerModality<Tensor> {
    let n = dataset.len();
    let batch = assemble_batch(dataset, &(0..n).collect::<Vec<_>>());
    PerModality::from_fn(|m| features_to_tensor(batch.features.get(m), n, *batch.dims.get(m)))
}

fn shared_distance(model: &ModelState, features: &PerModality<Tensor>) -> f64 {
    let mut g = Graph::eval();
    let embedded = model.embed_batch(&mut g, features);
    let (shared, _) = model.disentangle_all(&mut g, &embedded);
    let v = similarity_loss(&mut g, &shared);
    g.value(v).item()
}

#[test]
fn trained_toy_model_behaves() {
    let cfg = toy_config();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, dir.path(), false).unwrap();
    let trained = read_checkpoint(&dir.path().join("checkpoint.bin"))
        .unwrap()
        .restore()
        .unwrap()
        .model;

    // Shared semantics: after training on noiseless data the cross-modal
    // shared distance collapses severalfold relative to a freshly
    // initialized model.
    let train_set = generate_synthetic_dataset(&toy_spec(), "train").unwrap();
    let clean = clean_tensors(&train_set);
    let fresh = ModelState::new(
        cfg.model,
        train_set.dims,
        SimilarityConstraint::PairwiseMse,
        cfg.seed,
    )
    .unwrap();
    let before = shared_distance(&fresh, &clean);
    let after = shared_distance(&trained, &clean);
    assert!(
        after <= before / 4.0,
        "shared distance only moved {before:.5} -> {after:.5}"
    );

    // Integrity ordering: corrupt one sample at three known completeness
    // levels and check the estimator ranks them correctly per modality.
    let steps = train_set.dims.map(|d| d.steps);
    let batch = assemble_batch(&train_set, &[0]);
    let mut scores: Vec<PerModality<f64>> = Vec::new();
    for (i, ratio) in [1.0, 0.5, 0.0].into_iter().enumerate() {
        let plan =
            sample_missing_plan(1, steps, 0.0, IntraMode::Fixed(ratio), 7 + i as u64).unwrap();
        let corrupted = apply_missingness(&batch, &plan, None).unwrap();
        let features = PerModality::from_fn(|m| {
            features_to_tensor(corrupted.features.get(m), 1, *batch.dims.get(m))
        });
        let out = trained.infer_batch(&features, false);
        for m in Modality::ALL {
            let expect = 1.0 - ratio;
            let got = plan.samples[0].integrity.get(m);
            assert!(
                (got - expect).abs() < 0.11,
                "fixture drift: wanted integrity near {expect}, plan has {got}"
            );
        }
        scores.push(PerModality::from_fn(|m| out.integrity_raw.get(m)[0]));
    }
    for m in Modality::ALL {
        let (empty, half, full) = (*scores[0].get(m), *scores[1].get(m), *scores[2].get(m));
        assert!(
            empty < half && half < full,
            "modality {m} scores not ordered: {empty:.3} < {half:.3} < {full:.3}"
        );
    }

    // Predictions stay inside the label range on held-out data.
    let test_set = generate_synthetic_dataset(&toy_spec(), "test").unwrap();
    let plan = sample_missing_plan(
        test_set.len(),
        test_set.dims.map(|d| d.steps),
        cfg.missingness.drop_rate,
        IntraMode::Uniform,
        CounterRng::new(cfg.seed)
            .derive_named("toy-eval")
            .next_u64(),
    )
    .unwrap();
    let eval = predict_dataset(&trained, &test_set, &plan, 16, None, false).unwrap();
    for (id, p) in eval.ids.iter().zip(&eval.predictions) {
        assert!(
            (-4.0..=4.0).contains(p),
            "prediction for {id} escaped the label range: {p}"
        );
    }
}
