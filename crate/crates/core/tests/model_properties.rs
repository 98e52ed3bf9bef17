use attrbench::data::{generate, LabStats, PatientRecord, TaskName, TaskSpec, Visit};
use attrbench::model::{
    evaluate, load_checkpoint, save_checkpoint, train, Architecture, EvalMetrics, Model, ModelConfig, TrainConfig,
};
use proptest::prelude::*;

fn config(arch: Architecture, task: &TaskSpec, dim: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: dim,
        hidden_dim: dim,
        n_heads: 2,
        n_layers: 2,
        ..ModelConfig::new(arch, task.schema.vocab_size, task.schema.n_labs(), task.n_classes)
    }
}

fn model(arch: Architecture, task: &TaskSpec, seed: u64) -> Model {
    let mut m = Model::build(config(arch, task, 16), seed).unwrap();
    m.lab_stats = LabStats { mean: task.schema.lab_means.clone(), std: task.schema.lab_stds.clone() };
    m
}

fn arch_strategy() -> impl Strategy<Value = Architecture> {
    prop::sample::select(Architecture::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_are_normalised(arch in arch_strategy(), seed in 0u64..1000) {
        let task = TaskSpec::new(TaskName::Los);
        let m = model(arch, &task, seed);
        for record in generate(&task, 4, seed).unwrap() {
            let p = m.predict_proba(&record).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, stage in any::<bool>()) {
        let task = TaskSpec::new(TaskName::Mortality);
        let arch = if stage { Architecture::StageAttn } else { Architecture::Transformer };
        let m = model(arch, &task, seed);
        for record in generate(&task, 3, seed).unwrap() {
            let trace = m.forward_traced(&record).unwrap();
            prop_assert_eq!(trace.attention.len(), m.config.n_attention_layers());
            for layer in 0..trace.attention.len() {
                for head in 0..trace.attention[layer].len() {
                    let a = trace.attention_map(layer, head);
                    for r in 0..a.rows() {
                        prop_assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn padding_visits_change_nothing(arch in arch_strategy(), seed in 0u64..1000, pads in 1usize..4) {
        let task = TaskSpec::new(TaskName::Dka);
        let m = model(arch, &task, seed);
        let record = generate(&task, 1, seed).unwrap().remove(0);
        let mut padded = record.clone();
        padded.visits.extend((0..pads).map(|_| Visit::padding()));
        let a = m.forward_traced(&record).unwrap();
        let b = m.forward_traced(&padded).unwrap();
        prop_assert_eq!(a.logits(), b.logits());
    }
}

#[test]
fn same_seed_same_parameters() {
    let task = TaskSpec::new(TaskName::Mortality);
    for arch in Architecture::ALL {
        let a = Model::build(config(arch, &task, 8), 42).unwrap();
        let b = Model::build(config(arch, &task, 8), 42).unwrap();
        let c = Model::build(config(arch, &task, 8), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }
}

#[test]
fn stage_attn_has_one_attention_layer() {
    let task = TaskSpec::new(TaskName::Mortality);
    let cfg = ModelConfig { n_heads: 4, ..ModelConfig::new(Architecture::StageAttn, task.schema.vocab_size, 4, 2) };
    assert_eq!(cfg.embed_dim, 64);
    let m = Model::build(cfg, 0).unwrap();
    let record = generate(&task, 1, 0).unwrap().remove(0);
    let trace = m.forward_traced(&record).unwrap();
    assert_eq!(trace.attention.len(), 1);
    assert_eq!(trace.attention[0].len(), 4);
}

#[test]
fn empty_record_gives_the_output_bias() {
    let task = TaskSpec::new(TaskName::Los);
    for arch in Architecture::ALL {
        let mut m = model(arch, &task, 1);
        let at = m.params.position("head.b").unwrap();
        let bias = m.params.tensors_mut()[at].data_mut();
        bias.copy_from_slice(&[0.3, -0.2, 0.1, 0.0, 0.5]);
        let empty = PatientRecord { visits: vec![Visit::padding(), Visit::padding()], label: 0, ground_truth_mask: vec![] };
        let trace = m.forward_traced(&empty).unwrap();
        assert_eq!(trace.logits(), &[0.3, -0.2, 0.1, 0.0, 0.5], "{arch}");
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::new(TaskName::Los);
    let records = generate(&task, 5, 1).unwrap();
    for arch in Architecture::ALL {
        let m = model(arch, &task, 9);
        let path = dir.path().join(format!("{arch}.ckpt"));
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(m, back);
        for r in &records {
            assert_eq!(m.predict_proba(r).unwrap(), back.predict_proba(r).unwrap());
        }
    }
}

#[test]
fn planted_signal_is_learned_by_every_architecture() {
    let task = TaskSpec::new(TaskName::Mortality);
    let train_set = generate(&task, 5000, 11).unwrap();
    let test_set = generate(&task, 1000, 12).unwrap();
    let cfg = TrainConfig { epochs: 5, seed: 3, ..TrainConfig::default() };
    for arch in Architecture::ALL {
        let out = train(Model::build(config(arch, &task, 32), 3).unwrap(), &train_set, &test_set, &cfg).unwrap();
        let auc = out.metrics.roc_auc().unwrap();
        assert!(auc >= 0.85, "{arch}: held-out ROC-AUC {auc}");
    }
}

#[test]
fn shuffled_labels_leave_nothing_to_learn() {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let task = TaskSpec::new(TaskName::Mortality);
    let mut train_set = generate(&task, 3000, 21).unwrap();
    let mut test_set = generate(&task, 4000, 22).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for set in [&mut train_set, &mut test_set] {
        let mut labels: Vec<usize> = set.iter().map(|r| r.label).collect();
        labels.shuffle(&mut rng);
        set.iter_mut().zip(labels).for_each(|(r, l)| r.label = l);
    }
    let cfg = TrainConfig { epochs: 2, seed: 1, ..TrainConfig::default() };
    let out = train(Model::build(config(Architecture::Transformer, &task, 16), 1).unwrap(), &train_set, &test_set, &cfg)
        .unwrap();
    let auc = out.metrics.roc_auc().unwrap();
    assert!((0.45..=0.55).contains(&auc), "ROC-AUC {auc}");
}

#[test]
fn training_is_reproducible() {
    let task = TaskSpec::new(TaskName::Los);
    let train_set = generate(&task, 300, 31).unwrap();
    let test_set = generate(&task, 100, 32).unwrap();
    let cfg = TrainConfig { epochs: 2, seed: 7, ..TrainConfig::default() };
    let run = || train(Model::build(config(Architecture::StageAttn, &task, 8), 7).unwrap(), &train_set, &test_set, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(evaluate(&a.model, &test_set).unwrap(), a.metrics);
    assert!(matches!(a.metrics, EvalMetrics::Multiclass { .. }));
}
