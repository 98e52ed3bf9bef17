use attrbench::attribution::{random_baseline, AttributionMap, LabReplacement, MaskPolicy, Method};
use attrbench::data::{generate, LabStats, TaskName, TaskSpec};
use attrbench::faithfulness::{
    composite_score, evaluate_record, evaluate_records, method_applies, win_matrix, FaithfulnessReport, WinMatrix,
    DEFAULT_K_GRID,
};
use attrbench::model::{Architecture, Model, ModelConfig};
use attrbench::Error;
use proptest::prelude::*;

fn model(task: &TaskSpec, seed: u64) -> Model {
    let cfg = ModelConfig {
        embed_dim: 12,
        hidden_dim: 12,
        n_heads: 2,
        n_layers: 1,
        ..ModelConfig::new(Architecture::Transformer, task.schema.vocab_size, task.schema.n_labs(), task.n_classes)
    };
    let mut m = Model::build(cfg, seed).unwrap();
    m.lab_stats = LabStats { mean: task.schema.lab_means.clone(), std: task.schema.lab_stds.clone() };
    m
}

fn policy(m: &Model) -> MaskPolicy {
    MaskPolicy::new(LabReplacement::TrainingMean, &m.lab_stats)
}

const MODELS: [&str; 3] = ["transformer", "stage-recurrent", "stage-attn"];
const TASKS: [&str; 3] = ["mortality", "dka", "los"];

fn report(method: &str, model: &str, task: &str, composite: f64) -> FaithfulnessReport {
    FaithfulnessReport {
        method: method.into(),
        model: model.into(),
        task: task.into(),
        comprehensiveness: composite,
        sufficiency: 0.0,
        composite,
        runtime_per_record: 0.0,
        n_records: 1,
        k_grid: DEFAULT_K_GRID.to_vec(),
    }
}

/// Reports for `methods` over the full 3 × 3 grid, Chefer on attention
/// models only, with composites from `score(method index, pair index)`.
fn grid(methods: &[&str], score: impl Fn(usize, usize) -> f64) -> Vec<FaithfulnessReport> {
    let mut out = Vec::new();
    for (i, m) in methods.iter().enumerate() {
        for (p, (model, task)) in MODELS.iter().flat_map(|a| TASKS.iter().map(move |t| (a, t))).enumerate() {
            if method_applies(m, model) {
                out.push(report(m, model, task, score(i, p)));
            }
        }
    }
    out
}

#[test]
fn constant_model_scores_zero() {
    let task = TaskSpec::new(TaskName::Mortality);
    let mut m = model(&task, 1);
    for t in m.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let policy = policy(&m);
    for (i, record) in generate(&task, 10, 2).unwrap().iter().enumerate() {
        let r = evaluate_record(&m, record, &random_baseline(record, 0, i as u64), &DEFAULT_K_GRID, &policy).unwrap();
        assert_eq!((r.comprehensiveness, r.sufficiency), (0.0, 0.0));
    }
}

#[test]
fn removing_everything_is_method_independent() {
    let task = TaskSpec::new(TaskName::Los);
    let m = model(&task, 3);
    let policy = policy(&m);
    for (i, record) in generate(&task, 10, 4).unwrap().iter().enumerate() {
        let d = record.n_positions();
        let everything: Vec<usize> = (0..d).collect();
        let probs = m.predict_proba(record).unwrap();
        let c = attrbench::model::argmax(&probs);
        let blank = attrbench::attribution::mask(record, &everything, &policy).unwrap();
        let expected = probs[c] - m.predict_proba(&blank).unwrap()[c];
        let a = random_baseline(record, c, i as u64);
        let b = AttributionMap::new(Method::Oracle, c, (0..d).map(|j| -(j as f64)).collect());
        for map in [a, b] {
            let r = evaluate_record(&m, record, &map, &[1.0], &policy).unwrap();
            assert_eq!(r.sufficiency, 0.0);
            assert!((r.comprehensiveness - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn misaligned_maps_are_rejected() {
    let task = TaskSpec::new(TaskName::Mortality);
    let m = model(&task, 3);
    let record = &generate(&task, 1, 4).unwrap()[0];
    let short = AttributionMap::new(Method::Random, 0, vec![0.0; record.n_positions() - 1]);
    assert!(matches!(
        evaluate_record(&m, record, &short, &DEFAULT_K_GRID, &policy(&m)),
        Err(Error::MisalignedAttribution { .. })
    ));
}

#[test]
fn metrics_are_bounded_and_repeatable() {
    let task = TaskSpec::new(TaskName::Mortality);
    let m = model(&task, 5);
    let policy = policy(&m);
    let records = generate(&task, 30, 6).unwrap();
    let maps: Vec<_> = records.iter().enumerate().map(|(i, r)| random_baseline(r, 1, i as u64)).collect();
    let a = evaluate_records(&m, &records, &maps, &DEFAULT_K_GRID, &policy).unwrap();
    let b = evaluate_records(&m, &records, &maps, &DEFAULT_K_GRID, &policy).unwrap();
    assert_eq!(a, b);
    for r in &a {
        assert!((-1.0..=1.0).contains(&r.comprehensiveness) && (-1.0..=1.0).contains(&r.sufficiency));
    }
}

#[test]
fn composite_arithmetic() {
    assert!((composite_score(0.5, 0.2) - 0.4).abs() < 1e-15);
    assert_eq!(composite_score(0.7, 1.0), 0.0);
    assert_eq!(composite_score(0.0, 0.3), 0.0);
}

#[test]
fn dominant_method_wins_every_pair() {
    let methods = ["kernel-shap", "lime", "chefer", "random"];
    let reports = grid(&methods, |i, p| (10 - i) as f64 + p as f64 * 0.01);
    let w = win_matrix(&reports).unwrap();
    assert_eq!(w.methods, methods);
    assert_eq!(w.cell(0, 1).unwrap(), "9/9");
    assert_eq!(w.cell(0, 2).unwrap(), "6/6");
    assert_eq!(w.cell(2, 3).unwrap(), "6/6");
    assert_eq!(w.cell(3, 2).unwrap(), "0/6");
    assert_eq!(w.cell(3, 0).unwrap(), "0/9");
    assert_eq!(w.cell(1, 1), None);
}

#[test]
fn identical_scores_are_all_ties() {
    let reports = grid(&["lime", "gim"], |_, p| p as f64);
    let w = win_matrix(&reports).unwrap();
    assert_eq!((w.wins[0][1], w.wins[1][0]), (0, 0));
    assert_eq!(w.ties[0][1], 9);
    assert_eq!(w.denominators[0][1], 9);
}

#[test]
fn missing_cells_are_listed() {
    let mut reports = grid(&["lime", "chefer"], |i, p| (i + p) as f64);
    reports.retain(|r| !(r.method == "chefer" && r.model == "stage-attn" && r.task == "dka"));
    reports.retain(|r| !(r.method == "lime" && r.model == "transformer" && r.task == "los"));
    let pairs: Vec<(String, String)> =
        MODELS.iter().flat_map(|a| TASKS.iter().map(move |t| (a.to_string(), t.to_string()))).collect();
    let methods = vec!["lime".to_string(), "chefer".to_string()];
    match WinMatrix::build(&reports, &methods, &pairs, method_applies) {
        Err(Error::MissingCells(list)) => {
            assert!(list.contains("(lime, transformer, los)"));
            assert!(list.contains("(chefer, stage-attn, dka)"));
        }
        other => panic!("expected missing cells, got {other:?}"),
    }
}

#[test]
fn empty_method_list_is_an_error() {
    assert!(WinMatrix::build(&[], &[], &[], method_applies).is_err());
}

proptest! {
    #[test]
    fn win_counts_partition_the_denominator(scores in prop::collection::vec(0u8..4, 4 * 9)) {
        let methods = ["lime", "deeplift", "chefer", "random"];
        let w = win_matrix(&grid(&methods, |i, p| scores[i * 9 + p] as f64)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                prop_assert_eq!(w.wins[i][j] + w.wins[j][i] + w.ties[i][j], w.denominators[i][j]);
                prop_assert_eq!(w.ties[i][j], w.ties[j][i]);
                let expected = if methods[i] == "chefer" || methods[j] == "chefer" { 6 } else { 9 };
                prop_assert_eq!(w.denominators[i][j], expected);
            }
        }
    }

    #[test]
    fn monotone_transforms_leave_the_matrix_unchanged(scores in prop::collection::vec(-1.0f64..1.0, 3 * 9)) {
        let methods = ["integrated-gradients", "chefer", "random"];
        let raw = win_matrix(&grid(&methods, |i, p| scores[i * 9 + p])).unwrap();
        let squashed = win_matrix(&grid(&methods, |i, p| (3.0 * scores[i * 9 + p]).exp() - 7.0)).unwrap();
        prop_assert_eq!(raw, squashed);
    }
}
