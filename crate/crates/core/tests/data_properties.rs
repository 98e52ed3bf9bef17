use attrbench::data::synth::{generate_one, ground_truth_mask};
use attrbench::data::{generate, read_records, write_records, TaskName, TaskSpec};
use proptest::prelude::*;

#[test]
fn same_seed_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in TaskName::ALL {
        let task = TaskSpec::new(name);
        let a = dir.path().join(format!("{name}-a.jsonl"));
        let b = dir.path().join(format!("{name}-b.jsonl"));
        write_records(&a, &generate(&task, 200, 17).unwrap()).unwrap();
        write_records(&b, &generate(&task, 200, 17).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_records(&a).unwrap(), generate(&task, 200, 17).unwrap());
    }
}

fn task_strategy() -> impl Strategy<Value = TaskName> {
    prop::sample::select(TaskName::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_are_independent_of_batch(name in task_strategy(), seed in any::<u64>(), index in 0u64..40) {
        let task = TaskSpec::new(name);
        let batch = generate(&task, 40, seed).unwrap();
        prop_assert_eq!(&generate_one(&task, seed, index).unwrap(), &batch[index as usize]);
    }

    #[test]
    fn stored_mask_matches_the_rule(name in task_strategy(), seed in any::<u64>()) {
        let task = TaskSpec::new(name);
        for r in generate(&task, 10, seed).unwrap() {
            prop_assert_eq!(&ground_truth_mask(&task, &r), &r.ground_truth_mask);
        }
    }
}
