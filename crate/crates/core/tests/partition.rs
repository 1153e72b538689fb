mod common;

use glaucoma_cnn::data::{make_icv_folds, split_train_test};
use glaucoma_cnn::{Dataset, Error, ImageTensor, Label, Sample, SeededRng};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_corpora_obey_partition_laws(seed in any::<u64>()) {
        if let Err(e) = common::partition::trial(seed) {
            prop_assert!(false, "seed {seed}: {e}");
        }
    }

    #[test]
    fn library_checker_agrees(seed in any::<u64>()) {
        let d = common::partition::random_corpus(seed);
        let mut rng = SeededRng::new(seed);
        let mut plan = split_train_test(&d, 0.2, &mut rng).unwrap();
        plan.folds = make_icv_folds(&d.subset(&plan.train), 5, &mut rng).unwrap();
        prop_assert_eq!(plan.check(&d), Ok(()));
    }

    #[test]
    fn same_seed_same_plan(seed in any::<u64>()) {
        let d = common::partition::random_corpus(seed);
        let a = split_train_test(&d, 0.2, &mut SeededRng::new(seed)).unwrap();
        let b = split_train_test(&d, 0.2, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn one_patient_per_class() -> Dataset {
    let s = |id: &str, p: &str, label| Sample {
        image: ImageTensor::zeros(&[1, 1, 1]).unwrap(),
        label,
        patient_id: p.into(),
        sample_id: id.into(),
    };
    Dataset::new(vec![
        s("a", "p1", Label::Glaucoma),
        s("b", "p1", Label::Glaucoma),
        s("c", "p2", Label::Normal),
        s("d", "p2", Label::Normal),
    ])
    .unwrap()
}

#[test]
fn infeasible_grouping_is_reported() {
    let err = split_train_test(&one_patient_per_class(), 0.5, &mut SeededRng::new(0)).unwrap_err();
    assert!(matches!(err, Error::Partition(_)), "{err}");
}

#[test]
fn too_few_patients_for_folds() {
    let err = make_icv_folds(&one_patient_per_class(), 2, &mut SeededRng::new(0)).unwrap_err();
    assert!(matches!(err, Error::Partition(_)), "{err}");
}

#[test]
fn out_of_range_fraction_is_a_parameter_error() {
    for f in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(
            split_train_test(&one_patient_per_class(), f, &mut SeededRng::new(0)),
            Err(Error::Parameter(_))
        ));
    }
}
