//! Randomized corpora for the partition laws, and an independent checker.

use std::collections::{BTreeMap, BTreeSet};

use glaucoma_cnn::data::{make_icv_folds, split_train_test};
use glaucoma_cnn::{Dataset, ImageTensor, Label, Sample, SeededRng};
use rand::Rng;

use super::rng;

/// Between 10 and 30 single-class patients per class, a few mixed-label
/// patients, one to four samples each. Sample ids are shuffled so that
/// dataset order carries no patient structure.
pub fn random_corpus(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    let mut push = |r: &mut rand_chacha::ChaCha20Rng, patient: String, label: Label| {
        let id = format!("s{:05}", r.random_range(0..100_000u32));
        samples.push(Sample {
            image: ImageTensor::zeros(&[1, 1, 1]).unwrap(),
            label,
            patient_id: patient,
            sample_id: id,
        });
    };
    let (ng, nn, nm) = (r.random_range(10..=30), r.random_range(10..=30), r.random_range(0..=4));
    for p in 0..ng + nn + nm {
        let n = r.random_range(1..=4);
        for _ in 0..n {
            let label = if p < ng {
                Label::Glaucoma
            } else if p < ng + nn {
                Label::Normal
            } else if r.random::<bool>() {
                Label::Glaucoma
            } else {
                Label::Normal
            };
            push(&mut r, format!("p{p}"), label);
        }
    }
    // drop colliding ids, keeping the first
    let mut seen = BTreeSet::new();
    samples.retain(|s| seen.insert(s.sample_id.clone()));
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Dataset::new(samples).unwrap()
}

fn patients<'a>(d: &'a Dataset, ids: &[String]) -> BTreeSet<&'a str> {
    let by_id: BTreeMap<&str, &str> = d.samples.iter().map(|s| (s.sample_id.as_str(), s.patient_id.as_str())).collect();
    ids.iter().map(|id| by_id[id.as_str()]).collect()
}

fn as_set(ids: &[String]) -> BTreeSet<&str> {
    ids.iter().map(String::as_str).collect()
}

/// One split plus 5-fold ICV; checks every law without the library's own
/// `SplitPlan::check`.
pub fn trial(seed: u64) -> Result<(), String> {
    let d = random_corpus(seed);
    let mut rng = SeededRng::new(seed);
    let plan = split_train_test(&d, 0.2, &mut rng).map_err(|e| format!("split: {e}"))?;
    let all: BTreeSet<String> = d.ids().into_iter().collect();
    let (train, test) = (as_set(&plan.train), as_set(&plan.test));
    if train.len() != plan.train.len() || test.len() != plan.test.len() {
        return Err("duplicate ids".into());
    }
    if !train.is_disjoint(&test) {
        return Err("train/test overlap".into());
    }
    let union: BTreeSet<String> = train.union(&test).map(|s| s.to_string()).collect();
    if union != all {
        return Err("train ∪ test ≠ dataset".into());
    }
    if !patients(&d, &plan.train).is_disjoint(&patients(&d, &plan.test)) {
        return Err("patient leaks across train/test".into());
    }
    for part in [&plan.train, &plan.test] {
        let labels: BTreeSet<Label> = d.subset(part).samples.iter().map(|s| s.label).collect();
        if labels.len() != 2 {
            return Err("a side lacks a class".into());
        }
    }
    let train_d = d.subset(&plan.train);
    let folds = make_icv_folds(&train_d, 5, &mut rng).map_err(|e| format!("folds: {e}"))?;
    if folds.len() != 5 {
        return Err(format!("{} folds", folds.len()));
    }
    let mut covered = BTreeSet::new();
    for (i, f) in folds.iter().enumerate() {
        let (ft, fv) = (as_set(&f.train), as_set(&f.validation));
        if fv.is_empty() || !ft.is_disjoint(&fv) || ft.len() + fv.len() != train.len() {
            return Err(format!("fold {i} is not a partition"));
        }
        if ft.union(&fv).copied().collect::<BTreeSet<_>>() != train {
            return Err(format!("fold {i} does not cover the training split"));
        }
        if !patients(&d, &f.train).is_disjoint(&patients(&d, &f.validation)) {
            return Err(format!("patient leaks across fold {i}"));
        }
        for id in fv {
            if !covered.insert(id) {
                return Err(format!("{id} validated twice"));
            }
        }
    }
    if covered != train {
        return Err("validation folds do not cover the training split".into());
    }
    Ok(())
}
