//! Training and evaluation give bit-identical results for any thread count.

use glaucoma_cnn::experiment::{evaluate, init_model, plan_splits, trace_csv, train};
use glaucoma_cnn::{generate_corpus, save_weights, Mode, RunConfig, SynthConfig};

struct Outcome {
    weights: Vec<u8>,
    trace: String,
    metrics: String,
    roc: String,
}

fn small_run() -> Outcome {
    let synth = SynthConfig {
        height: 32,
        width: 48,
        glaucoma_thickness: (2.0, 4.0),
        normal_thickness: (6.0, 9.0),
        seed: 5,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, 12, 12, 6).unwrap();
    let d = &corpus.dataset;
    let cfg = RunConfig {
        reduced: true,
        epochs: 2,
        batch_size: 5,
        lr: 1.0,
        augment: 0.1,
        folds: 2,
        seed: 11,
        ..RunConfig::defaults(Mode::Scratch)
    };
    let plan = plan_splits(&cfg, d).unwrap();
    let mut state = init_model(&cfg, None).unwrap();
    let trace = train(&cfg, &mut state, &d.subset(&plan.train), |_, _| {}).unwrap();
    let ev = evaluate(&state, &d.subset(&plan.test)).unwrap();
    Outcome {
        weights: save_weights(&state).to_bytes(),
        trace: trace_csv(&trace),
        metrics: ev.report.to_csv(),
        roc: ev.roc.map(|r| r.to_csv()).unwrap_or_default(),
    }
}

fn in_pool(threads: usize) -> Outcome {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(small_run)
}

#[test]
fn thread_count_does_not_change_results() {
    let one = in_pool(1);
    for n in [2, 3] {
        let many = in_pool(n);
        assert!(one.weights == many.weights, "weights differ with {n} threads");
        assert_eq!(one.trace, many.trace);
        assert_eq!(one.metrics, many.metrics);
        assert_eq!(one.roc, many.roc);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let (a, b) = (in_pool(2), in_pool(2));
    assert!(a.weights == b.weights);
    assert_eq!((a.trace, a.metrics, a.roc), (b.trace, b.metrics, b.roc));
}

#[test]
fn different_seeds_differ() {
    let synth = SynthConfig { height: 32, width: 48, ..SynthConfig::default() };
    let a = generate_corpus(&synth, 2, 2, 1).unwrap();
    let b = generate_corpus(&SynthConfig { seed: 1, ..synth }, 2, 2, 1).unwrap();
    assert_ne!(a.dataset.samples[0].image, b.dataset.samples[0].image);
}
