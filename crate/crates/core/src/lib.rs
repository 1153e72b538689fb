//! Convolutional glaucoma detection on circumpapillary OCT B-scans.
//!
//! The crate covers the whole workflow: a small f32 tensor core, layer
//! kernels with hand-written backward passes, the from-scratch and VGG
//! architectures, Adadelta training with class weighting, manifest-driven
//! data loading with patient-grouped splits, classification metrics, class
//! activation maps and a synthetic B-scan generator for end-to-end checks.
//!
//! ```
//! use glaucoma_cnn::{build_scratch_cnn, ModelState, SeededRng};
//!
//! let spec = build_scratch_cnn([496, 768, 1]).unwrap();
//! assert_eq!(spec.param_count().unwrap(), 388_354);
//! let _state = ModelState::init(spec, &mut SeededRng::new(0)).unwrap();
//! ```

pub mod cam;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use cam::{compute_cam, export_heatmap, CamMap};
pub use data::{load_dataset, make_icv_folds, split_train_test, AugmentConfig, Dataset, Label, Sample, SplitPlan};
pub use error::{Error, IngestError, LoadError, Result};
pub use experiment::{Mode, RunConfig};
pub use metrics::{basic_metrics, roc_auc, ConfusionMatrix, MetricReport, RocCurve};
pub use model::{build_scratch_cnn, build_vgg, load_weights, save_weights, ModelSpec, ModelState, WeightArchive};
pub use optim::{compute_class_weights, fit, ClassWeights, TrainConfig};
pub use synth::{generate_corpus, generate_dataset, SynthConfig};
pub use tensor::{ImageTensor, SeededRng};

/// The guide's chapters, compiled so that their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cam.md")]
    mod cam {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
