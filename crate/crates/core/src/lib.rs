//! Long-tailed image classification with class activation map calibration
//! and scaled-normalized classifiers, on a small from-scratch CNN.

pub mod autodiff;
pub mod camc;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use camc::{Cam, CamcBlock, CropGrid, Threshold};
pub use data::{LongTailedDataset, SamplerKind, SamplerSpec, Split, SplitThresholds};
pub use error::{Error, Result};
pub use model::{Backbone, BackboneConfig, ClassifierHead, HeadKind, NcmClassifier, Stage};
pub use tensor::{Real, Tensor};
pub use eval::{Averaging, SplitReport};
pub use train::{CamcVariant, Checkpoint, TrainConfig, TrainOutcome};
