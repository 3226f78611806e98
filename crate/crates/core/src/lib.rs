//! Broker-modality multi-modal crowd counting.
//!
//! A lightweight fusion generator ([`bmg::Bmg`]) turns an RGB image and an
//! auxiliary (thermal or depth) image into a third "broker" image. A
//! weight-shared extractor embeds all three, their features are summed and a
//! regression head predicts a density map ([`counter::CountingNet`]).
//! Training runs in two stages: the generator is first distilled from a
//! fusion teacher, then fine-tuned jointly with the counter under a Bayesian
//! point-supervision loss ([`train`]).

pub mod attention;
pub mod bmg;
pub mod checkpoint;
pub mod counter;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod train;

pub use bmg::{Bmg, BmgConfig};
pub use counter::{CountingNet, DensityMap, ExtractorConfig};
pub use data::{ModalImage, ModalPair, Modality, PointAnnotationSet, SynthSpec};
pub use error::{Error, Result};
pub use losses::PosteriorMap;
pub use metrics::EvalReport;
pub use train::{Teacher, TrainConfig};
