//! Desk-scale Siamese pipeline on synthetic features.

pub mod data;
pub mod labels;
pub mod model;
pub mod train;

pub use data::{gen_synthetic, Attribute, AttributeRates, DataConfig, GridSpec, SyntheticPair};
pub use labels::{make_labels, Labels};
pub use model::{loss_total, predict_box, BranchModel, GateSettings, HeadOutput, SiameseModel, Wiring};
pub use train::{
    label_all, pair_ious, planted_pointwise_add, stage1_search, stage2_retrain, train_model, train_single,
    validation_loss, LabeledPair, RetrainConfig, SearchConfig, Stage1, TrainReport,
};
