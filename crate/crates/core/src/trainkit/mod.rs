//! Training engine and synthetic two-domain data.

mod arch;
mod data;
mod train;

pub use arch::{mlp, ToyArch};
pub use data::{
    make_two_domain, Domain, DomainDataset, DomainShiftConfig, Split, TwoDomainData, GLYPH_CLASSES, GLYPH_SIZE,
};
pub use train::{
    argmax, evaluate, grad_check, gradients, param_slices, train, train_with_report, LayerGrads, Optimizer,
    TrainConfig, TrainReport,
};
