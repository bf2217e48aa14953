pub mod ablate;
pub mod build_dataset;
pub mod detect;
pub mod eval;
pub mod stylize;
pub mod train;
