//! Weather-robust object detection toolkit: stylization-based data
//! synthesis, a lightweight image-adaptation network, a compact grid
//! detector, joint multi-task training, and a mAP evaluation / ablation
//! harness.

pub mod autodiff;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod image_tensor;
pub mod imagery;
pub mod losses;
pub mod model;
pub mod nia;
pub mod nn;
pub mod stylizer;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use image_tensor::ImageTensor;
