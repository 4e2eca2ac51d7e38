//! Few-shot continual event detection with a frozen transformer encoder,
//! per-layer pools of LoRA experts chosen by an instance-level router,
//! rehearsal memory, label-description contrastive alignment, and
//! feature/prediction distillation.

pub mod autodiff;
pub mod container;
pub mod continual;
pub mod data_synth;
pub mod descriptions;
pub mod encoder;
pub mod error;
pub mod eval_metrics;
pub mod fsutil;
pub mod moe_lora;
pub mod objectives;

pub use autodiff::Tensor;
pub use error::{Error, Result};
