//! CPU inference and compression engine for small transformer encoder
//! classifiers: fp32 and dynamically quantized int8 forward passes with
//! cached weight packing and operator fusion, hand-written reverse-mode
//! gradients, structured head/FFN pruning driven by first-order importance
//! scores, soft-cross-entropy distillation at toy scale, and a benchmark
//! harness for batching, multi-instance scheduling and ablation reports.

pub mod autodiff;
pub mod cli;
pub mod compress;
pub mod encoder;
pub mod model_io;
pub mod qgemm;
pub mod runtime;
pub mod tensor;
