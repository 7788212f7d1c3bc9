//! Waste-image classification: a CPU inference engine for ResNet-50 and
//! MobileNet-style graphs, transfer-learning head training, average
//! precision evaluation and an annotated dataset store.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod category;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod head;
pub mod imaging;
pub mod ops;
pub mod tensor;

pub use category::WasteCategory;
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/imaging.md")]
    struct Imaging;
    #[doc = include_str!("../../../book/src/head.md")]
    struct Head;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/dataset.md")]
    struct Dataset;
}
