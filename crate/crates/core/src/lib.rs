//! Data-aware growth of a contrastive image-text model, sized for a CPU.
//!
//! See the guide in `book/` for a walk through the modules.

pub mod data;
pub mod error;
pub mod growth;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/growth.md")]
    mod growth {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/desk_scale.md")]
    mod desk_scale {}
}
