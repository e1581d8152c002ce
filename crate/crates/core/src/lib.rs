//! Allocation-only core of the widen / reparameterize / single-shot shrink
//! pipeline for CNN channel configurations.
//!
//! Everything here is pure computation: a small reverse-mode autodiff tape
//! with the layer operations the supported networks need, architecture
//! graphs and their channel configurations, exact FLOP/parameter
//! accounting, hypernetwork weight generation from latent vectors, and
//! the saliency scoring / budgeted threshold search that shrinks a widened
//! network. File formats, datasets and the training harness live in the
//! `lwdna` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod arch;
pub mod complexity;
pub mod error;
pub mod hypernet;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod rng;
pub mod shrink;
pub mod tape;
pub mod tensor;
pub mod zoo;

pub use arch::{ArchSpec, ChannelConfig, ChannelGroup, Node, NodeId};
pub use complexity::{model_cost, ratio_report, CostReport, LayerCost, LayerKind, Ratio};
pub use error::{Error, Result};
pub use hypernet::{HyperLayer, HyperNet, LatentId, LatentKind, LatentVector};
pub use network::{BnMode, Network};
pub use optim::{Schedule, Sgd};
pub use shrink::{
    Batch, BatchSource, Budget, BudgetSpec, Criterion, Floors, KeepMasks, SaliencyMap, SearchResult, ShrinkParams,
    ShrinkReport, Witness,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
