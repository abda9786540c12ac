// SPDX-License-Identifier: Apache-2.0

//! Model-utilization analysis: trace capture, unit attribution, key-set
//! selection, MUI/PUR metrics, utility-law fitting and direction
//! classification, with a seeded toy transformer as a desk-scale substrate.

pub mod analysis;
pub mod attribution;
pub mod error;
pub mod metrics;
pub mod num;
pub mod sae;
pub mod selection;
pub mod snapshot;
pub mod stats;
pub mod toy;
pub mod trace;

pub use error::{Error, FormatError, Result};
pub use num::{Matrix, Real};
pub use snapshot::ModelSnapshot;

pub type ToyModelF32 = toy::ToyModel<f32>;
pub type ToyModelF64 = toy::ToyModel<f64>;
pub type SnapshotF32 = snapshot::ModelSnapshot<f32>;
pub type SnapshotF64 = snapshot::ModelSnapshot<f64>;
pub type SaeF32 = sae::SaeSnapshot<f32>;
pub type SaeF64 = sae::SaeSnapshot<f64>;
