//! Graph feedforward network (GFN) weight transfer and the GFN-ROM
//! multifidelity reduced-order model.
//!
//! The mesh-facing weights of an autoencoder (the columns of the first
//! encoder layer and the rows of the last decoder layer) are owned by mesh
//! nodes. [`gfn`] moves them between arbitrary node sets using
//! nearest-neighbour relations, which lets a single model train on and
//! predict at any resolution.
//!
//! Module map:
//! - [`mesh`]: node sets, k-d tree queries, neighbour maps, master-mesh union
//! - [`gfn`]: the weight-transfer operators and their adjoint
//! - [`neural`]: dense layers, analytic gradients, optimizers
//! - [`rom`]: the GFN-ROM model, losses, training and inference
//! - [`datagen`]: analytic snapshot families and mesh hierarchies
//! - [`baseline`]: POD by the method of snapshots
//! - [`bounds`]: empirical checks of the super-/sub-resolution error bounds

pub mod baseline;
pub mod bounds;
pub mod datagen;
mod error;
pub mod gfn;
pub mod io;
pub mod kdtree;
pub mod mesh;
pub mod neural;
pub mod rom;

pub use error::{Error, Result};
pub use gfn::{Transfer, WeightBundle};
pub use mesh::{Mesh, NeighborMap, TransformKind};
pub use rom::{RomModel, TrainConfig, TrainMode};
