//! Rigid-frame diffusion and iterative refinement of protein backbones.
//!
//! Residues are rigid frames built from N, Cα and C. Structures are corrupted
//! by a forward diffusion process over translations and orientations, and
//! refiners propose per-residue frame updates that move a decoy back toward
//! its reference. The crate also provides the training losses, lDDT/GDT
//! metrics and a small invariant network trained on the refinement task.

pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod refinement;
pub mod rng;
pub mod structure;

pub use error::{Error, Result};
