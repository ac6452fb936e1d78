//! Background-masking strategies for fine-grained classification under
//! background-induced distribution shift.
//!
//! The crate bundles a synthetic biased dataset generator ([`synthset`]), a
//! foreground segmenter ([`segmodel`]), two toy backbones ([`backbones`]),
//! the masking operators ([`maskops`]), classification heads ([`heads`]),
//! training regimes ([`trainkit`]), evaluation tables ([`evalkit`]) and a
//! config-driven experiment runner ([`expcli`]).

pub mod backbones;
pub mod classifier;
pub mod error;
pub mod evalkit;
pub mod expcli;
pub mod heads;
pub mod maskops;
pub mod nn;
pub mod segmodel;
pub mod synthset;
pub mod trainkit;

pub use classifier::ClassifierModel;
pub use error::{Error, Result};
pub use synthset::{BinaryMask, Image, SampleRecord, Split};
