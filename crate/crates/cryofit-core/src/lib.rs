//! Building protein structures into cryo-EM density maps.
//!
//! The crate covers the pipeline downstream of a voxel-level recognition
//! model: MRC map I/O, feature-grid label generation and losses, C-alpha
//! tracing from pseudo-peptide vectors, fragment-to-sequence alignment,
//! and fragment-guided flexible fitting over a coarse-grained C-alpha
//! model, plus the evaluation metrics used to score the results.

pub mod density;
pub mod error;
pub mod features;
pub mod fitting;
pub mod mapio;
pub mod metrics;
pub mod seqalign;
pub mod structio;
pub mod tracing;

pub use error::{Error, Result};
pub use mapio::VoxelGrid;
pub use structio::{AminoAcid, Sequence, Structure};
