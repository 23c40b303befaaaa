//! Small alignment heads trained over frozen, precomputed unimodal
//! embeddings.
//!
//! The crate covers the whole desk-scale loop: the `.apes` embedding shard
//! format and batching ([`store`]), a narrow reverse-mode kernel
//! ([`tensor`]), the alignment heads ([`head`]), the symmetric contrastive
//! objective ([`objective`]), AdamW with warmup/cosine scheduling
//! ([`optim`]), training with embedding-level gradient accumulation
//! ([`trainer`]) and zero-shot / retrieval evaluation ([`eval`]).

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod head;
pub mod objective;
pub mod optim;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
