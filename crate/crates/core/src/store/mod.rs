//! Embedding shards: the on-disk format, in-memory datasets, batching,
//! fixed-ratio mixtures and the synthetic data generator.

mod batch;
mod format;
mod index_list;
mod inspect;
mod mixture;
mod synthetic;

pub use batch::{Batch, BatchSampler, Dataset, EpochPlan, SamplerState};
pub use format::{
    checksum, read_header, write_shard, EmbeddingShard, SampleRecord, ShardDims, ShardHeader,
    HEADER_LEN, SHARD_MAGIC, SHARD_VERSION,
};
pub(crate) use format::write_atomic;
pub use index_list::{parse_index_list, read_index_list, write_index_list};
pub use inspect::{inspect_bytes, inspect_shard, sha256_hex, ChecksumStatus, FieldStats, ShardReport};
pub use mixture::{apportion, mixture_epoch, MixturePlan, MixtureSource, MixtureSpec};
pub use synthetic::{gen_synthetic, gen_zero_shot, SyntheticData, SyntheticSpec, SyntheticZeroShot};
