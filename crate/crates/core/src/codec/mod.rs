//! Latent quantization, the factorized entropy model, integer frequency
//! tables, the range coder, and the serialized memory-cue format.

pub mod pwl;

mod cue;
mod freq;
mod model;
mod range;

pub use cue::{CueHeader, MemoryCue, CUE_HEADER_BYTES, CUE_MAGIC};
pub use freq::{table_set_checksum, FrequencyTable, FREQ_TOTAL};
pub use model::{
    add_quantization_noise, noise_like, quantize, EntropyModel, LatentGrid, QuantizeStats,
};
pub use range::{range_decode, range_encode};
