//! WAV I/O, synthetic multi-source tracks, and dataset layout on disk.

mod dataset;
mod synth;
mod wav;

pub use dataset::{dataset_split, split_sizes, Dataset, Partition, DESK_SPLIT, MANIFEST, MIXTURE, REFERENCE_SPLIT};
pub use synth::{synth_track, SynthSpec, Track, MIX_PEAK};
pub use wav::{load_wav, save_wav, WavFormat};
