//! Recording persistence, framing and leak-free splits.

pub mod frames;
pub mod manifest;
pub mod npy;
pub mod split;

pub use frames::{frame_count, slice_frames, FrameLabels, FrameSet, IQFrame};
pub use manifest::{Manifest, ManifestEntry};
pub use npy::{read_npy, write_npy, NpyError};
pub use split::{make_splits, stratified_frame_indices, stratified_frame_subset, SplitSpec, Splits, Stratum};
