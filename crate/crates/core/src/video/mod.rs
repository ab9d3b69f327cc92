//! Frames, frame directories, checkpoints and synthetic fixtures.

mod checkpoint;
mod fixture;
mod frame;
mod png_io;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, IntoStored, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use fixture::{add_noise, make_fixture, FixtureKind, DEFAULT_FIXTURE_NOISE, MIN_FIXTURE_FRAMES};
pub use frame::{Frame, VideoSequence};
pub use png_io::{
    frame_file_name, list_frames, load_frames, load_image, load_indexed_frames, parse_frame_index, quantize,
    save_frames, save_image, save_indexed_frames,
};
