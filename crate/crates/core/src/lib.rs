pub mod auxloss;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod packing;
pub mod pipeline;
pub mod scorer;
pub mod synthetic;
pub mod tape;
pub mod task;
pub mod train;
pub mod verify;
pub mod tensor;
