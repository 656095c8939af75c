pub mod diffops;
pub mod model;
pub mod audio_io;
pub mod dataset;
pub mod metrics;
pub mod training;
