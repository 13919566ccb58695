pub mod audio_io;
pub mod pitch;
pub mod voice_quality;
pub mod features;
pub mod metrics;
pub mod neural;
pub mod explain;
pub mod adversary;
