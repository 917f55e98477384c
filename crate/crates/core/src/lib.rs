//! Audio-driven facial rig animation: feature I/O, a transformer regressor
//! from speech features and emotion labels to rig controllers, training,
//! post-processing, procedural blinks and gaze, and evaluation metrics.

pub mod audio2rig;
pub mod blink;
pub mod encoders;
pub mod evalkit;
pub mod featio;
pub mod gaze;
pub mod nn;
pub mod postfx;
pub mod rig;
pub mod rigcsv;
pub mod trainer;
