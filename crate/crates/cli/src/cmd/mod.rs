pub mod analyze;
pub mod basis;
pub mod colorize;
pub mod gradcheck;
pub mod metrics;
pub mod project;
pub mod segment;
pub mod synth;
