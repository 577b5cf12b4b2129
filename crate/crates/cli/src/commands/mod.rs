pub mod normalize;
pub mod report;
pub mod synth;
pub mod tile;
pub mod train;
