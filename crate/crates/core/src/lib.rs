pub mod cv;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod patch;
pub mod seed;
pub mod stain;
pub mod synth;
pub mod tensor;
