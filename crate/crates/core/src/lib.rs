pub mod eval;
pub mod gradcheck;
pub mod hawkes;
pub mod likelihood;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod store;
pub mod tensor;
pub mod trainer;
