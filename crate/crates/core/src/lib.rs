pub mod dgm;
pub mod error;
pub mod eval;
pub mod glm;
pub mod harness;
pub mod math;
pub mod penalty;
pub mod seed;
pub mod strategies;
pub mod tabular;
