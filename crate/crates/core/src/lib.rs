pub mod agent;
pub mod branches;
pub mod eval;
pub mod hashing;
pub mod lsh;
pub mod nn;
pub mod textio;
pub mod trainer;
