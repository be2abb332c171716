pub mod dist;
pub mod providers;
pub mod formula;
pub mod engine;
pub mod speculative;
pub mod harness;
