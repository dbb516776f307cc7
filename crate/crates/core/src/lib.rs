pub mod cli;
pub mod dataset;
pub mod envsim;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod rl;
pub mod sampler;
pub mod seeding;
pub mod train;
