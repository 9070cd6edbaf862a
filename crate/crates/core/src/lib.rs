pub mod approximator;
pub mod error;
pub mod model;
pub mod policy;
pub mod tolerances;
pub mod targets;
pub mod learners;
pub mod cli;
