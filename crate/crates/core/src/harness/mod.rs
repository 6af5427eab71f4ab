pub mod data;
pub mod experiment;
pub mod metrics;
pub mod plot;
