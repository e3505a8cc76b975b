pub mod augment;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod models;
pub mod run;
pub mod train;
