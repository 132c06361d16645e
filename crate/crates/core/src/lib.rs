pub mod exec;
pub mod hashcash;
pub mod accountant;
pub mod calibration;
pub mod backend;
pub mod estimator;
pub mod desk;
pub mod server;
pub mod harness;
