pub mod autodiff;
pub mod data;
pub mod kernel;
pub mod layer;
pub mod model;
pub mod optim;
pub mod quant;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod model_io;
pub mod config;
pub mod selftest;
