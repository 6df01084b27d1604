pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod experiment;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod tensor;
pub mod train;
