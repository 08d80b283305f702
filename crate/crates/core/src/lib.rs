pub mod data;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod tensor;
pub mod train;
