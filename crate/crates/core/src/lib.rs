pub mod data;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;
