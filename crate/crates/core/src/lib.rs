pub mod data;
pub mod fsam;
pub mod harness;
pub mod model;
pub mod nmf;
pub mod params;
pub mod signal;
pub mod tensor;
