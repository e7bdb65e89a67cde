pub mod autodiff;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod train;
