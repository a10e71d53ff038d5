pub mod conv;
pub mod linalg;
pub mod norm;
pub mod pointwise;
pub mod resample;
pub mod shape;
