pub mod base_branch;
pub mod boundary_refine;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discrim_enhance;
pub mod eval;
pub mod model;
pub mod params;
pub mod pseudo_supervision;
pub mod saliency;
pub mod tensor;
pub mod train;
