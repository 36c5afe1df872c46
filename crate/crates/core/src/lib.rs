pub mod ablation;
pub mod autodiff;
pub mod dataset;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod imgbuf;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod train;
