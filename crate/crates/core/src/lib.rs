pub mod autodiff;
pub mod graphbuild;
pub mod milnet;
pub mod nn;
pub mod gatsan;
pub mod saliency;
pub mod xmetrics;
pub mod datacli;
