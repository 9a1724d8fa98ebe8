pub mod detector;
pub mod eval;
pub mod features;
pub mod gan;
pub mod image;
pub mod localizer;
pub mod nn;
pub mod synth;
