//! Domain-adaptive single-stage object detection on top-view grid maps.

pub mod autodiff;
pub mod geometry;
pub mod gridmap;
pub mod model;
pub mod data;
pub mod domainadapt;
pub mod losses;
pub mod train;
pub mod eval;
pub mod config;
pub mod gradsuite;
