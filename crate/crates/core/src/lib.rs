//! Grasp detection toolkit: oriented grasp rectangles, the rectangle metric,
//! Cornell-format data, RG-D preprocessing, grid targets, a small
//! convolutional network with three output heads, and synthetic scenes.

pub mod dataset;
pub mod geometry;
pub mod grid;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod config;
pub mod render;
pub mod synth;
