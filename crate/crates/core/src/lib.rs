pub mod config;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pillars;
pub mod pipeline;
pub mod predictions;
pub mod render;
pub mod simworld;
pub mod sti;
pub mod trpn;
