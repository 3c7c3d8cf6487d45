//! Cross-city human mobility generation.
//!
//! The pipeline runs in stages: cities are partitioned into regions carrying POI
//! semantics ([`geo`]), trajectories are loaded or synthesized ([`trajectory`]), a
//! travel planner forecasts arrival times and destination semantics ([`planner`]),
//! a shared encoder maps semantic sequences into a city-agnostic latent space with
//! per-city decoders back to region ids ([`embedding`]), and a conditional diffusion
//! transformer samples new latent sequences ([`generator`]). Outputs are scored with
//! [`evaluation`] and [`privacy`].

pub mod geo;
pub mod trajectory;
pub mod planner;
pub mod embedding;
pub mod generator;
pub mod evaluation;
pub mod privacy;
pub mod train;
