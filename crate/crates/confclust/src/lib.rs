//! Conformal prediction sets from clusterings.
//!
//! Any base clustering (k-means, generalized k-means, a Gaussian mixture, a
//! kNN density level set) defines a residual function; split-conformal
//! calibration turns its sublevel set into a prediction region with the
//! distribution-free guarantee `P(Y in C) >= 1 - alpha`. For every residual
//! here that region is an explicit union of balls or ellipsoids, clusters
//! are its connected components, and tuning parameters are chosen by
//! minimizing the estimated set volume or by a bootstrap hypothesis test.
//!
//! The library is organized around that pipeline:
//!
//! - [`dataset`]: data model, CSV ingestion, the fit/calibration split and
//!   synthetic generators;
//! - [`kmeans`], [`gmm`]: the base model fitters;
//! - [`conformal`]: residuals, the conformal quantile and the explicit
//!   set constructions;
//! - [`geometry`]: membership, Monte Carlo volume, connected components;
//! - [`selection`]: volume curves, minimum-volume selection and the
//!   bootstrap test for k;
//! - [`maxmix`]: the max-mixture density linking unions of ellipsoids to
//!   density level sets;
//! - [`levelset`]: kNN density level sets as unions of spheres;
//! - [`cli`]: the `confclust` command-line pipeline and SVG plots.
//!
//! Everything random is a pure function of a single 64-bit seed (see
//! [`rng`]), so runs reproduce byte for byte.

pub mod cli;
pub mod conformal;
pub mod dataset;
pub mod error;
mod gauss;
pub mod geometry;
pub mod gmm;
pub mod kmeans;
pub mod levelset;
pub mod maxmix;
pub mod rng;
pub mod selection;
mod svg;

pub use error::{Error, Result};
