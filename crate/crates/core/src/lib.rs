//! Cross-layer routing and power control for multi-hop cognitive relay
//! chains.
//!
//! A packet travels along a line of relays `R0..RM`. Primary-user activity
//! switches relays on and off; the available relays split into continuous
//! segments. Within a segment the packet is forwarded frame by frame, with
//! each holder choosing the next hop and its power from local CSI
//! ([`subpolicy`]). Across segments a power budget is split so the slowest
//! section of the route is as fast as possible ([`master`]). [`sim`] runs
//! the resulting scheme against fixed-power baselines and [`oracle`]
//! cross-checks the optimisers against exhaustive search on tiny instances.
//!
//! The numeric kernels are generic over [`scalar::Scalar`] (`f32`/`f64`);
//! the aliases below fix the usual `f64` instantiation.

pub mod config;
pub mod error;
pub mod master;
pub mod model;
pub mod oracle;
pub mod scalar;
pub mod seed;
pub mod sim;
pub mod subpolicy;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Topology = model::Topology<Real>;
pub type PuActivityModel = model::PuActivityModel<Real>;
pub type SegmentProblem = subpolicy::SegmentProblem<Real>;
pub type CalibratedPolicy = subpolicy::CalibratedPolicy<Real>;
