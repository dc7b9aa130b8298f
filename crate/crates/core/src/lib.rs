//! Cloud digital twin of a 5G radio access network.
//!
//! The crate hosts a twin-graph engine with calibrated latency and service
//! limits ([`engine`]), an emulated O-RAN radio network ([`ran`]), the xApp
//! that mirrors that network into two twin graphs ([`xapp`]), event routing
//! ([`events`]), snapshot/spawn/diff for what-if analysis ([`whatif`]) and a
//! billing model ([`costing`]). [`bench`] and [`scenario`] drive the
//! measurement campaigns.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod costing;
pub mod engine;
pub mod events;
pub mod latency;
pub mod model;
pub mod par;
pub mod ran;
pub mod scenario;
pub mod stats;
pub mod time;
pub mod value;
pub mod whatif;
pub mod xapp;

pub use time::SimTime;
pub use value::{GeoPoint, Value};
