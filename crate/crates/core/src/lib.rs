#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulation and control of automatic tissue traction with force-sensing
//! forceps: plant model, force controllers, the resection flow state machine
//! and tracking analytics.

pub mod control;
pub mod fsm;
pub mod metrics;
pub mod model;
pub mod plant;
pub mod runner;
pub mod scenario;
