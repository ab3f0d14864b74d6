//! Real-time hosting-capacity assessment of EV charging demand in radial
//! distribution networks.

pub mod autograd;
pub mod cli;
pub mod forecast;
pub mod grid;
pub mod hc;
pub mod pipeline;
pub mod ppf;
pub mod prob;
