//! Link-level simulation of a massive MU-MIMO-OFDM downlink with nonlinear
//! power amplifiers, and three digital predistortion schemes to linearize
//! them: per-antenna time-domain GMP, a frequency-domain fully connected
//! network, and a frequency-domain convolutional network. Also ships exact
//! FLOP calculators for the three schemes.

pub mod complexity;
pub mod dpd_fd;
pub mod dpd_td;
pub mod error;
pub mod experiments;
pub mod link;
pub mod numerics;
pub mod pa;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{CMat, C64};
