//! State estimation for PMU networks under time-synchronization (GPS-spoofing) attacks.

pub mod am;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod linalg;
pub mod lnrt;
pub mod netcase;
pub mod pmu;
pub mod scada;
pub mod vulnerability;

pub use error::{Error, Result};
