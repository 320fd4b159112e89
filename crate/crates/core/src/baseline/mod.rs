//! Comparison controllers producing the wrench directly from the tracking
//! error. Neither knows about the actuator limits; their commands go through
//! the allocator and are saturated by the plant.

mod lqr;
mod smc;

pub use lqr::{dare_solve, linearize_hover, lqr_control, LqrConfig, LqrController, LqrDesign};
pub use smc::{smc_control, SmcConfig, SmcController};
