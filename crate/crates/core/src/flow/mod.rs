//! Analytical velocity fields and stochastic particle transport.

mod bundle;
mod field;
mod sim;

pub use bundle::{Split, TrajectoryBundle};
pub use field::{Bounds, FieldKind, FlowFieldSpec};
pub use sim::{em_step, generate_bundle, reflect, simulate_trajectory, InitialCondition, SimConfig};
