//! Numerical laboratory for Camassa-Holm multipeakons and the Broadwell
//! discrete-velocity model.

mod dopri;
pub mod dynamics;
pub mod initial_data;
pub mod broadwell;
pub mod metric;
pub mod peakon;
pub mod quad;

pub use broadwell::{BroadwellGrid, Frame, GridSpec, RescaleMap};
pub use dynamics::{simulate, CollisionMode, IntegratorConfig, SingularChart, Trajectory};
pub use peakon::{Domain, EnergyAtom, MultipeakonState, Peakon};
pub use initial_data::{approximate_multipeakon, Profile};
pub use metric::{distance, DistanceOptions, PlanKnots};
