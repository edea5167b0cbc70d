//! Outer ellipsoidal bounds on the reachable set of discrete-time LTI systems driven by
//! individually bounded inputs, and synthesis of tightened actuator bounds that keep the
//! reachable set away from a union of dangerous half-spaces.

pub mod analysis;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod platoon;
pub mod reach;
pub mod sdp;
pub mod synthesis;

pub use error::{Error, Result};
pub use model::{
    boundedness_diagnostic, ellipsoid_volume, hyperplane_distance, input_weight, normalize_halfspace, Boundedness,
    BoundednessVerdict, DangerSet, Ellipsoid, Halfspace, InputBounds, LtiSystem, Sense,
};
