//! Brute-force references used to check the differentiable machinery.
//!
//! Nothing here calls the graph operations it is meant to verify: finite
//! differences only evaluate losses, the runtime lookup reads the table
//! directly, and the sliced reference network runs on plain loops.

mod enumerate;
mod gradcheck;
mod sliced;

pub use enumerate::{brute_force_runtime, enumerate_architectures, ENUMERATION_BUDGET};
pub use gradcheck::{
    check_gradients, finite_difference_grad, gradcheck_nas_loss, FailingCoordinate, GradCheckReport, GradCheckSettings,
    ParamReport, Probe,
};
pub use sliced::{build_sliced_reference, ReferenceLayer, ReferenceNetwork};
