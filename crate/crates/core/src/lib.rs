//! Consumption and portfolio policies under non-constant discounting.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod closed_policies;
pub mod discount;
pub mod error;
pub mod hermite;
pub mod interp;
pub mod io;
pub mod market;
pub mod mpe_oracle;
pub mod ode;
pub mod problem;
pub mod quad;
pub mod simulator;
pub mod soph_solver;

pub use discount::{DiscountKind, DiscountModel};
pub use error::{Error, Result};
pub use market::{MarketModel, UtilitySpec};
