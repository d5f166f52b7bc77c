//! Digital twin of a laser hot-wire directed energy deposition process:
//! melt-pool vision, dynamic identification of parameter-to-signature models,
//! signature-to-property surrogates, a virtual plant and closed-loop control.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod optim;
pub mod plant;
pub mod signals;
pub mod surrogate;
pub mod sysid;
pub mod vision;

pub use error::{Error, Result};
