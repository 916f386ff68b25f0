// SPDX-License-Identifier: Apache-2.0

//! Design-based estimation of annual carbon-stock loss from panel
//! forest-inventory samples, with forest-cover-loss maps and airborne laser
//! heights as auxiliary data.

pub mod assisted;
pub mod design;
pub mod estimate;
pub mod error;
pub mod grid;
pub mod models;
pub mod sim;
pub mod survey;

pub use error::{Error, Result};
