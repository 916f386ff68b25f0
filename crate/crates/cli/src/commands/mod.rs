// SPDX-License-Identifier: Apache-2.0

pub mod aggregate;
pub mod estimate;
pub mod fit;
pub mod report;
pub mod simulate;
