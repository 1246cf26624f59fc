//! Multi-period economic dispatch with hydro reservoirs and batteries on a
//! DC network, locational marginal prices, and settlement of financial
//! transmission and storage rights.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod casefile;
pub mod dispatch;
pub mod grid;
pub mod hydro;
pub mod qp;
pub mod report;
pub mod reservoir;
pub mod rights;
