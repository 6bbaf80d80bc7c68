//! Small-scale autonomous racing stack: vehicle model, track geometry,
//! a box-constrained NLP solver with ALM/penalty outer loop, the single-shooting
//! NMPC built on it, parameter identification and a closed-loop harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod controller;
pub mod dynamics;
pub mod harness;
pub mod ident;
pub mod solver;
pub mod track;
