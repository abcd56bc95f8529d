//! Auto-scheduling of sparse tensor contractions with a branched loop
//! structure: enumerate every valid loop tree, cost each one symbolically and
//! prune down to the schedule worth running.

pub mod expr;
pub mod igraph;
pub mod enumerate;
pub mod cost;
pub mod exec;
pub mod smt;
pub mod prune;
pub mod emit;
