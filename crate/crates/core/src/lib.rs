//! A cycle-approximate, functionally exact simulator of an orchestrated
//! dataflow NPU, with a graph compiler that performs space-time scheduling
//! onto the simulated machine.

pub mod bench;
pub mod cli;
pub mod compiler;
pub mod fabric;
pub mod funits;
pub mod hbsm;
pub mod machine;
pub mod program;
pub mod sim;
pub mod isa;
pub mod sync;
pub mod text;
pub mod walker;
