//! Hardening transpiler for WebAssembly text-format modules.
//!
//! Parses the flat text format into an IR, injects per-function stack
//! canaries and randomized stack offsets, and runs the result on a small
//! instruction-counting interpreter.

pub mod corpus;
pub mod interp;
pub mod ir;
pub mod overhead;
pub mod passes;
pub mod rng;
pub mod wat;
