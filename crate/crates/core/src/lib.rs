//! Span extraction from multi-paragraph documents under mixed fine and
//! coarse supervision.

pub mod data;
pub mod diff;
pub mod model;
pub mod objectives;
pub mod eval;
pub mod training;
pub mod experiment;
