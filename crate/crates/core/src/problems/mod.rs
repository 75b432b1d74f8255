//! Built-in problem families.
//!
//! Each family implements [`crate::oracles::ProblemOracles`]. The quadratic
//! family has closed forms for everything and anchors most solver tests; the
//! offset adapter shifts outer values by task constants without touching
//! gradients; the sinusoid suite is the few-shot regression benchmark with a
//! shared network embedding.

pub mod idx;
pub mod linrep;
pub mod offset;
pub mod quadratic;
pub mod sinusoid;
pub mod trmaml;
