//! Multi-scale small-area estimation of poverty rates.
//!
//! The pipeline runs from survey microdata to coherent, benchmarked
//! estimates at two nested spatial levels:
//!
//! 1. [`survey`]: Hájek direct estimates, design effects and effective
//!    sample sizes for areas and sub-areas.
//! 2. [`eb`]: the Extended Beta likelihood kernel.
//! 3. [`models`]: log-posteriors of the shared multi-scale, sub-area and
//!    independent multi-scale models, with analytic gradients.
//! 4. [`sampler`]: NUTS with warm-up adaptation, diagnostics and PSIS-LOO.
//! 5. [`posterior`]: population-proportion draws, aggregation and summaries.
//! 6. [`benchmark`]: Bregman-loss posterior projection onto a national total.
//! 7. [`simulate`]: design-based simulation study.

pub mod benchmark;
pub mod eb;
pub mod error;
pub mod models;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod survey;

pub use error::{Error, Result};
