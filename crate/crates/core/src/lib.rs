//! Masked-diffusion samplers and the exact oracles used to check them.
//!
//! * [`dist`]: categorical distributions and the [`ProductModel`] interface.
//! * [`gumbel`]: Gumbel-top-k selection and its prefix law.
//! * [`rounds`]: single MaskGIT and moment rounds, sampled and exact.
//! * [`schedules`]: unmasking sizes, temperatures, half steps.
//! * [`policies`]: ordering policies for choose-then-sample.
//! * [`cts`]: multi-round drivers, including partial KV caching.
//! * [`oracle`]: joint tables, exact choose-then-sample laws, KL terms.
//! * [`nanoformer`]: a tiny seeded bidirectional transformer.
//! * [`metrics`]: total variation and sequence entropy.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cts;
pub mod dist;
pub mod error;
pub mod gumbel;
pub mod metrics;
pub mod nanoformer;
pub mod oracle;
pub mod policies;
pub mod rounds;
pub mod schedules;
pub mod seeds;

pub use cts::{GammaSchedule, GenerationTrace, MaskState, RoundRecord};
pub use dist::{Categorical, ProductModel};
pub use error::{Error, Result};
pub use nanoformer::{NanoConfig, Nanoformer, TransformerParams};
pub use oracle::JointTable;
pub use schedules::{ScheduleKind, UnmaskSchedule};
