//! A simulated VF registry with a lookup-timing side channel, deferred and
//! synchronous reclamation, and a buddy page arena that can be fragmented
//! into failure.

pub mod allocmodel;
pub mod analyze;
pub mod cli;
pub mod exec;
pub mod grace;
pub mod harness;
pub mod probe;
pub mod registry;
pub mod world;

pub use allocmodel::{AllocError, AllocProfile, ArenaConfig, BuddyAllocator, OomReport};
pub use analyze::{ClassifierConfig, Occupancy, OccupancyReport, RegressParams, RegressionReport};
pub use exec::Execution;
pub use grace::{GraceClock, ReclamationPolicy};
pub use harness::{ChurnConfig, ChurnReport, Mode};
pub use probe::{ClockSource, CostModel, ProbeConfig, TimingSample};
pub use registry::{VfId, VfTable};
pub use world::{World, WorldConfig};
