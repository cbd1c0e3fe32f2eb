//! One-shot architecture search for lightweight Siamese trackers.
//!
//! The crate covers the genome encoding of the backbone/head search space,
//! analytic cost counting under MACs and parameter budgets, a weight-sharing
//! store with per-path views, a small CPU tensor engine for shape and cost
//! verification, fitness evaluators, and constrained evolutionary search with
//! an exhaustive oracle for reduced spaces.

pub mod cost;
pub mod error;
pub mod evaluator;
pub mod evolution;
pub mod par;
pub mod report;
pub mod space;
pub mod supernet;
pub mod tensor;

pub use cost::{genome_cost, Budget, BudgetPreset, Cost};
pub use error::{Error, Result};
pub use evaluator::{Evaluator, LookupEvaluator, ProxyEvaluator, SyntheticEvaluator};
pub use evolution::{brute_force, run_search, SearchConfig, SearchResult};
pub use par::Execution;
pub use space::{Genome, SpaceDescriptor};
pub use supernet::WeightStore;
