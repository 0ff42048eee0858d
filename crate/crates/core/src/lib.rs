//! Sequential search for overconfident unknown unknowns in a black-box
//! classifier's test-set predictions.
//!
//! An unknown unknown is a point the classifier labels with high confidence
//! but gets wrong. A search picks one point at a time for an oracle to label,
//! aiming to find many such points across the feature space within a fixed
//! budget. The main strategy greedily maximizes a facility-locations utility;
//! three baselines (most-uncertain, coverage-greedy, and a cluster bandit)
//! are provided for comparison, together with the standardized discovery
//! ratio, overconfidence profiles, and a Monte Carlo comparison harness.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod kmeans;
pub mod oracle;
pub mod phi;
pub mod search;
pub mod synthetic;
pub mod utility;

pub use dataset::{
    euclidean_distance, load_testset, sample_testset, write_testset, DistanceMatrix, Format,
    GroundTruth, PointRecord, TestPoint, TestSet,
};
pub use error::{Error, Result};
pub use oracle::{Oracle, OracleKind, ScriptedOracle, SimulatedOracle};
pub use phi::{predict_phi, prior_phi, PhiModel};
pub use search::{run_search, QueryTrace, Search, SearchConfig, StepRecord, Strategy};
pub use utility::{facility_utility, fl_gain, SearchState, UtilityValue};
