//! Potential-based reward engineering for offline clinical reinforcement
//! learning: reward specs, fitness scoring, Pareto selection and off-policy
//! evaluation.

pub mod features;
pub mod fitness;
pub mod generate;
pub mod llm;
pub mod model;
pub mod ope;
pub mod pareto;
pub mod pipeline;
pub mod reward;
pub mod synth;
pub mod util;

pub use fitness::{CompMetricConfig, FitnessVector};
pub use model::{FeatureSchema, FeatureType, Observation, Step, Trajectory, TrajectoryDataset};
pub use ope::{BootstrapConfig, PolicyProbTable, WisEstimate};
pub use pareto::{Candidate, ParetoResult};
pub use pipeline::{run_pipeline, PipelineConfig, RunOptions, Stage};
pub use reward::{RewardSpec, RewardTrace, SurvivalConfig};
