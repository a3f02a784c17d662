//! Synthetic data, set matching, losses and the optimisation loop.

mod grid;
mod loss;
mod matching;
mod optim;
mod run;
mod world;

pub use grid::{ablate, table_cells, CellResult, CellStats, Stat};
pub use loss::{
    batch_logic_loss, cell_scores, grid_targets, hoi_terms, match_scene, CellScores, HoiTerms, LogicConfig,
    LossWeights, SceneMatch,
};
pub use matching::hungarian_match;
pub use optim::{Adam, AdamConfig};
pub use run::{
    batch_objective, build_model, decode, descriptors, evaluate, run, step_gradients, train_step, Ablation,
    BatchObjective, Data, Detection, LossReport, Metrics, MetricsRow, Objective, RunConfig, RunOutput, Summary,
    score_scene, Tally,
};
pub use world::{
    GtInteraction, Manifest, Scene, SceneObject, ScenePurpose, SplitKind, SplitSpec, World, WorldConfig, DESK_RULES,
};
