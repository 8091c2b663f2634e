pub mod ablation;
pub mod anchors;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod render;
pub mod scene_data;
pub mod sensor;
pub mod trainer;
pub mod trajectory;

/// Compiles and runs the snippets of the book under `book/src`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/scenes.md")]
    struct Scenes;
    #[doc = include_str!("../../../book/src/anchors.md")]
    struct Anchors;
    #[doc = include_str!("../../../book/src/trajectory.md")]
    struct Trajectory;
    #[doc = include_str!("../../../book/src/forecasting.md")]
    struct Forecasting;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
