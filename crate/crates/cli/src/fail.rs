//! Uniform error-to-exit-code mapping: 1 for IO and parse failures, 2 for
//! precondition violations, 3 for numeric breakdown. Every stage failure
//! carries the stage name so the message pinpoints where the pipeline
//! stopped.

use reloc_core::embedding::EmbeddingError;
use reloc_core::evaluate::EvaluateError;
use reloc_core::geometry::GeometryError;
use reloc_core::graph::GraphError;
use reloc_core::pose_graph::PoseGraphError;
use reloc_core::scene::SceneError;
use reloc_core::similarity::SimilarityError;
use reloc_core::ErrorCategory;

pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct Fail {
    pub stage: &'static str,
    pub code: i32,
    pub message: String,
}

pub fn usage(stage: &'static str, message: impl Into<String>) -> Fail {
    Fail {
        stage,
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

fn category_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Io => EXIT_IO,
        ErrorCategory::Validation => EXIT_VALIDATION,
        ErrorCategory::Numeric => EXIT_NUMERIC,
    }
}

/// Errors a stage can surface, with their process exit code.
pub trait Exitable: std::fmt::Display {
    fn exit_code(&self) -> i32;
}

macro_rules! categorized {
    ($($ty:ty),* $(,)?) => {$(
        impl Exitable for $ty {
            fn exit_code(&self) -> i32 {
                category_code(self.category())
            }
        }
    )*};
}

categorized!(
    SceneError,
    GeometryError,
    SimilarityError,
    EmbeddingError,
    GraphError,
    PoseGraphError,
    EvaluateError,
);

impl Exitable for std::io::Error {
    fn exit_code(&self) -> i32 {
        EXIT_IO
    }
}

pub trait StageExt<T> {
    /// Tags an error with the stage it occurred in and its exit code.
    fn stage(self, name: &'static str) -> Result<T, Fail>;
}

impl<T, E: Exitable> StageExt<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, Fail> {
        self.map_err(|e| Fail {
            stage: name,
            code: e.exit_code(),
            message: e.to_string(),
        })
    }
}
