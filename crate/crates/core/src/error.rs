use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("face with {0} vertices cannot be triangulated")]
    NonTriangle(usize),

    #[error("vertex index {index} out of range (vertex count {count})")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("face {0} repeats a vertex index")]
    RepeatedIndex(usize),

    #[error("edge ({0}, {1}) is shared by more than two faces")]
    NonManifold(usize, usize),

    #[error("edge ({0}, {1}) lies on a boundary; a closed mesh is required")]
    Boundary(usize, usize),

    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("edge ({0}, {1}) has zero length in the reference shape")]
    ZeroEdge(usize, usize),

    #[error("eigensolver did not converge: {0}")]
    Convergence(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("invalid target class {target} for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },

    #[error("no successful attack found after {rounds} rounds (largest c = {max_c})")]
    NoAttackFound { rounds: usize, max_c: f64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("split `{0}` has no entries")]
    EmptySplit(String),

    #[error("mesh `{path}` has {got} vertices / {got_faces} faces, expected {expected} / {expected_faces}")]
    InconsistentTopology {
        path: String,
        expected: usize,
        got: usize,
        expected_faces: usize,
        got_faces: usize,
    },

    #[error("cannot derive a label from `{0}`")]
    LabelParse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Grad(#[from] crate::grad::GradError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
