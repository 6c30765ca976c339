use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("basis columns are not linearly independent (smallest/largest singular value {0:e})")]
    RankDeficient(f64),

    /// Gram matrix condition number exceeded the inverse rank tolerance.
    #[error("singular Gram matrix (condition number {0:e})")]
    SingularGram(f64),

    #[error("matrix is not diagonalizable at working precision (eigenvector condition {0:e})")]
    NonDiagonalizable(f64),

    #[error("degenerate subspace: fidelity eigenvalue {0:e} is negative beyond tolerance")]
    DegenerateSubspace(f64),

    #[error("singular input matrix")]
    SingularInput,

    #[error("lattice is not bipartite ({0}x{1})")]
    NonBipartite(usize, usize),

    #[error("invalid momentum: {0}")]
    InvalidMomentum(String),

    #[error("amplitude overflow: log-magnitude {0:e} exceeds bound")]
    AmplitudeOverflow(f64),

    #[error("singular local matrix (log|det| = {0})")]
    SingularLocalMatrix(f64),

    #[error("could not initialise a nonsingular tuple after {0} attempts")]
    InitFailure(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch too small for a covariance estimate ({0} samples)")]
    TooFewSamples(usize),

    #[error("mean overlap matrix is singular; subspaces are near-orthogonal")]
    SingularMeanOverlap,

    #[error("scalar energy {0:e} too close to zero for a V-score")]
    ZeroEnergy(f64),

    #[error("matrix is not positive definite even after the diagonal shift")]
    IndefiniteMatrix,

    #[error("geometric tensor of the coordinate vectors is singular")]
    SingularQgt,

    #[error("Krylov iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("sector dimension {0} too large for tuple enumeration")]
    SectorTooLarge(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("descent check failed: g.dtheta = {0:e}")]
    NotDescent(f64),

    #[error("checkpoint config hash mismatch")]
    HashMismatch,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
