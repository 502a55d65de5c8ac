use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("laplacian is singular on the periodic lattice (zero-mode policy is `reject`)")]
    SingularLaplacian,

    #[error("requested {requested} modes but the lattice carries only {available} transverse modes")]
    Truncation { requested: usize, available: usize },

    #[error("dense operators are limited to {max} sites, lattice has {sites}")]
    TooLargeForDense { sites: usize, max: usize },

    #[error("non-finite drift at path {path}, step {step}")]
    NonFiniteDrift { path: usize, step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient support: density is below the floor at every probe point")]
    InsufficientSupport,

    #[error("norm drift {drift:e} exceeds 1e-6; integrator misconfigured")]
    NormDrift { drift: f64 },

    #[error("commutator identity needs the full basis ({available} modes), got {kept}")]
    TruncatedBasis { kept: usize, available: usize },

    #[error("too few samples: got {0}")]
    TooFewSamples(usize),

    #[error("particles {0} and {1} coincide; Coulomb potential is singular")]
    CoincidentParticles(usize, usize),

    #[error("phase unwrap failed: vortex detected at grid cell {0:?}")]
    Vortex(Vec<usize>),

    #[error("degenerate spectrum: level gap {gap:e} below 1e-10")]
    Degenerate { gap: f64 },

    #[error("not adiabatic: leakage {leakage:e} exceeds target {target:e} (populations {populations:?})")]
    NotAdiabatic {
        leakage: f64,
        target: f64,
        populations: Vec<f64>,
    },

    #[error("loop does not close after deformation: defect {0:e}")]
    OpenLoop(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
