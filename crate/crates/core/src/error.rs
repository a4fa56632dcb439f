use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh request: {0}")]
    Mesh(String),

    #[error("ellipticity violation at vertex {vertex}: eigenvalue {eigenvalue} outside [{lo}, {hi}]")]
    Ellipticity {
        vertex: usize,
        eigenvalue: f64,
        lo: f64,
        hi: f64,
    },

    #[error("bound violation at vertex {vertex}: value {value} outside [{lo}, {hi}]")]
    Bound {
        vertex: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("field does not match mesh: {0}")]
    Mismatch(String),

    #[error("shift {shift} is within the guard band of eigenvalue {nearest} (distance {distance:e})")]
    NearSingularShift {
        shift: f64,
        nearest: f64,
        distance: f64,
    },

    #[error("LAPACK routine {routine} failed with info = {info}")]
    Lapack { routine: &'static str, info: i32 },

    #[error("requested {requested} modes but only {available} interior dofs exist")]
    TooManyModes { requested: usize, available: usize },

    #[error("exponent out of range: {0}")]
    Exponent(String),

    #[error("series diverges in this regime: {0}")]
    DivergentRegime(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("time step violates stability limit: dt = {dt} > {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("energy blow-up at step {step}: {energy:e} exceeds {bound:e}")]
    EnergyBlowup { step: usize, energy: f64, bound: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by the numerical pipeline rather than by a bad request.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Lapack { .. }
                | Error::Quadrature(_)
                | Error::EnergyBlowup { .. }
                | Error::NearSingularShift { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
