use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("region of {side_m} m cannot hold a single macro site at density {density}")]
    RegionTooSmall { side_m: f64, density: f64 },

    #[error("degenerate deployment: {0}")]
    EmptyDeployment(String),

    #[error("user {user} has no positive-rate path at the requested blank fraction")]
    InfeasibleUser { user: usize },

    #[error("solver did not converge within {iters} sweeps (max residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("instance too large for exhaustive oracle: {n_users} users x {n_bs} BSs")]
    InstanceTooLarge { n_users: usize, n_bs: usize },

    #[error("unknown association scheme `{0}`")]
    UnknownScheme(String),

    #[error("empty rate vector")]
    EmptyRates,

    #[error("non-positive reference throughput {0}")]
    NonPositiveReference(f64),

    #[error("malformed dump at line {line}: {msg}")]
    ParseDump { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("failed to parse config: {0}")]
    Toml(String),
}
