use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric input error: {0}")]
    Numeric(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("label error: expected class in {{1,2,3}}, got {0}")]
    Label(i64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: batchnorm train mode needs N >= 2, got N = {0}")]
    DegenerateBatch(usize),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("undefined AUC: no class has both positive and negative examples")]
    UndefinedAuc,

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {file} at byte {offset}: {msg}")]
    Format {
        file: String,
        offset: u64,
        msg: String,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
