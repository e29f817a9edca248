use icl_core::IclError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: IclError,
    },
    #[error("insufficient points")]
    InsufficientPoints,
}

impl From<IclError> for HarnessError {
    fn from(source: IclError) -> Self {
        HarnessError::Core {
            context: "setup".into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for icl_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| HarnessError::Core {
            context: what(),
            source,
        })
    }
}
