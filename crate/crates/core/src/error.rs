use thiserror::Error;

/// Crate-wide error type. Variants mirror how failures are reported to the
/// operator: bad inputs are rejected with a message, numerical problems carry
/// the offending index, transport violations carry epoch and edge, and
/// worker failures are tagged with their rank.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside an operation's contract (shape mismatch, unknown name,
    /// unsupported case).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A non-finite value surfaced where finite math was required.
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    /// Run configuration failed validation; `path` is the offending field.
    #[error("config validation failed at `{path}`: {msg}")]
    Validation { path: String, msg: String },

    /// A transport peer broke protocol.
    #[error("protocol violation (epoch {epoch}, edge {edge}): {msg}")]
    Protocol { epoch: u64, edge: u32, msg: String },

    /// `wait_all` timed out. `unmatched` lists the outstanding
    /// (epoch, edge, kind) triples for post-mortem.
    #[error("deadlock suspected after {timeout_s:.1}s; unmatched: {unmatched}")]
    Deadlock { timeout_s: f64, unmatched: String },

    /// Socket-mode startup failure (rendezvous, handshake, listener).
    #[error("startup failed: {0}")]
    Startup(String),

    /// A worker failed; wraps the underlying error with its rank.
    #[error("rank {rank}: {source}")]
    Rank {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub fn validation(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), msg: msg.into() }
    }

    pub fn at_rank(self, rank: usize) -> Self {
        Error::Rank { rank, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
