use std::fmt;

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    NotFound(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::NotFound(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Runtime(_) => "runtime",
            Failure::NotFound(_) => "not-found",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::NotFound(m) => m,
        }
    }

    /// One JSON line for stderr.
    pub fn summary(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.message(),
        })
        .to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<ace_core::Error> for Failure {
    fn from(e: ace_core::Error) -> Self {
        match e {
            ace_core::Error::Config(m) => Failure::Config(m),
            ace_core::Error::NotFound(m) => Failure::NotFound(m),
            other => Failure::Runtime(first_line(other.to_string())),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::NotFound(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure::Runtime(first_line(e.to_string()))
    }
}

/// Drops any backtrace the tensor library appended.
fn first_line(message: String) -> String {
    match message.split_once('\n') {
        Some((head, _)) => head.to_string(),
        None => message,
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;
