use std::fmt;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Missing, malformed or mismatched data: exit 2.
    Data(String),
    /// Non-finite values or failed gradient checks: exit 3.
    Numerics(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerics(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerics(m) => write!(f, "numerics error: {m}"),
        }
    }
}

impl From<umnmt::Error> for CliError {
    fn from(e: umnmt::Error) -> Self {
        if e.is_numerics() {
            return CliError::Numerics(e.to_string());
        }
        match e {
            umnmt::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_kind_has_its_exit_code() {
        assert_eq!(CliError::Usage(String::new()).code(), 1);
        assert_eq!(CliError::Data(String::new()).code(), 2);
        assert_eq!(CliError::Numerics(String::new()).code(), 3);
    }

    #[test]
    fn library_and_io_errors_map_to_kinds() {
        let e: CliError = umnmt::Error::Config("bad".into()).into();
        assert_eq!(e.code(), 1);
        let e: CliError = umnmt::Error::Data("bad".into()).into();
        assert_eq!(e.code(), 2);
        let e: CliError = std::io::Error::other("gone").into();
        assert_eq!(e.code(), 2);
        assert!(e.to_string().starts_with("data error: "));
    }
}
