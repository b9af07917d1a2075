use std::fmt;
use std::path::PathBuf;

use glimpse_core::GlimpseError;

/// Invalid invocation: bad flags, malformed config, or stages out of order.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// An upstream artifact a stage declares as input is missing.
#[derive(Debug)]
pub struct DependencyError(pub PathBuf);

impl fmt::Display for DependencyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing upstream artifact {}", self.0.display())
    }
}

impl std::error::Error for DependencyError {}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DEPENDENCY: u8 = 3;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<DependencyError>().is_some() {
        return EXIT_DEPENDENCY;
    }
    EXIT_FAILURE
}

/// Config files that fail to load or validate are usage errors.
pub fn config_error(err: GlimpseError) -> anyhow::Error {
    UsageError(err.to_string()).into()
}
