//! CLI failures and their exit codes.

use duet_core::body::BodyError;
use duet_core::contact::ContactError;
use duet_core::gauss::ply::PlyError;
use duet_core::gauss::GaussError;
use duet_core::guidance::GuidanceError;
use duet_core::hexplane::HexPlaneError;
use duet_core::opt::OptError;
use duet_core::render::{ImageError, RenderError};
use duet_core::wire::TransportError;
use thiserror::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONTACT_NOT_FOUND: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("contact not found: {0}")]
    ContactNotFound(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("provider transport: {0}")]
    Transport(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ContactNotFound(_) => EXIT_CONTACT_NOT_FOUND,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Other(_) => EXIT_OTHER,
        }
    }

    pub fn io(what: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Other(format!("{what}: {e}"))
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Transport(e.to_string())
    }
}

impl From<GuidanceError> for CliError {
    fn from(e: GuidanceError) -> Self {
        match e {
            GuidanceError::Transport(t) => t.into(),
            GuidanceError::Poisoned => CliError::Numeric(e.to_string()),
            GuidanceError::Render(r) => r.into(),
            GuidanceError::Shape { .. } => CliError::Transport(e.to_string()),
            GuidanceError::Timestep { .. } | GuidanceError::Schedule(_) | GuidanceError::TokenScale { .. } => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Gauss(_) | RenderError::Camera(_) => CliError::Validation(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ContactError> for CliError {
    fn from(e: ContactError) -> Self {
        match e {
            ContactError::NotFound { .. } => CliError::ContactNotFound(e.to_string()),
            ContactError::Transport(t) => t.into(),
            ContactError::Render(r) => r.into(),
            ContactError::Resolution { .. } => CliError::Transport(e.to_string()),
            ContactError::Length(..) | ContactError::Image(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OptError> for CliError {
    fn from(e: OptError) -> Self {
        match e {
            OptError::Diverged { .. } | OptError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            OptError::Guidance(g) => g.into(),
            OptError::Render(r) => r.into(),
            OptError::Io(_) => CliError::Other(e.to_string()),
            OptError::Shape(_) | OptError::Config(_) | OptError::Version { .. } | OptError::Input(_) | OptError::Motion(_) | OptError::Body(_) | OptError::Gauss(_) => {
                CliError::Validation(e.to_string())
            }
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}

validation_from!(BodyError, PlyError, GaussError, HexPlaneError);

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Other(e.to_string())
    }
}
