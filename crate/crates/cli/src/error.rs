use std::fmt;

use poselab_core::{Error, ErrorKind};
use serde::Serialize;

/// Failure class of a command or request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Usage,
    Validation,
    NotFound,
    Conflict,
    Geometric,
    Io,
}

/// An error as reported to users: a stable name, a message and, for
/// validation failures, the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub class: Class,
    pub name: String,
    pub message: String,
    pub field: Option<String>,
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct Body<'a> {
    name: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

#[derive(Serialize)]
struct Envelope<'a> {
    schema_version: u32,
    error: Body<'a>,
}

impl CliError {
    pub fn new(class: Class, name: impl Into<String>, message: impl Into<String>) -> Self {
        Self { class, name: name.into(), message: message.into(), field: None }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Class::Usage, "Usage", message)
    }

    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: Some(field.into()), ..Self::new(Class::Validation, "InvalidInput", message) }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(Class::Conflict, "Conflict", message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            Class::Usage => 1,
            Class::Validation | Class::NotFound | Class::Conflict => 2,
            Class::Geometric => 3,
            Class::Io => 4,
        }
    }

    pub fn http_status(&self) -> u16 {
        match self.class {
            Class::Usage | Class::Validation => 400,
            Class::NotFound => 404,
            Class::Conflict => 409,
            Class::Geometric => 422,
            Class::Io => 500,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(Envelope {
            schema_version: poselab_core::SCHEMA_VERSION,
            error: Body { name: &self.name, message: &self.message, field: self.field.as_deref() },
        })
        .expect("plain struct")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let class = match e.kind() {
            ErrorKind::Validation => Class::Validation,
            ErrorKind::NotFound => Class::NotFound,
            ErrorKind::Geometric => Class::Geometric,
            ErrorKind::Io => Class::Io,
        };
        let field = match &e {
            Error::InvalidInput { field, .. } => Some(field.clone()),
            _ => None,
        };
        let message = match &e {
            Error::InvalidInput { reason, .. } => reason.clone(),
            other => other.to_string(),
        };
        Self { class, name: e.name().to_string(), message, field }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Class::Io, "Io", e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_keep_name_and_field() {
        let e: CliError = Error::invalid("keypoints[2].keypoint_id", "unknown keypoint `kp99`").into();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.http_status(), 400);
        let j = e.to_json();
        assert_eq!(j["error"]["name"], "InvalidInput");
        assert_eq!(j["error"]["field"], "keypoints[2].keypoint_id");
        assert_eq!(j["schema_version"], 1);

        let g: CliError = Error::NoTriangulableKeypoints.into();
        assert_eq!((g.exit_code(), g.http_status()), (3, 422));
        assert!(g.to_json()["error"].get("field").is_none());
    }
}
