use thiserror::Error;

use crate::query::ParseError;

/// Broad class of a domain error, used by transports to pick a status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    NotFound,
    Conflict,
    Internal,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("slug {0:?} is already used")]
    DuplicateSlug(String),
    #[error("slug {0:?} must match ^[a-z0-9-]{{1,64}}$")]
    InvalidSlug(String),
    #[error("unknown workspace {0}")]
    UnknownWorkspace(String),
    #[error("unknown module {0}")]
    UnknownModule(String),
    #[error("{actor} is not a member of workspace {workspace}")]
    NotAMember { actor: String, workspace: String },
    #[error("unknown object {0}")]
    UnknownObject(String),
    #[error("context keys must be non-empty")]
    InvalidContext,
    #[error("ACTION annotations need an assignee")]
    ActionWithoutAssignee,
    #[error("INFORMATION annotations cannot have an assignee")]
    InformationWithAssignee,
    #[error("unknown annotation {0}")]
    UnknownAnnotation(String),
    #[error("annotation {0} is not an ACTION")]
    NotAnAction(String),
    #[error("action {0} is already done")]
    AlreadyDone(String),
    #[error("range start must be before range end")]
    InvalidRange,
    #[error("task cannot move from {from} to {to}")]
    IllegalTransition { from: String, to: String },
    #[error("unknown task {0}")]
    UnknownTask(String),

    #[error(transparent)]
    Query(#[from] ParseError),
    #[error("unknown watch {0}")]
    UnknownWatch(String),

    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("document {doc_id} has no version {version}")]
    UnknownVersion { doc_id: String, version: u64 },
    #[error("stored content of {doc_id} v{version} does not match its hash")]
    CorruptContent { doc_id: String, version: u64 },
    #[error("version conflict, current version is {current_version}")]
    VersionConflict { current_version: u64 },
    #[error("this node is not the origin of document {0}")]
    NotOrigin(String),
    #[error("module {module} has kind {kind}, expected DOCUMENTS")]
    WrongModuleKind { module: String, kind: String },

    #[error("unknown inbox entry {0}")]
    UnknownInboxEntry(String),

    #[error("invalid node id {0:?}")]
    InvalidNodeId(String),
    #[error("invalid object ref {0:?}")]
    InvalidObjectRef(String),
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),

    #[error("config file not found: {0}")]
    ConfigNotFound(String),
    #[error("invalid config at {path}: {message}")]
    ConfigInvalid { path: String, message: String },
    #[error("journal corrupt at line {line}: {message}")]
    JournalCorrupt { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("store is poisoned after a failed journal write; recover from disk")]
    Poisoned,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Stable snake_case code surfaced over the API and the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateSlug(_) => "duplicate_slug",
            Error::InvalidSlug(_) => "invalid_slug",
            Error::UnknownWorkspace(_) => "unknown_workspace",
            Error::UnknownModule(_) => "unknown_module",
            Error::NotAMember { .. } => "not_a_member",
            Error::UnknownObject(_) => "unknown_object",
            Error::InvalidContext => "invalid_context",
            Error::ActionWithoutAssignee => "action_without_assignee",
            Error::InformationWithAssignee => "information_with_assignee",
            Error::UnknownAnnotation(_) => "unknown_annotation",
            Error::NotAnAction(_) => "not_an_action",
            Error::AlreadyDone(_) => "already_done",
            Error::InvalidRange => "invalid_range",
            Error::IllegalTransition { .. } => "illegal_transition",
            Error::UnknownTask(_) => "unknown_task",
            Error::Query(e) => e.code(),
            Error::UnknownWatch(_) => "unknown_watch",
            Error::UnknownDocument(_) => "unknown_document",
            Error::UnknownVersion { .. } => "unknown_version",
            Error::CorruptContent { .. } => "corrupt_content",
            Error::VersionConflict { .. } => "conflict",
            Error::NotOrigin(_) => "not_origin",
            Error::WrongModuleKind { .. } => "wrong_module_kind",
            Error::UnknownInboxEntry(_) => "unknown_inbox_entry",
            Error::InvalidNodeId(_) => "invalid_node_id",
            Error::InvalidObjectRef(_) => "invalid_object_ref",
            Error::InvalidTimestamp(_) => "invalid_timestamp",
            Error::ConfigNotFound(_) => "config_not_found",
            Error::ConfigInvalid { .. } => "config_invalid",
            Error::JournalCorrupt { .. } => "journal_corrupt",
            Error::Io(_) => "internal",
            Error::Poisoned => "internal",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnknownWorkspace(_)
            | Error::UnknownModule(_)
            | Error::UnknownObject(_)
            | Error::UnknownAnnotation(_)
            | Error::UnknownTask(_)
            | Error::UnknownWatch(_)
            | Error::UnknownDocument(_)
            | Error::UnknownVersion { .. }
            | Error::UnknownInboxEntry(_)
            | Error::ConfigNotFound(_) => ErrorKind::NotFound,
            Error::VersionConflict { .. } => ErrorKind::Conflict,
            Error::CorruptContent { .. }
            | Error::JournalCorrupt { .. }
            | Error::Io(_)
            | Error::Poisoned => ErrorKind::Internal,
            _ => ErrorKind::Validation,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
