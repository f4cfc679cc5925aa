//! Organizational containers and the information items they hold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::ids::{ObjectRef, Timestamp};

pub fn validate_slug(slug: &str) -> Result<(), Error> {
    let ok = (1..=64).contains(&slug.len())
        && slug
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidSlug(slug.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub id: String,
    pub slug: String,
    pub title: String,
    pub created_at: Timestamp,
    pub members: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModuleKind {
    Documents,
    Content,
    Tickets,
    Planning,
    Projects,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Documents => "DOCUMENTS",
            ModuleKind::Content => "CONTENT",
            ModuleKind::Tickets => "TICKETS",
            ModuleKind::Planning => "PLANNING",
            ModuleKind::Projects => "PROJECTS",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownModuleKind(pub String);

impl FromStr for ModuleKind {
    type Err = UnknownModuleKind;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DOCUMENTS" => Ok(ModuleKind::Documents),
            "CONTENT" => Ok(ModuleKind::Content),
            "TICKETS" => Ok(ModuleKind::Tickets),
            "PLANNING" => Ok(ModuleKind::Planning),
            "PROJECTS" => Ok(ModuleKind::Projects),
            other => Err(UnknownModuleKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleInstance {
    pub id: String,
    pub workspace_id: String,
    pub kind: ModuleKind,
    pub slug: String,
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoObject {
    pub id: String,
    #[serde(rename = "ref")]
    pub object_ref: ObjectRef,
    pub module_id: String,
    pub title: String,
    pub body: String,
    pub context: BTreeMap<String, String>,
    pub created_by: String,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub annotations: Vec<Annotation>,
}

impl InfoObject {
    /// Inserts keeping annotations sorted by `(created_at, id)`.
    pub(crate) fn insert_annotation(&mut self, annotation: Annotation) {
        let at = self
            .annotations
            .partition_point(|a| a.sort_key() <= annotation.sort_key());
        self.annotations.insert(at, annotation);
    }

    pub fn bump(&mut self, at: Timestamp) {
        if at > self.updated_at {
            self.updated_at = at;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationKind {
    Action,
    Information,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionStatus {
    Open,
    Done,
}

/// Ticket entry. ACTION entries carry an assignee and a status, INFORMATION
/// entries carry neither; the constructors below are the only way in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub kind: AnnotationKind,
    pub author: String,
    pub text: String,
    pub created_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignee: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ActionStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_by: Option<String>,
}

impl Annotation {
    pub fn new(
        id: String,
        kind: AnnotationKind,
        author: &str,
        text: &str,
        created_at: Timestamp,
        assignee: Option<&str>,
    ) -> Result<Self, Error> {
        let (assignee, status) = match (kind, assignee) {
            (AnnotationKind::Action, Some(a)) => (Some(a.to_string()), Some(ActionStatus::Open)),
            (AnnotationKind::Action, None) => return Err(Error::ActionWithoutAssignee),
            (AnnotationKind::Information, Some(_)) => return Err(Error::InformationWithAssignee),
            (AnnotationKind::Information, None) => (None, None),
        };
        Ok(Annotation {
            id,
            kind,
            author: author.to_string(),
            text: text.to_string(),
            created_at,
            assignee,
            status,
            resolved_by: None,
        })
    }

    pub fn sort_key(&self) -> (Timestamp, &str) {
        (self.created_at, &self.id)
    }

    pub fn is_open_action(&self) -> bool {
        self.kind == AnnotationKind::Action && self.status == Some(ActionStatus::Open)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanningEvent {
    pub id: String,
    pub workspace_id: String,
    pub title: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub participants: BTreeSet<String>,
}

impl PlanningEvent {
    /// Half-open overlap with `[start, end)`.
    pub fn overlaps(&self, start: Timestamp, end: Timestamp) -> bool {
        self.start < end && start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    Todo,
    Doing,
    Done,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Todo => "TODO",
            TaskStatus::Doing => "DOING",
            TaskStatus::Done => "DONE",
        }
    }

    /// Forward-only: TODO→DOING, DOING→DONE, TODO→DONE.
    pub fn can_move_to(self, next: TaskStatus) -> bool {
        matches!(
            (self, next),
            (TaskStatus::Todo, TaskStatus::Doing)
                | (TaskStatus::Doing, TaskStatus::Done)
                | (TaskStatus::Todo, TaskStatus::Done)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectTask {
    pub id: String,
    pub project_id: String,
    pub title: String,
    pub assignee: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub due: Option<String>,
}
