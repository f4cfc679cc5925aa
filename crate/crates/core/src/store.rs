//! Node state and the single-writer store that journals every committed
//! command before handing back its result.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::docstore::{DocStore, Document, DocumentVersion, ProvenanceEvent};
use crate::error::{Error, Result};
use crate::ids::{IdGen, NodeId, ObjectRef, Timestamp};
use crate::inbox::{Inbox, InboxEntry, InboxKind, EVERYONE};
use crate::journal::{self, Command, JournalRecord, JournalSink};
use crate::model::{
    validate_slug, ActionStatus, Annotation, AnnotationKind, InfoObject, ModuleInstance,
    ModuleKind, PlanningEvent, ProjectTask, TaskStatus, Workspace,
};
use crate::query::{parse_query, Index, IndexDelta, IndexedDoc, QueryAst, WatchQuery, WatchRegistry};

pub const DEFAULT_TICKETS_SLUG: &str = "tickets";

/// One ranked local search hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalHit {
    pub object_id: String,
    pub object_ref: ObjectRef,
    pub title: String,
    pub snippet: String,
    pub score: u64,
}

/// Result of a committed object write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectCommit {
    pub object: InfoObject,
    pub delta: IndexDelta,
    pub notifications: Vec<InboxEntry>,
}

/// Everything a node knows, minus the derived index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    node: NodeId,
    ids: IdGen,
    workspaces: BTreeMap<String, Workspace>,
    workspace_slugs: BTreeMap<String, String>,
    modules: BTreeMap<String, ModuleInstance>,
    objects: BTreeMap<String, InfoObject>,
    annotation_owner: BTreeMap<String, String>,
    events: BTreeMap<String, PlanningEvent>,
    tasks: BTreeMap<String, ProjectTask>,
    docs: DocStore,
    watches: WatchRegistry,
    inbox: Inbox,
    #[serde(skip)]
    index: Index,
}

fn snippet(body: &str) -> String {
    const MAX: usize = 120;
    match body.char_indices().nth(MAX) {
        Some((cut, _)) => format!("{}…", &body[..cut]),
        None => body.to_string(),
    }
}

impl State {
    pub fn new(node: NodeId) -> Self {
        State {
            docs: DocStore::new(node.clone()),
            node,
            ids: IdGen::default(),
            workspaces: BTreeMap::new(),
            workspace_slugs: BTreeMap::new(),
            modules: BTreeMap::new(),
            objects: BTreeMap::new(),
            annotation_owner: BTreeMap::new(),
            events: BTreeMap::new(),
            tasks: BTreeMap::new(),
            watches: WatchRegistry::default(),
            inbox: Inbox::default(),
            index: Index::new(),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    // ---- reads ----------------------------------------------------------

    pub fn workspaces(&self) -> impl Iterator<Item = &Workspace> {
        self.workspaces.values()
    }

    pub fn workspace(&self, id: &str) -> Result<&Workspace> {
        self.workspaces
            .get(id)
            .ok_or_else(|| Error::UnknownWorkspace(id.to_string()))
    }

    pub fn workspace_by_slug(&self, slug: &str) -> Result<&Workspace> {
        self.workspace_slugs
            .get(slug)
            .and_then(|id| self.workspaces.get(id))
            .ok_or_else(|| Error::UnknownWorkspace(slug.to_string()))
    }

    pub fn modules_of(&self, workspace_id: &str) -> impl Iterator<Item = &ModuleInstance> {
        let ws = workspace_id.to_string();
        self.modules.values().filter(move |m| m.workspace_id == ws)
    }

    pub fn module(&self, id: &str) -> Result<&ModuleInstance> {
        self.modules
            .get(id)
            .ok_or_else(|| Error::UnknownModule(id.to_string()))
    }

    pub fn module_by_slug(&self, workspace_id: &str, slug: &str) -> Result<&ModuleInstance> {
        self.modules_of(workspace_id)
            .find(|m| m.slug == slug)
            .ok_or_else(|| Error::UnknownModule(slug.to_string()))
    }

    pub fn objects(&self) -> impl Iterator<Item = &InfoObject> {
        self.objects.values()
    }

    pub fn object(&self, id: &str) -> Result<&InfoObject> {
        self.objects
            .get(id)
            .ok_or_else(|| Error::UnknownObject(id.to_string()))
    }

    pub fn annotation(&self, id: &str) -> Result<(&InfoObject, &Annotation)> {
        let object_id = self
            .annotation_owner
            .get(id)
            .ok_or_else(|| Error::UnknownAnnotation(id.to_string()))?;
        let object = self.object(object_id)?;
        let annotation = object
            .annotations
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::UnknownAnnotation(id.to_string()))?;
        Ok((object, annotation))
    }

    /// Open ACTION annotations assigned to `assignee`, as (object, annotation) ids.
    pub fn open_actions_for(&self, assignee: &str) -> Vec<(String, String)> {
        self.objects
            .values()
            .flat_map(|o| {
                o.annotations
                    .iter()
                    .filter(|a| a.is_open_action() && a.assignee.as_deref() == Some(assignee))
                    .map(|a| (o.id.clone(), a.id.clone()))
            })
            .collect()
    }

    pub fn list_events(&self, workspace_id: &str, start: Timestamp, end: Timestamp) -> Result<Vec<PlanningEvent>> {
        if start >= end {
            return Err(Error::InvalidRange);
        }
        self.workspace(workspace_id)?;
        let mut out: Vec<PlanningEvent> = self
            .events
            .values()
            .filter(|e| e.workspace_id == workspace_id && e.overlaps(start, end))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.start, &a.id).cmp(&(b.start, &b.id)));
        Ok(out)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &ProjectTask> {
        self.tasks.values()
    }

    pub fn task(&self, id: &str) -> Result<&ProjectTask> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn docs(&self) -> &DocStore {
        &self.docs
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document> {
        self.docs.document(doc_id)
    }

    pub fn get_version(&self, doc_id: &str, version: Option<u64>) -> Result<&DocumentVersion> {
        self.docs.get_version(doc_id, version)
    }

    pub fn history(&self, doc_id: &str) -> Result<Vec<ProvenanceEvent>> {
        self.docs.history(doc_id)
    }

    pub fn watches(&self) -> impl Iterator<Item = &WatchQuery> {
        self.watches.watches()
    }

    pub fn watch_registry(&self) -> &WatchRegistry {
        &self.watches
    }

    pub fn inbox(&self) -> &Inbox {
        &self.inbox
    }

    /// Ranked hits for an already parsed query over the local corpus.
    pub fn search_ast(&self, ast: &QueryAst) -> Vec<LocalHit> {
        self.index
            .evaluate(ast)
            .into_iter()
            .filter_map(|(id, score)| {
                let o = self.objects.get(&id)?;
                Some(LocalHit {
                    object_id: id,
                    object_ref: o.object_ref.clone(),
                    title: o.title.clone(),
                    snippet: snippet(&o.body),
                    score,
                })
            })
            .collect()
    }

    pub fn search(&self, raw: &str) -> Result<Vec<LocalHit>> {
        Ok(self.search_ast(&parse_query(raw)?))
    }

    /// Documents matching `selector` by exact id, or whose name contains
    /// every normalized token of the selector.
    pub fn locate(&self, selector: &str) -> Vec<&Document> {
        let wanted = crate::query::normalize(selector);
        self.docs
            .documents()
            .filter(|d| {
                if d.doc_id == selector {
                    return true;
                }
                if wanted.is_empty() {
                    return false;
                }
                let name: BTreeSet<String> = crate::query::normalize(&d.name).into_iter().collect();
                wanted.iter().all(|t| name.contains(t))
            })
            .collect()
    }

    /// Canonical JSON of the full state plus the index postings.
    pub fn canonical_dump(&self) -> String {
        let dump = json!({
            "state": self,
            "postings": self.index.all_postings(),
        });
        serde_json::to_string(&dump).expect("state always serializes")
    }

    // ---- writes ---------------------------------------------------------

    fn is_member_anywhere(&self, actor: &str) -> bool {
        self.workspaces.values().any(|w| w.members.contains(actor))
    }

    fn object_ref(&self, module: &ModuleInstance, object_id: &str) -> ObjectRef {
        let ws = &self.workspaces[&module.workspace_id];
        ObjectRef::new(self.node.clone(), &ws.slug, &module.slug, object_id)
    }

    fn check_can_write(&self, module: &ModuleInstance, actor: &str) -> Result<()> {
        let ws = self.workspace(&module.workspace_id)?;
        if ws.members.contains(actor) || (module.shared && self.is_member_anywhere(actor)) {
            Ok(())
        } else {
            Err(Error::NotAMember {
                actor: actor.to_string(),
                workspace: ws.slug.clone(),
            })
        }
    }

    pub fn create_workspace(&mut self, at: Timestamp, slug: &str, title: &str, creator: &str) -> Result<Workspace> {
        validate_slug(slug)?;
        if self.workspace_slugs.contains_key(slug) {
            return Err(Error::DuplicateSlug(slug.to_string()));
        }
        let ws = Workspace {
            id: self.ids.next_id(),
            slug: slug.to_string(),
            title: title.to_string(),
            created_at: at,
            members: BTreeSet::from([creator.to_string()]),
        };
        self.workspace_slugs.insert(ws.slug.clone(), ws.id.clone());
        self.workspaces.insert(ws.id.clone(), ws.clone());
        self.create_module(&ws.id, ModuleKind::Tickets, DEFAULT_TICKETS_SLUG, false)?;
        Ok(ws)
    }

    pub fn add_member(&mut self, workspace_id: &str, actor: &str, member: &str) -> Result<Workspace> {
        let ws = self.workspace(workspace_id)?;
        if !ws.members.contains(actor) {
            return Err(Error::NotAMember {
                actor: actor.to_string(),
                workspace: ws.slug.clone(),
            });
        }
        let ws = self.workspaces.get_mut(workspace_id).expect("checked above");
        ws.members.insert(member.to_string());
        Ok(ws.clone())
    }

    pub fn create_module(&mut self, workspace_id: &str, kind: ModuleKind, slug: &str, shared: bool) -> Result<ModuleInstance> {
        self.workspace(workspace_id)?;
        validate_slug(slug)?;
        if self.modules_of(workspace_id).any(|m| m.slug == slug) {
            return Err(Error::DuplicateSlug(slug.to_string()));
        }
        let module = ModuleInstance {
            id: self.ids.next_id(),
            workspace_id: workspace_id.to_string(),
            kind,
            slug: slug.to_string(),
            shared,
        };
        self.modules.insert(module.id.clone(), module.clone());
        Ok(module)
    }

    fn indexed_doc(object: &InfoObject) -> IndexedDoc {
        IndexedDoc::new(
            &object.title,
            &object.body,
            object.context.values().map(String::as_str),
            object.updated_at,
        )
    }

    /// Re-indexes `object_id` and runs the standing queries against it.
    fn commit_object(&mut self, object_id: &str, at: Timestamp) -> ObjectCommit {
        let object = self.objects[object_id].clone();
        let doc = Self::indexed_doc(&object);
        let delta = self.index.index_object(object_id, doc.clone());
        let ids = &mut self.ids;
        let fired = self
            .watches
            .evaluate(&object.object_ref, &doc, at, || ids.next_id());
        let notifications = fired
            .into_iter()
            .map(|(n, owner)| {
                let mut body = serde_json::Map::new();
                body.insert("notification_id".into(), json!(n.id));
                body.insert("watch_id".into(), json!(n.watch_id));
                body.insert("object_ref".into(), json!(n.object_ref.to_string()));
                body.insert("title".into(), json!(object.title));
                let id = self.ids.next_id();
                self.inbox.deliver(id, &owner, InboxKind::WatchNotification, body, at)
            })
            .collect();
        ObjectCommit {
            object,
            delta,
            notifications,
        }
    }

    fn validate_context(context: &BTreeMap<String, String>) -> Result<()> {
        if context.keys().any(String::is_empty) {
            Err(Error::InvalidContext)
        } else {
            Ok(())
        }
    }

    pub fn create_object(
        &mut self,
        at: Timestamp,
        module_id: &str,
        title: &str,
        body: &str,
        mut context: BTreeMap<String, String>,
        actor: &str,
    ) -> Result<ObjectCommit> {
        let module = self.module(module_id)?.clone();
        self.check_can_write(&module, actor)?;
        Self::validate_context(&context)?;
        context
            .entry("author".to_string())
            .or_insert_with(|| actor.to_string());
        let id = self.ids.next_id();
        let object = InfoObject {
            object_ref: self.object_ref(&module, &id),
            id: id.clone(),
            module_id: module_id.to_string(),
            title: title.to_string(),
            body: body.to_string(),
            context,
            created_by: actor.to_string(),
            created_at: at,
            updated_at: at,
            annotations: Vec::new(),
        };
        self.objects.insert(id.clone(), object);
        Ok(self.commit_object(&id, at))
    }

    pub fn update_object(
        &mut self,
        at: Timestamp,
        object_id: &str,
        title: Option<&str>,
        body: Option<&str>,
        context: Option<BTreeMap<String, String>>,
        actor: &str,
    ) -> Result<ObjectCommit> {
        let object = self.object(object_id)?;
        let module = self.module(&object.module_id)?.clone();
        self.check_can_write(&module, actor)?;
        if let Some(c) = &context {
            Self::validate_context(c)?;
        }
        let object = self.objects.get_mut(object_id).expect("checked above");
        if let Some(t) = title {
            object.title = t.to_string();
        }
        if let Some(b) = body {
            object.body = b.to_string();
        }
        if let Some(mut c) = context {
            let author = object.context.get("author").cloned().unwrap_or_else(|| actor.to_string());
            c.entry("author".to_string()).or_insert(author);
            object.context = c;
        }
        object.bump(at);
        Ok(self.commit_object(object_id, at))
    }

    pub fn add_annotation(
        &mut self,
        at: Timestamp,
        object_id: &str,
        kind: AnnotationKind,
        text: &str,
        author: &str,
        assignee: Option<&str>,
    ) -> Result<Annotation> {
        self.object(object_id)?;
        let annotation = Annotation::new(self.ids.clone().next_id(), kind, author, text, at, assignee)?;
        // the id is only consumed once validation passed
        self.ids.next_id();
        let object = self.objects.get_mut(object_id).expect("checked above");
        object.insert_annotation(annotation.clone());
        object.bump(at);
        let (updated, object_ref, title) = (object.updated_at, object.object_ref.clone(), object.title.clone());
        self.index.touch(object_id, updated);
        self.annotation_owner
            .insert(annotation.id.clone(), object_id.to_string());
        if let Some(assignee) = &annotation.assignee {
            let mut body = serde_json::Map::new();
            body.insert("object_id".into(), json!(object_id));
            body.insert("object_ref".into(), json!(object_ref.to_string()));
            body.insert("annotation_id".into(), json!(annotation.id));
            body.insert("title".into(), json!(title));
            body.insert("text".into(), json!(annotation.text));
            body.insert("author".into(), json!(annotation.author));
            let id = self.ids.next_id();
            self.inbox
                .deliver(id, assignee, InboxKind::ActionAssigned, body, at);
        }
        Ok(annotation)
    }

    pub fn resolve_action(&mut self, at: Timestamp, object_id: &str, annotation_id: &str, actor: &str) -> Result<Annotation> {
        let object = self.object(object_id)?;
        let annotation = object
            .annotations
            .iter()
            .find(|a| a.id == annotation_id)
            .ok_or_else(|| Error::UnknownAnnotation(annotation_id.to_string()))?;
        if annotation.kind != AnnotationKind::Action {
            return Err(Error::NotAnAction(annotation_id.to_string()));
        }
        if annotation.status == Some(ActionStatus::Done) {
            return Err(Error::AlreadyDone(annotation_id.to_string()));
        }
        let object = self.objects.get_mut(object_id).expect("checked above");
        let annotation = object
            .annotations
            .iter_mut()
            .find(|a| a.id == annotation_id)
            .expect("checked above");
        annotation.status = Some(ActionStatus::Done);
        annotation.resolved_by = Some(actor.to_string());
        let resolved = annotation.clone();
        object.bump(at);
        let updated = object.updated_at;
        self.index.touch(object_id, updated);
        Ok(resolved)
    }

    pub fn create_event(
        &mut self,
        workspace_id: &str,
        title: &str,
        start: Timestamp,
        end: Timestamp,
        participants: &[String],
    ) -> Result<PlanningEvent> {
        self.workspace(workspace_id)?;
        if start >= end {
            return Err(Error::InvalidRange);
        }
        let event = PlanningEvent {
            id: self.ids.next_id(),
            workspace_id: workspace_id.to_string(),
            title: title.to_string(),
            start,
            end,
            participants: participants.iter().cloned().collect(),
        };
        self.events.insert(event.id.clone(), event.clone());
        Ok(event)
    }

    pub fn create_task(&mut self, project_id: &str, title: &str, assignee: &str, due: Option<&str>) -> Result<ProjectTask> {
        self.object(project_id)?;
        let task = ProjectTask {
            id: self.ids.next_id(),
            project_id: project_id.to_string(),
            title: title.to_string(),
            assignee: assignee.to_string(),
            status: TaskStatus::Todo,
            due: due.map(str::to_string),
        };
        self.tasks.insert(task.id.clone(), task.clone());
        Ok(task)
    }

    pub fn set_task_status(&mut self, at: Timestamp, task_id: &str, status: TaskStatus) -> Result<ProjectTask> {
        let task = self.task(task_id)?;
        if !task.status.can_move_to(status) {
            return Err(Error::IllegalTransition {
                from: task.status.as_str().to_string(),
                to: status.as_str().to_string(),
            });
        }
        let task = self.tasks.get_mut(task_id).expect("checked above");
        task.status = status;
        let task = task.clone();
        if let Some(project) = self.objects.get_mut(&task.project_id) {
            project.bump(at);
            let updated = project.updated_at;
            self.index.touch(&task.project_id, updated);
        }
        Ok(task)
    }

    pub fn register_watch(&mut self, at: Timestamp, owner: &str, raw_query: &str) -> Result<WatchQuery> {
        parse_query(raw_query)?;
        let id = self.ids.next_id();
        Ok(self.watches.register(id, owner, raw_query, at)?)
    }

    pub fn create_document(
        &mut self,
        at: Timestamp,
        module_id: &str,
        name: &str,
        content: Vec<u8>,
        author: &str,
    ) -> Result<(Document, ObjectCommit)> {
        let module = self.module(module_id)?.clone();
        if module.kind != ModuleKind::Documents {
            return Err(Error::WrongModuleKind {
                module: module.slug,
                kind: module.kind.to_string(),
            });
        }
        self.check_can_write(&module, author)?;
        let doc_id = self.ids.next_id();
        let body = std::str::from_utf8(&content).unwrap_or("").to_string();
        let context = BTreeMap::from([
            ("author".to_string(), author.to_string()),
            ("doc_id".to_string(), doc_id.clone()),
        ]);
        let commit = self.create_object(at, module_id, name, &body, context, author)?;
        let doc = self
            .docs
            .create(doc_id, module_id, name, content, author, &commit.object.id, at);
        Ok((doc, commit))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push_version(
        &mut self,
        at: Timestamp,
        origin: &NodeId,
        doc_id: &str,
        base_version: u64,
        content: Vec<u8>,
        author: &str,
        source_node: &NodeId,
    ) -> Result<(Document, ObjectCommit)> {
        let body = std::str::from_utf8(&content).unwrap_or("").to_string();
        let doc = self
            .docs
            .push(origin, doc_id, base_version, content, author, source_node, at)?;
        let object = self
            .objects
            .get_mut(&doc.linked_object)
            .expect("every document has a linked object");
        object.body = body;
        object.bump(at);
        let commit = self.commit_object(&doc.linked_object, at);
        Ok((doc, commit))
    }

    pub fn record_fetch(&mut self, at: Timestamp, doc_id: &str, version: u64, actor: &str, node: &NodeId) -> Result<()> {
        self.docs.record_fetch(doc_id, version, actor, node, at)
    }

    pub fn deliver_message(
        &mut self,
        at: Timestamp,
        from_node: &NodeId,
        from_actor: Option<&str>,
        to_actor: Option<&str>,
        body: &str,
    ) -> InboxEntry {
        let mut payload = serde_json::Map::new();
        payload.insert("from_node".into(), json!(from_node.to_string()));
        if let Some(a) = from_actor {
            payload.insert("from_actor".into(), json!(a));
        }
        payload.insert("body".into(), json!(body));
        let id = self.ids.next_id();
        self.inbox.deliver(
            id,
            to_actor.unwrap_or(EVERYONE),
            InboxKind::PeerMessage,
            payload,
            at,
        )
    }

    pub fn roster_change(&mut self, at: Timestamp, peer: &NodeId, state: &str) -> InboxEntry {
        let mut payload = serde_json::Map::new();
        payload.insert("peer".into(), json!(peer.to_string()));
        payload.insert("state".into(), json!(state));
        let id = self.ids.next_id();
        self.inbox
            .deliver(id, EVERYONE, InboxKind::RosterChange, payload, at)
    }

    pub fn ack_inbox(&mut self, entry_id: &str) -> Result<InboxEntry> {
        self.inbox.ack(entry_id)
    }

    /// Re-executes one journaled command.
    pub fn apply(&mut self, at: Timestamp, cmd: &Command) -> Result<()> {
        match cmd {
            Command::CreateWorkspace { slug, title, creator } => {
                self.create_workspace(at, slug, title, creator).map(drop)
            }
            Command::AddMember { workspace_id, actor, member } => {
                self.add_member(workspace_id, actor, member).map(drop)
            }
            Command::CreateModule { workspace_id, kind, slug, shared } => {
                self.create_module(workspace_id, *kind, slug, *shared).map(drop)
            }
            Command::CreateObject { module_id, title, body, context, actor } => self
                .create_object(at, module_id, title, body, context.clone(), actor)
                .map(drop),
            Command::UpdateObject { object_id, title, body, context, actor } => self
                .update_object(at, object_id, title.as_deref(), body.as_deref(), context.clone(), actor)
                .map(drop),
            Command::AddAnnotation { object_id, kind, text, author, assignee } => self
                .add_annotation(at, object_id, *kind, text, author, assignee.as_deref())
                .map(drop),
            Command::ResolveAction { object_id, annotation_id, actor } => {
                self.resolve_action(at, object_id, annotation_id, actor).map(drop)
            }
            Command::CreateEvent { workspace_id, title, start, end, participants } => self
                .create_event(workspace_id, title, *start, *end, participants)
                .map(drop),
            Command::CreateTask { project_id, title, assignee, due } => {
                self.create_task(project_id, title, assignee, due.as_deref()).map(drop)
            }
            Command::SetTaskStatus { task_id, status } => {
                self.set_task_status(at, task_id, *status).map(drop)
            }
            Command::RegisterWatch { owner, raw_query } => {
                self.register_watch(at, owner, raw_query).map(drop)
            }
            Command::CreateDocument { module_id, name, content, author } => self
                .create_document(at, module_id, name, content.clone(), author)
                .map(drop),
            Command::PushVersion { origin, doc_id, base_version, content, author, source_node } => self
                .push_version(at, origin, doc_id, *base_version, content.clone(), author, source_node)
                .map(drop),
            Command::RecordFetch { doc_id, version, actor, node } => {
                self.record_fetch(at, doc_id, *version, actor, node)
            }
            Command::DeliverMessage { from_node, from_actor, to_actor, body } => {
                self.deliver_message(at, from_node, from_actor.as_deref(), to_actor.as_deref(), body);
                Ok(())
            }
            Command::RosterChange { peer, state } => {
                self.roster_change(at, peer, state);
                Ok(())
            }
            Command::AckInbox { entry_id } => self.ack_inbox(entry_id).map(drop),
        }
    }
}

/// Outcome of replaying a journal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryReport {
    pub records: usize,
    pub discarded_tail: bool,
}

/// Single writer over [`State`]. Every successful mutation is journaled
/// before it returns; a failed journal write poisons the store.
#[derive(Debug)]
pub struct Store {
    state: State,
    journal: JournalSink,
    seq: u64,
    poisoned: bool,
}

impl Store {
    pub fn in_memory(node: NodeId) -> Self {
        Store {
            state: State::new(node),
            journal: JournalSink::Memory(Vec::new()),
            seq: 0,
            poisoned: false,
        }
    }

    /// Opens (or creates) the journal under `data_dir` and replays it.
    pub fn open(node: NodeId, data_dir: &Path) -> Result<(Store, RecoveryReport)> {
        let (scan, sink) = journal::open_dir(data_dir)?;
        let report = RecoveryReport {
            records: scan.records.len(),
            discarded_tail: scan.discarded_tail,
        };
        let state = replay(node, &scan.records)?;
        Ok((
            Store {
                state,
                journal: sink,
                seq: scan.records.len() as u64,
                poisoned: false,
            },
            report,
        ))
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn node(&self) -> &NodeId {
        self.state.node()
    }

    /// Journal lines of an in-memory store.
    pub fn journal_lines(&self) -> Option<&[String]> {
        self.journal.memory_lines()
    }

    fn commit<T>(&mut self, at: Timestamp, cmd: Command, f: impl FnOnce(&mut State) -> Result<T>) -> Result<T> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        let out = f(&mut self.state)?;
        let record = JournalRecord {
            seq: self.seq + 1,
            at,
            cmd,
        };
        if let Err(e) = self.journal.append(&record) {
            self.poisoned = true;
            return Err(e);
        }
        self.seq += 1;
        Ok(out)
    }

    pub fn create_workspace(&mut self, at: Timestamp, slug: &str, title: &str, creator: &str) -> Result<Workspace> {
        let cmd = Command::CreateWorkspace {
            slug: slug.into(),
            title: title.into(),
            creator: creator.into(),
        };
        self.commit(at, cmd, |s| s.create_workspace(at, slug, title, creator))
    }

    pub fn add_member(&mut self, at: Timestamp, workspace_id: &str, actor: &str, member: &str) -> Result<Workspace> {
        let cmd = Command::AddMember {
            workspace_id: workspace_id.into(),
            actor: actor.into(),
            member: member.into(),
        };
        self.commit(at, cmd, |s| s.add_member(workspace_id, actor, member))
    }

    pub fn create_module(&mut self, at: Timestamp, workspace_id: &str, kind: ModuleKind, slug: &str, shared: bool) -> Result<ModuleInstance> {
        let cmd = Command::CreateModule {
            workspace_id: workspace_id.into(),
            kind,
            slug: slug.into(),
            shared,
        };
        self.commit(at, cmd, |s| s.create_module(workspace_id, kind, slug, shared))
    }

    pub fn create_object(
        &mut self,
        at: Timestamp,
        module_id: &str,
        title: &str,
        body: &str,
        context: BTreeMap<String, String>,
        actor: &str,
    ) -> Result<ObjectCommit> {
        let cmd = Command::CreateObject {
            module_id: module_id.into(),
            title: title.into(),
            body: body.into(),
            context: context.clone(),
            actor: actor.into(),
        };
        self.commit(at, cmd, |s| s.create_object(at, module_id, title, body, context, actor))
    }

    pub fn update_object(
        &mut self,
        at: Timestamp,
        object_id: &str,
        title: Option<&str>,
        body: Option<&str>,
        context: Option<BTreeMap<String, String>>,
        actor: &str,
    ) -> Result<ObjectCommit> {
        let cmd = Command::UpdateObject {
            object_id: object_id.into(),
            title: title.map(Into::into),
            body: body.map(Into::into),
            context: context.clone(),
            actor: actor.into(),
        };
        self.commit(at, cmd, |s| s.update_object(at, object_id, title, body, context, actor))
    }

    pub fn add_annotation(
        &mut self,
        at: Timestamp,
        object_id: &str,
        kind: AnnotationKind,
        text: &str,
        author: &str,
        assignee: Option<&str>,
    ) -> Result<Annotation> {
        let cmd = Command::AddAnnotation {
            object_id: object_id.into(),
            kind,
            text: text.into(),
            author: author.into(),
            assignee: assignee.map(Into::into),
        };
        self.commit(at, cmd, |s| s.add_annotation(at, object_id, kind, text, author, assignee))
    }

    pub fn resolve_action(&mut self, at: Timestamp, object_id: &str, annotation_id: &str, actor: &str) -> Result<Annotation> {
        let cmd = Command::ResolveAction {
            object_id: object_id.into(),
            annotation_id: annotation_id.into(),
            actor: actor.into(),
        };
        self.commit(at, cmd, |s| s.resolve_action(at, object_id, annotation_id, actor))
    }

    pub fn create_event(
        &mut self,
        at: Timestamp,
        workspace_id: &str,
        title: &str,
        start: Timestamp,
        end: Timestamp,
        participants: &[String],
    ) -> Result<PlanningEvent> {
        let cmd = Command::CreateEvent {
            workspace_id: workspace_id.into(),
            title: title.into(),
            start,
            end,
            participants: participants.to_vec(),
        };
        self.commit(at, cmd, |s| s.create_event(workspace_id, title, start, end, participants))
    }

    pub fn create_task(&mut self, at: Timestamp, project_id: &str, title: &str, assignee: &str, due: Option<&str>) -> Result<ProjectTask> {
        let cmd = Command::CreateTask {
            project_id: project_id.into(),
            title: title.into(),
            assignee: assignee.into(),
            due: due.map(Into::into),
        };
        self.commit(at, cmd, |s| s.create_task(project_id, title, assignee, due))
    }

    pub fn set_task_status(&mut self, at: Timestamp, task_id: &str, status: TaskStatus) -> Result<ProjectTask> {
        let cmd = Command::SetTaskStatus {
            task_id: task_id.into(),
            status,
        };
        self.commit(at, cmd, |s| s.set_task_status(at, task_id, status))
    }

    pub fn register_watch(&mut self, at: Timestamp, owner: &str, raw_query: &str) -> Result<WatchQuery> {
        let cmd = Command::RegisterWatch {
            owner: owner.into(),
            raw_query: raw_query.into(),
        };
        self.commit(at, cmd, |s| s.register_watch(at, owner, raw_query))
    }

    pub fn create_document(
        &mut self,
        at: Timestamp,
        module_id: &str,
        name: &str,
        content: Vec<u8>,
        author: &str,
    ) -> Result<(Document, ObjectCommit)> {
        let cmd = Command::CreateDocument {
            module_id: module_id.into(),
            name: name.into(),
            content: content.clone(),
            author: author.into(),
        };
        self.commit(at, cmd, |s| s.create_document(at, module_id, name, content, author))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push_version(
        &mut self,
        at: Timestamp,
        origin: &NodeId,
        doc_id: &str,
        base_version: u64,
        content: Vec<u8>,
        author: &str,
        source_node: &NodeId,
    ) -> Result<(Document, ObjectCommit)> {
        let cmd = Command::PushVersion {
            origin: origin.clone(),
            doc_id: doc_id.into(),
            base_version,
            content: content.clone(),
            author: author.into(),
            source_node: source_node.clone(),
        };
        self.commit(at, cmd, |s| {
            s.push_version(at, origin, doc_id, base_version, content, author, source_node)
        })
    }

    /// Reads a version on behalf of `requester`; a remote requester leaves
    /// a FETCHED_BY trace.
    pub fn get_version(
        &mut self,
        at: Timestamp,
        doc_id: &str,
        version: Option<u64>,
        requester: Option<(&NodeId, &str)>,
    ) -> Result<DocumentVersion> {
        let found = self.state.get_version(doc_id, version)?.clone();
        if let Some((node, actor)) = requester.filter(|(n, _)| *n != self.node()) {
            let cmd = Command::RecordFetch {
                doc_id: doc_id.into(),
                version: found.version,
                actor: actor.into(),
                node: node.clone(),
            };
            self.commit(at, cmd, |s| s.record_fetch(at, doc_id, found.version, actor, node))?;
        }
        Ok(found)
    }

    pub fn deliver_message(
        &mut self,
        at: Timestamp,
        from_node: &NodeId,
        from_actor: Option<&str>,
        to_actor: Option<&str>,
        body: &str,
    ) -> Result<InboxEntry> {
        let cmd = Command::DeliverMessage {
            from_node: from_node.clone(),
            from_actor: from_actor.map(Into::into),
            to_actor: to_actor.map(Into::into),
            body: body.into(),
        };
        self.commit(at, cmd, |s| Ok(s.deliver_message(at, from_node, from_actor, to_actor, body)))
    }

    pub fn roster_change(&mut self, at: Timestamp, peer: &NodeId, state: &str) -> Result<InboxEntry> {
        let cmd = Command::RosterChange {
            peer: peer.clone(),
            state: state.into(),
        };
        self.commit(at, cmd, |s| Ok(s.roster_change(at, peer, state)))
    }

    pub fn ack_inbox(&mut self, at: Timestamp, entry_id: &str) -> Result<InboxEntry> {
        let cmd = Command::AckInbox {
            entry_id: entry_id.into(),
        };
        self.commit(at, cmd, |s| s.ack_inbox(entry_id))
    }

    /// Damages stored bytes of one version. Test and simulation hook.
    pub fn damage_document(&mut self, doc_id: &str, version: u64) -> bool {
        self.state.docs.damage_stored_content(doc_id, version)
    }
}

/// Rebuilds state from journal records.
pub fn replay(node: NodeId, records: &[JournalRecord]) -> Result<State> {
    let mut state = State::new(node);
    for (i, record) in records.iter().enumerate() {
        state
            .apply(record.at, &record.cmd)
            .map_err(|e| Error::JournalCorrupt {
                line: i + 1,
                message: format!("replay failed: {e}"),
            })?;
    }
    Ok(state)
}

/// Parses journal lines (as produced by an in-memory store) and replays them.
pub fn replay_lines(node: NodeId, lines: &[String]) -> Result<State> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    let scan = journal::scan(text.as_bytes())?;
    replay(node, &scan.records)
}
