//! Inverted index over title, body and context values, with a positional
//! forward store for phrase checks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ast::QueryAst;
use super::normalize::normalize;
use crate::ids::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Field {
    Title,
    Body,
    Context,
}

impl Field {
    pub fn weight(self) -> u64 {
        match self {
            Field::Title => 2,
            Field::Body | Field::Context => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Posting {
    pub object_id: String,
    pub field: Field,
    pub term_frequency: u32,
}

/// One changed posting cell, as reported by [`Index::index_object`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PostingChange {
    pub term: String,
    pub field: Field,
    pub term_frequency: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexDelta {
    pub added: Vec<PostingChange>,
    pub removed: Vec<PostingChange>,
}

impl IndexDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

/// The indexable text of one object. Each context value is its own segment
/// so phrases never span two values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedDoc {
    pub title: Vec<String>,
    pub body: Vec<String>,
    pub context: Vec<Vec<String>>,
    pub updated_at: Timestamp,
}

impl IndexedDoc {
    pub fn new<'a>(
        title: &str,
        body: &str,
        context_values: impl IntoIterator<Item = &'a str>,
        updated_at: Timestamp,
    ) -> Self {
        IndexedDoc {
            title: normalize(title),
            body: normalize(body),
            context: context_values.into_iter().map(normalize).collect(),
            updated_at,
        }
    }

    fn segments(&self) -> impl Iterator<Item = (Field, &[String])> {
        [(Field::Title, self.title.as_slice()), (Field::Body, self.body.as_slice())]
            .into_iter()
            .chain(self.context.iter().map(|c| (Field::Context, c.as_slice())))
    }

    fn cells(&self) -> BTreeMap<(String, Field), u32> {
        let mut cells = BTreeMap::new();
        for (field, tokens) in self.segments() {
            for token in tokens {
                *cells.entry((token.clone(), field)).or_insert(0) += 1;
            }
        }
        cells
    }

    fn contains_phrase(&self, phrase: &[String]) -> bool {
        self.segments()
            .any(|(_, seq)| seq.windows(phrase.len()).any(|w| w == phrase))
    }

    fn contains_term(&self, term: &str) -> bool {
        self.segments().any(|(_, seq)| seq.iter().any(|t| t == term))
    }

    /// Predicate evaluation against this object alone; `Not` complements
    /// within the singleton corpus.
    pub fn matches(&self, ast: &QueryAst) -> bool {
        match ast {
            QueryAst::Term(t) => self.contains_term(t),
            QueryAst::Phrase(p) => self.contains_phrase(p),
            QueryAst::And(cs) => cs.iter().all(|c| self.matches(c)),
            QueryAst::Or(cs) => cs.iter().any(|c| self.matches(c)),
            QueryAst::Not(c) => !self.matches(c),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Index {
    postings: BTreeMap<String, BTreeMap<(String, Field), u32>>,
    docs: BTreeMap<String, IndexedDoc>,
}

impl Index {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Replaces every posting of `object_id` with those derived from `doc`.
    pub fn index_object(&mut self, object_id: &str, doc: IndexedDoc) -> IndexDelta {
        let new_cells = doc.cells();
        let old_cells = self
            .docs
            .get(object_id)
            .map(IndexedDoc::cells)
            .unwrap_or_default();

        let mut delta = IndexDelta::default();
        for ((term, field), tf) in &old_cells {
            if new_cells.get(&(term.clone(), *field)) != Some(tf) {
                delta.removed.push(PostingChange {
                    term: term.clone(),
                    field: *field,
                    term_frequency: *tf,
                });
                if let Some(cells) = self.postings.get_mut(term) {
                    cells.remove(&(object_id.to_string(), *field));
                    if cells.is_empty() {
                        self.postings.remove(term);
                    }
                }
            }
        }
        for ((term, field), tf) in new_cells {
            if old_cells.get(&(term.clone(), field)) != Some(&tf) {
                self.postings
                    .entry(term.clone())
                    .or_default()
                    .insert((object_id.to_string(), field), tf);
                delta.added.push(PostingChange {
                    term,
                    field,
                    term_frequency: tf,
                });
            }
        }
        self.docs.insert(object_id.to_string(), doc);
        delta
    }

    pub fn touch(&mut self, object_id: &str, updated_at: Timestamp) {
        if let Some(doc) = self.docs.get_mut(object_id) {
            doc.updated_at = updated_at;
        }
    }

    pub fn doc(&self, object_id: &str) -> Option<&IndexedDoc> {
        self.docs.get(object_id)
    }

    pub fn postings(&self, term: &str) -> Vec<Posting> {
        self.postings
            .get(term)
            .into_iter()
            .flatten()
            .map(|((object_id, field), tf)| Posting {
                object_id: object_id.clone(),
                field: *field,
                term_frequency: *tf,
            })
            .collect()
    }

    /// Every `(term, posting)` pair in term order.
    pub fn all_postings(&self) -> Vec<(String, Posting)> {
        self.postings
            .keys()
            .flat_map(|term| self.postings(term).into_iter().map(move |p| (term.clone(), p)))
            .collect()
    }

    fn objects_with(&self, term: &str) -> BTreeSet<&str> {
        self.postings
            .get(term)
            .into_iter()
            .flat_map(|cells| cells.keys().map(|(id, _)| id.as_str()))
            .collect()
    }

    /// The match set of `ast` over the whole local corpus.
    pub fn matches(&self, ast: &QueryAst) -> BTreeSet<&str> {
        match ast {
            QueryAst::Term(t) => self.objects_with(t),
            QueryAst::Phrase(tokens) => {
                let mut candidates = self.objects_with(&tokens[0]);
                for t in &tokens[1..] {
                    let next = self.objects_with(t);
                    candidates.retain(|id| next.contains(id));
                }
                candidates.retain(|id| self.docs[*id].contains_phrase(tokens));
                candidates
            }
            QueryAst::And(cs) => {
                let mut iter = cs.iter();
                let mut acc = iter.next().map(|c| self.matches(c)).unwrap_or_default();
                for c in iter {
                    if acc.is_empty() {
                        break;
                    }
                    let other = self.matches(c);
                    acc.retain(|id| other.contains(id));
                }
                acc
            }
            QueryAst::Or(cs) => cs.iter().flat_map(|c| self.matches(c)).collect(),
            QueryAst::Not(c) => {
                let excluded = self.matches(c);
                self.docs
                    .keys()
                    .map(String::as_str)
                    .filter(|id| !excluded.contains(id))
                    .collect()
            }
        }
    }

    pub fn score(&self, object_id: &str, terms: &BTreeSet<&str>) -> u64 {
        terms
            .iter()
            .filter_map(|t| self.postings.get(*t))
            .flat_map(|cells| {
                cells
                    .iter()
                    .filter(|((id, _), _)| id == object_id)
                    .map(|((_, field), tf)| field.weight() * u64::from(*tf))
            })
            .sum()
    }

    /// Ranked matches: score desc, then `updated_at` desc, then id asc.
    pub fn evaluate(&self, ast: &QueryAst) -> Vec<(String, u64)> {
        let terms = ast.positive_terms();
        let mut ranked: Vec<(String, u64, Timestamp)> = self
            .matches(ast)
            .into_iter()
            .map(|id| (id.to_string(), self.score(id, &terms), self.docs[id].updated_at))
            .collect();
        ranked.sort_by(|a, b| {
            (Reverse(a.1), Reverse(a.2), &a.0).cmp(&(Reverse(b.1), Reverse(b.2), &b.0))
        });
        ranked.into_iter().map(|(id, score, _)| (id, score)).collect()
    }
}
