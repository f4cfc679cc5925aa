use std::collections::{HashMap, VecDeque};

/// Bounded map of request id to the exact reply bytes sent for it; the
/// oldest entry is evicted first.
#[derive(Debug, Clone)]
pub struct DedupCache {
    capacity: usize,
    order: VecDeque<String>,
    replies: HashMap<String, Vec<u8>>,
}

impl DedupCache {
    pub const DEFAULT_CAPACITY: usize = 1024;

    pub fn new(capacity: usize) -> Self {
        DedupCache {
            capacity,
            order: VecDeque::with_capacity(capacity),
            replies: HashMap::with_capacity(capacity),
        }
    }

    pub fn get(&self, id: &str) -> Option<&[u8]> {
        self.replies.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: &str, reply: Vec<u8>) {
        if self.replies.insert(id.to_string(), reply).is_some() {
            return;
        }
        self.order.push_back(id.to_string());
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.replies.remove(&old);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl Default for DedupCache {
    fn default() -> Self {
        DedupCache::new(Self::DEFAULT_CAPACITY)
    }
}
