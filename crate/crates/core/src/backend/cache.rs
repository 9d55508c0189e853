//! Token-level prefix cache with least-recently-used eviction.
//!
//! Cached prompts live in a token trie. A lookup walks the trie and returns the
//! length of the longest prefix of the query that some cached prompt shares,
//! rounded down to whole blocks. Capacity counts distinct trie nodes, so shared
//! prefixes are stored once.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
struct Node {
    children: HashMap<u32, usize>,
    /// Live entries whose token path passes through this node.
    refs: usize,
    /// Entry that most recently passed through this node.
    owner: u64,
    /// Entry ending exactly here.
    terminal: Option<u64>,
}

impl Node {
    fn new() -> Self {
        Node { children: HashMap::new(), refs: 0, owner: 0, terminal: None }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    tokens: Vec<u32>,
    last_used: u64,
    aux_keys: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    /// Longest shared prefix, in tokens, before block rounding.
    pub raw: usize,
    /// Reported hit length: `raw` rounded down to a whole number of blocks.
    pub hit: usize,
}

#[derive(Debug, Clone)]
pub struct PrefixCache {
    capacity: usize,
    block_size: usize,
    nodes: Vec<Node>,
    free: Vec<usize>,
    live_nodes: usize,
    entries: BTreeMap<u64, Entry>,
    next_id: u64,
    clock: u64,
    vocab: HashMap<String, u32>,
    words: Vec<String>,
    aux: BTreeMap<String, u64>,
}

impl Default for PrefixCache {
    fn default() -> Self {
        PrefixCache::new(1 << 20)
    }
}

impl PrefixCache {
    /// A cache holding at most `capacity` distinct token positions.
    pub fn new(capacity: usize) -> Self {
        PrefixCache {
            capacity,
            block_size: 1,
            nodes: vec![Node::new()],
            free: Vec::new(),
            live_nodes: 0,
            entries: BTreeMap::new(),
            next_id: 1,
            clock: 0,
            vocab: HashMap::new(),
            words: Vec::new(),
            aux: BTreeMap::new(),
        }
    }

    /// Hits are reported in whole blocks of `block_size` tokens.
    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size.max(1);
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Distinct token positions currently cached.
    pub fn len(&self) -> usize {
        self.live_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        *self = PrefixCache::new(self.capacity).with_block_size(self.block_size);
    }

    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.vocab.get(tok) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(tok.to_string());
        self.vocab.insert(tok.to_string(), id);
        id
    }

    /// Length of the longest cached prefix of `tokens`. Touches the entry that supplied it.
    pub fn lookup(&mut self, tokens: &[String]) -> Lookup {
        let mut node = 0;
        let mut depth = 0;
        for t in tokens {
            let Some(&id) = self.vocab.get(t.as_str()) else { break };
            match self.nodes[node].children.get(&id) {
                Some(&child) => {
                    node = child;
                    depth += 1;
                }
                None => break,
            }
        }
        if depth > 0 {
            self.clock += 1;
            let owner = self.nodes[node].owner;
            if let Some(e) = self.entries.get_mut(&owner) {
                e.last_used = self.clock;
            }
        }
        Lookup { raw: depth, hit: depth / self.block_size * self.block_size }
    }

    /// Inserts a prompt. Cached prompts that are prefixes of it are subsumed.
    pub fn insert(&mut self, tokens: &[String], aux_keys: &[String]) {
        if tokens.is_empty() {
            return;
        }
        let ids: Vec<u32> = tokens.iter().map(|t| self.intern(t)).collect();
        self.clock += 1;
        // Walk the existing path to find exact duplicates and subsumed prefixes.
        let mut node = 0;
        let mut subsumed = Vec::new();
        let mut full = true;
        for id in &ids {
            match self.nodes[node].children.get(id) {
                Some(&c) => {
                    node = c;
                    if let Some(t) = self.nodes[node].terminal {
                        subsumed.push(t);
                    }
                }
                None => {
                    full = false;
                    break;
                }
            }
        }
        if full {
            if let Some(existing) = self.nodes[node].terminal {
                let clock = self.clock;
                let e = self.entries.get_mut(&existing).expect("terminal entry is live");
                e.last_used = clock;
                for k in aux_keys {
                    if !e.aux_keys.contains(k) {
                        e.aux_keys.push(k.clone());
                    }
                    self.aux.insert(k.clone(), existing);
                }
                self.mark_owner(existing);
                return;
            }
        }
        let mut inherited_aux = Vec::new();
        for id in subsumed {
            if let Some(e) = self.remove_entry(id) {
                inherited_aux.extend(e.aux_keys);
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut node = 0;
        for &tok in &ids {
            let child = match self.nodes[node].children.get(&tok) {
                Some(&c) => c,
                None => {
                    let c = self.alloc();
                    self.nodes[node].children.insert(tok, c);
                    c
                }
            };
            node = child;
            self.nodes[node].refs += 1;
            self.nodes[node].owner = id;
        }
        self.nodes[node].terminal = Some(id);
        inherited_aux.extend(aux_keys.iter().cloned());
        for k in &inherited_aux {
            self.aux.insert(k.clone(), id);
        }
        self.entries.insert(id, Entry { tokens: ids, last_used: self.clock, aux_keys: inherited_aux });
        while self.live_nodes > self.capacity {
            let victim = self.entries.iter().min_by_key(|(_, e)| e.last_used).map(|(&k, _)| k);
            match victim {
                Some(v) => {
                    self.remove_entry(v);
                }
                None => break,
            }
        }
    }

    /// Lookup followed by insert, as one step.
    pub fn lookup_and_insert(&mut self, tokens: &[String], aux_keys: &[String]) -> Lookup {
        let hit = self.lookup(tokens);
        self.insert(tokens, aux_keys);
        hit
    }

    /// Cached prompt registered under an auxiliary key (view name, parameter hash, version).
    pub fn get_by_key(&self, key: &str) -> Option<Vec<String>> {
        let id = self.aux.get(key)?;
        let e = self.entries.get(id)?;
        Some(e.tokens.iter().map(|&t| self.words[t as usize].clone()).collect())
    }

    /// Cached prompts from least to most recently used.
    pub fn entries_by_recency(&self) -> Vec<Vec<String>> {
        let mut v: Vec<&Entry> = self.entries.values().collect();
        v.sort_by_key(|e| e.last_used);
        v.into_iter()
            .map(|e| e.tokens.iter().map(|&t| self.words[t as usize].clone()).collect())
            .collect()
    }

    fn mark_owner(&mut self, id: u64) {
        let tokens = self.entries[&id].tokens.clone();
        let mut node = 0;
        for t in tokens {
            node = self.nodes[node].children[&t];
            self.nodes[node].owner = id;
        }
    }

    fn alloc(&mut self) -> usize {
        self.live_nodes += 1;
        match self.free.pop() {
            Some(i) => {
                self.nodes[i] = Node::new();
                i
            }
            None => {
                self.nodes.push(Node::new());
                self.nodes.len() - 1
            }
        }
    }

    fn remove_entry(&mut self, id: u64) -> Option<Entry> {
        let entry = self.entries.remove(&id)?;
        let mut node = 0;
        for &t in &entry.tokens {
            let child = self.nodes[node].children[&t];
            self.nodes[child].refs -= 1;
            if self.nodes[child].refs == 0 {
                self.nodes[node].children.remove(&t);
                self.release(child);
                break;
            }
            node = child;
        }
        if let Some(end) = self.find_terminal(&entry.tokens) {
            if self.nodes[end].terminal == Some(id) {
                self.nodes[end].terminal = None;
            }
        }
        self.aux.retain(|_, v| *v != id);
        Some(entry)
    }

    fn find_terminal(&self, tokens: &[u32]) -> Option<usize> {
        let mut node = 0;
        for t in tokens {
            node = *self.nodes[node].children.get(t)?;
        }
        Some(node)
    }

    /// Frees a detached subtree.
    fn release(&mut self, root: usize) {
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            stack.extend(self.nodes[n].children.values().copied());
            self.nodes[n].children.clear();
            self.free.push(n);
            self.live_nodes -= 1;
        }
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let mut entries: Vec<(&u64, &Entry)> = self.entries.iter().collect();
        entries.sort_by_key(|(_, e)| e.last_used);
        CacheSnapshot {
            capacity: self.capacity,
            block_size: self.block_size,
            entries: entries
                .into_iter()
                .map(|(_, e)| SnapshotEntry {
                    tokens: e.tokens.iter().map(|&t| self.words[t as usize].clone()).collect(),
                    aux_keys: e.aux_keys.clone(),
                })
                .collect(),
        }
    }

    pub fn restore(snap: &CacheSnapshot) -> Self {
        let mut c = PrefixCache::new(snap.capacity).with_block_size(snap.block_size);
        for e in &snap.entries {
            c.insert(&e.tokens, &e.aux_keys);
        }
        c
    }
}

/// Serializable cache contents, least recently used first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub capacity: usize,
    pub block_size: usize,
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub aux_keys: Vec<String>,
}
