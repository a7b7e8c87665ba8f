//! Binary trie for IPv4 longest-prefix match, as used by the NAT.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NatEntry {
    pub prefix: u32,
    pub len: u8,
    pub translation: u32,
}

impl NatEntry {
    pub fn mask(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        }
    }

    /// Prefix length at most 32 and no host bits set.
    pub fn is_well_formed(&self) -> bool {
        self.len <= 32 && self.prefix & !Self::mask(self.len) == 0
    }

    pub fn covers(&self, addr: u32) -> bool {
        addr & Self::mask(self.len) == self.prefix
    }
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: [Option<u32>; 2],
    value: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct BinaryTrie {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub translation: u32,
    pub prefix_len: u8,
    /// Trie edges followed before the walk stopped.
    pub depth: u32,
}

impl Default for BinaryTrie {
    fn default() -> Self {
        BinaryTrie {
            nodes: vec![Node::default()],
        }
    }
}

fn bit(addr: u32, i: u32) -> usize {
    ((addr >> (31 - i)) & 1) as usize
}

impl BinaryTrie {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the translation for a prefix. Host bits are ignored.
    pub fn insert(&mut self, entry: NatEntry) {
        let mut node = 0usize;
        for i in 0..u32::from(entry.len.min(32)) {
            let b = bit(entry.prefix, i);
            node = match self.nodes[node].children[b] {
                Some(n) => n as usize,
                None => {
                    self.nodes.push(Node::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children[b] = Some(n as u32);
                    n
                }
            };
        }
        self.nodes[node].value = Some(entry.translation);
    }

    pub fn lookup(&self, addr: u32) -> Option<Lookup> {
        let mut node = 0usize;
        let mut best = self.nodes[0].value.map(|t| (t, 0u8));
        let mut depth = 0u32;
        while depth < 32 {
            match self.nodes[node].children[bit(addr, depth)] {
                Some(n) => {
                    node = n as usize;
                    depth += 1;
                    if let Some(t) = self.nodes[node].value {
                        best = Some((t, depth as u8));
                    }
                }
                None => break,
            }
        }
        best.map(|(translation, prefix_len)| Lookup {
            translation,
            prefix_len,
            depth,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

impl FromIterator<NatEntry> for BinaryTrie {
    fn from_iter<I: IntoIterator<Item = NatEntry>>(iter: I) -> Self {
        let mut t = BinaryTrie::new();
        for e in iter {
            t.insert(e);
        }
        t
    }
}

/// Reference longest-prefix match by scanning every entry. Later entries
/// win ties, matching trie replacement.
pub fn linear_lpm(entries: &[NatEntry], addr: u32) -> Option<(u32, u8)> {
    let mut best: Option<(u32, u8)> = None;
    for e in entries.iter().filter(|e| e.covers(addr)) {
        if best.map_or(true, |(_, l)| e.len >= l) {
            best = Some((e.translation, e.len));
        }
    }
    best
}
