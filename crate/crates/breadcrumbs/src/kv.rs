//! Per-layer key/value cache for incremental decoding.
//!
//! Entries keep the *original* position they were written at; eviction
//! compacts storage but never renumbers survivors, so attention geometry is
//! unchanged — this is the property that makes masked training and real
//! eviction interchangeable.  Keys are stored with rotary encoding already
//! applied, which is why retained entries stay valid after their neighbors
//! disappear.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::num::Num;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryTag {
    /// Prompt entry.
    Question,
    /// Ordinary sampled-token entry.
    Generation,
    /// Compressed summary entry.
    Beacon,
    /// Never-evicted prefix entry (sliding-window baseline bookkeeping).
    Sink,
}

/// Counters the eval layer reads to budget-check an episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub appends: u64,
    pub evicted: u64,
    /// Highest entry count ever held.
    pub peak_entries: usize,
    pub current_entries: usize,
}

/// One new entry staged across all layers, ready to append atomically.
#[derive(Debug, Clone)]
pub struct StagedEntry<S> {
    /// (key, value) per layer; each flat `[n_heads * head_dim]`.
    pub layers: Vec<(Vec<S>, Vec<S>)>,
}

#[derive(Debug, Clone)]
pub struct KvCache<S> {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    /// Per layer, flat `[n_entries * n_heads * head_dim]`.
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    positions: Vec<usize>,
    tags: Vec<EntryTag>,
    stats: CacheStats,
}

impl<S: Num> KvCache<S> {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        KvCache {
            n_layers,
            n_heads,
            head_dim,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            positions: Vec::new(),
            tags: Vec::new(),
            stats: CacheStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn entry_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn tags(&self) -> &[EntryTag] {
        &self.tags
    }

    pub fn max_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// All keys of one layer, flat, entries in slot order.
    pub fn keys(&self, layer: usize) -> &[S] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[S] {
        &self.values[layer]
    }

    /// Append one entry across all layers.  Positions must be strictly
    /// increasing over the life of the cache.
    pub fn append(&mut self, entry: StagedEntry<S>, position: usize, tag: EntryTag) -> Result<()> {
        if entry.layers.len() != self.n_layers {
            return Err(Error::Cache(format!(
                "staged entry has {} layers, cache has {}",
                entry.layers.len(),
                self.n_layers
            )));
        }
        if let Some(last) = self.max_position() {
            if position <= last {
                return Err(Error::Cache(format!(
                    "append position {position} not greater than last position {last}"
                )));
            }
        }
        let w = self.entry_width();
        for (l, (k, v)) in entry.layers.iter().enumerate() {
            if k.len() != w || v.len() != w {
                return Err(Error::Cache(format!(
                    "layer {l} entry width {}x{} vs expected {w}",
                    k.len(),
                    v.len()
                )));
            }
        }
        for (l, (k, v)) in entry.layers.into_iter().enumerate() {
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
        }
        self.positions.push(position);
        self.tags.push(tag);
        self.stats.appends += 1;
        self.stats.current_entries = self.len();
        self.stats.peak_entries = self.stats.peak_entries.max(self.len());
        Ok(())
    }

    /// Remove the `n` entries immediately before the last one, keeping the
    /// last entry itself (the compression step: drop the summarized window,
    /// keep the summary that was just written after it).
    pub fn evict_suffix_keep_last(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        if self.len() < n + 1 {
            return Err(Error::Cache(format!(
                "evict_suffix_keep_last({n}) on cache of {} entries",
                self.len()
            )));
        }
        let last = self.len() - 1;
        let slots: Vec<usize> = (last - n..last).collect();
        self.evict_slots(&slots)
    }

    /// Remove an arbitrary set of slots; survivors are compacted in order
    /// with their positions and tags untouched.
    pub fn evict_slots(&mut self, slots: &[usize]) -> Result<()> {
        if slots.is_empty() {
            return Ok(());
        }
        let mut sorted = slots.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != slots.len() {
            return Err(Error::Cache("evict_slots given duplicate slots".into()));
        }
        if *sorted.last().unwrap() >= self.len() {
            return Err(Error::Cache(format!(
                "evict slot {} out of {} entries",
                sorted.last().unwrap(),
                self.len()
            )));
        }
        let w = self.entry_width();
        let mut drop_mark = vec![false; self.len()];
        for &s in &sorted {
            drop_mark[s] = true;
        }
        for l in 0..self.n_layers {
            let mut new_k = Vec::with_capacity((self.len() - sorted.len()) * w);
            let mut new_v = Vec::with_capacity((self.len() - sorted.len()) * w);
            for slot in 0..self.len() {
                if !drop_mark[slot] {
                    new_k.extend_from_slice(&self.keys[l][slot * w..(slot + 1) * w]);
                    new_v.extend_from_slice(&self.values[l][slot * w..(slot + 1) * w]);
                }
            }
            self.keys[l] = new_k;
            self.values[l] = new_v;
        }
        let mut new_pos = Vec::with_capacity(self.len() - sorted.len());
        let mut new_tags = Vec::with_capacity(self.len() - sorted.len());
        for slot in 0..self.len() {
            if !drop_mark[slot] {
                new_pos.push(self.positions[slot]);
                new_tags.push(self.tags[slot]);
            }
        }
        self.positions = new_pos;
        self.tags = new_tags;
        self.stats.evicted += sorted.len() as u64;
        self.stats.current_entries = self.len();
        Ok(())
    }

    /// One JSON line per entry: slot, original position, tag.
    pub fn debug_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        for (slot, (&pos, tag)) in self.positions.iter().zip(self.tags.iter()).enumerate() {
            let line = serde_json::json!({ "slot": slot, "position": pos, "tag": tag });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
