//! Bounded episodic memory with per-task ring or reservoir management.

use crate::rng::SeededRng;
use std::collections::BTreeMap;
use std::collections::VecDeque;

/// One stored example; logits are present when the strategy needs them
/// (dark experience replay).
#[derive(Debug, Clone)]
pub struct MemoryItem {
    pub x: Vec<f32>,
    pub y: u8,
    pub task_id: usize,
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryPolicy {
    /// Per-task FIFO segments, each capped at the quota.
    RingPerTask { per_task_quota: usize },
    /// Uniform reservoir over the whole stream.
    Reservoir,
}

#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    capacity: usize,
    policy: MemoryPolicy,
    /// Ring storage, keyed by task id.
    segments: BTreeMap<usize, VecDeque<MemoryItem>>,
    /// Reservoir storage.
    pool: Vec<MemoryItem>,
    seen: u64,
}

impl EpisodicMemory {
    pub fn ring(capacity: usize, per_task_quota: usize) -> Self {
        Self {
            capacity,
            policy: MemoryPolicy::RingPerTask { per_task_quota },
            segments: BTreeMap::new(),
            pool: Vec::new(),
            seen: 0,
        }
    }

    pub fn reservoir(capacity: usize) -> Self {
        Self {
            capacity,
            policy: MemoryPolicy::Reservoir,
            segments: BTreeMap::new(),
            pool: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        match self.policy {
            MemoryPolicy::RingPerTask { .. } => self.segments.values().map(|s| s.len()).sum(),
            MemoryPolicy::Reservoir => self.pool.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts one item. A zero-capacity memory accepts and drops items.
    pub fn insert(&mut self, item: MemoryItem, rng: &mut SeededRng) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        match self.policy {
            MemoryPolicy::RingPerTask { per_task_quota } => {
                let segment = self.segments.entry(item.task_id).or_default();
                segment.push_back(item);
                if segment.len() > per_task_quota {
                    segment.pop_front();
                }
                // Capacity is a hard bound even when quota * tasks exceeds it:
                // evict the oldest item of the fullest task.
                while self.len() > self.capacity {
                    if let Some((&task, _)) = self
                        .segments
                        .iter()
                        .max_by_key(|(task, seg)| (seg.len(), usize::MAX - **task))
                    {
                        self.segments.get_mut(&task).map(|s| s.pop_front());
                    }
                }
            }
            MemoryPolicy::Reservoir => {
                if self.pool.len() < self.capacity {
                    self.pool.push(item);
                } else {
                    // classic reservoir step: keep with probability cap/seen,
                    // landing in a uniformly chosen slot
                    let j = rng.gen_range_usize(self.seen as usize);
                    if j < self.capacity {
                        self.pool[j] = item;
                    }
                }
            }
        }
    }

    pub fn items(&self) -> Vec<&MemoryItem> {
        match self.policy {
            MemoryPolicy::RingPerTask { .. } => {
                self.segments.values().flat_map(|s| s.iter()).collect()
            }
            MemoryPolicy::Reservoir => self.pool.iter().collect(),
        }
    }

    /// Uniform sample of `k` distinct stored items (fewer when the memory
    /// holds fewer).
    pub fn sample(&self, k: usize, rng: &mut SeededRng) -> Vec<&MemoryItem> {
        let all = self.items();
        let picks = rng.sample_indices(all.len(), k.min(all.len()));
        picks.into_iter().map(|i| all[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(task: usize, tag: u8) -> MemoryItem {
        MemoryItem {
            x: vec![tag as f32],
            y: tag,
            task_id: task,
            logits: None,
        }
    }

    #[test]
    fn ring_keeps_the_newest_quota_items_per_task() {
        let mut mem = EpisodicMemory::ring(250, 50);
        let mut rng = SeededRng::new(0);
        for i in 0..60u8 {
            mem.insert(item(1, i), &mut rng);
        }
        assert_eq!(mem.len(), 50);
        let kept: Vec<u8> = mem.items().iter().map(|m| m.y).collect();
        let want: Vec<u8> = (10..60).collect();
        assert_eq!(kept, want);
    }

    #[test]
    fn ring_respects_total_capacity_across_tasks() {
        let mut mem = EpisodicMemory::ring(250, 50);
        let mut rng = SeededRng::new(0);
        for task in 1..=5 {
            for i in 0..50u8 {
                mem.insert(item(task, i), &mut rng);
            }
        }
        assert_eq!(mem.len(), 250);
        assert!(mem.len() <= mem.capacity());
    }

    #[test]
    fn zero_capacity_memory_is_a_noop() {
        let mut mem = EpisodicMemory::reservoir(0);
        let mut rng = SeededRng::new(0);
        mem.insert(item(1, 1), &mut rng);
        assert!(mem.is_empty());
        assert_eq!(mem.seen(), 1);
    }

    #[test]
    fn reservoir_never_exceeds_capacity() {
        let mut mem = EpisodicMemory::reservoir(10);
        let mut rng = SeededRng::new(5);
        for i in 0..1000 {
            mem.insert(item(1, (i % 256) as u8), &mut rng);
        }
        assert_eq!(mem.len(), 10);
        assert_eq!(mem.seen(), 1000);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut mem = EpisodicMemory::ring(100, 100);
        let mut rng = SeededRng::new(1);
        for i in 0..20u8 {
            mem.insert(item(1, i), &mut rng);
        }
        let picks = mem.sample(15, &mut rng);
        assert_eq!(picks.len(), 15);
        let mut ys: Vec<u8> = picks.iter().map(|m| m.y).collect();
        ys.sort_unstable();
        ys.dedup();
        assert_eq!(ys.len(), 15);
    }
}
