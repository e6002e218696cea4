//! Buddy page allocator over a fixed arena.
//!
//! Free lists are kept per order and sorted by start page, so every
//! allocation decision is deterministic: the smallest sufficient order is
//! split, lowest address first. There is no compaction; once no aligned
//! block of the requested order survives, the request fails even though
//! scattered lower-order pages may still be free.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PAGE_SIZE: u64 = 4096;
pub const DEFAULT_TOTAL_PAGES: u32 = 4096;
pub const DEFAULT_MAX_ORDER: u8 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("allocation failure, order:{}", .0.requested_order)]
    AllocationFailure(OomReport),
    #[error("order {order} exceeds max order {max_order}")]
    OrderTooLarge { order: u8, max_order: u8 },
    #[error("double free of block at page {start} (order {order})")]
    DoubleFree { start: u32, order: u8 },
    #[error("block at page {start} (order {order}) was never handed out")]
    UnknownBlock { start: u32, order: u8 },
    #[error("invalid arena: {0}")]
    InvalidArena(String),
}

/// A `2^order`-page block starting at page index `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Block {
    pub start: u32,
    pub order: u8,
}

impl Block {
    pub fn pages(self) -> u32 {
        1 << self.order
    }
}

/// Evidence captured when a high-order request cannot be met.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OomReport {
    pub requested_order: u8,
    pub free_bytes_at_failure: u64,
    /// `None` when nothing at all is free.
    pub largest_free_order_at_failure: Option<u8>,
    pub step: u64,
}

impl OomReport {
    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocStats {
    pub free_bytes: u64,
    pub allocated_bytes: u64,
    pub largest_free_order: Option<u8>,
    pub fragmentation_index: f64,
}

/// Arena geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArenaConfig {
    pub page_size_bytes: u64,
    pub total_pages: u32,
    pub max_order: u8,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            page_size_bytes: DEFAULT_PAGE_SIZE,
            total_pages: DEFAULT_TOTAL_PAGES,
            max_order: DEFAULT_MAX_ORDER,
        }
    }
}

/// Per-VF footprint: one `big_order` block plus `small_blocks` single pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocProfile {
    pub big_order: u8,
    pub small_blocks: u32,
}

impl Default for AllocProfile {
    fn default() -> Self {
        Self {
            big_order: 3,
            small_blocks: 4,
        }
    }
}

impl AllocProfile {
    pub fn pages(&self) -> u64 {
        (1u64 << self.big_order) + u64::from(self.small_blocks)
    }
}

/// Allocation receipt for one VF's payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub big: Block,
    pub small: Vec<Block>,
}

impl Payload {
    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        std::iter::once(self.big).chain(self.small.iter().copied())
    }

    pub fn pages(&self) -> u64 {
        self.blocks().map(|b| u64::from(b.pages())).sum()
    }
}

#[derive(Debug, Clone)]
pub struct BuddyAllocator {
    page_size: u64,
    total_pages: u32,
    max_order: u8,
    free_lists: Vec<BTreeSet<u32>>,
    allocated: BTreeMap<u32, u8>,
    free_pages: u64,
}

impl BuddyAllocator {
    pub fn new(cfg: ArenaConfig) -> Result<Self, AllocError> {
        if cfg.page_size_bytes == 0 {
            return Err(AllocError::InvalidArena("page size must be nonzero".into()));
        }
        if cfg.total_pages == 0 || !cfg.total_pages.is_power_of_two() {
            return Err(AllocError::InvalidArena(format!(
                "total pages {} is not a power of two",
                cfg.total_pages
            )));
        }
        if cfg.max_order > 31 {
            return Err(AllocError::InvalidArena(format!(
                "max order {} is out of range",
                cfg.max_order
            )));
        }
        let top = cfg.max_order.min(cfg.total_pages.trailing_zeros() as u8);
        let mut free_lists = vec![BTreeSet::new(); usize::from(cfg.max_order) + 1];
        let step = 1u32 << top;
        let mut start = 0;
        while start < cfg.total_pages {
            free_lists[usize::from(top)].insert(start);
            start += step;
        }
        Ok(Self {
            page_size: cfg.page_size_bytes,
            total_pages: cfg.total_pages,
            max_order: cfg.max_order,
            free_lists,
            allocated: BTreeMap::new(),
            free_pages: u64::from(cfg.total_pages),
        })
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn max_order(&self) -> u8 {
        self.max_order
    }

    pub fn total_bytes(&self) -> u64 {
        u64::from(self.total_pages) * self.page_size
    }

    pub fn alloc(&mut self, order: u8) -> Result<Block, AllocError> {
        if order > self.max_order {
            return Err(AllocError::OrderTooLarge {
                order,
                max_order: self.max_order,
            });
        }
        let Some(found) =
            (order..=self.max_order).find(|&k| !self.free_lists[usize::from(k)].is_empty())
        else {
            return Err(AllocError::AllocationFailure(self.oom_report(order)));
        };
        let start = self.free_lists[usize::from(found)]
            .pop_first()
            .expect("non-empty free list");
        // Split down, keeping the lower half and freeing the upper buddy.
        let mut k = found;
        while k > order {
            k -= 1;
            self.free_lists[usize::from(k)].insert(start + (1 << k));
        }
        self.allocated.insert(start, order);
        self.free_pages -= 1 << order;
        Ok(Block { start, order })
    }

    pub fn free(&mut self, block: Block) -> Result<(), AllocError> {
        match self.allocated.get(&block.start) {
            Some(&o) if o == block.order => {}
            _ => {
                return Err(if self.is_page_free(block.start) {
                    AllocError::DoubleFree {
                        start: block.start,
                        order: block.order,
                    }
                } else {
                    AllocError::UnknownBlock {
                        start: block.start,
                        order: block.order,
                    }
                });
            }
        }
        self.allocated.remove(&block.start);
        self.free_pages += 1 << block.order;

        let mut start = block.start;
        let mut order = block.order;
        while order < self.max_order {
            let buddy = start ^ (1 << order);
            if buddy >= self.total_pages || !self.free_lists[usize::from(order)].remove(&buddy) {
                break;
            }
            start = start.min(buddy);
            order += 1;
        }
        self.free_lists[usize::from(order)].insert(start);
        Ok(())
    }

    /// Allocates one VF payload. On failure every block taken so far is
    /// returned, so a failed payload leaves the allocator unchanged.
    pub fn alloc_payload(&mut self, profile: &AllocProfile) -> Result<Payload, AllocError> {
        let big = self.alloc(profile.big_order)?;
        let mut small = Vec::with_capacity(profile.small_blocks as usize);
        for _ in 0..profile.small_blocks {
            match self.alloc(0) {
                Ok(b) => small.push(b),
                Err(e) => {
                    for b in small.into_iter().rev() {
                        self.free(b).expect("rollback of fresh block");
                    }
                    self.free(big).expect("rollback of fresh block");
                    return Err(e);
                }
            }
        }
        Ok(Payload { big, small })
    }

    pub fn free_payload(&mut self, payload: &Payload) -> Result<(), AllocError> {
        for b in payload.blocks() {
            self.free(b)?;
        }
        Ok(())
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_pages * self.page_size
    }

    pub fn allocated_bytes(&self) -> u64 {
        (u64::from(self.total_pages) - self.free_pages) * self.page_size
    }

    pub fn largest_free_order(&self) -> Option<u8> {
        (0..=self.max_order)
            .rev()
            .find(|&k| !self.free_lists[usize::from(k)].is_empty())
    }

    pub fn snapshot_stats(&self) -> AllocStats {
        let free_bytes = self.free_bytes();
        let largest = self.largest_free_order();
        let fragmentation_index = match largest {
            Some(k) if free_bytes > 0 => {
                // No request can span two max-order blocks, so at the top
                // order they all count as one.
                let blocks = if k == self.max_order {
                    self.free_lists[usize::from(k)].len() as u64
                } else {
                    1
                };
                let biggest = blocks * (1u64 << k) * self.page_size;
                1.0 - biggest as f64 / free_bytes as f64
            }
            _ => 0.0,
        };
        AllocStats {
            free_bytes,
            allocated_bytes: self.allocated_bytes(),
            largest_free_order: largest,
            fragmentation_index,
        }
    }

    /// Free blocks as `(start, order)`, ascending by order then start.
    pub fn free_blocks(&self) -> Vec<Block> {
        self.free_lists
            .iter()
            .enumerate()
            .flat_map(|(k, set)| {
                set.iter().map(move |&start| Block {
                    start,
                    order: k as u8,
                })
            })
            .collect()
    }

    pub fn allocated_blocks(&self) -> Vec<Block> {
        self.allocated
            .iter()
            .map(|(&start, &order)| Block { start, order })
            .collect()
    }

    fn is_page_free(&self, page: u32) -> bool {
        self.free_lists.iter().enumerate().any(|(k, set)| {
            let mask = !((1u32 << k) - 1);
            set.contains(&(page & mask))
        })
    }

    fn oom_report(&self, order: u8) -> OomReport {
        OomReport {
            requested_order: order,
            free_bytes_at_failure: self.free_bytes(),
            largest_free_order_at_failure: self.largest_free_order(),
            step: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arena(pages: u32, max_order: u8) -> BuddyAllocator {
        BuddyAllocator::new(ArenaConfig {
            page_size_bytes: 4096,
            total_pages: pages,
            max_order,
        })
        .unwrap()
    }

    #[test]
    fn fresh_arena_order3() {
        let mut a = BuddyAllocator::new(ArenaConfig::default()).unwrap();
        let b = a.alloc(3).unwrap();
        assert_eq!(b.pages(), 8);
        assert_eq!(b.start % 8, 0);
        assert_eq!(a.allocated_bytes(), 8 * 4096);
    }

    #[test]
    fn split_order3_for_single_page() {
        let mut a = arena(8, 3);
        let b = a.alloc(0).unwrap();
        assert_eq!(b, Block { start: 0, order: 0 });
        assert_eq!(
            a.free_blocks(),
            vec![
                Block { start: 1, order: 0 },
                Block { start: 2, order: 1 },
                Block { start: 4, order: 2 },
            ]
        );
    }

    #[test]
    fn high_order_fails_with_free_pages_left() {
        let mut a = arena(16, 4);
        let pages: Vec<_> = (0..16).map(|_| a.alloc(0).unwrap()).collect();
        // free every other page: 8 free pages, none of them buddies
        for b in pages.iter().step_by(2) {
            a.free(*b).unwrap();
        }
        let before = a.free_blocks();
        match a.alloc(3) {
            Err(AllocError::AllocationFailure(r)) => {
                assert_eq!(r.requested_order, 3);
                assert_eq!(r.free_bytes_at_failure, 8 * 4096);
                assert_eq!(r.largest_free_order_at_failure, Some(0));
            }
            other => panic!("expected failure, got {other:?}"),
        }
        assert_eq!(a.free_blocks(), before);
    }

    #[test]
    fn buddies_coalesce() {
        let mut a = arena(2, 1);
        let x = a.alloc(0).unwrap();
        let y = a.alloc(0).unwrap();
        a.free(x).unwrap();
        a.free(y).unwrap();
        assert_eq!(a.free_blocks(), vec![Block { start: 0, order: 1 }]);
    }

    #[test]
    fn adjacent_non_buddies_stay_apart() {
        let mut a = arena(4, 2);
        let b: Vec<_> = (0..4).map(|_| a.alloc(0).unwrap()).collect();
        // pages 1 and 2 are adjacent but 1 ^ 1 = 0 and 2 ^ 1 = 3
        a.free(b[1]).unwrap();
        a.free(b[2]).unwrap();
        assert_eq!(
            a.free_blocks(),
            vec![Block { start: 1, order: 0 }, Block { start: 2, order: 0 }]
        );
    }

    #[test]
    fn double_free_and_unknown() {
        let mut a = arena(8, 3);
        let b = a.alloc(1).unwrap();
        let _keep = a.alloc(1).unwrap();
        a.free(b).unwrap();
        assert_eq!(
            a.free(b),
            Err(AllocError::DoubleFree { start: 0, order: 1 })
        );
        assert!(matches!(
            a.free(Block { start: 2, order: 0 }),
            Err(AllocError::UnknownBlock { .. })
        ));
    }

    #[test]
    fn stats_edges() {
        let a = BuddyAllocator::new(ArenaConfig::default()).unwrap();
        let s = a.snapshot_stats();
        assert_eq!(s.fragmentation_index, 0.0);
        assert_eq!(s.largest_free_order, Some(10));

        let mut full = arena(4, 2);
        full.alloc(2).unwrap();
        let s = full.snapshot_stats();
        assert_eq!(s.free_bytes, 0);
        assert_eq!(s.fragmentation_index, 0.0);
        assert_eq!(s.largest_free_order, None);
    }

    #[test]
    fn two_order2_blocks_free() {
        let mut a = arena(16, 4);
        let blocks: Vec<_> = (0..4).map(|_| a.alloc(2).unwrap()).collect();
        a.free(blocks[0]).unwrap();
        a.free(blocks[2]).unwrap();
        let s = a.snapshot_stats();
        assert_eq!(s.largest_free_order, Some(2));
        assert!((s.fragmentation_index - 0.5).abs() < 1e-12);
    }

    #[test]
    fn payload_rolls_back() {
        let mut a = arena(8, 3);
        let err = a
            .alloc_payload(&AllocProfile {
                big_order: 2,
                small_blocks: 5,
            })
            .unwrap_err();
        assert!(matches!(err, AllocError::AllocationFailure(_)));
        assert_eq!(a.free_blocks(), vec![Block { start: 0, order: 3 }]);
    }

    #[test]
    fn rejects_bad_arena() {
        assert!(BuddyAllocator::new(ArenaConfig {
            page_size_bytes: 4096,
            total_pages: 12,
            max_order: 3
        })
        .is_err());
    }
}
