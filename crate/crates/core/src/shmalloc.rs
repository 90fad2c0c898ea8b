//! Owner-side shared-memory allocator.
//!
//! A [`Region`] is a first-fit free-list allocator over part of its owner's
//! segment. Only the owner node mutates a region; other nodes obtain memory
//! through allocation messages handled on the owner's event loop. Allocator
//! metadata is host-side bookkeeping, never stored in the shared address
//! space, so it has no coherence concerns of its own.
//!
//! Every allocation is returned on a 128-byte boundary and reserves a
//! multiple of 128 bytes, so no two objects ever share a cache line and
//! flushing one object can never write back another object's data.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sim::{GlobalAddress, NodeId, DEFAULT_LINE_SIZE};

pub const ALLOC_ALIGN: u64 = DEFAULT_LINE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRecord {
    pub addr: GlobalAddress,
    pub requested: u64,
    /// `requested` rounded up to the allocation alignment.
    pub reserved: u64,
    pub sealed: bool,
}

#[derive(Debug, Clone)]
pub struct Region {
    owner: NodeId,
    base: GlobalAddress,
    size: u64,
    /// Free spans as offset -> length, kept coalesced and address-ordered.
    free: BTreeMap<u64, u64>,
    allocations: BTreeMap<GlobalAddress, AllocRecord>,
}

impl Region {
    /// A region covering `[base, base + size)`, which must lie inside the
    /// owner's segment `[seg_base, seg_base + seg_size)`.
    pub fn create(
        owner: NodeId,
        base: GlobalAddress,
        size: u64,
        seg_base: GlobalAddress,
        seg_size: u64,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyRegion);
        }
        if base % ALLOC_ALIGN != 0 {
            return Err(Error::Misaligned {
                what: "region base",
                value: base,
                align: ALLOC_ALIGN,
            });
        }
        if size % ALLOC_ALIGN != 0 {
            return Err(Error::Misaligned {
                what: "region size",
                value: size,
                align: ALLOC_ALIGN,
            });
        }
        if base < seg_base || base + size > seg_base + seg_size {
            return Err(Error::RegionOutOfSegment { base, size });
        }
        let mut free = BTreeMap::new();
        free.insert(0, size);
        Ok(Region {
            owner,
            base,
            size,
            free,
            allocations: BTreeMap::new(),
        })
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn base(&self) -> GlobalAddress {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// First fit: the lowest-addressed free span that holds the reserved
    /// size. Returns the allocation's global address.
    pub fn alloc(&mut self, requested: u64) -> Result<GlobalAddress> {
        if requested == 0 {
            return Err(Error::AllocZero);
        }
        let reserved = requested.div_ceil(ALLOC_ALIGN) * ALLOC_ALIGN;
        let span = self
            .free
            .iter()
            .find(|(_, len)| **len >= reserved)
            .map(|(off, len)| (*off, *len));
        let Some((off, len)) = span else {
            return Err(Error::OutOfMemory { requested });
        };
        self.free.remove(&off);
        if len > reserved {
            self.free.insert(off + reserved, len - reserved);
        }
        let addr = self.base + off;
        self.allocations.insert(
            addr,
            AllocRecord {
                addr,
                requested,
                reserved,
                sealed: false,
            },
        );
        Ok(addr)
    }

    /// Return a live, unsealed allocation to the free list, coalescing with
    /// adjacent free spans.
    pub fn free(&mut self, addr: GlobalAddress) -> Result<()> {
        let Some(rec) = self.allocations.get(&addr) else {
            return Err(Error::UnknownAllocation { addr });
        };
        if rec.sealed {
            return Err(Error::FreeSealed { addr });
        }
        let rec = self.allocations.remove(&addr).unwrap();
        let mut off = addr - self.base;
        let mut len = rec.reserved;
        // merge with the span immediately after
        if let Some(next_len) = self.free.remove(&(off + len)) {
            len += next_len;
        }
        // merge with the span immediately before
        if let Some((&prev_off, &prev_len)) = self.free.range(..off).next_back() {
            if prev_off + prev_len == off {
                self.free.remove(&prev_off);
                off = prev_off;
                len += prev_len;
            }
        }
        self.free.insert(off, len);
        Ok(())
    }

    pub fn seal(&mut self, addr: GlobalAddress) -> Result<()> {
        let rec = self
            .allocations
            .get_mut(&addr)
            .ok_or(Error::UnknownAllocation { addr })?;
        rec.sealed = true;
        Ok(())
    }

    pub fn record(&self, addr: GlobalAddress) -> Option<&AllocRecord> {
        self.allocations.get(&addr)
    }

    pub fn live_count(&self) -> usize {
        self.allocations.len()
    }

    pub fn free_spans(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.free.iter().map(|(o, l)| (*o, *l))
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.allocations.values().map(|r| r.reserved).sum()
    }

    pub fn largest_free(&self) -> u64 {
        self.free.values().copied().max().unwrap_or(0)
    }

    pub fn stats_json(&self) -> String {
        format!(
            r#"{{"size":{},"live":{},"free_spans":{},"largest_free":{}}}"#,
            self.size,
            self.live_count(),
            self.free.len(),
            self.largest_free()
        )
    }

    /// Free spans plus reserved allocations must tile the region exactly;
    /// used by tests after every mutation.
    pub fn check_conservation(&self) -> bool {
        if self.free_bytes() + self.reserved_bytes() != self.size {
            return false;
        }
        // no overlap: walk spans and allocations in address order
        let mut marks: Vec<(u64, u64)> = self
            .free
            .iter()
            .map(|(o, l)| (*o, *l))
            .chain(
                self.allocations
                    .values()
                    .map(|r| (r.addr - self.base, r.reserved)),
            )
            .collect();
        marks.sort_unstable();
        let mut cursor = 0;
        for (off, len) in marks {
            if off != cursor {
                return false;
            }
            cursor = off + len;
        }
        cursor == self.size
    }
}
