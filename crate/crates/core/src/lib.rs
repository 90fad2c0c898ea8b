//! Cluster shared memory with an immutable columnar table layer.
//!
//! A deterministic simulator models a cluster-global address space whose
//! per-node caches are coherent locally but never invalidated across nodes.
//! On top of it: an owner-mediated allocator, an Arrow-style columnar
//! format, descriptor-only serialization, the flush protocol that makes
//! immutable objects consistent cluster-wide, and simulated-time benchmarks
//! comparing descriptor sharing against full copies over ethernet.

pub mod bench;
pub mod columnar;
pub mod error;
pub mod ipc;
pub mod protocol;
pub mod runtime;
pub mod shmalloc;
pub mod sim;

pub use error::{Error, Result};
pub use sim::{CoherenceLevel, CostModel, Csm, GlobalAddress, NodeId, Segment, SegmentMap};
