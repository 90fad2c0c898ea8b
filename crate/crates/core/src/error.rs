use thiserror::Error;

use crate::columnar::DataType;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // address space / simulator
    #[error("segments overlap: [{a_base}, +{a_size}) and [{b_base}, +{b_size})")]
    SegmentOverlap {
        a_base: u64,
        a_size: u64,
        b_base: u64,
        b_size: u64,
    },
    #[error("{what} = {value} is not a multiple of {align}")]
    Misaligned {
        what: &'static str,
        value: u64,
        align: u64,
    },
    #[error("segment map is empty")]
    EmptySegments,
    #[error("segment size must be nonzero")]
    EmptySegment,
    #[error("range [{addr}, +{len}) out of address space of {space} bytes")]
    OutOfRange { addr: u64, len: u64, space: u64 },
    #[error("address {addr} falls in a gap between segments (no owner)")]
    NoOwner { addr: u64 },
    #[error("range [{addr}, +{len}) spans more than one owner segment")]
    MultiOwnerRange { addr: u64, len: u64 },
    #[error("unknown node id {0}")]
    UnknownNode(usize),

    // allocator
    #[error("allocation of zero bytes")]
    AllocZero,
    #[error("out of memory: no free span fits {requested} bytes")]
    OutOfMemory { requested: u64 },
    #[error("region is empty or degenerate")]
    EmptyRegion,
    #[error("region [{base}, +{size}) not inside owner segment")]
    RegionOutOfSegment { base: u64, size: u64 },
    #[error("no allocation at address {addr}")]
    UnknownAllocation { addr: u64 },
    #[error("allocation at {addr} is sealed and cannot be freed")]
    FreeSealed { addr: u64 },
    #[error("node {node} has no region")]
    NoRegion { node: usize },

    // protocol
    #[error("write into sealed range at {addr}")]
    SealedRange { addr: u64 },
    #[error("sealed ranges overlap at {addr}")]
    SealOverlap { addr: u64 },
    #[error("rpc to node {node} timed out (node down or queue drained)")]
    RpcTimeout { node: usize },
    #[error("empty object build requires an explicit empty column")]
    EmptyBuild,

    // columnar
    #[error("array is not sealed")]
    UnsealedArray,
    #[error("row {row} out of range for length {len}")]
    RowOutOfRange { row: u64, len: u64 },
    #[error("operation requires a numeric column, got {0:?}")]
    NonNumeric(DataType),
    #[error("integer overflow in kernel")]
    Overflow,
    #[error("column is empty or all-null")]
    EmptyColumn,
    #[error("chunk dtype {found:?} does not match column dtype {expected:?}")]
    ChunkDtypeMismatch { expected: DataType, found: DataType },
    #[error("partition does not conform to schema: {0}")]
    SchemaMismatch(String),
    #[error("utf8 invariant violated: {0}")]
    Utf8Invariant(String),
    #[error("buffer does not hold valid utf-8")]
    InvalidUtf8,

    // descriptor wire format
    #[error("bad magic")]
    WireBadMagic,
    #[error("unknown wire version {0}")]
    WireUnknownVersion(u16),
    #[error("unknown descriptor kind {0}")]
    WireUnknownKind(u8),
    #[error("unknown dtype code {0}")]
    WireUnknownDtype(u8),
    #[error("truncated descriptor bytes")]
    WireTruncated,
    #[error("descriptor invariant violated: {0}")]
    WireInvariant(String),

    // bench / config
    #[error("invalid bench config: {0}")]
    BenchConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
