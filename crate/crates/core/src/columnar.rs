//! Self-contained immutable columnar format over the global address space.
//!
//! Descriptors hold buffer *references*, never data. All element access goes
//! through the simulator's read path from the perspective of a reader node,
//! so cross-node access cost and coherence behavior are those of the
//! underlying memory, exactly as a columnar library layered on cluster
//! shared memory would behave.
//!
//! Layout follows the usual columnar conventions at small scale: an optional
//! validity bitmap (LSB-first, 1 = valid), 32-bit offsets for strings, and a
//! contiguous data buffer. Each buffer is a separate 128-byte-aligned
//! allocation so per-buffer flushes never touch a neighboring object.

use crate::error::{Error, Result};
use crate::sim::{Csm, GlobalAddress, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    UInt64,
    Int64,
    Float64,
    Bool,
    Utf8,
}

impl DataType {
    /// Fixed element width in bytes; `None` for bit-packed Bool and
    /// variable-length Utf8.
    pub fn fixed_width(self) -> Option<u64> {
        match self {
            DataType::UInt64 | DataType::Int64 | DataType::Float64 => Some(8),
            DataType::Bool | DataType::Utf8 => None,
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, DataType::UInt64 | DataType::Int64 | DataType::Float64)
    }

    /// Bytes needed for the data buffer of `len` elements (Utf8 excluded).
    pub fn data_len(self, len: u64) -> u64 {
        match self {
            DataType::Bool => len.div_ceil(8),
            _ => len * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub dtype: DataType,
    pub nullable: bool,
}

impl Field {
    pub fn new(name: impl Into<String>, dtype: DataType, nullable: bool) -> Self {
        Field {
            name: name.into(),
            dtype,
            nullable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::SchemaMismatch("schema has no fields".into()));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.name.is_empty() {
                return Err(Error::SchemaMismatch("empty field name".into()));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::SchemaMismatch(format!("duplicate field {:?}", f.name)));
            }
        }
        Ok(Schema { fields })
    }
}

/// Reference to a shared-memory buffer. `len == 0` with `addr == 0` denotes
/// an absent buffer of an empty array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferRef {
    pub addr: GlobalAddress,
    pub len: u64,
}

impl BufferRef {
    pub const EMPTY: BufferRef = BufferRef { addr: 0, len: 0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayDescriptor {
    pub dtype: DataType,
    pub length: u64,
    pub null_count: u64,
    /// Present iff `null_count > 0`.
    pub validity: Option<BufferRef>,
    /// Present iff dtype is Utf8 and the array is nonempty.
    pub offsets: Option<BufferRef>,
    pub data: BufferRef,
    pub sealed: bool,
}

impl ArrayDescriptor {
    /// Structural invariants that do not require reading buffer contents.
    pub fn validate_structure(&self) -> Result<()> {
        if (self.null_count > 0) != self.validity.is_some() {
            return Err(Error::WireInvariant(
                "validity buffer present iff null_count > 0".into(),
            ));
        }
        if self.null_count > self.length {
            return Err(Error::WireInvariant("null_count exceeds length".into()));
        }
        if let Some(v) = &self.validity {
            if v.len < self.length.div_ceil(8) {
                return Err(Error::WireInvariant("validity buffer too small".into()));
            }
        }
        match self.dtype {
            DataType::Utf8 => {
                if self.length > 0 {
                    let Some(o) = &self.offsets else {
                        return Err(Error::WireInvariant("utf8 array missing offsets".into()));
                    };
                    if o.len < 4 * (self.length + 1) {
                        return Err(Error::WireInvariant("offsets buffer too small".into()));
                    }
                }
            }
            other => {
                if self.offsets.is_some() {
                    return Err(Error::WireInvariant(format!(
                        "offsets buffer on non-utf8 array {other:?}"
                    )));
                }
                if self.length > 0 && self.data.len < other.data_len(self.length) {
                    return Err(Error::WireInvariant("data buffer too small".into()));
                }
            }
        }
        for (name, buf) in [
            ("validity", self.validity.as_ref()),
            ("offsets", self.offsets.as_ref()),
            ("data", Some(&self.data)),
        ] {
            if let Some(b) = buf {
                if b.len > 0 && b.addr % 128 != 0 {
                    return Err(Error::WireInvariant(format!("{name} buffer misaligned")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordBatchDescriptor {
    pub schema: Schema,
    pub num_rows: u64,
    pub columns: Vec<ArrayDescriptor>,
}

impl RecordBatchDescriptor {
    pub fn new(schema: Schema, columns: Vec<ArrayDescriptor>) -> Result<Self> {
        if columns.len() != schema.fields.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} columns for {} fields",
                columns.len(),
                schema.fields.len()
            )));
        }
        let num_rows = columns.first().map(|c| c.length).unwrap_or(0);
        for (c, f) in columns.iter().zip(&schema.fields) {
            if c.dtype != f.dtype {
                return Err(Error::SchemaMismatch(format!(
                    "column dtype {:?} vs field {:?}",
                    c.dtype, f.dtype
                )));
            }
            if c.length != num_rows {
                return Err(Error::SchemaMismatch("ragged columns".into()));
            }
        }
        Ok(RecordBatchDescriptor {
            schema,
            num_rows,
            columns,
        })
    }
}

/// A logical column assembled from per-node contiguous chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedColumn {
    pub dtype: DataType,
    pub chunks: Vec<ArrayDescriptor>,
}

impl ChunkedColumn {
    pub fn new(dtype: DataType, chunks: Vec<ArrayDescriptor>) -> Result<Self> {
        for c in &chunks {
            if c.dtype != dtype {
                return Err(Error::ChunkDtypeMismatch {
                    expected: dtype,
                    found: c.dtype,
                });
            }
        }
        Ok(ChunkedColumn { dtype, chunks })
    }

    pub fn total_len(&self) -> u64 {
        self.chunks.iter().map(|c| c.length).sum()
    }

    /// Map a global row index to (chunk index, row within chunk) by binary
    /// search over cumulative chunk lengths.
    pub fn resolve(&self, row: u64) -> Result<(usize, u64)> {
        let total = self.total_len();
        if row >= total {
            return Err(Error::RowOutOfRange { row, len: total });
        }
        let mut cum = Vec::with_capacity(self.chunks.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for c in &self.chunks {
            acc += c.length;
            cum.push(acc);
        }
        let idx = cum.partition_point(|&c| c <= row) - 1;
        Ok((idx, row - cum[idx]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableDescriptor {
    pub schema: Schema,
    pub num_rows: u64,
    pub columns: Vec<ChunkedColumn>,
}

impl TableDescriptor {
    pub fn new(schema: Schema, columns: Vec<ChunkedColumn>) -> Result<Self> {
        if columns.len() != schema.fields.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} columns for {} fields",
                columns.len(),
                schema.fields.len()
            )));
        }
        let num_rows = columns.first().map(|c| c.total_len()).unwrap_or(0);
        for (c, f) in columns.iter().zip(&schema.fields) {
            if c.dtype != f.dtype {
                return Err(Error::SchemaMismatch(format!(
                    "column dtype {:?} vs field {:?}",
                    c.dtype, f.dtype
                )));
            }
            // chunk boundaries may differ across columns; totals may not
            if c.total_len() != num_rows {
                return Err(Error::SchemaMismatch("ragged chunked columns".into()));
            }
        }
        Ok(TableDescriptor {
            schema,
            num_rows,
            columns,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    UInt64(u64),
    Int64(i64),
    Float64(f64),
    Bool(bool),
    Utf8(String),
}

/// Column values on the build side. Data at null positions is canonical
/// (zero / empty string).
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    UInt64(Vec<u64>),
    Int64(Vec<i64>),
    Float64(Vec<f64>),
    Bool(Vec<bool>),
    Utf8(Vec<String>),
}

impl ColumnData {
    pub fn dtype(&self) -> DataType {
        match self {
            ColumnData::UInt64(_) => DataType::UInt64,
            ColumnData::Int64(_) => DataType::Int64,
            ColumnData::Float64(_) => DataType::Float64,
            ColumnData::Bool(_) => DataType::Bool,
            ColumnData::Utf8(_) => DataType::Utf8,
        }
    }

    pub fn len(&self) -> u64 {
        (match self {
            ColumnData::UInt64(v) => v.len(),
            ColumnData::Int64(v) => v.len(),
            ColumnData::Float64(v) => v.len(),
            ColumnData::Bool(v) => v.len(),
            ColumnData::Utf8(v) => v.len(),
        }) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Little-endian data buffer image (Bool bit-packed LSB-first; Utf8
    /// concatenated bytes).
    pub fn data_bytes(&self) -> Vec<u8> {
        match self {
            ColumnData::UInt64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ColumnData::Int64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ColumnData::Float64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ColumnData::Bool(v) => pack_bits(v),
            ColumnData::Utf8(v) => v.iter().flat_map(|s| s.as_bytes().iter().copied()).collect(),
        }
    }

    /// 32-bit offsets image for Utf8 columns.
    pub fn offsets_bytes(&self) -> Option<Vec<u8>> {
        match self {
            ColumnData::Utf8(v) => {
                let mut out = Vec::with_capacity(4 * (v.len() + 1));
                let mut acc = 0u32;
                out.extend_from_slice(&acc.to_le_bytes());
                for s in v {
                    acc += s.len() as u32;
                    out.extend_from_slice(&acc.to_le_bytes());
                }
                Some(out)
            }
            _ => None,
        }
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn bit_at(bytes: &[u8], i: u64) -> bool {
    bytes[(i / 8) as usize] & (1 << (i % 8)) != 0
}

fn read_u32(csm: &mut Csm, node: NodeId, addr: u64) -> Result<u32> {
    let b = csm.read(node, addr, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

/// Decode one element as seen by `reader_node`. `None` means null.
pub fn array_get(
    csm: &mut Csm,
    reader_node: NodeId,
    array: &ArrayDescriptor,
    row: u64,
) -> Result<Option<Scalar>> {
    if !array.sealed {
        return Err(Error::UnsealedArray);
    }
    if row >= array.length {
        return Err(Error::RowOutOfRange {
            row,
            len: array.length,
        });
    }
    if let Some(v) = &array.validity {
        let byte = csm.read(reader_node, v.addr + row / 8, 1)?;
        if byte[0] & (1 << (row % 8)) == 0 {
            return Ok(None);
        }
    }
    let scalar = match array.dtype {
        DataType::UInt64 => {
            let b = csm.read(reader_node, array.data.addr + row * 8, 8)?;
            Scalar::UInt64(u64::from_le_bytes(b.try_into().unwrap()))
        }
        DataType::Int64 => {
            let b = csm.read(reader_node, array.data.addr + row * 8, 8)?;
            Scalar::Int64(i64::from_le_bytes(b.try_into().unwrap()))
        }
        DataType::Float64 => {
            let b = csm.read(reader_node, array.data.addr + row * 8, 8)?;
            Scalar::Float64(f64::from_le_bytes(b.try_into().unwrap()))
        }
        DataType::Bool => {
            let byte = csm.read(reader_node, array.data.addr + row / 8, 1)?;
            Scalar::Bool(byte[0] & (1 << (row % 8)) != 0)
        }
        DataType::Utf8 => {
            let offs = array.offsets.as_ref().expect("validated utf8 offsets");
            let start = read_u32(csm, reader_node, offs.addr + row * 4)? as u64;
            let end = read_u32(csm, reader_node, offs.addr + (row + 1) * 4)? as u64;
            if end < start || end > array.data.len {
                return Err(Error::Utf8Invariant(format!(
                    "offsets [{start}, {end}) out of bounds for data of {}",
                    array.data.len
                )));
            }
            let bytes = csm.read(reader_node, array.data.addr + start, end - start)?;
            Scalar::Utf8(String::from_utf8(bytes).map_err(|_| Error::InvalidUtf8)?)
        }
    };
    Ok(Some(scalar))
}

/// Element access across chunk boundaries, as if the column were contiguous.
pub fn chunked_get(
    csm: &mut Csm,
    reader_node: NodeId,
    col: &ChunkedColumn,
    row: u64,
) -> Result<Option<Scalar>> {
    let (chunk, local) = col.resolve(row)?;
    array_get(csm, reader_node, &col.chunks[chunk], local)
}

/// Sum of all valid elements, streaming chunk buffers through the reader's
/// cache. Integer overflow is an error; the empty / all-null sum is zero.
pub fn compute_sum(csm: &mut Csm, reader_node: NodeId, col: &ChunkedColumn) -> Result<Scalar> {
    if !col.dtype.is_numeric() {
        return Err(Error::NonNumeric(col.dtype));
    }
    let mut acc_u: u64 = 0;
    let mut acc_i: i64 = 0;
    let mut acc_f: f64 = 0.0;
    for chunk in &col.chunks {
        for_each_valid_element(csm, reader_node, chunk, |raw| {
            match col.dtype {
                DataType::UInt64 => {
                    acc_u = acc_u
                        .checked_add(u64::from_le_bytes(raw.try_into().unwrap()))
                        .ok_or(Error::Overflow)?;
                }
                DataType::Int64 => {
                    acc_i = acc_i
                        .checked_add(i64::from_le_bytes(raw.try_into().unwrap()))
                        .ok_or(Error::Overflow)?;
                }
                DataType::Float64 => acc_f += f64::from_le_bytes(raw.try_into().unwrap()),
                _ => unreachable!(),
            }
            Ok(())
        })?;
    }
    Ok(match col.dtype {
        DataType::UInt64 => Scalar::UInt64(acc_u),
        DataType::Int64 => Scalar::Int64(acc_i),
        DataType::Float64 => Scalar::Float64(acc_f),
        _ => unreachable!(),
    })
}

/// Minimum and maximum over valid elements (floats ordered by total order).
/// Errors when no valid element exists.
pub fn compute_min_max(
    csm: &mut Csm,
    reader_node: NodeId,
    col: &ChunkedColumn,
) -> Result<(Scalar, Scalar)> {
    if !col.dtype.is_numeric() {
        return Err(Error::NonNumeric(col.dtype));
    }
    let mut min_u = u64::MAX;
    let mut max_u = u64::MIN;
    let mut min_i = i64::MAX;
    let mut max_i = i64::MIN;
    let mut min_f: Option<f64> = None;
    let mut max_f: Option<f64> = None;
    let mut seen = false;
    for chunk in &col.chunks {
        for_each_valid_element(csm, reader_node, chunk, |raw| {
            seen = true;
            match col.dtype {
                DataType::UInt64 => {
                    let v = u64::from_le_bytes(raw.try_into().unwrap());
                    min_u = min_u.min(v);
                    max_u = max_u.max(v);
                }
                DataType::Int64 => {
                    let v = i64::from_le_bytes(raw.try_into().unwrap());
                    min_i = min_i.min(v);
                    max_i = max_i.max(v);
                }
                DataType::Float64 => {
                    let v = f64::from_le_bytes(raw.try_into().unwrap());
                    min_f = Some(match min_f {
                        Some(m) if m.total_cmp(&v).is_le() => m,
                        _ => v,
                    });
                    max_f = Some(match max_f {
                        Some(m) if m.total_cmp(&v).is_ge() => m,
                        _ => v,
                    });
                }
                _ => unreachable!(),
            }
            Ok(())
        })?;
    }
    if !seen {
        return Err(Error::EmptyColumn);
    }
    Ok(match col.dtype {
        DataType::UInt64 => (Scalar::UInt64(min_u), Scalar::UInt64(max_u)),
        DataType::Int64 => (Scalar::Int64(min_i), Scalar::Int64(max_i)),
        DataType::Float64 => (
            Scalar::Float64(min_f.unwrap()),
            Scalar::Float64(max_f.unwrap()),
        ),
        _ => unreachable!(),
    })
}

/// Stream a fixed-width chunk's valid elements to `f` as raw 8-byte slices.
fn for_each_valid_element(
    csm: &mut Csm,
    reader_node: NodeId,
    chunk: &ArrayDescriptor,
    mut f: impl FnMut(&[u8]) -> Result<()>,
) -> Result<()> {
    if !chunk.sealed {
        return Err(Error::UnsealedArray);
    }
    if chunk.length == 0 {
        return Ok(());
    }
    let data = csm.read(reader_node, chunk.data.addr, chunk.length * 8)?;
    let validity = match &chunk.validity {
        Some(v) => Some(csm.read(reader_node, v.addr, chunk.length.div_ceil(8))?),
        None => None,
    };
    for row in 0..chunk.length {
        if let Some(v) = &validity {
            if !bit_at(v, row) {
                continue;
            }
        }
        f(&data[(row * 8) as usize..(row * 8 + 8) as usize])?;
    }
    Ok(())
}

/// Recount zero validity bits over the first `length` rows; tests compare
/// this against the descriptor's `null_count`.
pub fn recompute_null_count(
    csm: &mut Csm,
    reader_node: NodeId,
    array: &ArrayDescriptor,
) -> Result<u64> {
    let Some(v) = &array.validity else {
        return Ok(0);
    };
    let bytes = csm.read(reader_node, v.addr, array.length.div_ceil(8))?;
    let mut nulls = 0;
    for i in 0..array.length {
        if !bit_at(&bytes, i) {
            nulls += 1;
        }
    }
    Ok(nulls)
}
