//! Data-free descriptor serialization.
//!
//! Only structure and buffer references cross the wire; the encoded size of
//! a descriptor depends on schema and chunk count, never on row count.
//! Addresses are embedded verbatim as u64 values: the address space is
//! cluster-global, so a reference is valid on every node without
//! translation, and deserialization copies no data.
//!
//! Wire format (little-endian throughout):
//!
//! ```text
//! header   magic "CSMT" | version u16 = 1 | kind u8 (1 batch, 2 table)
//! schema   field_count u16
//!          per field: name_len u16 | name bytes | dtype u8 | nullable u8
//! batch    num_rows u64 | per column: array
//! table    num_rows u64 | per column: chunk_count u32 | per chunk: array
//! array    length u64 | null_count u64 | buffer_flags u8
//!          per present buffer (validity, offsets, data): addr u64 | len u64
//!          (the data buffer is always encoded, possibly with len 0)
//! ```

use crate::columnar::{
    ArrayDescriptor, BufferRef, ChunkedColumn, DataType, Field, RecordBatchDescriptor, Schema,
    TableDescriptor,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSMT";
pub const VERSION: u16 = 1;
pub const KIND_RECORD_BATCH: u8 = 1;
pub const KIND_TABLE: u8 = 2;

const FLAG_VALIDITY: u8 = 1;
const FLAG_OFFSETS: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Descriptor {
    Batch(RecordBatchDescriptor),
    Table(TableDescriptor),
}

fn dtype_code(d: DataType) -> u8 {
    match d {
        DataType::UInt64 => 1,
        DataType::Int64 => 2,
        DataType::Float64 => 3,
        DataType::Bool => 4,
        DataType::Utf8 => 5,
    }
}

fn dtype_from(code: u8) -> Result<DataType> {
    Ok(match code {
        1 => DataType::UInt64,
        2 => DataType::Int64,
        3 => DataType::Float64,
        4 => DataType::Bool,
        5 => DataType::Utf8,
        other => return Err(Error::WireUnknownDtype(other)),
    })
}

fn put_schema(out: &mut Vec<u8>, schema: &Schema) {
    out.extend_from_slice(&(schema.fields.len() as u16).to_le_bytes());
    for f in &schema.fields {
        out.extend_from_slice(&(f.name.len() as u16).to_le_bytes());
        out.extend_from_slice(f.name.as_bytes());
        out.push(dtype_code(f.dtype));
        out.push(f.nullable as u8);
    }
}

fn put_array(out: &mut Vec<u8>, a: &ArrayDescriptor) -> Result<()> {
    if !a.sealed {
        return Err(Error::UnsealedArray);
    }
    out.extend_from_slice(&a.length.to_le_bytes());
    out.extend_from_slice(&a.null_count.to_le_bytes());
    let mut flags = 0u8;
    if a.validity.is_some() {
        flags |= FLAG_VALIDITY;
    }
    if a.offsets.is_some() {
        flags |= FLAG_OFFSETS;
    }
    out.push(flags);
    for buf in [a.validity.as_ref(), a.offsets.as_ref(), Some(&a.data)]
        .into_iter()
        .flatten()
    {
        out.extend_from_slice(&buf.addr.to_le_bytes());
        out.extend_from_slice(&buf.len.to_le_bytes());
    }
    Ok(())
}

pub fn serialize_record_batch(batch: &RecordBatchDescriptor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(exact_batch_size(batch));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(KIND_RECORD_BATCH);
    put_schema(&mut out, &batch.schema);
    out.extend_from_slice(&batch.num_rows.to_le_bytes());
    for c in &batch.columns {
        put_array(&mut out, c)?;
    }
    debug_assert_eq!(out.len(), exact_batch_size(batch));
    Ok(out)
}

pub fn serialize_table(table: &TableDescriptor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(exact_table_size(table));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(KIND_TABLE);
    put_schema(&mut out, &table.schema);
    out.extend_from_slice(&table.num_rows.to_le_bytes());
    for c in &table.columns {
        out.extend_from_slice(&(c.chunks.len() as u32).to_le_bytes());
        for chunk in &c.chunks {
            put_array(&mut out, chunk)?;
        }
    }
    debug_assert_eq!(out.len(), exact_table_size(table));
    Ok(out)
}

pub fn serialize_descriptor(desc: &Descriptor) -> Result<Vec<u8>> {
    match desc {
        Descriptor::Batch(b) => serialize_record_batch(b),
        Descriptor::Table(t) => serialize_table(t),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WireTruncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn get_schema(c: &mut Cursor) -> Result<Schema> {
    let n = c.u16()? as usize;
    let mut fields = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::WireInvariant("field name is not utf-8".into()))?
            .to_string();
        let dtype = dtype_from(c.u8()?)?;
        let nullable = c.u8()? != 0;
        fields.push(Field {
            name,
            dtype,
            nullable,
        });
    }
    Schema::new(fields).map_err(|e| Error::WireInvariant(e.to_string()))
}

fn get_array(c: &mut Cursor, dtype: DataType) -> Result<ArrayDescriptor> {
    let length = c.u64()?;
    let null_count = c.u64()?;
    let flags = c.u8()?;
    if flags & !(FLAG_VALIDITY | FLAG_OFFSETS) != 0 {
        return Err(Error::WireInvariant(format!("unknown buffer flags {flags:#x}")));
    }
    let mut buf = |present: bool| -> Result<Option<BufferRef>> {
        if !present {
            return Ok(None);
        }
        Ok(Some(BufferRef {
            addr: c.u64()?,
            len: c.u64()?,
        }))
    };
    let validity = buf(flags & FLAG_VALIDITY != 0)?;
    let offsets = buf(flags & FLAG_OFFSETS != 0)?;
    let data = buf(true)?.unwrap();
    let desc = ArrayDescriptor {
        dtype,
        length,
        null_count,
        validity,
        offsets,
        data,
        // only sealed arrays serialize, so a decoded one is sealed
        sealed: true,
    };
    // Structural checks only: buffer contents (offset monotonicity, validity
    // bit counts) live in shared memory and are validated on access, keeping
    // deserialization free of data-buffer reads.
    desc.validate_structure()?;
    Ok(desc)
}

pub fn deserialize_descriptor(bytes: &[u8]) -> Result<Descriptor> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::WireBadMagic);
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::WireUnknownVersion(version));
    }
    let kind = c.u8()?;
    let desc = match kind {
        KIND_RECORD_BATCH => {
            let schema = get_schema(&mut c)?;
            let num_rows = c.u64()?;
            let mut columns = Vec::with_capacity(schema.fields.len());
            for f in &schema.fields {
                columns.push(get_array(&mut c, f.dtype)?);
            }
            let batch = RecordBatchDescriptor::new(schema, columns)
                .map_err(|e| Error::WireInvariant(e.to_string()))?;
            if batch.num_rows != num_rows {
                return Err(Error::WireInvariant("num_rows mismatch".into()));
            }
            Descriptor::Batch(batch)
        }
        KIND_TABLE => {
            let schema = get_schema(&mut c)?;
            let num_rows = c.u64()?;
            let mut columns = Vec::with_capacity(schema.fields.len());
            for f in &schema.fields {
                let chunk_count = c.u32()? as usize;
                let mut chunks = Vec::with_capacity(chunk_count);
                for _ in 0..chunk_count {
                    chunks.push(get_array(&mut c, f.dtype)?);
                }
                columns.push(
                    ChunkedColumn::new(f.dtype, chunks)
                        .map_err(|e| Error::WireInvariant(e.to_string()))?,
                );
            }
            let table = TableDescriptor::new(schema, columns)
                .map_err(|e| Error::WireInvariant(e.to_string()))?;
            if table.num_rows != num_rows {
                return Err(Error::WireInvariant("num_rows mismatch".into()));
            }
            Descriptor::Table(table)
        }
        other => return Err(Error::WireUnknownKind(other)),
    };
    if !c.done() {
        return Err(Error::WireInvariant("trailing bytes".into()));
    }
    Ok(desc)
}

fn array_encoded_size(a: &ArrayDescriptor) -> usize {
    17 + 16 * (1 + a.validity.is_some() as usize + a.offsets.is_some() as usize)
}

fn schema_encoded_size(s: &Schema) -> usize {
    2 + s.fields.iter().map(|f| 4 + f.name.len()).sum::<usize>()
}

/// Exact encoded length, computable without serializing.
pub fn exact_batch_size(b: &RecordBatchDescriptor) -> usize {
    7 + schema_encoded_size(&b.schema) + 8 + b.columns.iter().map(array_encoded_size).sum::<usize>()
}

pub fn exact_table_size(t: &TableDescriptor) -> usize {
    7 + schema_encoded_size(&t.schema)
        + 8
        + t.columns
            .iter()
            .map(|c| 4 + c.chunks.iter().map(array_encoded_size).sum::<usize>())
            .sum::<usize>()
}

/// Closed-form upper bound on the encoded size: a 64-byte envelope, 6 bytes
/// plus the name per field, and 69 bytes per chunk (the 65-byte worst-case
/// array encoding plus an amortized chunk-count word).
pub fn size_bound(fields: impl Iterator<Item = usize>, chunks: usize) -> usize {
    64 + fields.map(|name_len| 6 + name_len).sum::<usize>() + 69 * chunks
}

pub fn batch_size_bound(b: &RecordBatchDescriptor) -> usize {
    size_bound(b.schema.fields.iter().map(|f| f.name.len()), b.columns.len())
}

pub fn table_size_bound(t: &TableDescriptor) -> usize {
    size_bound(
        t.schema.fields.iter().map(|f| f.name.len()),
        t.columns.iter().map(|c| c.chunks.len()).sum(),
    )
}
