//! The object-creation coherence flow.
//!
//! Creating a shared buffer runs five steps in order:
//!
//! 1. **Allocation** — the writer requests memory from the owning node and
//!    receives a global address.
//! 2. **Clear** — every cache in the cluster drops its lines of the range,
//!    so no node is left holding entries that the coming writes would turn
//!    stale. The writer flushes locally; the owner coordinates all other
//!    nodes and acknowledges when the last one finished.
//! 3. **Write** — the writer streams the payload through its own cache.
//! 4. **Flush when not local** — a writer that does not own the memory
//!    writes its dirty lines back, so the data actually reaches the owner's
//!    backing memory.
//! 5. **Seal** — the range becomes immutable cluster-wide. From here on,
//!    reads refill caches with stable bytes and no further coherence work
//!    ever happens for this object.
//!
//! Steps 2 and 4 are each individually necessary; the test suite includes
//! failing-by-design schedules with either one disabled.

use crate::columnar::{
    ArrayDescriptor, BufferRef, ChunkedColumn, ColumnData, RecordBatchDescriptor, Schema,
    TableDescriptor,
};
use crate::error::{Error, Result};
use crate::ipc;
use crate::runtime::Cluster;
use crate::sim::{NodeId, TraceEvent};

/// Streamed source of buffer contents; lets gigabyte builds run without
/// materializing the payload.
pub trait Producer {
    fn total_len(&self) -> u64;
    /// Fill `out` with the bytes at `offset..offset + out.len()`.
    fn fill(&mut self, offset: u64, out: &mut [u8]);
}

pub struct SliceProducer<'a>(pub &'a [u8]);

impl Producer for SliceProducer<'_> {
    fn total_len(&self) -> u64 {
        self.0.len() as u64
    }

    fn fill(&mut self, offset: u64, out: &mut [u8]) {
        let off = offset as usize;
        out.copy_from_slice(&self.0[off..off + out.len()]);
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Disable step 2 (the cluster-wide pre-write flush). Test-only: proves
    /// the stale-read hazard exists.
    pub skip_pre_write_flush: bool,
    /// Disable step 4 (the writer's post-write flush). Test-only: proves the
    /// lost-write hazard exists.
    pub skip_post_write_flush: bool,
    /// Write granularity for step 3.
    pub write_chunk_bytes: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            skip_pre_write_flush: false,
            skip_post_write_flush: false,
            write_chunk_bytes: 1 << 20,
        }
    }
}

/// Run the five-step flow and return a sealed buffer reference.
pub fn create_shared_buffer(
    cl: &mut Cluster,
    writer: NodeId,
    owner: NodeId,
    producer: &mut dyn Producer,
    opts: &BuildOptions,
) -> Result<BufferRef> {
    let size = producer.total_len();
    if size == 0 {
        return Err(Error::AllocZero);
    }
    cl.mark(writer, "alloc_start");
    let addr = cl.rpc_alloc(writer, owner, size)?;

    cl.mark(writer, "clear_start");
    if !opts.skip_pre_write_flush {
        cl.broadcast_flush(writer, addr, size)?;
    }

    cl.mark(writer, "write_start");
    let mut buf = vec![0u8; opts.write_chunk_bytes.max(1)];
    let mut off = 0u64;
    while off < size {
        let k = (size - off).min(buf.len() as u64) as usize;
        producer.fill(off, &mut buf[..k]);
        cl.write_checked(writer, addr + off, &buf[..k])?;
        off += k as u64;
    }

    cl.mark(writer, "post_flush_start");
    if writer != owner && !opts.skip_post_write_flush {
        cl.csm_mut().barrier(writer)?;
        cl.csm_mut().flush_range(writer, addr, size)?;
        cl.csm_mut().barrier(writer)?;
    }

    cl.mark(writer, "seal_start");
    cl.seal_range(writer, addr, size)?;
    cl.mark(writer, "seal_end");
    Ok(BufferRef { addr, len: size })
}

fn count_nulls(validity: &[bool]) -> u64 {
    validity.iter().filter(|v| !**v).count() as u64
}

/// Build one sealed array: one shared-buffer flow per present buffer, in
/// validity, offsets, data order.
pub fn build_array(
    cl: &mut Cluster,
    writer: NodeId,
    owner: NodeId,
    data: &ColumnData,
    validity: Option<&[bool]>,
    opts: &BuildOptions,
) -> Result<ArrayDescriptor> {
    let length = data.len();
    if let Some(v) = validity {
        if v.len() as u64 != length {
            return Err(Error::SchemaMismatch(format!(
                "validity of {} bits for {} rows",
                v.len(),
                length
            )));
        }
    }
    let null_count = validity.map(count_nulls).unwrap_or(0);

    let mut build = |bytes: &[u8]| -> Result<BufferRef> {
        if bytes.is_empty() {
            return Ok(BufferRef::EMPTY);
        }
        create_shared_buffer(cl, writer, owner, &mut SliceProducer(bytes), opts)
    };

    let validity_ref = if null_count > 0 {
        Some(build(&crate::columnar::pack_bits(validity.unwrap()))?)
    } else {
        None
    };
    let offsets_ref = match data.offsets_bytes() {
        Some(ob) if length > 0 => Some(build(&ob)?),
        _ => None,
    };
    let data_ref = build(&data.data_bytes())?;

    let desc = ArrayDescriptor {
        dtype: data.dtype(),
        length,
        null_count,
        validity: validity_ref,
        offsets: offsets_ref,
        data: data_ref,
        sealed: true,
    };
    desc.validate_structure()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    Ok(desc)
}

pub type ColumnSpec = (ColumnData, Option<Vec<bool>>);

fn check_column(schema: &Schema, idx: usize, col: &ColumnSpec) -> Result<()> {
    let field = &schema.fields[idx];
    if col.0.dtype() != field.dtype {
        return Err(Error::SchemaMismatch(format!(
            "column {idx} is {:?}, field {:?} wants {:?}",
            col.0.dtype(),
            field.name,
            field.dtype
        )));
    }
    let nulls = col.1.as_deref().map(count_nulls).unwrap_or(0);
    if nulls > 0 && !field.nullable {
        return Err(Error::SchemaMismatch(format!(
            "nulls in non-nullable field {:?}",
            field.name
        )));
    }
    Ok(())
}

pub fn build_record_batch(
    cl: &mut Cluster,
    writer: NodeId,
    owner: NodeId,
    schema: Schema,
    columns: &[ColumnSpec],
    opts: &BuildOptions,
) -> Result<RecordBatchDescriptor> {
    if columns.len() != schema.fields.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} columns for {} fields",
            columns.len(),
            schema.fields.len()
        )));
    }
    let mut arrays = Vec::with_capacity(columns.len());
    for (i, col) in columns.iter().enumerate() {
        check_column(&schema, i, col)?;
        arrays.push(build_array(cl, writer, owner, &col.0, col.1.as_deref(), opts)?);
    }
    RecordBatchDescriptor::new(schema, arrays)
}

/// One node's slice of a spanning table: `writer` streams the rows into
/// memory owned by `owner` (they may be the same node).
pub struct TablePartition {
    pub owner: NodeId,
    pub writer: NodeId,
    pub columns: Vec<ColumnSpec>,
}

/// Serialize a table descriptor and ship it to every node, charging the
/// serialization work to the coordinator.
pub fn broadcast_table_descriptor(
    cl: &mut Cluster,
    coordinator: NodeId,
    table: &TableDescriptor,
) -> Result<Vec<u8>> {
    cl.mark(coordinator, "serialize_start");
    let bytes = ipc::serialize_table(table)?;
    let cost = cl.csm().charges().serialize_ps(bytes.len() as u64);
    cl.csm_mut().ledger_mut().record(TraceEvent::Serialize {
        node: coordinator,
        bytes: bytes.len() as u64,
        cost_ps: cost,
    });
    cl.mark(coordinator, "send_start");
    cl.broadcast_descriptor(coordinator, &bytes)?;
    cl.mark(coordinator, "send_end");
    Ok(bytes)
}

/// Build a table whose column chunks live on different nodes, then announce
/// it cluster-wide. Chunk order follows partition order.
pub fn build_spanning_table(
    cl: &mut Cluster,
    coordinator: NodeId,
    schema: Schema,
    partitions: &[TablePartition],
    opts: &BuildOptions,
) -> Result<(TableDescriptor, Vec<u8>)> {
    if partitions.is_empty() {
        return Err(Error::SchemaMismatch("no partitions".into()));
    }
    for p in partitions {
        if p.columns.len() != schema.fields.len() {
            return Err(Error::SchemaMismatch(format!(
                "partition has {} columns for {} fields",
                p.columns.len(),
                schema.fields.len()
            )));
        }
        let rows = p.columns.first().map(|c| c.0.len()).unwrap_or(0);
        for (i, col) in p.columns.iter().enumerate() {
            check_column(&schema, i, col)?;
            if col.0.len() != rows {
                return Err(Error::SchemaMismatch("ragged partition".into()));
            }
        }
    }
    let mut columns: Vec<Vec<ArrayDescriptor>> = vec![Vec::new(); schema.fields.len()];
    for p in partitions {
        for (i, col) in p.columns.iter().enumerate() {
            columns[i].push(build_array(
                cl,
                p.writer,
                p.owner,
                &col.0,
                col.1.as_deref(),
                opts,
            )?);
        }
    }
    let chunked = schema
        .fields
        .iter()
        .zip(columns)
        .map(|(f, chunks)| ChunkedColumn::new(f.dtype, chunks))
        .collect::<Result<Vec<_>>>()?;
    let table = TableDescriptor::new(schema, chunked)?;
    let bytes = broadcast_table_descriptor(cl, coordinator, &table)?;
    Ok((table, bytes))
}

/// The baseline transfer: read every data buffer, ship descriptor plus data
/// over ethernet, and rebuild receiver-local buffers through the full
/// protocol. Returns the new descriptor.
pub fn ethernet_full_copy(
    cl: &mut Cluster,
    from: NodeId,
    to: NodeId,
    batch: &RecordBatchDescriptor,
) -> Result<RecordBatchDescriptor> {
    let desc_bytes = ipc::serialize_record_batch(batch)?;
    let mut blob = Vec::new();
    for col in &batch.columns {
        for buf in [col.validity.as_ref(), col.offsets.as_ref(), Some(&col.data)]
            .into_iter()
            .flatten()
        {
            if buf.len > 0 {
                blob.extend_from_slice(&cl.csm_mut().read(from, buf.addr, buf.len)?);
            }
        }
    }
    // the classical path serializes the payload before shipping it
    let total = (desc_bytes.len() + blob.len()) as u64;
    let ser_cost = cl.csm().charges().serialize_ps(total);
    cl.csm_mut().ledger_mut().record(TraceEvent::Serialize {
        node: from,
        bytes: total,
        cost_ps: ser_cost,
    });
    cl.send_full_copy(from, to, desc_bytes, blob)?;

    let (desc_bytes, blob) = cl
        .take_full_copy(to)
        .expect("full copy delivered before rebuild");
    let ipc::Descriptor::Batch(received) = ipc::deserialize_descriptor(&desc_bytes)? else {
        return Err(Error::WireInvariant("expected a record batch".into()));
    };
    let mut cursor = 0usize;
    let mut take = |len: u64| -> &[u8] {
        let s = &blob[cursor..cursor + len as usize];
        cursor += len as usize;
        s
    };
    let opts = BuildOptions::default();
    let mut columns = Vec::with_capacity(received.columns.len());
    for col in &received.columns {
        let mut rebuild = |buf: Option<BufferRef>| -> Result<Option<BufferRef>> {
            match buf {
                Some(b) if b.len > 0 => {
                    let bytes = take(b.len).to_vec();
                    Ok(Some(create_shared_buffer(
                        cl,
                        to,
                        to,
                        &mut SliceProducer(&bytes),
                        &opts,
                    )?))
                }
                Some(b) => Ok(Some(b)),
                None => Ok(None),
            }
        };
        let validity = rebuild(col.validity)?;
        let offsets = rebuild(col.offsets)?;
        let data = rebuild(Some(col.data))?.unwrap();
        columns.push(ArrayDescriptor {
            data,
            validity,
            offsets,
            ..col.clone()
        });
    }
    RecordBatchDescriptor::new(received.schema, columns)
}
