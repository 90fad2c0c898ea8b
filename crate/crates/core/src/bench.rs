//! Simulated-time reproductions of the measured experiments: the remote
//! table initialization breakdown, the descriptor-vs-full-copy transfer
//! comparison, and strided read throughput.
//!
//! All numbers come from the ledger: component times are logical-clock
//! deltas between phase marks left in the trace, so a report can always be
//! reconstructed from the exported trace alone.

use serde::Serialize;

use crate::columnar::{
    ArrayDescriptor, ChunkedColumn, DataType, Field, RecordBatchDescriptor, Schema,
    TableDescriptor,
};
use crate::error::{Error, Result};
use crate::ipc;
use crate::protocol::{self, BuildOptions, Producer};
use crate::runtime::Cluster;
use crate::sim::{CoherenceLevel, CostModel, NodeId, Segment, SegmentMap, TraceEvent};

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StridedMode {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMethod {
    Ethernet,
    Csm,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub nodes: usize,
    pub table_bytes: u64,
    pub element_type: DataType,
    pub stride: u64,
    pub mode: StridedMode,
    pub method: TransferMethod,
    pub seed: u64,
    pub cost_model: CostModel,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            nodes: 2,
            table_bytes: 16 * MIB,
            element_type: DataType::UInt64,
            stride: 1,
            mode: StridedMode::Local,
            method: TransferMethod::Csm,
            seed: 0,
            cost_model: CostModel::default(),
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<u64> {
        let width = self
            .element_type
            .fixed_width()
            .ok_or_else(|| Error::BenchConfig(format!("{:?} is not a fixed-width element type", self.element_type)))?;
        if self.table_bytes == 0 || self.table_bytes % width != 0 {
            return Err(Error::BenchConfig(format!(
                "table_bytes {} must be a nonzero multiple of the element width {width}",
                self.table_bytes
            )));
        }
        if self.stride == 0 {
            return Err(Error::BenchConfig("stride must be >= 1".into()));
        }
        if self.nodes < 2 {
            return Err(Error::BenchConfig("need at least 2 nodes".into()));
        }
        self.cost_model.validate()?;
        Ok(width)
    }
}

/// The six components of remote table initialization, simulated ms.
#[derive(Debug, Clone, Serialize)]
pub struct BreakdownReport {
    pub malloc_request: f64,
    pub pre_write_flush: f64,
    pub write_remote: f64,
    pub post_write_flush: f64,
    pub serialize_descriptor: f64,
    pub send_descriptor: f64,
    pub total: f64,
}

impl BreakdownReport {
    /// Rows in the component order of the measured table.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("malloc_request", self.malloc_request),
            ("pre_write_flush", self.pre_write_flush),
            ("write_remote", self.write_remote),
            ("post_write_flush", self.post_write_flush),
            ("serialize_descriptor", self.serialize_descriptor),
            ("send_descriptor", self.send_descriptor),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub method: TransferMethod,
    pub table_bytes: u64,
    pub bytes_on_wire: u64,
    pub simulated_time_ms: f64,
    pub throughput_bytes_per_sec: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StridedReport {
    pub mode: StridedMode,
    pub stride: u64,
    pub touched_elements: u64,
    pub useful_bytes: u64,
    pub simulated_time_ms: f64,
    /// Exact integer timing, for arithmetic identities in tests.
    pub simulated_time_ps: u64,
    pub effective_throughput_bytes_per_sec: f64,
}

/// Deterministic element pattern streamed into large builds.
struct PatternProducer {
    bytes: u64,
    seed: u64,
}

impl Producer for PatternProducer {
    fn total_len(&self) -> u64 {
        self.bytes
    }

    fn fill(&mut self, offset: u64, out: &mut [u8]) {
        debug_assert_eq!(offset % 8, 0);
        debug_assert_eq!(out.len() % 8, 0);
        let mut idx = offset / 8;
        for w in out.chunks_exact_mut(8) {
            w.copy_from_slice(&(idx ^ self.seed).to_le_bytes());
            idx += 1;
        }
    }
}

fn ps_to_ms(ps: u64) -> f64 {
    ps as f64 / 1e9
}

/// Segment map with one big owner segment and small segments elsewhere.
fn bench_segments(nodes: usize, big_nodes: &[NodeId], big_bytes: u64) -> Result<SegmentMap> {
    let big = (big_bytes.div_ceil(128) * 128) + MIB;
    let mut segs = Vec::with_capacity(nodes);
    let mut base = 0;
    for node in 0..nodes {
        let size = if big_nodes.contains(&node) { big } else { MIB };
        segs.push(Segment { node, base, size });
        base += size;
    }
    SegmentMap::new(segs)
}

/// Sum clock deltas between consecutive marks of `node`, attributed to the
/// phase that the earlier mark opens.
fn phase_totals(cl: &Cluster, node: NodeId) -> std::collections::BTreeMap<&'static str, u64> {
    let mut totals = std::collections::BTreeMap::new();
    let mut prev: Option<(&'static str, u64)> = None;
    for ev in &cl.csm().ledger().trace {
        if let TraceEvent::Mark {
            node: n,
            label,
            clock_ps,
        } = ev
        {
            if *n != node {
                continue;
            }
            if let Some((open, at)) = prev {
                *totals.entry(open).or_insert(0) += clock_ps - at;
            }
            prev = Some((label, *clock_ps));
        }
    }
    totals
}

/// Build a one-column table of `table_bytes` with the writer distinct from
/// the owning node, and report per-component simulated times.
pub fn bench_init_table(cfg: &BenchConfig) -> Result<BreakdownReport> {
    let width = cfg.validate()?;
    let writer: NodeId = 0;
    let owner: NodeId = 1;
    let mut cl = Cluster::new(
        bench_segments(cfg.nodes, &[owner], cfg.table_bytes)?,
        cfg.cost_model.clone(),
        CoherenceLevel::LcCsm,
        None,
    )?;
    let mut producer = PatternProducer {
        bytes: cfg.table_bytes,
        seed: cfg.seed,
    };
    let buf = protocol::create_shared_buffer(&mut cl, writer, owner, &mut producer, &BuildOptions::default())?;
    let array = ArrayDescriptor {
        dtype: cfg.element_type,
        length: cfg.table_bytes / width,
        null_count: 0,
        validity: None,
        offsets: None,
        data: buf,
        sealed: true,
    };
    let schema = Schema::new(vec![Field::new("v", cfg.element_type, false)])?;
    let table = TableDescriptor::new(
        schema,
        vec![ChunkedColumn::new(cfg.element_type, vec![array])?],
    )?;
    protocol::broadcast_table_descriptor(&mut cl, writer, &table)?;

    let phases = phase_totals(&cl, writer);
    let get = |k: &str| ps_to_ms(phases.get(k).copied().unwrap_or(0));
    let report = BreakdownReport {
        malloc_request: get("alloc_start"),
        pre_write_flush: get("clear_start"),
        write_remote: get("write_start"),
        post_write_flush: get("post_flush_start"),
        serialize_descriptor: get("serialize_start"),
        send_descriptor: get("send_start"),
        total: 0.0,
    };
    Ok(BreakdownReport {
        total: report.rows().iter().map(|(_, v)| v).sum(),
        ..report
    })
}

/// Build a sealed one-column batch entirely on `node` and return it.
fn build_local_batch(cl: &mut Cluster, node: NodeId, cfg: &BenchConfig, width: u64) -> Result<RecordBatchDescriptor> {
    let mut producer = PatternProducer {
        bytes: cfg.table_bytes,
        seed: cfg.seed,
    };
    let buf = protocol::create_shared_buffer(cl, node, node, &mut producer, &BuildOptions::default())?;
    let array = ArrayDescriptor {
        dtype: cfg.element_type,
        length: cfg.table_bytes / width,
        null_count: 0,
        validity: None,
        offsets: None,
        data: buf,
        sealed: true,
    };
    RecordBatchDescriptor::new(
        Schema::new(vec![Field::new("v", cfg.element_type, false)])?,
        vec![array],
    )
}

/// Share a table from node 0 to node 1, either by shipping only the
/// descriptor (csm) or by a full copy over ethernet.
pub fn bench_transfer(cfg: &BenchConfig) -> Result<TransferReport> {
    let width = cfg.validate()?;
    let src: NodeId = 0;
    let dst: NodeId = 1;
    let mut cl = Cluster::new(
        bench_segments(cfg.nodes, &[src, dst], cfg.table_bytes)?,
        cfg.cost_model.clone(),
        CoherenceLevel::LcCsm,
        None,
    )?;
    let batch = build_local_batch(&mut cl, src, cfg, width)?;

    let wire_before = cl.csm().ledger().total_ethernet_bytes();
    let t0 = cl.clock_ps(src);
    let completion = match cfg.method {
        TransferMethod::Csm => {
            cl.mark(src, "transfer_start");
            let bytes = ipc::serialize_record_batch(&batch)?;
            let cost = cl.csm().charges().serialize_ps(bytes.len() as u64);
            cl.csm_mut().ledger_mut().record(TraceEvent::Serialize {
                node: src,
                bytes: bytes.len() as u64,
                cost_ps: cost,
            });
            cl.broadcast_descriptor(src, &bytes)?;
            cl.mark(src, "transfer_end");
            cl.clock_ps(src)
        }
        TransferMethod::Ethernet => {
            cl.mark(src, "transfer_start");
            protocol::ethernet_full_copy(&mut cl, src, dst, &batch)?;
            cl.mark(dst, "transfer_end");
            cl.clock_ps(dst)
        }
    };
    let time_ps = completion - t0;
    let bytes_on_wire = cl.csm().ledger().total_ethernet_bytes() - wire_before;
    Ok(TransferReport {
        method: cfg.method,
        table_bytes: cfg.table_bytes,
        bytes_on_wire,
        simulated_time_ms: ps_to_ms(time_ps),
        throughput_bytes_per_sec: cfg.table_bytes as f64 * 1e12 / time_ps as f64,
    })
}

/// Read every stride-th element of a sealed array, local or remote, with
/// reads batched over runs of touched cache lines (a hit within a pass is
/// free, so batching is cost-neutral).
pub fn bench_strided(cfg: &BenchConfig) -> Result<StridedReport> {
    let width = cfg.validate()?;
    let owner: NodeId = 0;
    let reader: NodeId = match cfg.mode {
        StridedMode::Local => 0,
        StridedMode::Remote => 1,
    };
    let mut cl = Cluster::new(
        bench_segments(cfg.nodes, &[owner], cfg.table_bytes)?,
        cfg.cost_model.clone(),
        CoherenceLevel::LcCsm,
        None,
    )?;
    let batch = build_local_batch(&mut cl, owner, cfg, width)?;
    let data = batch.columns[0].data;
    // cold-start the pass: the builder's cache still holds the whole table
    cl.csm_mut().flush_range(owner, data.addr, data.len)?;

    let elements = cfg.table_bytes / width;
    let line = cl.csm().line_size();
    let per_line = line / width;
    let touched = elements.div_ceil(cfg.stride);

    debug_assert!(per_line >= 1);
    // merge touched lines into contiguous runs of at most 1 MiB per read
    let mut runs: Vec<(u64, u64)> = Vec::new();
    let mut idx = 0u64;
    while idx < elements {
        let l = idx * width / line;
        match runs.last_mut() {
            Some((_, last)) if l == *last => {}
            Some((start, last)) if l == *last + 1 && (l - *start + 1) * line <= MIB => *last = l,
            _ => runs.push((l, l)),
        }
        idx += cfg.stride;
    }

    cl.mark(reader, "strided_start");
    let t0 = cl.clock_ps(reader);
    for (start, last) in runs {
        let addr = data.addr + start * line;
        let len = ((last - start + 1) * line).min(data.len - start * line);
        cl.csm_mut().read(reader, addr, len)?;
    }
    let time_ps = cl.clock_ps(reader) - t0;
    cl.mark(reader, "strided_end");

    let useful = touched * width;
    Ok(StridedReport {
        mode: cfg.mode,
        stride: cfg.stride,
        touched_elements: touched,
        useful_bytes: useful,
        simulated_time_ms: ps_to_ms(time_ps),
        simulated_time_ps: time_ps,
        effective_throughput_bytes_per_sec: useful as f64 * 1e12 / time_ps as f64,
    })
}
