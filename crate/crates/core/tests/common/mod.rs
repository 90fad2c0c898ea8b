//! Helpers shared by the integration suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use csm_core::columnar::{
    ArrayDescriptor, BufferRef, ChunkedColumn, DataType, Field, RecordBatchDescriptor, Schema,
    TableDescriptor,
};
use csm_core::ipc::Descriptor;

const DTYPES: [DataType; 5] = [
    DataType::UInt64,
    DataType::Int64,
    DataType::Float64,
    DataType::Bool,
    DataType::Utf8,
];

fn random_addr(rng: &mut ChaCha8Rng) -> u64 {
    rng.random_range(0..1u64 << 40) * 128
}

fn random_array(rng: &mut ChaCha8Rng, dtype: DataType) -> ArrayDescriptor {
    let length = rng.random_range(0..1000u64);
    if length == 0 {
        return ArrayDescriptor {
            dtype,
            length: 0,
            null_count: 0,
            validity: None,
            offsets: None,
            data: BufferRef::EMPTY,
            sealed: true,
        };
    }
    let null_count = if rng.random_bool(0.4) {
        rng.random_range(1..=length)
    } else {
        0
    };
    let validity = (null_count > 0).then(|| BufferRef {
        addr: random_addr(rng),
        len: length.div_ceil(8) + rng.random_range(0..64u64),
    });
    let (offsets, data_len) = match dtype {
        DataType::Utf8 => (
            Some(BufferRef {
                addr: random_addr(rng),
                len: 4 * (length + 1) + 4 * rng.random_range(0..32u64),
            }),
            rng.random_range(0..4096u64),
        ),
        DataType::Bool => (None, length.div_ceil(8) + rng.random_range(0..16u64)),
        _ => (None, length * 8 + 8 * rng.random_range(0..16u64)),
    };
    ArrayDescriptor {
        dtype,
        length,
        null_count,
        validity,
        offsets,
        data: BufferRef {
            addr: random_addr(rng),
            len: data_len,
        },
        sealed: true,
    }
}

fn random_schema(rng: &mut ChaCha8Rng) -> Schema {
    let n = rng.random_range(1..=4usize);
    let fields = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=8usize);
            let mut name: String = (0..len)
                .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
                .collect();
            name.push_str(&i.to_string());
            Field::new(name, DTYPES[rng.random_range(0..DTYPES.len())], rng.random_bool(0.5))
        })
        .collect();
    Schema::new(fields).unwrap()
}

/// A structurally valid random descriptor (batch or table).
pub fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
    let schema = random_schema(rng);
    if rng.random_bool(0.5) {
        let rows = rng.random_range(0..1000u64);
        let columns = schema
            .fields
            .iter()
            .map(|f| {
                let mut a = random_array(rng, f.dtype);
                force_length(&mut a, rows, rng);
                a
            })
            .collect();
        Descriptor::Batch(RecordBatchDescriptor::new(schema, columns).unwrap())
    } else {
        let rows = rng.random_range(0..2000u64);
        let columns = schema
            .fields
            .iter()
            .map(|f| {
                // per-column chunking: random split of the same total
                let mut remaining = rows;
                let mut chunks = Vec::new();
                while remaining > 0 {
                    let take = rng.random_range(1..=remaining);
                    let mut a = random_array(rng, f.dtype);
                    force_length(&mut a, take, rng);
                    chunks.push(a);
                    remaining -= take;
                }
                if chunks.is_empty() {
                    let mut a = random_array(rng, f.dtype);
                    force_length(&mut a, 0, rng);
                    chunks.push(a);
                }
                ChunkedColumn::new(f.dtype, chunks).unwrap()
            })
            .collect();
        Descriptor::Table(TableDescriptor::new(schema, columns).unwrap())
    }
}

fn force_length(a: &mut ArrayDescriptor, length: u64, rng: &mut ChaCha8Rng) {
    a.length = length;
    if length == 0 {
        a.null_count = 0;
        a.validity = None;
        a.offsets = None;
        a.data = BufferRef::EMPTY;
        return;
    }
    if a.null_count > length {
        a.null_count = rng.random_range(1..=length);
    }
    if let Some(v) = &mut a.validity {
        v.len = length.div_ceil(8) + rng.random_range(0..64u64);
    }
    match a.dtype {
        DataType::Utf8 => {
            let o = a.offsets.get_or_insert(BufferRef {
                addr: random_addr(rng),
                len: 0,
            });
            o.len = 4 * (length + 1) + 4 * rng.random_range(0..32u64);
        }
        DataType::Bool => a.data.len = length.div_ceil(8) + rng.random_range(0..16u64),
        _ => a.data.len = length * 8 + 8 * rng.random_range(0..16u64),
    }
    if a.data.len > 0 && a.data.addr == 0 {
        a.data.addr = random_addr(rng);
    }
}
