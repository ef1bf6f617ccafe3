//! Binary container for embedding checkpoints, per-head `(q, K, V)`
//! snapshots and attention-weight records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RPRB1\0"            6 bytes magic
//! version: u32         always 1
//! kind: [u8; 4]        "EMB ", "QKV " or "ATTN"
//! meta_len: u32
//! metadata             meta_len bytes of UTF-8 JSON
//! { rec_len: u32, payload: rec_len bytes }*   until end of file
//! ```
//!
//! Payloads:
//!
//! * `QKV `: `u32 s, u32 d, f32 q[d], f32 K[s*d], f32 V[s*d], u32 positions[s]`
//! * `ATTN`: `u32 n_rows, u32 seq_len, u32 spans[5], f32 rows[n_rows*seq_len]`
//!   where spans are `(bos, c0, c1, a0, a1)`
//! * `EMB `: `u32 n, u32 d, f64 Q[n*d], f64 K[n*d], f64 V[n*d]`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ScaleMode;
use crate::error::{Error, Result};
use crate::rope::Layout;

pub const MAGIC: [u8; 6] = *b"RPRB1\0";
pub const VERSION: u32 = 1;
pub const DEFAULT_MAX_ALLOC: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Embedding,
    Qkv,
    Attention,
}

impl RecordKind {
    pub fn tag(self) -> [u8; 4] {
        match self {
            RecordKind::Embedding => *b"EMB ",
            RecordKind::Qkv => *b"QKV ",
            RecordKind::Attention => *b"ATTN",
        }
    }

    pub fn from_tag(tag: [u8; 4]) -> Result<Self> {
        match &tag {
            b"EMB " => Ok(RecordKind::Embedding),
            b"QKV " => Ok(RecordKind::Qkv),
            b"ATTN" => Ok(RecordKind::Attention),
            _ => Err(Error::UnknownKind(tag)),
        }
    }
}

/// JSON metadata carried in the container header. Unknown keys are kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    /// RoPE base; absent when the head does not use rotary embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleMode>,
    /// Per-record query positions for `QKV ` files; missing means the
    /// largest key position of each record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_positions: Option<Vec<usize>>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbRecord {
    pub n: u32,
    pub dim: u32,
    pub queries: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkvRecord {
    pub s: u32,
    pub d: u32,
    pub query: Vec<f32>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub positions: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnRecord {
    pub n_rows: u32,
    pub seq_len: u32,
    /// `(bos, c0, c1, a0, a1)`.
    pub spans: [u32; 5],
    pub rows: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Embedding(EmbRecord),
    Qkv(QkvRecord),
    Attention(AttnRecord),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Embedding(_) => RecordKind::Embedding,
            Record::Qkv(_) => RecordKind::Qkv,
            Record::Attention(_) => RecordKind::Attention,
        }
    }
}

/// An in-memory container. `metadata` is kept as the exact JSON text so
/// that reading and rewriting a file reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub kind: RecordKind,
    pub metadata: String,
    pub records: Vec<Record>,
}

impl SnapshotFile {
    pub fn new(kind: RecordKind, metadata: &Metadata, records: Vec<Record>) -> Result<Self> {
        Ok(Self {
            kind,
            metadata: serde_json::to_string(metadata)?,
            records,
        })
    }

    pub fn metadata(&self) -> Result<Metadata> {
        Ok(serde_json::from_str(&self.metadata)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Largest single allocation a length field may request.
    pub max_alloc: u64,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            max_alloc: DEFAULT_MAX_ALLOC,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReadOutcome {
    pub file: SnapshotFile,
    /// Soft validation failures, e.g. attention rows not summing to one.
    pub warnings: Vec<String>,
}

pub fn write_snapshots(path: impl AsRef<Path>, file: &SnapshotFile) -> Result<()> {
    let bytes = encode(file)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_snapshots(path: impl AsRef<Path>) -> Result<ReadOutcome> {
    read_snapshots_with(path, ReadOptions::default())
}

pub fn read_snapshots_with(path: impl AsRef<Path>, options: ReadOptions) -> Result<ReadOutcome> {
    decode(BufReader::new(File::open(path)?), options)
}

pub fn encode(file: &SnapshotFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&file.kind.tag());
    put_u32(&mut out, len_u32(file.metadata.len(), "metadata")?);
    out.extend_from_slice(file.metadata.as_bytes());
    for record in &file.records {
        if record.kind() != file.kind {
            return Err(Error::Config(format!(
                "mixed record kinds: {:?} in a {:?} container",
                record.kind(),
                file.kind
            )));
        }
        let payload = encode_record(record)?;
        put_u32(&mut out, len_u32(payload.len(), "record")?);
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::OutOfRange(format!("{what} of {n} bytes")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_record(record: &Record) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match record {
        Record::Embedding(r) => {
            let cells = r.n as usize * r.dim as usize;
            if [&r.queries, &r.keys, &r.values].iter().any(|v| v.len() != cells) {
                return Err(Error::shape("EMB record", format!("expected {cells} values per matrix")));
            }
            put_u32(&mut out, r.n);
            put_u32(&mut out, r.dim);
            for x in r.queries.iter().chain(&r.keys).chain(&r.values) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Record::Qkv(r) => {
            let (s, d) = (r.s as usize, r.d as usize);
            if r.query.len() != d || r.keys.len() != s * d || r.values.len() != s * d || r.positions.len() != s {
                return Err(Error::shape("QKV record", format!("inconsistent with s={s}, d={d}")));
            }
            put_u32(&mut out, r.s);
            put_u32(&mut out, r.d);
            for x in r.query.iter().chain(&r.keys).chain(&r.values) {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for p in &r.positions {
                put_u32(&mut out, *p);
            }
        }
        Record::Attention(r) => {
            if r.rows.len() != r.n_rows as usize * r.seq_len as usize {
                return Err(Error::shape("ATTN record", "rows inconsistent with n_rows x seq_len"));
            }
            put_u32(&mut out, r.n_rows);
            put_u32(&mut out, r.seq_len);
            for s in r.spans {
                put_u32(&mut out, s);
            }
            for x in &r.rows {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    max_alloc: u64,
}

impl<R: Read> Cursor<R> {
    /// Reads exactly `n` bytes, or reports where the data ran out.
    fn take(&mut self, n: u64) -> Result<Vec<u8>> {
        if n > self.max_alloc {
            return Err(Error::Format {
                offset: self.offset,
                detail: format!("length {n} exceeds the allocation cap {}", self.max_alloc),
            });
        }
        let mut buf = Vec::with_capacity(n as usize);
        let got = (&mut self.inner).take(n).read_to_end(&mut buf)? as u64;
        if got < n {
            return Err(Error::Truncated {
                offset: self.offset + got,
                needed: n - got,
            });
        }
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    /// Like `u32`, but a clean end of input yields `None`.
    fn u32_or_eof(&mut self) -> Result<Option<u32>> {
        let mut buf = Vec::with_capacity(4);
        let got = (&mut self.inner).take(4).read_to_end(&mut buf)?;
        match got {
            0 => Ok(None),
            4 => {
                self.offset += 4;
                Ok(Some(u32::from_le_bytes(buf.try_into().expect("4 bytes"))))
            }
            n => Err(Error::Truncated {
                offset: self.offset + n as u64,
                needed: 4 - n as u64,
            }),
        }
    }
}

pub fn decode(reader: impl Read, options: ReadOptions) -> Result<ReadOutcome> {
    let mut cur = Cursor {
        inner: reader,
        offset: 0,
        max_alloc: options.max_alloc,
    };
    let magic = cur.take(6).map_err(|e| match e {
        Error::Truncated { .. } => Error::BadMagic,
        e => e,
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tag: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    let kind = RecordKind::from_tag(tag)?;
    let meta_len = cur.u32()? as u64;
    let meta_offset = cur.offset;
    let metadata = String::from_utf8(cur.take(meta_len)?).map_err(|_| Error::Format {
        offset: meta_offset,
        detail: "metadata is not UTF-8".into(),
    })?;
    serde_json::from_str::<Metadata>(&metadata)?;

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    while let Some(len) = cur.u32_or_eof()? {
        let start = cur.offset;
        let payload = cur.take(len as u64)?;
        let record = decode_record(kind, &payload, start, records.len(), &mut warnings)?;
        records.push(record);
    }
    Ok(ReadOutcome {
        file: SnapshotFile {
            kind,
            metadata,
            records,
        },
        warnings,
    })
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl Payload<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().expect("4"));
        self.pos += 4;
        v
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let start = self.pos;
        let out: Vec<f32> = self.bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        self.pos += 4 * n;
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(self.bad(start + 4 * i, "non-finite float payload"));
        }
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let out: Vec<f64> = self.bytes[start..start + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        self.pos += 8 * n;
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(self.bad(start + 8 * i, "non-finite float payload"));
        }
        Ok(out)
    }

    fn bad(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.base + at as u64,
            detail: detail.into(),
        }
    }

    fn expect_len(&self, header: usize, want: Option<usize>) -> Result<()> {
        if self.bytes.len() < header {
            return Err(self.bad(0, format!("record of {} bytes is shorter than its header", self.bytes.len())));
        }
        match want {
            Some(w) if w == self.bytes.len() => Ok(()),
            Some(w) => Err(self.bad(
                0,
                format!("record length {} does not match its shape ({w} bytes)", self.bytes.len()),
            )),
            None => Err(self.bad(0, "record shape overflows")),
        }
    }
}

fn decode_record(
    kind: RecordKind,
    bytes: &[u8],
    base: u64,
    index: usize,
    warnings: &mut Vec<String>,
) -> Result<Record> {
    let mut p = Payload { bytes, pos: 0, base };
    if bytes.len() < 8 {
        p.expect_len(8, None)?;
    }
    match kind {
        RecordKind::Embedding => {
            let (n, dim) = (p.u32(), p.u32());
            let cells = (n as usize).checked_mul(dim as usize);
            let want = cells.and_then(|c| c.checked_mul(24)).and_then(|b| b.checked_add(8));
            p.expect_len(8, want)?;
            let cells = cells.expect("checked");
            Ok(Record::Embedding(EmbRecord {
                n,
                dim,
                queries: p.f64s(cells)?,
                keys: p.f64s(cells)?,
                values: p.f64s(cells)?,
            }))
        }
        RecordKind::Qkv => {
            let (s, d) = (p.u32(), p.u32());
            let (su, du) = (s as usize, d as usize);
            let want = su
                .checked_mul(du)
                .and_then(|sd| sd.checked_mul(2))
                .and_then(|x| x.checked_add(du))
                .and_then(|x| x.checked_add(su))
                .and_then(|x| x.checked_mul(4))
                .and_then(|x| x.checked_add(8));
            p.expect_len(8, want)?;
            let query = p.f32s(du)?;
            let keys = p.f32s(su * du)?;
            let values = p.f32s(su * du)?;
            let positions = (0..su).map(|_| p.u32()).collect();
            Ok(Record::Qkv(QkvRecord {
                s,
                d,
                query,
                keys,
                values,
                positions,
            }))
        }
        RecordKind::Attention => {
            let (n_rows, seq_len) = (p.u32(), p.u32());
            let want = (n_rows as usize)
                .checked_mul(seq_len as usize)
                .and_then(|c| c.checked_mul(4))
                .and_then(|b| b.checked_add(28));
            p.expect_len(28, want)?;
            let spans = [p.u32(), p.u32(), p.u32(), p.u32(), p.u32()];
            let rows = p.f32s(n_rows as usize * seq_len as usize)?;
            if seq_len > 0 {
                for (r, row) in rows.chunks(seq_len as usize).enumerate() {
                    let total: f64 = row.iter().map(|&x| x as f64).sum();
                    if (total - 1.0).abs() > 1e-3 {
                        warnings.push(format!(
                            "record {index} row {r}: attention weights sum to {total:.6}"
                        ));
                    }
                }
            }
            Ok(Record::Attention(AttnRecord {
                n_rows,
                seq_len,
                spans,
                rows,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qkv_file() -> SnapshotFile {
        let meta = Metadata {
            model: Some("toy".into()),
            layer: Some(3),
            head: Some(1),
            head_dim: Some(2),
            layout: Some(Layout::HalfSplit),
            rope_base: Some(10000.0),
            ..Default::default()
        };
        SnapshotFile::new(
            RecordKind::Qkv,
            &meta,
            vec![Record::Qkv(QkvRecord {
                s: 1,
                d: 2,
                query: vec![1.5, -2.0],
                keys: vec![0.25, 4.0],
                values: vec![-1.0, 0.125],
                positions: vec![7],
            })],
        )
        .unwrap()
    }

    fn decode_bytes(b: &[u8]) -> Result<ReadOutcome> {
        decode(b, ReadOptions::default())
    }

    #[test]
    fn hand_built_qkv_fixture() {
        let meta = br#"{"head_dim":2}"#;
        let mut b = Vec::new();
        b.extend_from_slice(b"RPRB1\0");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(b"QKV ");
        b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        b.extend_from_slice(meta);
        let mut rec = Vec::new();
        rec.extend_from_slice(&1u32.to_le_bytes());
        rec.extend_from_slice(&2u32.to_le_bytes());
        for x in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            rec.extend_from_slice(&x.to_le_bytes());
        }
        rec.extend_from_slice(&9u32.to_le_bytes());
        b.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        b.extend_from_slice(&rec);

        let out = decode_bytes(&b).unwrap();
        assert_eq!(out.file.kind, RecordKind::Qkv);
        assert_eq!(out.file.metadata().unwrap().head_dim, Some(2));
        assert_eq!(
            out.file.records,
            vec![Record::Qkv(QkvRecord {
                s: 1,
                d: 2,
                query: vec![1.0, 2.0],
                keys: vec![3.0, 4.0],
                values: vec![5.0, 6.0],
                positions: vec![9],
            })]
        );
        assert_eq!(encode(&out.file).unwrap(), b);
    }

    #[test]
    fn empty_container_is_valid() {
        let f = SnapshotFile::new(RecordKind::Attention, &Metadata::default(), vec![]).unwrap();
        let b = encode(&f).unwrap();
        let back = decode_bytes(&b).unwrap();
        assert!(back.file.records.is_empty());
        assert_eq!(back.file, f);
    }

    #[test]
    fn guards() {
        let good = encode(&qkv_file()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(decode_bytes(b"RPR"), Err(Error::BadMagic)));

        let mut v2 = good.clone();
        v2[6..10].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_bytes(&v2), Err(Error::UnsupportedVersion(2))));

        let mut kind = good.clone();
        kind[10..14].copy_from_slice(b"XYZW");
        assert!(matches!(decode_bytes(&kind), Err(Error::UnknownKind(_))));
    }

    #[test]
    fn truncation_names_the_offset() {
        let good = encode(&qkv_file()).unwrap();
        let cut = good.len() - 5;
        match decode_bytes(&good[..cut]) {
            Err(Error::Truncated { offset, needed }) => {
                assert_eq!(offset, cut as u64);
                assert_eq!(needed, 5);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        // A partial length prefix is also truncation.
        let mut extra = good.clone();
        extra.extend_from_slice(&[1, 0]);
        assert!(matches!(decode_bytes(&extra), Err(Error::Truncated { .. })));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut f = qkv_file();
        if let Record::Qkv(r) = &mut f.records[0] {
            r.keys[1] = f32::NAN;
        }
        let b = encode(&f).unwrap();
        assert!(matches!(decode_bytes(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn length_fields_are_capped() {
        let good = encode(&qkv_file()).unwrap();
        let opts = ReadOptions { max_alloc: 16 };
        assert!(matches!(decode(&good[..], opts), Err(Error::Format { .. })));

        // A record claiming a huge shape inside a small payload.
        let mut lying = good.clone();
        let rec_start = good.len() - (8 + 4 * 7);
        lying[rec_start..rec_start + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_bytes(&lying), Err(Error::Format { .. })));
    }

    #[test]
    fn mixed_kinds_rejected() {
        let mut f = qkv_file();
        f.records.push(Record::Attention(AttnRecord {
            n_rows: 0,
            seq_len: 0,
            spans: [0; 5],
            rows: vec![],
        }));
        assert!(matches!(encode(&f), Err(Error::Config(_))));
    }

    #[test]
    fn attention_row_sums_warn() {
        let f = SnapshotFile::new(
            RecordKind::Attention,
            &Metadata::default(),
            vec![Record::Attention(AttnRecord {
                n_rows: 2,
                seq_len: 2,
                spans: [0, 0, 1, 1, 2],
                rows: vec![0.5, 0.5, 0.9, 0.05],
            })],
        )
        .unwrap();
        let out = decode_bytes(&encode(&f).unwrap()).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("row 1"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rprb");
        let f = qkv_file();
        write_snapshots(&path, &f).unwrap();
        let back = read_snapshots(&path).unwrap();
        assert_eq!(back.file, f);
        assert!(back.warnings.is_empty());
    }

    fn arb_attn() -> impl Strategy<Value = AttnRecord> {
        (1u32..4, 1u32..6).prop_flat_map(|(n, t)| {
            proptest::collection::vec(0.0f32..1.0, (n * t) as usize).prop_map(move |rows| AttnRecord {
                n_rows: n,
                seq_len: t,
                spans: [0, 0, t / 2, t / 2, t],
                rows,
            })
        })
    }

    proptest! {
        #[test]
        fn byte_identity_write_read_write(records in proptest::collection::vec(arb_attn(), 0..4), layer in 0usize..40) {
            let meta = Metadata { layer: Some(layer), head: Some(2), ..Default::default() };
            let records = records.into_iter().map(Record::Attention).collect();
            let f = SnapshotFile::new(RecordKind::Attention, &meta, records).unwrap();
            let bytes = encode(&f).unwrap();
            let back = decode_bytes(&bytes).unwrap().file;
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
