//! On-storage log format.
//!
//! A log segment is a raw concatenation of transaction entries. Each entry is
//! one transaction's complete set of delta records behind a fixed header:
//!
//! ```text
//! magic[4] "MSL1" | format_version u8 | reserved u8[3] | csn u64 | dsn u64
//! | record_count u32 | body_length u32 | crc32c u32 | body
//! ```
//!
//! and each delta record in the body is
//!
//! ```text
//! kind u8 | reserved u8[3] | table_id u32 | rid u64 | field_mask u64 | payload
//! ```
//!
//! All integers are little-endian. The CRC-32C covers the first 32 header bytes
//! and the body. The payload carries the new values of the masked fields in
//! ascending field order; fixed-width fields are raw, variable-width fields have
//! a `u16` length prefix. Decoding therefore needs each table's [`Schema`].
//!
//! A sealed segment ends with a [`SegmentFooter`] recording the CSN range of the
//! entries it holds.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;

use thiserror::Error;

pub const ENTRY_MAGIC: [u8; 4] = *b"MSL1";
pub const FOOTER_MAGIC: [u8; 4] = *b"MSLF";
pub const FORMAT_VERSION: u8 = 1;
pub const ENTRY_HEADER_LEN: usize = 36;
pub const RECORD_HEADER_LEN: usize = 24;
pub const FOOTER_LEN: usize = 40;
const CRC_OFFSET: usize = 32;

/// Commit sequence number. Zero is never assigned to a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Csn(pub u64);

impl Csn {
    pub const NONE: Csn = Csn(0);

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Csn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dependency sequence number: CSN of a transaction's most recent direct
/// predecessor, or zero when it has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Dsn(pub u64);

impl Dsn {
    pub const NONE: Dsn = Dsn(0);

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }

    /// Raises the DSN to `csn` if that is newer.
    pub fn observe(&mut self, csn: Csn) {
        self.0 = self.0.max(csn.0);
    }
}

impl From<Csn> for Dsn {
    fn from(c: Csn) -> Self {
        Dsn(c.0)
    }
}

/// Physical position in a log: segment and byte offset within that segment's
/// object. Ordered lexicographically within one log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Lsn {
    pub log_id: u16,
    pub segment_index: u32,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RecordKind {
    Insert = 1,
    Update = 2,
    Delete = 3,
}

impl RecordKind {
    fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(RecordKind::Insert),
            2 => Some(RecordKind::Update),
            3 => Some(RecordKind::Delete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    Fixed(u16),
    Variable,
}

/// Field layout of a table's records; at most 64 fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<FieldType>,
}

impl Schema {
    pub fn new(fields: Vec<FieldType>) -> Result<Self, FormatError> {
        if fields.is_empty() || fields.len() > 64 {
            return Err(FormatError::Malformed(format!(
                "schema must have 1..=64 fields, got {}",
                fields.len()
            )));
        }
        Ok(Schema { fields })
    }

    /// `count` fixed-width fields of `width` bytes each.
    pub fn fixed(count: usize, width: u16) -> Self {
        Schema::new(vec![FieldType::Fixed(width); count]).expect("valid field count")
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[FieldType] {
        &self.fields
    }

    pub fn full_mask(&self) -> u64 {
        if self.fields.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.fields.len()) - 1
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.fields.iter().all(|f| matches!(f, FieldType::Fixed(_)))
    }

    /// Byte length of the masked-field payload at the start of `bytes`.
    pub fn payload_len(&self, mask: u64, bytes: &[u8]) -> Result<usize, FormatError> {
        if mask & !self.full_mask() != 0 {
            return Err(FormatError::Malformed(format!(
                "field mask {mask:#x} exceeds {} fields",
                self.fields.len()
            )));
        }
        let mut off = 0usize;
        for (i, f) in self.fields.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let w = match f {
                FieldType::Fixed(w) => *w as usize,
                FieldType::Variable => {
                    let b = bytes
                        .get(off..off + 2)
                        .ok_or_else(|| FormatError::Malformed("truncated field length".into()))?;
                    2 + u16::from_le_bytes([b[0], b[1]]) as usize
                }
            };
            off += w;
            if off > bytes.len() {
                return Err(FormatError::Malformed("payload shorter than field mask".into()));
            }
        }
        Ok(off)
    }

    /// Byte range of every field within a full record image.
    pub fn field_ranges(&self, image: &[u8]) -> Result<Vec<Range<usize>>, FormatError> {
        let mut out = Vec::with_capacity(self.fields.len());
        let mut off = 0usize;
        for f in &self.fields {
            let w = match f {
                FieldType::Fixed(w) => *w as usize,
                FieldType::Variable => {
                    let b = image
                        .get(off..off + 2)
                        .ok_or_else(|| FormatError::Malformed("truncated field length".into()))?;
                    2 + u16::from_le_bytes([b[0], b[1]]) as usize
                }
            };
            out.push(off..off + w);
            off += w;
        }
        if off != image.len() {
            return Err(FormatError::Malformed(format!(
                "record image is {} bytes, schema expects {off}",
                image.len()
            )));
        }
        Ok(out)
    }

    /// Concatenates the masked fields of a full image.
    pub fn extract(&self, image: &[u8], mask: u64) -> Result<Vec<u8>, FormatError> {
        let ranges = self.field_ranges(image)?;
        let mut out = Vec::new();
        for (i, r) in ranges.into_iter().enumerate() {
            if mask & (1 << i) != 0 {
                out.extend_from_slice(&image[r]);
            }
        }
        Ok(out)
    }

    /// Returns `image` with the masked fields replaced by `payload`.
    pub fn apply(&self, image: &[u8], mask: u64, payload: &[u8]) -> Result<Vec<u8>, FormatError> {
        if self.payload_len(mask, payload)? != payload.len() {
            return Err(FormatError::Malformed("payload longer than field mask".into()));
        }
        if let Some(width) = self.uniform_width() {
            let mut out = image.to_vec();
            if out.len() != width * self.fields.len() {
                return Err(FormatError::Malformed("record image has wrong length".into()));
            }
            let mut src = 0;
            for i in 0..self.fields.len() {
                if mask & (1 << i) != 0 {
                    out[i * width..(i + 1) * width].copy_from_slice(&payload[src..src + width]);
                    src += width;
                }
            }
            return Ok(out);
        }
        let ranges = self.field_ranges(image)?;
        let mut out = Vec::with_capacity(image.len());
        let mut src = 0usize;
        for (i, r) in ranges.into_iter().enumerate() {
            if mask & (1 << i) != 0 {
                let w = self.payload_len(1 << i, &payload[src..])?;
                out.extend_from_slice(&payload[src..src + w]);
                src += w;
            } else {
                out.extend_from_slice(&image[r]);
            }
        }
        Ok(out)
    }

    fn uniform_width(&self) -> Option<usize> {
        match self.fields.first() {
            Some(FieldType::Fixed(w)) if self.fields.iter().all(|f| *f == FieldType::Fixed(*w)) => {
                Some(*w as usize)
            }
            _ => None,
        }
    }
}

/// Source of table schemas for decoding record payloads.
pub trait SchemaSource {
    fn schema(&self, table_id: u32) -> Option<&Schema>;
}

/// Every table uses the same schema.
impl SchemaSource for Schema {
    fn schema(&self, _table_id: u32) -> Option<&Schema> {
        Some(self)
    }
}

impl SchemaSource for HashMap<u32, Schema> {
    fn schema(&self, table_id: u32) -> Option<&Schema> {
        self.get(&table_id)
    }
}

impl SchemaSource for BTreeMap<u32, Schema> {
    fn schema(&self, table_id: u32) -> Option<&Schema> {
        self.get(&table_id)
    }
}

/// Schema assumed by [`decode_txn_entry`]: up to 64 fixed 8-byte fields.
pub fn default_schema() -> &'static Schema {
    static DEFAULT: std::sync::OnceLock<Schema> = std::sync::OnceLock::new();
    DEFAULT.get_or_init(|| Schema::fixed(64, 8))
}

/// One modified record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaRecord {
    pub kind: RecordKind,
    pub table_id: u32,
    pub rid: u64,
    pub field_mask: u64,
    /// New values of the masked fields in ascending field order. Empty for
    /// deletes.
    pub payload: Vec<u8>,
}

impl DeltaRecord {
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.payload.len()
    }
}

/// One transaction's log entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnEntry {
    pub format_version: u8,
    pub csn: Csn,
    pub dsn: Dsn,
    pub record_count: u32,
    pub body_length: u32,
    pub crc: u32,
    pub records: Vec<DeltaRecord>,
}

impl TxnEntry {
    pub fn encoded_len(&self) -> usize {
        ENTRY_HEADER_LEN + self.body_length as usize
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("csn {csn} must be greater than dsn {dsn}")]
    CsnNotAboveDsn { csn: u64, dsn: u64 },
    #[error("a transaction entry needs at least one record")]
    EmptyRecords,
    #[error("entry body of {0} bytes exceeds the format limit")]
    TooLarge(usize),
    #[error("unsupported format version {0}")]
    UnsupportedFormat(u8),
    #[error("malformed entry: {0}")]
    Malformed(String),
}

/// Result of decoding at an offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Entry { entry: TxnEntry, next_offset: usize },
    /// End of the valid prefix: bad magic, truncated entry or checksum failure.
    TornTail,
}

/// Size of the encoded entry for `records`.
pub fn encoded_entry_len(records: &[DeltaRecord]) -> usize {
    ENTRY_HEADER_LEN + records.iter().map(DeltaRecord::encoded_len).sum::<usize>()
}

fn check_entry_args(csn: Csn, dsn: Dsn, records: &[DeltaRecord]) -> Result<usize, FormatError> {
    if csn.0 <= dsn.0 {
        return Err(FormatError::CsnNotAboveDsn {
            csn: csn.0,
            dsn: dsn.0,
        });
    }
    if records.is_empty() {
        return Err(FormatError::EmptyRecords);
    }
    let body: usize = records.iter().map(DeltaRecord::encoded_len).sum();
    if body > u32::MAX as usize || records.len() > u32::MAX as usize {
        return Err(FormatError::TooLarge(body));
    }
    Ok(body)
}

/// Encodes a transaction entry into a new buffer.
pub fn encode_txn_entry(csn: Csn, dsn: Dsn, records: &[DeltaRecord]) -> Result<Vec<u8>, FormatError> {
    let body = check_entry_args(csn, dsn, records)?;
    let mut buf = vec![0u8; ENTRY_HEADER_LEN + body];
    write_entry(&mut buf, csn, dsn, records, body);
    Ok(buf)
}

/// Encodes a transaction entry into `out`, which must be exactly
/// [`encoded_entry_len`] bytes long.
pub fn encode_txn_entry_into(
    out: &mut [u8],
    csn: Csn,
    dsn: Dsn,
    records: &[DeltaRecord],
) -> Result<(), FormatError> {
    let body = check_entry_args(csn, dsn, records)?;
    if out.len() != ENTRY_HEADER_LEN + body {
        return Err(FormatError::Malformed(format!(
            "output buffer is {} bytes, entry needs {}",
            out.len(),
            ENTRY_HEADER_LEN + body
        )));
    }
    write_entry(out, csn, dsn, records, body);
    Ok(())
}

fn write_entry(buf: &mut [u8], csn: Csn, dsn: Dsn, records: &[DeltaRecord], body: usize) {
    buf[0..4].copy_from_slice(&ENTRY_MAGIC);
    buf[4] = FORMAT_VERSION;
    buf[5..8].fill(0);
    buf[8..16].copy_from_slice(&csn.0.to_le_bytes());
    buf[16..24].copy_from_slice(&dsn.0.to_le_bytes());
    buf[24..28].copy_from_slice(&(records.len() as u32).to_le_bytes());
    buf[28..32].copy_from_slice(&(body as u32).to_le_bytes());
    let mut off = ENTRY_HEADER_LEN;
    for r in records {
        buf[off] = r.kind as u8;
        buf[off + 1..off + 4].fill(0);
        buf[off + 4..off + 8].copy_from_slice(&r.table_id.to_le_bytes());
        buf[off + 8..off + 16].copy_from_slice(&r.rid.to_le_bytes());
        buf[off + 16..off + 24].copy_from_slice(&r.field_mask.to_le_bytes());
        off += RECORD_HEADER_LEN;
        buf[off..off + r.payload.len()].copy_from_slice(&r.payload);
        off += r.payload.len();
    }
    let crc = crc32c::crc32c_append(crc32c::crc32c(&buf[..CRC_OFFSET]), &buf[ENTRY_HEADER_LEN..]);
    buf[CRC_OFFSET..ENTRY_HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

/// Decodes the entry at `offset` assuming fixed 8-byte fields.
pub fn decode_txn_entry(bytes: &[u8], offset: usize) -> Result<Decoded, FormatError> {
    decode_txn_entry_with(bytes, offset, default_schema())
}

/// Decodes the entry at `offset`, using `schemas` to split record payloads.
///
/// Framing problems (bad magic, truncation, checksum mismatch) yield
/// [`Decoded::TornTail`]. An intact entry that cannot be interpreted is an
/// error.
pub fn decode_txn_entry_with(
    bytes: &[u8],
    offset: usize,
    schemas: &dyn SchemaSource,
) -> Result<Decoded, FormatError> {
    let Some(rest) = bytes.get(offset..) else {
        return Ok(Decoded::TornTail);
    };
    if rest.len() < ENTRY_HEADER_LEN || rest[0..4] != ENTRY_MAGIC {
        return Ok(Decoded::TornTail);
    }
    let body_length = le_u32(&rest[28..]) as usize;
    let Some(body) = rest.get(ENTRY_HEADER_LEN..ENTRY_HEADER_LEN + body_length) else {
        return Ok(Decoded::TornTail);
    };
    let crc = le_u32(&rest[CRC_OFFSET..]);
    if crc32c::crc32c_append(crc32c::crc32c(&rest[..CRC_OFFSET]), body) != crc {
        return Ok(Decoded::TornTail);
    }
    let format_version = rest[4];
    if format_version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedFormat(format_version));
    }
    let csn = Csn(le_u64(&rest[8..]));
    let dsn = Dsn(le_u64(&rest[16..]));
    let record_count = le_u32(&rest[24..]);
    if csn.0 <= dsn.0 {
        return Err(FormatError::Malformed(format!("csn {csn} not above dsn {}", dsn.0)));
    }
    let mut records = Vec::with_capacity(record_count.min(1 << 16) as usize);
    let mut off = 0usize;
    for _ in 0..record_count {
        let hdr = body
            .get(off..off + RECORD_HEADER_LEN)
            .ok_or_else(|| FormatError::Malformed("record header past body end".into()))?;
        let kind = RecordKind::from_u8(hdr[0])
            .ok_or_else(|| FormatError::Malformed(format!("unknown record kind {}", hdr[0])))?;
        let table_id = le_u32(&hdr[4..]);
        let rid = le_u64(&hdr[8..]);
        let field_mask = le_u64(&hdr[16..]);
        off += RECORD_HEADER_LEN;
        let len = if kind == RecordKind::Delete {
            0
        } else {
            let schema = schemas
                .schema(table_id)
                .ok_or_else(|| FormatError::Malformed(format!("unknown table {table_id}")))?;
            schema.payload_len(field_mask, &body[off..])?
        };
        records.push(DeltaRecord {
            kind,
            table_id,
            rid,
            field_mask,
            payload: body[off..off + len].to_vec(),
        });
        off += len;
    }
    if off != body_length {
        return Err(FormatError::Malformed(format!(
            "records cover {off} of {body_length} body bytes"
        )));
    }
    Ok(Decoded::Entry {
        entry: TxnEntry {
            format_version,
            csn,
            dsn,
            record_count,
            body_length: body_length as u32,
            crc,
            records,
        },
        next_offset: offset + ENTRY_HEADER_LEN + body_length,
    })
}

/// Trailer of a sealed segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentFooter {
    pub min_csn: Csn,
    pub max_csn: Csn,
    pub entry_count: u64,
}

impl SegmentFooter {
    pub fn encode(&self) -> [u8; FOOTER_LEN] {
        let mut b = [0u8; FOOTER_LEN];
        b[0..4].copy_from_slice(&FOOTER_MAGIC);
        b[4] = FORMAT_VERSION;
        b[8..16].copy_from_slice(&self.min_csn.0.to_le_bytes());
        b[16..24].copy_from_slice(&self.max_csn.0.to_le_bytes());
        b[24..32].copy_from_slice(&self.entry_count.to_le_bytes());
        let crc = crc32c::crc32c(&b[..32]);
        b[32..36].copy_from_slice(&crc.to_le_bytes());
        b
    }

    /// Decodes a footer occupying exactly `bytes`.
    pub fn decode(bytes: &[u8]) -> Option<SegmentFooter> {
        if bytes.len() != FOOTER_LEN || bytes[0..4] != FOOTER_MAGIC || bytes[4] != FORMAT_VERSION {
            return None;
        }
        if crc32c::crc32c(&bytes[..32]) != le_u32(&bytes[32..]) || bytes[36..40] != [0; 4] {
            return None;
        }
        Some(SegmentFooter {
            min_csn: Csn(le_u64(&bytes[8..])),
            max_csn: Csn(le_u64(&bytes[16..])),
            entry_count: le_u64(&bytes[24..]),
        })
    }
}

/// Entries decoded from one segment object.
#[derive(Debug, Clone, Default)]
pub struct SegmentScan {
    /// Decoded entries with their byte offsets in the segment.
    pub entries: Vec<(usize, TxnEntry)>,
    pub footer: Option<SegmentFooter>,
    /// Length of the valid prefix, footer included.
    pub valid_len: usize,
}

impl SegmentScan {
    /// Whether bytes past the valid prefix were ignored.
    pub fn is_torn(&self, total_len: usize) -> bool {
        self.valid_len < total_len
    }
}

/// Decodes every entry of a segment up to its footer or torn tail.
pub fn scan_segment(bytes: &[u8], schemas: &dyn SchemaSource) -> Result<SegmentScan, FormatError> {
    let mut scan = SegmentScan::default();
    let mut off = 0usize;
    loop {
        if bytes.len() >= off + 4 && bytes[off..off + 4] == FOOTER_MAGIC {
            if let Some(f) = bytes
                .get(off..off + FOOTER_LEN)
                .and_then(SegmentFooter::decode)
            {
                scan.footer = Some(f);
                off += FOOTER_LEN;
            }
            break;
        }
        match decode_txn_entry_with(bytes, off, schemas)? {
            Decoded::Entry { entry, next_offset } => {
                scan.entries.push((off, entry));
                off = next_offset;
            }
            Decoded::TornTail => break,
        }
    }
    scan.valid_len = off;
    Ok(scan)
}

/// A checksummed block sharing the entry header layout: `magic | version |
/// reserved | a u64 | b u64 | count u32 | body_length u32 | crc32c | body`.
/// Checkpoint objects are sequences of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame<'a> {
    pub a: u64,
    pub b: u64,
    pub count: u32,
    pub body: &'a [u8],
    pub next_offset: usize,
}

pub fn encode_frame(magic: [u8; 4], a: u64, b: u64, count: u32, body: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(ENTRY_HEADER_LEN + body.len());
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&[FORMAT_VERSION, 0, 0, 0]);
    buf.extend_from_slice(&a.to_le_bytes());
    buf.extend_from_slice(&b.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    let crc = crc32c::crc32c_append(crc32c::crc32c(&buf[..CRC_OFFSET]), body);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf.extend_from_slice(body);
    buf
}

/// Decodes the frame at `offset`; `None` if absent, truncated or corrupt.
pub fn decode_frame(bytes: &[u8], offset: usize, magic: [u8; 4]) -> Option<Frame<'_>> {
    let rest = bytes.get(offset..)?;
    if rest.len() < ENTRY_HEADER_LEN || rest[0..4] != magic || rest[4] != FORMAT_VERSION {
        return None;
    }
    let len = le_u32(&rest[28..]) as usize;
    let body = rest.get(ENTRY_HEADER_LEN..ENTRY_HEADER_LEN + len)?;
    if crc32c::crc32c_append(crc32c::crc32c(&rest[..CRC_OFFSET]), body) != le_u32(&rest[CRC_OFFSET..]) {
        return None;
    }
    Some(Frame {
        a: le_u64(&rest[8..]),
        b: le_u64(&rest[16..]),
        count: le_u32(&rest[24..]),
        body,
        next_offset: offset + ENTRY_HEADER_LEN + len,
    })
}
