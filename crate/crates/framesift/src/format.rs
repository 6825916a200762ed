//! Binary file formats.
//!
//! # EMB1 — embedding matrices
//!
//! Little-endian throughout. A 28-byte header:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMB1"
//! 4       4     format version, u32 = 1
//! 8       8     row count, u64
//! 16      4     embedding dim, u32 (> 0)
//! 20      1     dtype code, u8 = 1 (f32)
//! 21      7     reserved, zero
//! ```
//!
//! then an index section of `row count` entries, each
//! `video_id length (u16) + UTF-8 bytes + frame_number (u64) +
//! timestamp_ms (u64)`, then the payload: row-major f32 vectors in index
//! order. An empty matrix is exactly the 28-byte header.
//!
//! # ASG1 — index/assignment lists
//!
//! An 8-byte header (`magic "ASG1"` + count as u32) followed by `count`
//! little-endian u32 values.

use std::fs;
use std::path::Path;

use crate::embedding::{EmbeddingMatrix, FrameRecord};
use crate::error::{Error, Result};

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u32 = 1;
pub const EMB1_HEADER_LEN: usize = 28;
pub const EMB1_DTYPE_F32: u8 = 1;

pub const ASG1_MAGIC: [u8; 4] = *b"ASG1";
pub const ASG1_HEADER_LEN: usize = 8;

/// Serializes a matrix to an EMB1 byte buffer.
pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let mut index_len = 0usize;
    for record in matrix.records() {
        if record.video_id.len() > usize::from(u16::MAX) {
            return Err(Error::validation(format!(
                "video_id longer than {} bytes cannot be indexed",
                u16::MAX
            )));
        }
        index_len += 2 + record.video_id.len() + 16;
    }
    let payload_len = matrix.len() * matrix.dim() * 4;
    let mut buf = Vec::with_capacity(EMB1_HEADER_LEN + index_len + payload_len);

    buf.extend_from_slice(&EMB1_MAGIC);
    buf.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    buf.push(EMB1_DTYPE_F32);
    buf.extend_from_slice(&[0u8; 7]);

    for record in matrix.records() {
        buf.extend_from_slice(&(record.video_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(record.video_id.as_bytes());
        buf.extend_from_slice(&record.frame_number.to_le_bytes());
        buf.extend_from_slice(&record.timestamp_ms.to_le_bytes());
    }
    for value in matrix.data() {
        buf.extend_from_slice(&value.to_le_bytes());
    }
    Ok(buf)
}

/// Writes the EMB1 encoding of `matrix` to `path`, returning bytes written.
pub fn write_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<u64> {
    let bytes = encode_embeddings(matrix)?;
    fs::write(path, &bytes).map_err(|e| Error::storage(path, e))?;
    Ok(bytes.len() as u64)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: need {} bytes, file has {}",
                    self.pos + n,
                    self.bytes.len()
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses an EMB1 buffer. `locator` is used for error context and becomes
/// the matrix's source tag.
pub fn decode_embeddings(bytes: &[u8], locator: &Path) -> Result<EmbeddingMatrix> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: locator,
    };

    let magic = cur.take(4, "magic")?;
    if magic != EMB1_MAGIC {
        return Err(Error::format(locator, format!("bad magic {magic:02x?}")));
    }
    let version = cur.u32("version")?;
    if version != EMB1_VERSION {
        return Err(Error::format(
            locator,
            format!("unsupported version {version} (expected {EMB1_VERSION})"),
        ));
    }
    let rows = cur.u64("row count")?;
    let dim = cur.u32("dim")?;
    if dim == 0 {
        return Err(Error::format(locator, "dim must be positive"));
    }
    let dtype = cur.take(1, "dtype")?[0];
    if dtype != EMB1_DTYPE_F32 {
        return Err(Error::format(
            locator,
            format!("unknown dtype code {dtype}"),
        ));
    }
    let reserved = cur.take(7, "reserved bytes")?;
    if reserved.iter().any(|&b| b != 0) {
        return Err(Error::format(locator, "reserved bytes must be zero"));
    }

    let rows = usize::try_from(rows)
        .map_err(|_| Error::format(locator, "row count exceeds addressable memory"))?;
    let dim = dim as usize;

    let mut records = Vec::with_capacity(rows);
    for row in 0..rows {
        let what = format!("index entry {row}");
        let id_len = cur.u16(&what)? as usize;
        let id_bytes = cur.take(id_len, &what)?;
        let video_id = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::format(locator, format!("row {row}: video_id is not UTF-8")))?
            .to_string();
        let frame_number = cur.u64(&what)?;
        let timestamp_ms = cur.u64(&what)?;
        records.push(FrameRecord {
            video_id,
            frame_number,
            timestamp_ms,
        });
    }

    let expected = cur.pos + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            locator,
            format!(
                "payload length mismatch: expected {expected} bytes total, file has {}",
                bytes.len()
            ),
        ));
    }

    let mut matrix = EmbeddingMatrix::new(dim, locator.display().to_string())?;
    let mut vector = vec![0f32; dim];
    for (row, record) in records.into_iter().enumerate() {
        for (d, value) in vector.iter_mut().enumerate() {
            let start = cur.pos + (row * dim + d) * 4;
            *value = f32::from_le_bytes(bytes[start..start + 4].try_into().unwrap());
        }
        // push re-checks finiteness and identity uniqueness, naming the row
        matrix.push(record, &vector)?;
    }
    Ok(matrix)
}

/// Reads an EMB1 file.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Writes a u32 list in ASG1 layout, returning bytes written.
pub fn write_assignments(values: &[u32], path: &Path) -> Result<u64> {
    let count = u32::try_from(values.len())
        .map_err(|_| Error::validation("assignment list exceeds u32 count"))?;
    let mut buf = Vec::with_capacity(ASG1_HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(&ASG1_MAGIC);
    buf.extend_from_slice(&count.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::storage(path, e))?;
    Ok(buf.len() as u64)
}

/// Reads an ASG1 file.
pub fn read_assignments(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() < ASG1_HEADER_LEN {
        return Err(Error::format(
            path,
            format!(
                "truncated header: need {ASG1_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes[..4] != ASG1_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:02x?}", &bytes[..4]),
        ));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = ASG1_HEADER_LEN + count * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "length mismatch: expected {expected} bytes for {count} values, file has {}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_matrix() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            2,
            "unit",
            vec![
                (FrameRecord::new("a", 0, 0), vec![1.0, -2.0]),
                (FrameRecord::new("b", 1, 33), vec![0.5, 0.25]),
                (FrameRecord::new("c", 2, 66), vec![-1e9, 3.75]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = EmbeddingMatrix::new(4, "unit").unwrap();
        let bytes = encode_embeddings(&m).unwrap();
        assert_eq!(bytes.len(), EMB1_HEADER_LEN);
        let back = decode_embeddings(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn file_length_matches_layout() {
        // header + 3 * (2 + 1 + 16) index bytes + 3*2*4 payload bytes
        let bytes = encode_embeddings(&sample_matrix()).unwrap();
        assert_eq!(bytes.len(), 28 + 57 + 24);
        assert_eq!(bytes.len(), 109);
    }

    #[test]
    fn round_trip_preserves_rows_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb1");
        let m = sample_matrix();
        let written = write_embeddings(&m, &path).unwrap();
        assert_eq!(written, 109);
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        // write -> read -> write is byte-identical
        let again = encode_embeddings(&back).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode_embeddings(&sample_matrix()).unwrap();
        bytes[0] = b'X';
        let err = decode_embeddings(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn unsupported_version_is_a_format_error() {
        let mut bytes = encode_embeddings(&sample_matrix()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_embeddings(&bytes, Path::new("mem")).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn nan_payload_names_the_row() {
        // 10 rows, dim 3, patch one value of row 7 to a NaN bit pattern
        let rows = (0..10)
            .map(|i| (FrameRecord::new("v", i, i * 100), vec![i as f32, 0.5, -0.5]))
            .collect();
        let m = EmbeddingMatrix::from_rows(3, "unit", rows).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        let index_len = 10 * (2 + 1 + 16);
        let payload_start = EMB1_HEADER_LEN + index_len;
        let target = payload_start + (7 * 3 + 1) * 4;
        bytes[target..target + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_embeddings(&bytes, Path::new("mem")).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("row 7"), "{msg}"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn truncation_reports_expected_vs_actual() {
        let bytes = encode_embeddings(&sample_matrix()).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let err = decode_embeddings(cut, Path::new("mem")).unwrap_err();
        match err {
            Error::Format { reason, .. } => {
                assert!(reason.contains("109"), "{reason}");
                assert!(reason.contains("104"), "{reason}");
            }
            other => panic!("expected format error, got {other}"),
        }
        // trailing garbage is rejected too
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode_embeddings(&extended, Path::new("mem")).is_err());
    }

    #[test]
    fn assignment_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.asg1");
        let values: Vec<u32> = vec![0, 7, 42, u32::MAX];
        let written = write_assignments(&values, &path).unwrap();
        assert_eq!(written, 8 + 16);
        assert_eq!(read_assignments(&path).unwrap(), values);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_assignments(&path).unwrap_err(),
            Error::Format { .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// write∘read and read∘write are identities on valid matrices.
        #[test]
        fn emb1_round_trip(
            dim in 1usize..8,
            rows in prop::collection::vec((0u64..1000, any::<u16>()), 0..40),
        ) {
            let mut m = EmbeddingMatrix::new(dim, "prop").unwrap();
            for (i, (frame, bits)) in rows.iter().enumerate() {
                let vector: Vec<f32> = (0..dim)
                    .map(|d| (*bits as f32) * 0.001 + (i * dim + d) as f32)
                    .collect();
                m.push(FrameRecord::new(format!("v{}", i % 3), *frame + i as u64 * 1000, *frame), &vector)
                    .unwrap();
            }
            let bytes = encode_embeddings(&m).unwrap();
            let back = decode_embeddings(&bytes, Path::new("mem")).unwrap();
            prop_assert!(back == m);
            prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        }
    }
}
