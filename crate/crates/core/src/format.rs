//! Binary embedding files and the small text sidecars that travel with them.
//!
//! ```text
//! offset  size            field
//! 0       4               magic "OIDE"
//! 4       2               version (u16 LE) = 1
//! 6       2               flags (u16 LE): 0 = embedding set, 1 = projection matrix
//! 8       4               dim (u32 LE)
//! 12      8               count (u64 LE)
//! 20      8 * count       ids (u64 LE)
//! ..      4 * count * dim payload (f32 LE, row-major)
//! ..      4               CRC32 of the payload bytes (u32 LE)
//! ```
//!
//! A projection matrix `W` (`n x m`) is stored with `dim = m`, `count = n`,
//! ids `0..n` and `flags = 1`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingSet, ProjectionMatrix};

pub const MAGIC: &[u8; 4] = b"OIDE";
pub const VERSION: u16 = 1;
pub const FLAG_EMBEDDINGS: u16 = 0;
pub const FLAG_PROJECTION: u16 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, expected \"OIDE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("unexpected flags {found}, expected {expected}")]
    UnexpectedFlags { found: u16, expected: u16 },
    #[error("truncated payload: need {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("projection file ids must be 0..n in order")]
    BadProjectionIds,
    #[error("invalid contents: {0}")]
    Invalid(EmbeddingError),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

impl From<EmbeddingError> for FormatError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::NonFinite { row, col } => FormatError::NonFinite { row, col },
            EmbeddingError::DuplicateId(id) => FormatError::DuplicateId(id),
            other => FormatError::Invalid(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode(ids: &[u64], dim: usize, data: &[f32], flags: u16) -> Vec<u8> {
    let payload_len = data.len() * 4;
    let mut out = Vec::with_capacity(HEADER_LEN + ids.len() * 8 + payload_len + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    let payload_start = out.len();
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a file image into `(flags, set)`. Checks run in a fixed order:
/// magic, version, length, checksum, then set invariants.
pub fn decode(bytes: &[u8]) -> Result<(u16, EmbeddingSet), FormatError> {
    let actual = bytes.len() as u64;
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::VersionMismatch(version));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());

    let expected = count
        .checked_mul(8)
        .and_then(|ids| count.checked_mul(dim)?.checked_mul(4)?.checked_add(ids))
        .and_then(|body| body.checked_add(HEADER_LEN as u64 + 4));
    let expected = match expected {
        Some(e) => e,
        None => {
            return Err(FormatError::Truncated {
                expected: u64::MAX,
                actual,
            })
        }
    };
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes((actual - expected) as usize));
    }

    let count = count as usize;
    let dim = dim as usize;
    let ids_end = HEADER_LEN + count * 8;
    let payload_end = ids_end + count * dim * 4;
    let payload = &bytes[ids_end..payload_end];
    let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }

    let ids = bytes[HEADER_LEN..ids_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let set = EmbeddingSet::new(ids, dim, data)?;
    Ok((flags, set))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode(set.ids(), set.dim(), set.data(), FLAG_EMBEDDINGS))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (flags, set) = decode(&bytes)?;
    if flags != FLAG_EMBEDDINGS {
        return Err(FormatError::UnexpectedFlags {
            found: flags,
            expected: FLAG_EMBEDDINGS,
        });
    }
    Ok(set)
}

pub fn encode_projection(w: &ProjectionMatrix) -> Vec<u8> {
    let ids: Vec<u64> = (0..w.n() as u64).collect();
    encode(&ids, w.m(), w.data(), FLAG_PROJECTION)
}

pub fn save_projection(w: &ProjectionMatrix, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_projection(w))
}

pub fn load_projection(path: &Path) -> Result<ProjectionMatrix, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (flags, set) = decode(&bytes)?;
    if flags != FLAG_PROJECTION {
        return Err(FormatError::UnexpectedFlags {
            found: flags,
            expected: FLAG_PROJECTION,
        });
    }
    if set.ids().iter().enumerate().any(|(i, &id)| id != i as u64) {
        return Err(FormatError::BadProjectionIds);
    }
    let n = set.len();
    let (_, m, data) = set.into_parts();
    Ok(ProjectionMatrix::new(n, m, data)?)
}

/// Reads a tab-separated two-column text file, one record per line.
fn read_tsv_pairs(path: &Path) -> Result<Vec<(usize, String, String)>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let (a, b) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(FormatError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "expected two tab-separated fields".into(),
                })
            }
        };
        out.push((i + 1, a.to_string(), b.to_string()));
    }
    Ok(out)
}

fn parse_u64(path: &Path, line: usize, s: &str) -> Result<u64, FormatError> {
    s.trim().parse().map_err(|_| FormatError::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("invalid id {s:?}"),
    })
}

/// Sidecar manifest mapping ids to source paths: `id<TAB>source-path` per line.
pub fn write_manifest(path: &Path, entries: &[(u64, String)]) -> Result<(), FormatError> {
    let mut text = String::new();
    for (id, source) in entries {
        text.push_str(&format!("{id}\t{source}\n"));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(u64, String)>, FormatError> {
    read_tsv_pairs(path)?
        .into_iter()
        .map(|(line, id, source)| Ok((parse_u64(path, line, &id)?, source)))
        .collect()
}

/// Query id to origin id, one true origin per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth(BTreeMap<u64, u64>);

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: u64, origin: u64) -> Option<u64> {
        self.0.insert(query, origin)
    }

    pub fn origin_of(&self, query: u64) -> Option<u64> {
        self.0.get(&query).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.0.iter().map(|(&q, &o)| (q, o))
    }

    pub fn extend(&mut self, other: &GroundTruth) {
        self.0.extend(other.iter());
    }

    /// `query_id<TAB>origin_id` lines in ascending query order.
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut text = String::new();
        for (q, o) in self.iter() {
            text.push_str(&format!("{q}\t{o}\n"));
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut truth = GroundTruth::new();
        for (line, q, o) in read_tsv_pairs(path)? {
            let q = parse_u64(path, line, &q)?;
            let o = parse_u64(path, line, &o)?;
            if truth.insert(q, o).is_some() {
                return Err(FormatError::Parse {
                    path: path.display().to_string(),
                    line,
                    msg: format!("query {q} listed twice"),
                });
            }
        }
        Ok(truth)
    }
}

impl FromIterator<(u64, u64)> for GroundTruth {
    fn from_iter<T: IntoIterator<Item = (u64, u64)>>(iter: T) -> Self {
        GroundTruth(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn single_row() -> Vec<u8> {
        encode(&[7], 2, &[1.0, 0.0], FLAG_EMBEDDINGS)
    }

    #[test]
    fn single_row_file() {
        let (flags, set) = decode(&single_row()).unwrap();
        assert_eq!(flags, 0);
        assert_eq!(set.ids(), &[7]);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = single_row();
        assert_eq!(&bytes[..4], b"OIDE");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 8 + 8 + 4);
        let crc = crc32fast::hash(&bytes[28..36]);
        assert_eq!(&bytes[36..], &crc.to_le_bytes());
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode(&[], 5, &[], FLAG_EMBEDDINGS);
        let (_, set) = decode(&bytes).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.dim(), 5);
    }

    #[test]
    fn count_larger_than_payload_is_truncated() {
        // Header claims three rows, body holds two.
        let mut bytes = encode(&[1, 2], 2, &[1.0, 2.0, 3.0, 4.0], FLAG_EMBEDDINGS);
        bytes[12..20].copy_from_slice(&3u64.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(FormatError::Truncated { .. })));
        assert!(matches!(
            decode(&bytes[..10]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn distinct_errors() {
        let mut bad_magic = single_row();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(FormatError::BadMagic(_))));

        let mut bad_version = single_row();
        bad_version[4] = 2;
        assert!(matches!(
            decode(&bad_version),
            Err(FormatError::VersionMismatch(2))
        ));

        let nan = encode(&[1], 1, &[f32::NAN], FLAG_EMBEDDINGS);
        assert!(matches!(
            decode(&nan),
            Err(FormatError::NonFinite { row: 0, col: 0 })
        ));

        let dup = encode(&[3, 3], 1, &[1.0, 2.0], FLAG_EMBEDDINGS);
        assert!(matches!(decode(&dup), Err(FormatError::DuplicateId(3))));

        let mut trailing = single_row();
        trailing.push(0);
        assert!(matches!(
            decode(&trailing),
            Err(FormatError::TrailingBytes(1))
        ));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..100 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bytes = encode(&(0..100).collect::<Vec<_>>(), 64, &data, FLAG_EMBEDDINGS);
        let payload_start = 20 + 800;
        bytes[payload_start + 1234] ^= 0x10;
        assert!(matches!(
            decode(&bytes),
            Err(FormatError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..100 * 64).map(|_| rng.gen::<f32>() - 0.5).collect();
        let set = EmbeddingSet::new((1000..1100).collect(), 64, data).unwrap();
        let path = dir.path().join("set.oide");
        save_embeddings(&set, &path).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), set);

        let bad = dir.path().join("missing").join("set.oide");
        assert!(matches!(
            save_embeddings(&set, &bad),
            Err(FormatError::Io { .. })
        ));
    }

    #[test]
    fn projection_files_are_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let w = ProjectionMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let path = dir.path().join("w.oide");
        save_projection(&w, &path).unwrap();
        assert_eq!(load_projection(&path).unwrap(), w);
        assert!(matches!(
            load_embeddings(&path),
            Err(FormatError::UnexpectedFlags { found: 1, expected: 0 })
        ));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[6..8], &[1, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
    }

    #[test]
    fn sidecars_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let truth: GroundTruth = [(10, 1), (11, 2), (4294967296, 1)].into_iter().collect();
        let p = dir.path().join("truth.tsv");
        truth.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "10\t1\n11\t2\n4294967296\t1\n");
        assert_eq!(GroundTruth::load(&p).unwrap(), truth);

        let m = dir.path().join("manifest.tsv");
        let entries = vec![(0, "a/b.png".to_string()), (1, "c d.jpg".to_string())];
        write_manifest(&m, &entries).unwrap();
        assert_eq!(read_manifest(&m).unwrap(), entries);

        fs::write(&p, "1\t2\nnot-a-line\n").unwrap();
        match GroundTruth::load(&p) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            rows in 0usize..12,
            dim in 1usize..9,
            seed in any::<u64>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * dim)
                .map(|_| f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF))
                .collect();
            let ids: Vec<u64> = (0..rows as u64).map(|i| i.wrapping_mul(0x9E37_79B9_7F4A_7C15)).collect();
            let set = EmbeddingSet::new(ids, dim, data).unwrap();
            let bytes = encode(set.ids(), dim, set.data(), FLAG_EMBEDDINGS);
            let (_, back) = decode(&bytes).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                set.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(encode(back.ids(), dim, back.data(), FLAG_EMBEDDINGS), bytes);
        }
    }
}
