//! Binary feature cache container (`.mafc`).
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic "MAFC" (4) | version u16 = 1 | hidden_size u32 | entry_count u64
//! per entry: id_len u8 | id bytes (UTF-8) | tag u8 | hidden_size x f32
//! CRC32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Tags are `'a'` (0x61) and `'b'` (0x62) for the two semantic prompts and
//! `'q'` (0x71) for quality-aware features. Reads verify the checksum before
//! yielding anything, so a damaged file never produces partial entries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAFC";
pub const VERSION: u16 = 1;
pub const SUPPORTED_VERSIONS: &[u16] = &[VERSION];
pub const HEADER_LEN: usize = 4 + 2 + 4 + 8;
pub const CHECKSUM_LEN: usize = 4;
pub const MAX_ID_LEN: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CacheTag {
    /// Semantic-existence prompt.
    A,
    /// Semantic-coherence prompt.
    B,
    /// Quality-aware feature.
    Q,
}

impl CacheTag {
    pub const ALL: [CacheTag; 3] = [CacheTag::A, CacheTag::B, CacheTag::Q];

    pub fn byte(self) -> u8 {
        self.as_char() as u8
    }

    pub fn as_char(self) -> char {
        match self {
            CacheTag::A => 'a',
            CacheTag::B => 'b',
            CacheTag::Q => 'q',
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x61 => Some(CacheTag::A),
            0x62 => Some(CacheTag::B),
            0x71 => Some(CacheTag::Q),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub image_id: String,
    pub tag: CacheTag,
    pub vec: Vec<f32>,
}

impl CacheEntry {
    pub fn new(image_id: impl Into<String>, tag: CacheTag, vec: Vec<f32>) -> Self {
        Self {
            image_id: image_id.into(),
            tag,
            vec,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.vec.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A parsed, validated cache.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    hidden_size: usize,
    entries: Vec<CacheEntry>,
    index: HashMap<(String, CacheTag), usize>,
}

impl FeatureCache {
    pub fn from_entries(entries: Vec<CacheEntry>) -> Result<Self> {
        let hidden_size = check_entries(&entries)?;
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.image_id.clone(), e.tag), i))
            .collect();
        Ok(Self {
            hidden_size,
            entries,
            index,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<CacheEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, image_id: &str, tag: CacheTag) -> bool {
        self.index.contains_key(&(image_id.to_string(), tag))
    }

    pub fn get(&self, image_id: &str, tag: CacheTag) -> Option<&CacheEntry> {
        self.index
            .get(&(image_id.to_string(), tag))
            .map(|&i| &self.entries[i])
    }

    /// Like [`get`](Self::get) but a miss reports the ids that sort nearest
    /// to `image_id` among those carrying `tag`.
    pub fn require(&self, image_id: &str, tag: CacheTag) -> Result<&CacheEntry> {
        self.get(image_id, tag).ok_or_else(|| Error::NotFound {
            id: image_id.to_string(),
            tag: tag.as_char(),
            nearest: self.nearest_ids(image_id, tag, 3),
        })
    }

    fn nearest_ids(&self, image_id: &str, tag: CacheTag, k: usize) -> Vec<String> {
        let ids: BTreeMap<&str, ()> = self
            .entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| (e.image_id.as_str(), ()))
            .collect();
        let mut out: Vec<String> = ids
            .range(..image_id)
            .rev()
            .take(k)
            .map(|(id, _)| id.to_string())
            .collect();
        out.reverse();
        out.extend(ids.range(image_id..).take(k).map(|(id, _)| id.to_string()));
        out
    }

    pub fn tag_counts(&self) -> BTreeMap<CacheTag, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.tag).or_insert(0) += 1;
        }
        counts
    }
}

fn check_entries(entries: &[CacheEntry]) -> Result<usize> {
    let Some(first) = entries.first() else {
        return Err(Error::EmptyInput("a cache needs at least one entry".into()));
    };
    let hidden = first.vec.len();
    if hidden == 0 {
        return Err(Error::Format {
            offset: 0,
            message: "hidden_size must be positive".into(),
        });
    }
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    for e in entries {
        if e.vec.len() != hidden {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "entry ({:?}, '{}') has {} values, expected hidden_size {hidden}",
                    e.image_id,
                    e.tag.as_char(),
                    e.vec.len()
                ),
            });
        }
        if e.image_id.len() > MAX_ID_LEN {
            return Err(Error::Format {
                offset: 0,
                message: format!("image id longer than {MAX_ID_LEN} bytes: {:?}", e.image_id),
            });
        }
        if !seen.insert((e.image_id.as_str(), e.tag)) {
            return Err(Error::Conflict {
                id: e.image_id.clone(),
                tag: e.tag.as_char(),
            });
        }
    }
    Ok(hidden)
}

/// Serialize entries into the container layout.
pub fn encode(entries: &[CacheEntry]) -> Result<Vec<u8>> {
    let hidden = check_entries(entries)?;
    let hidden_u32 = u32::try_from(hidden).map_err(|_| Error::Format {
        offset: 6,
        message: format!("hidden_size {hidden} does not fit in u32"),
    })?;
    let payload: usize = entries
        .iter()
        .map(|e| 2 + e.image_id.len() + 4 * hidden)
        .sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload + CHECKSUM_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&hidden_u32.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        buf.push(e.image_id.len() as u8);
        buf.extend_from_slice(e.image_id.as_bytes());
        buf.push(e.tag.byte());
        for v in &e.vec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Result of the cheap structural checks done before a full parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderInfo {
    pub version: u16,
    pub hidden_size: u32,
    pub entry_count: u64,
    pub stored_checksum: u32,
    pub computed_checksum: u32,
}

impl HeaderInfo {
    pub fn checksum_ok(&self) -> bool {
        self.stored_checksum == self.computed_checksum
    }
}

/// Magic, length, and checksum fields, without validating the checksum.
pub fn inspect(bytes: &[u8]) -> Result<HeaderInfo> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Checksum {
            offset: bytes.len(),
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    let stored = u32::from_le_bytes(bytes[body.len()..].try_into().unwrap());
    Ok(HeaderInfo {
        version: u16::from_le_bytes(bytes[4..6].try_into().unwrap()),
        hidden_size: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        entry_count: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
        stored_checksum: stored,
        computed_checksum: crc32fast::hash(body),
    })
}

/// Parse a container. Check order: magic, checksum, version, structure.
pub fn decode(bytes: &[u8]) -> Result<FeatureCache> {
    let info = inspect(bytes)?;
    if !info.checksum_ok() {
        return Err(Error::Checksum {
            offset: bytes.len() - CHECKSUM_LEN,
            stored: info.stored_checksum,
            computed: info.computed_checksum,
        });
    }
    if !SUPPORTED_VERSIONS.contains(&info.version) {
        return Err(Error::UnsupportedVersion {
            found: info.version,
            offset: 4,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let hidden = info.hidden_size as usize;
    if hidden == 0 {
        return Err(Error::Format {
            offset: 6,
            message: "hidden_size is zero".into(),
        });
    }
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    let mut pos = HEADER_LEN;
    let min_entry = 2 + 4 * hidden;
    if info.entry_count > ((body.len() - HEADER_LEN) / min_entry) as u64 {
        return Err(Error::Format {
            offset: 10,
            message: format!(
                "entry_count {} exceeds what the file can hold",
                info.entry_count
            ),
        });
    }
    let mut entries = Vec::with_capacity(info.entry_count as usize);
    for _ in 0..info.entry_count {
        let id_len = *body.get(pos).ok_or_else(|| eof(pos))? as usize;
        pos += 1;
        let id_bytes = body.get(pos..pos + id_len).ok_or_else(|| eof(pos))?;
        let image_id = std::str::from_utf8(id_bytes)
            .map_err(|e| Error::Format {
                offset: pos + e.valid_up_to(),
                message: "image id is not valid UTF-8".into(),
            })?
            .to_string();
        pos += id_len;
        let tag_byte = *body.get(pos).ok_or_else(|| eof(pos))?;
        let tag = CacheTag::from_byte(tag_byte).ok_or_else(|| Error::Format {
            offset: pos,
            message: format!("unknown tag byte {tag_byte:#04x}"),
        })?;
        pos += 1;
        let raw = body.get(pos..pos + 4 * hidden).ok_or_else(|| eof(pos))?;
        let vec = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * hidden;
        entries.push(CacheEntry { image_id, tag, vec });
    }
    if pos != body.len() {
        return Err(Error::Format {
            offset: pos,
            message: format!("{} trailing bytes after last entry", body.len() - pos),
        });
    }
    if entries.is_empty() {
        return Err(Error::Format {
            offset: 10,
            message: "cache has zero entries".into(),
        });
    }
    FeatureCache::from_entries(entries).map_err(|e| match e {
        Error::Conflict { id, tag } => Error::Format {
            offset: HEADER_LEN,
            message: format!("duplicate entry ({id:?}, '{tag}')"),
        },
        other => other,
    })
}

fn eof(offset: usize) -> Error {
    Error::Format {
        offset,
        message: "unexpected end of entry data".into(),
    }
}

/// Write entries atomically (temp file in the target directory, then
/// rename). Returns the CRC32 stored in the trailer.
pub fn cache_write(path: impl AsRef<Path>, entries: &[CacheEntry]) -> Result<u32> {
    let bytes = encode(entries)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(u32::from_le_bytes(
        bytes[bytes.len() - 4..].try_into().unwrap(),
    ))
}

pub fn cache_read(path: impl AsRef<Path>) -> Result<FeatureCache> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
