//! Backing image format.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "LQDMAIMG"
//!      8     4  format version (1)
//!     12     4  page size (4096)
//!     16     4  region count (2)
//!     20    16  region table: (base u32, last u32) x 2
//!     36     8  root table address per region: u32 x 2
//!     44     4  page count
//!     48     4  snapshot count
//!     52     4  service name length
//!     56     8  generation (bumped on every persist; not checksummed)
//!     64     4  crc32 of every byte except offsets 56..68
//!     68     4  reserved (0)
//!     72     -  service name, snapshot positions (u64 each),
//!               page index (page u32, offset u64), page data
//! ```
//!
//! All integers are little-endian. Snapshot shadow pages live next to the
//! image in `snap-<position>.shadow`.
//!
//! A persist first copies the current image to `image.prev`, then writes the
//! new image with a zero checksum, syncs, and only then fills in the
//! checksum. An image whose checksum does not verify is rejected; the prior
//! image can be restored from `image.prev`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use super::{DmaError, Page, Region, PAGE_SIZE};
use crate::ids::Position;

const MAGIC: &[u8; 8] = b"LQDMAIMG";
const SHADOW_MAGIC: &[u8; 8] = b"LQSHADOW";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 72;
pub(crate) const GENERATION_RANGE: Range<usize> = 56..64;
const CHECKSUM_AT: usize = 64;

/// Where a simulated crash interrupts `persist`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Page data is flushed but the checksum has not been written.
    BeforeChecksum,
}

pub(crate) fn image_path(dir: &Path) -> PathBuf {
    dir.join("image.bin")
}

fn prior_path(dir: &Path) -> PathBuf {
    dir.join("image.prev")
}

pub(crate) fn shadow_path(dir: &Path, position: Position) -> PathBuf {
    dir.join(format!("snap-{position}.shadow"))
}

fn io_err(e: std::io::Error) -> DmaError {
    DmaError::StoreUnavailable(e.to_string())
}

fn checksum(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&bytes[..GENERATION_RANGE.start]);
    h.update(&bytes[CHECKSUM_AT + 4..]);
    h.finalize()
}

pub(crate) struct ParsedImage {
    pub service: String,
    pub generation: u64,
    pub versions: Vec<Position>,
    pub index: BTreeMap<u32, u64>,
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub(crate) fn parse(bytes: &[u8]) -> Result<ParsedImage, DmaError> {
    let corrupt = |m: String| DmaError::CorruptImage(m);
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "image is {} bytes, shorter than its header",
            bytes.len()
        )));
    }
    if &bytes[0..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let stored = u32_at(bytes, CHECKSUM_AT);
    if stored != checksum(bytes) {
        return Err(corrupt("checksum mismatch".into()));
    }
    if u32_at(bytes, 8) != FORMAT_VERSION || u32_at(bytes, 12) as usize != PAGE_SIZE {
        return Err(corrupt("unsupported version or page size".into()));
    }
    if u32_at(bytes, 16) != 2
        || u32_at(bytes, 20) != Region::Network.base()
        || u32_at(bytes, 28) != Region::Instance.base()
    {
        return Err(corrupt("unexpected region table".into()));
    }
    let pages = u32_at(bytes, 44) as usize;
    let versions = u32_at(bytes, 48) as usize;
    let name_len = u32_at(bytes, 52) as usize;
    let generation = u64_at(bytes, 56);

    let mut at = HEADER_LEN;
    let need = |at: usize, n: usize| -> Result<(), DmaError> {
        if at + n > bytes.len() {
            Err(DmaError::CorruptImage("truncated image body".into()))
        } else {
            Ok(())
        }
    };
    need(at, name_len)?;
    let service = String::from_utf8(bytes[at..at + name_len].to_vec())
        .map_err(|_| corrupt("service name is not UTF-8".into()))?;
    at += name_len;
    need(at, versions * 8)?;
    let versions = (0..versions).map(|i| u64_at(bytes, at + i * 8)).collect();
    at += u32_at(bytes, 48) as usize * 8;
    need(at, pages * 12)?;
    let mut index = BTreeMap::new();
    for i in 0..pages {
        let page = u32_at(bytes, at + i * 12);
        let offset = u64_at(bytes, at + i * 12 + 4);
        if offset as usize + PAGE_SIZE > bytes.len() {
            return Err(corrupt(format!("page {page} lies outside the image")));
        }
        index.insert(page, offset);
    }
    Ok(ParsedImage {
        service,
        generation,
        versions,
        index,
    })
}

/// Writes a complete image and returns its page index.
pub(crate) fn write_image(
    dir: &Path,
    service: &str,
    generation: u64,
    versions: &[Position],
    pages: &BTreeMap<u32, Page>,
    crash: Option<CrashPoint>,
) -> Result<BTreeMap<u32, u64>, DmaError> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + pages.len() * (PAGE_SIZE + 12));
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(PAGE_SIZE as u32).to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    for region in [Region::Network, Region::Instance] {
        bytes.extend_from_slice(&region.base().to_le_bytes());
        bytes.extend_from_slice(&((region.end() - 1) as u32).to_le_bytes());
    }
    for region in [Region::Network, Region::Instance] {
        bytes.extend_from_slice(&(region.base() + super::roots::ROOT_TABLE_OFFSET).to_le_bytes());
    }
    bytes.extend_from_slice(&(pages.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(versions.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(service.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&generation.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes()); // checksum, filled in last
    bytes.extend_from_slice(&0u32.to_le_bytes());
    debug_assert_eq!(bytes.len(), HEADER_LEN);
    bytes.extend_from_slice(service.as_bytes());
    for v in versions {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let data_start = (bytes.len() + pages.len() * 12) as u64;
    let mut index = BTreeMap::new();
    for (i, page) in pages.keys().enumerate() {
        let offset = data_start + (i * PAGE_SIZE) as u64;
        bytes.extend_from_slice(&page.to_le_bytes());
        bytes.extend_from_slice(&offset.to_le_bytes());
        index.insert(*page, offset);
    }
    for data in pages.values() {
        bytes.extend_from_slice(data);
    }
    let crc = checksum(&bytes);

    let path = image_path(dir);
    if path.exists() {
        fs::copy(&path, prior_path(dir)).map_err(io_err)?;
    }
    let mut file = File::create(&path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    file.sync_data().map_err(io_err)?;
    if crash == Some(CrashPoint::BeforeChecksum) {
        return Err(DmaError::StoreUnavailable(
            "simulated crash between flush and checksum".into(),
        ));
    }
    file.seek(SeekFrom::Start(CHECKSUM_AT as u64))
        .map_err(io_err)?;
    file.write_all(&crc.to_le_bytes()).map_err(io_err)?;
    file.sync_data().map_err(io_err)?;
    Ok(index)
}

pub(crate) fn restore_prior(dir: &Path) -> Result<(), DmaError> {
    let prior = prior_path(dir);
    if !prior.exists() {
        return Err(DmaError::CorruptImage("no prior image to recover".into()));
    }
    fs::copy(&prior, image_path(dir)).map_err(io_err)?;
    Ok(())
}

pub(crate) fn write_shadow(
    dir: &Path,
    position: Position,
    pages: &BTreeMap<u32, Box<Page>>,
) -> Result<(), DmaError> {
    let mut bytes = Vec::with_capacity(20 + pages.len() * (PAGE_SIZE + 4) + 4);
    bytes.extend_from_slice(SHADOW_MAGIC);
    bytes.extend_from_slice(&position.to_le_bytes());
    bytes.extend_from_slice(&(pages.len() as u32).to_le_bytes());
    for (page, data) in pages {
        bytes.extend_from_slice(&page.to_le_bytes());
        bytes.extend_from_slice(&data[..]);
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(shadow_path(dir, position))
        .map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.sync_data().map_err(io_err)
}

pub(crate) fn read_shadow(
    dir: &Path,
    position: Position,
) -> Result<BTreeMap<u32, Box<Page>>, DmaError> {
    let bytes = fs::read(shadow_path(dir, position))
        .map_err(|e| DmaError::CorruptImage(format!("shadow for {position}: {e}")))?;
    let corrupt = || DmaError::CorruptImage(format!("shadow file for position {position}"));
    if bytes.len() < 24 || &bytes[..8] != SHADOW_MAGIC {
        return Err(corrupt());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap())
        || u64_at(body, 8) != position
    {
        return Err(corrupt());
    }
    let count = u32_at(body, 16) as usize;
    if body.len() != 20 + count * (PAGE_SIZE + 4) {
        return Err(corrupt());
    }
    let mut pages = BTreeMap::new();
    for i in 0..count {
        let at = 20 + i * (PAGE_SIZE + 4);
        let mut data = Box::new([0u8; PAGE_SIZE]);
        data.copy_from_slice(&body[at + 4..at + 4 + PAGE_SIZE]);
        pages.insert(u32_at(body, at), data);
    }
    Ok(pages)
}
