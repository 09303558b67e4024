//! Direct memory: one persistent, byte-addressable 32-bit address space per
//! service.
//!
//! The low half of the space (`0x0000_0000..=0x7FFF_FFFF`) holds network
//! state, the high half holds the node's instance state. Pages are 4 KiB and
//! are loaded on first touch; unwritten bytes read as zero. Every region
//! starts with a header page that holds its allocator state and root table,
//! so everything needed to resume a space lives inside the space.
//!
//! Network state is versioned by copy-on-write snapshots taken at sealed
//! batch boundaries. The instance region is never versioned.

mod alloc;
mod image;
mod roots;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{Position, ServiceId};

pub use alloc::{alloc as alloc_in, free as free_in, NUM_CLASSES};
pub use image::CrashPoint;
pub use roots::{
    define_root, lookup_root, read_root_value, root_names, write_root_value, BlobRef, Cell,
    FixedMap, LogVec, RootInfo, ScalarKind, TypeTag, MAX_ROOTS, MAX_ROOT_NAME,
};

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_SHIFT: u32 = 12;
pub const NETWORK_BASE: u32 = 0x0000_0000;
pub const INSTANCE_BASE: u32 = 0x8000_0000;

pub type Page = [u8; PAGE_SIZE];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DmaError {
    #[error("region violation: {access} at {addr:#010x} not allowed in {mode:?} mode")]
    RegionViolation {
        addr: u32,
        access: &'static str,
        mode: AccessMode,
    },
    #[error("access of {len} bytes at {addr:#010x} crosses a region boundary")]
    OutOfRange { addr: u32, len: u64 },
    #[error("{region:?} region exhausted allocating {size} bytes")]
    OutOfMemory { region: Region, size: u32 },
    #[error("free of {0:#010x}, which is not a live block")]
    BadFree(u32),
    #[error("bad allocation request: {0}")]
    BadAlloc(String),
    #[error("snapshot position {requested} does not follow {last}")]
    NonMonotonicPosition { last: Position, requested: Position },
    #[error("no snapshot at position {0}")]
    UnknownSnapshot(Position),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("backing store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("unknown root {0}")]
    UnknownRoot(String),
    #[error("duplicate root {0}")]
    DuplicateRoot(String),
    #[error("root table full")]
    RootTableFull,
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("corrupt heap: {0}")]
    CorruptHeap(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Network,
    Instance,
}

impl Region {
    pub fn base(self) -> u32 {
        match self {
            Region::Network => NETWORK_BASE,
            Region::Instance => INSTANCE_BASE,
        }
    }

    /// Exclusive end of the region.
    pub fn end(self) -> u64 {
        self.base() as u64 + 0x8000_0000
    }

    pub fn of(addr: u32) -> Region {
        if addr < INSTANCE_BASE {
            Region::Network
        } else {
            Region::Instance
        }
    }

    pub fn of_page(page: u32) -> Region {
        Region::of(page << PAGE_SHIFT)
    }
}

/// Who is currently driving the space.
///
/// During sequenced execution only the network region is reachable; outside
/// it the network region is read-only and the instance region is writable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    Sequenced,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageState {
    Unloaded,
    LoadedClean,
    LoadedDirty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SnapshotId {
    pub position: Position,
}

/// Instrumentation counters.
#[derive(Debug, Clone, Default)]
pub struct PageStats {
    /// Pages brought into the cache (from the store or zero-filled).
    pub loads: u64,
    /// Pages preserved by copy-on-write for a snapshot.
    pub copies: u64,
    /// Pages written back by `persist`.
    pub flushed: u64,
    /// Distinct pages read or written.
    pub touched: BTreeSet<u32>,
}

/// Minimal byte-level access used by the allocator and the root containers.
pub trait ByteMemory {
    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), DmaError>;
    fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), DmaError>;

    fn read_vec(&mut self, addr: u32, len: usize) -> Result<Vec<u8>, DmaError> {
        let mut buf = vec![0; len];
        self.read(addr, &mut buf)?;
        Ok(buf)
    }

    fn read_u32(&mut self, addr: u32) -> Result<u32, DmaError> {
        let mut buf = [0; 4];
        self.read(addr, &mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn write_u32(&mut self, addr: u32, v: u32) -> Result<(), DmaError> {
        self.write(addr, &v.to_le_bytes())
    }
}

struct CachedPage {
    data: Box<Page>,
    dirty: bool,
}

enum Store {
    Memory(BTreeMap<u32, Box<Page>>),
    File {
        dir: PathBuf,
        index: BTreeMap<u32, u64>,
    },
}

pub struct MemorySpace {
    service: ServiceId,
    mode: AccessMode,
    cache: BTreeMap<u32, CachedPage>,
    store: Store,
    snapshots: Vec<SnapshotId>,
    shadows: Vec<BTreeMap<u32, Box<Page>>>,
    stats: PageStats,
    generation: u64,
}

impl std::fmt::Debug for MemorySpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemorySpace")
            .field("service", &self.service)
            .field("mode", &self.mode)
            .field("cached_pages", &self.cache.len())
            .field("snapshots", &self.snapshots)
            .finish()
    }
}

fn zero_page() -> Box<Page> {
    Box::new([0; PAGE_SIZE])
}

fn is_zero(page: &Page) -> bool {
    page.iter().all(|&b| b == 0)
}

impl MemorySpace {
    /// A fresh, memory-backed space with initialized region headers.
    pub fn new(service: ServiceId) -> Self {
        let mut space = MemorySpace {
            service,
            mode: AccessMode::Instance,
            cache: BTreeMap::new(),
            store: Store::Memory(BTreeMap::new()),
            snapshots: Vec::new(),
            shadows: Vec::new(),
            stats: PageStats::default(),
            generation: 0,
        };
        space.init_headers();
        space
    }

    /// Opens a file-backed space in `dir`. An absent image yields a fresh
    /// space; a present one must pass its checksum.
    pub fn open(service: ServiceId, dir: &Path) -> Result<Self, DmaError> {
        let path = image::image_path(dir);
        if !path.exists() {
            fs::create_dir_all(dir).map_err(|e| DmaError::StoreUnavailable(e.to_string()))?;
            let mut space = MemorySpace::new(service);
            space.store = Store::File {
                dir: dir.to_path_buf(),
                index: BTreeMap::new(),
            };
            return Ok(space);
        }
        let bytes = fs::read(&path).map_err(|e| DmaError::StoreUnavailable(e.to_string()))?;
        let parsed = image::parse(&bytes)?;
        if parsed.service != service.as_str() {
            return Err(DmaError::CorruptImage(format!(
                "image belongs to service {}, not {service}",
                parsed.service
            )));
        }
        let mut snapshots = Vec::new();
        let mut shadows = Vec::new();
        for position in parsed.versions {
            snapshots.push(SnapshotId { position });
            shadows.push(image::read_shadow(dir, position)?);
        }
        Ok(MemorySpace {
            service,
            mode: AccessMode::Instance,
            cache: BTreeMap::new(),
            store: Store::File {
                dir: dir.to_path_buf(),
                index: parsed.index,
            },
            snapshots,
            shadows,
            stats: PageStats::default(),
            generation: parsed.generation,
        })
    }

    /// Restores the image saved before the last (interrupted) persist.
    pub fn recover(service: ServiceId, dir: &Path) -> Result<Self, DmaError> {
        image::restore_prior(dir)?;
        MemorySpace::open(service, dir)
    }

    fn init_headers(&mut self) {
        for region in [Region::Network, Region::Instance] {
            let mut raw = RawAccess(self);
            alloc::init_region(&mut raw, region).expect("header page is in range");
        }
    }

    pub fn service(&self) -> &ServiceId {
        &self.service
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    /// Switches the access mode, returning the previous one.
    pub fn set_mode(&mut self, mode: AccessMode) -> AccessMode {
        std::mem::replace(&mut self.mode, mode)
    }

    pub fn stats(&self) -> &PageStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = PageStats::default();
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn snapshots(&self) -> &[SnapshotId] {
        &self.snapshots
    }

    pub fn page_state(&self, page: u32) -> PageState {
        match self.cache.get(&page) {
            Some(p) if p.dirty => PageState::LoadedDirty,
            Some(_) => PageState::LoadedClean,
            None => PageState::Unloaded,
        }
    }

    pub fn loaded_pages(&self) -> usize {
        self.cache.len()
    }

    fn check(&self, addr: u32, len: u64, write: bool) -> Result<Region, DmaError> {
        let region = Region::of(addr);
        if addr as u64 + len > region.end() {
            return Err(DmaError::OutOfRange { addr, len });
        }
        let allowed = match (self.mode, region) {
            (AccessMode::Sequenced, Region::Network) => true,
            (AccessMode::Sequenced, Region::Instance) => false,
            (AccessMode::Instance, Region::Network) => !write,
            (AccessMode::Instance, Region::Instance) => true,
        };
        if !allowed {
            return Err(DmaError::RegionViolation {
                addr,
                access: if write { "write" } else { "read" },
                mode: self.mode,
            });
        }
        Ok(region)
    }

    fn fetch(&self, page: u32) -> Result<Option<Box<Page>>, DmaError> {
        match &self.store {
            Store::Memory(pages) => Ok(pages.get(&page).cloned()),
            Store::File { dir, index } => match index.get(&page) {
                None => Ok(None),
                Some(&offset) => {
                    let mut file = fs::File::open(image::image_path(dir))
                        .map_err(|e| DmaError::StoreUnavailable(e.to_string()))?;
                    let mut data = zero_page();
                    file.seek(SeekFrom::Start(offset))
                        .and_then(|_| file.read_exact(&mut data[..]))
                        .map_err(|e| DmaError::StoreUnavailable(e.to_string()))?;
                    Ok(Some(data))
                }
            },
        }
    }

    fn load(&mut self, page: u32) -> Result<&mut CachedPage, DmaError> {
        if !self.cache.contains_key(&page) {
            let data = self.fetch(page)?.unwrap_or_else(zero_page);
            self.stats.loads += 1;
            self.cache.insert(page, CachedPage { data, dirty: false });
        }
        Ok(self.cache.get_mut(&page).unwrap())
    }

    /// Current content of a page without touching the cache or counters.
    fn peek(&self, page: u32) -> Result<Cow<'_, Page>, DmaError> {
        if let Some(p) = self.cache.get(&page) {
            return Ok(Cow::Borrowed(&p.data));
        }
        Ok(Cow::Owned(*self.fetch(page)?.unwrap_or_else(zero_page)))
    }

    fn read_raw(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), DmaError> {
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u32;
            let page = a >> PAGE_SHIFT;
            let off = (a as usize) & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - off).min(buf.len() - done);
            self.stats.touched.insert(page);
            let cached = self.load(page)?;
            buf[done..done + n].copy_from_slice(&cached.data[off..off + n]);
            done += n;
        }
        Ok(())
    }

    fn write_raw(&mut self, addr: u32, bytes: &[u8]) -> Result<(), DmaError> {
        let mut done = 0usize;
        while done < bytes.len() {
            let a = addr + done as u32;
            let page = a >> PAGE_SHIFT;
            let off = (a as usize) & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - off).min(bytes.len() - done);
            self.stats.touched.insert(page);
            self.preserve_for_snapshot(page)?;
            let cached = self.load(page)?;
            cached.data[off..off + n].copy_from_slice(&bytes[done..done + n]);
            cached.dirty = true;
            done += n;
        }
        Ok(())
    }

    fn preserve_for_snapshot(&mut self, page: u32) -> Result<(), DmaError> {
        if Region::of_page(page) != Region::Network || self.snapshots.is_empty() {
            return Ok(());
        }
        let latest = self.shadows.len() - 1;
        if self.shadows[latest].contains_key(&page) {
            return Ok(());
        }
        let copy = Box::new(*self.load(page)?.data);
        self.shadows[latest].insert(page, copy);
        self.stats.copies += 1;
        Ok(())
    }

    pub fn read(&mut self, addr: u32, len: usize) -> Result<Vec<u8>, DmaError> {
        let mut buf = vec![0; len];
        ByteMemory::read(self, addr, &mut buf)?;
        Ok(buf)
    }

    pub fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), DmaError> {
        ByteMemory::write(self, addr, bytes)
    }

    /// Checked write that hands back the bytes it replaced.
    pub fn write_returning_old(&mut self, addr: u32, bytes: &[u8]) -> Result<Vec<u8>, DmaError> {
        self.check(addr, bytes.len() as u64, true)?;
        let mut old = vec![0; bytes.len()];
        self.read_raw(addr, &mut old)?;
        self.write_raw(addr, bytes)?;
        Ok(old)
    }

    /// A fresh memory-backed space whose network region equals this space's
    /// network region at `snapshot`. The instance region starts empty.
    pub fn fork_network_at(&mut self, snapshot: SnapshotId) -> Result<MemorySpace, DmaError> {
        let idx = self
            .snapshots
            .binary_search(&snapshot)
            .map_err(|_| DmaError::UnknownSnapshot(snapshot.position))?;
        let mut pages = self.known_pages();
        for shadow in &self.shadows[idx..] {
            pages.extend(shadow.keys().copied());
        }
        let mut fork = MemorySpace::new(self.service.clone());
        for page in pages {
            if Region::of_page(page) != Region::Network {
                continue;
            }
            let bytes = self.read_at(snapshot, page << PAGE_SHIFT, PAGE_SIZE)?;
            RawAccess(&mut fork).write(page << PAGE_SHIFT, &bytes)?;
        }
        fork.reset_stats();
        Ok(fork)
    }

    /// A fresh memory-backed copy of both regions as they are now. Snapshots
    /// are not carried over.
    pub fn fork_current(&self) -> Result<MemorySpace, DmaError> {
        let mut fork = MemorySpace::new(self.service.clone());
        for page in self.known_pages() {
            let data = self.peek(page)?;
            if !is_zero(&data) {
                RawAccess(&mut fork).write(page << PAGE_SHIFT, &data[..])?;
            }
        }
        fork.reset_stats();
        Ok(fork)
    }

    pub fn alloc(&mut self, region: Region, size: u32, align: u32) -> Result<u32, DmaError> {
        alloc::alloc(self, region, size, align)
    }

    pub fn free(&mut self, region: Region, addr: u32) -> Result<(), DmaError> {
        alloc::free(self, region, addr)
    }

    /// Captures the network region as of `position`. Positions must be
    /// strictly increasing.
    pub fn snapshot(&mut self, position: Position) -> Result<SnapshotId, DmaError> {
        if let Some(last) = self.snapshots.last() {
            if position <= last.position {
                return Err(DmaError::NonMonotonicPosition {
                    last: last.position,
                    requested: position,
                });
            }
        }
        let id = SnapshotId { position };
        self.snapshots.push(id);
        self.shadows.push(BTreeMap::new());
        Ok(id)
    }

    pub fn snapshot_at(&self, position: Position) -> Option<SnapshotId> {
        self.snapshots
            .binary_search_by_key(&position, |s| s.position)
            .ok()
            .map(|i| self.snapshots[i])
    }

    /// Latest snapshot at or before `position`.
    pub fn snapshot_before(&self, position: Position) -> Option<SnapshotId> {
        self.snapshots
            .iter()
            .rev()
            .find(|s| s.position <= position)
            .copied()
    }

    /// Reads network bytes as they were when `snapshot` was taken.
    pub fn read_at(
        &mut self,
        snapshot: SnapshotId,
        addr: u32,
        len: usize,
    ) -> Result<Vec<u8>, DmaError> {
        let idx = self
            .snapshots
            .binary_search(&snapshot)
            .map_err(|_| DmaError::UnknownSnapshot(snapshot.position))?;
        if Region::of(addr) != Region::Network || addr as u64 + len as u64 > Region::Network.end() {
            return Err(DmaError::OutOfRange {
                addr,
                len: len as u64,
            });
        }
        let mut out = vec![0; len];
        let mut done = 0usize;
        while done < len {
            let a = addr + done as u32;
            let page = a >> PAGE_SHIFT;
            let off = (a as usize) & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - off).min(len - done);
            let preserved = self.shadows[idx..].iter().find_map(|s| s.get(&page));
            match preserved {
                Some(p) => out[done..done + n].copy_from_slice(&p[off..off + n]),
                None => {
                    self.stats.touched.insert(page);
                    let cached = self.load(page)?;
                    out[done..done + n].copy_from_slice(&cached.data[off..off + n]);
                }
            }
            done += n;
        }
        Ok(out)
    }

    /// A read-only view of the network region at a snapshot.
    pub fn view_at(&mut self, snapshot: SnapshotId) -> Result<SnapshotView<'_>, DmaError> {
        if self.snapshots.binary_search(&snapshot).is_err() {
            return Err(DmaError::UnknownSnapshot(snapshot.position));
        }
        Ok(SnapshotView {
            space: self,
            snapshot,
        })
    }

    /// Every page known to the space (stored or cached), ascending.
    fn known_pages(&self) -> BTreeSet<u32> {
        let mut pages: BTreeSet<u32> = self.cache.keys().copied().collect();
        match &self.store {
            Store::Memory(m) => pages.extend(m.keys().copied()),
            Store::File { index, .. } => pages.extend(index.keys().copied()),
        }
        pages
    }

    /// Canonical serialization of a region's non-zero pages:
    /// `(page number: u32 LE, page bytes)` in ascending page order.
    pub fn region_image(&self, region: Region) -> Result<Vec<u8>, DmaError> {
        let mut out = Vec::new();
        for page in self.known_pages() {
            if Region::of_page(page) != region {
                continue;
            }
            let data = self.peek(page)?;
            if is_zero(&data) {
                continue;
            }
            out.extend_from_slice(&page.to_le_bytes());
            out.extend_from_slice(&data[..]);
        }
        Ok(out)
    }

    pub fn network_image(&self) -> Vec<u8> {
        self.region_image(Region::Network)
            .expect("network pages readable from store")
    }

    /// SHA-256 of [`MemorySpace::network_image`].
    pub fn network_digest(&self) -> [u8; 32] {
        Sha256::digest(self.network_image()).into()
    }

    /// Flushes dirty pages to the backing store.
    pub fn persist(&mut self) -> Result<PersistReport, DmaError> {
        self.persist_inner(None)
    }

    /// Persist that stops at `crash`, leaving the on-disk image exactly as a
    /// process killed at that point would.
    pub fn persist_interrupted(&mut self, crash: CrashPoint) -> Result<PersistReport, DmaError> {
        self.persist_inner(Some(crash))
    }

    fn persist_inner(&mut self, crash: Option<CrashPoint>) -> Result<PersistReport, DmaError> {
        let dirty: Vec<u32> = self
            .cache
            .iter()
            .filter(|(_, p)| p.dirty)
            .map(|(&n, _)| n)
            .collect();
        match &self.store {
            Store::Memory(_) => {
                let Store::Memory(pages) = &mut self.store else {
                    unreachable!()
                };
                for n in &dirty {
                    let cached = self.cache.get_mut(n).unwrap();
                    if is_zero(&cached.data) {
                        pages.remove(n);
                    } else {
                        pages.insert(*n, cached.data.clone());
                    }
                    cached.dirty = false;
                }
                self.generation += 1;
            }
            Store::File { dir, .. } => {
                let dir = dir.clone();
                let mut pages = BTreeMap::new();
                for page in self.known_pages() {
                    let data = self.peek(page)?;
                    if !is_zero(&data) {
                        pages.insert(page, data.into_owned());
                    }
                }
                let generation = self.generation + 1;
                let versions: Vec<Position> = self.snapshots.iter().map(|s| s.position).collect();
                for (snap, shadow) in self.snapshots.iter().zip(&self.shadows) {
                    image::write_shadow(&dir, snap.position, shadow)?;
                }
                let index = image::write_image(
                    &dir,
                    self.service.as_str(),
                    generation,
                    &versions,
                    &pages,
                    crash,
                )?;
                self.generation = generation;
                self.store = Store::File { dir, index };
                for p in self.cache.values_mut() {
                    p.dirty = false;
                }
            }
        }
        self.stats.flushed += dirty.len() as u64;
        Ok(PersistReport {
            pages_flushed: dirty.len(),
            generation: self.generation,
        })
    }

    /// Moves this space onto a file store in `dir` and persists it there.
    pub fn save_to(&mut self, dir: &Path) -> Result<PersistReport, DmaError> {
        fs::create_dir_all(dir).map_err(|e| DmaError::StoreUnavailable(e.to_string()))?;
        // bring every stored page into the cache so nothing is lost when the
        // store is replaced
        for page in self.known_pages() {
            if !self.cache.contains_key(&page) {
                let data = self.fetch(page)?.unwrap_or_else(zero_page);
                self.cache.insert(page, CachedPage { data, dirty: true });
            }
        }
        self.store = Store::File {
            dir: dir.to_path_buf(),
            index: BTreeMap::new(),
        };
        self.persist()
    }

    /// Drops clean pages from the cache, as a suspended instance would.
    pub fn evict_clean(&mut self) {
        self.cache.retain(|_, p| p.dirty);
    }

    /// Root table entries of a region.
    /// Reads a root by name from the live image, or a network root as of
    /// the snapshot taken at `at`. Instance roots are not versioned.
    pub fn read_root_named(
        &mut self,
        name: &str,
        at: Option<Position>,
    ) -> Result<crate::value::Value, DmaError> {
        let mut found = None;
        for region in [Region::Network, Region::Instance] {
            if let Some(r) = self.roots(region)?.into_iter().find(|r| r.name == name) {
                found = Some(r);
                break;
            }
        }
        let info = found.ok_or_else(|| DmaError::UnknownRoot(name.to_string()))?;
        match at {
            Some(p) if Region::of(info.addr) == Region::Network => {
                let snap = self.snapshot_at(p).ok_or(DmaError::UnknownSnapshot(p))?;
                roots::read_root_value(&mut self.view_at(snap)?, &info)
            }
            _ => roots::read_root_value(&mut RawAccess(self), &info),
        }
    }

    pub fn roots(&mut self, region: Region) -> Result<Vec<RootInfo>, DmaError> {
        let mut raw = RawAccess(self);
        roots::list_roots(&mut raw, region)
    }
}

impl ByteMemory for MemorySpace {
    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), DmaError> {
        self.check(addr, buf.len() as u64, false)?;
        self.read_raw(addr, buf)
    }

    fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), DmaError> {
        self.check(addr, bytes.len() as u64, true)?;
        self.write_raw(addr, bytes)
    }
}

/// Access that skips the mode check. Used for header setup and for
/// inspection tooling; execution paths always go through the checked API.
pub struct RawAccess<'a>(pub &'a mut MemorySpace);

impl ByteMemory for RawAccess<'_> {
    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), DmaError> {
        if addr as u64 + buf.len() as u64 > Region::of(addr).end() {
            return Err(DmaError::OutOfRange {
                addr,
                len: buf.len() as u64,
            });
        }
        self.0.read_raw(addr, buf)
    }

    fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), DmaError> {
        if addr as u64 + bytes.len() as u64 > Region::of(addr).end() {
            return Err(DmaError::OutOfRange {
                addr,
                len: bytes.len() as u64,
            });
        }
        self.0.write_raw(addr, bytes)
    }
}

/// Read-only access to the network region at a snapshot.
pub struct SnapshotView<'a> {
    space: &'a mut MemorySpace,
    snapshot: SnapshotId,
}

impl ByteMemory for SnapshotView<'_> {
    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), DmaError> {
        let bytes = self.space.read_at(self.snapshot, addr, buf.len())?;
        buf.copy_from_slice(&bytes);
        Ok(())
    }

    fn write(&mut self, addr: u32, _bytes: &[u8]) -> Result<(), DmaError> {
        Err(DmaError::RegionViolation {
            addr,
            access: "write",
            mode: AccessMode::Instance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersistReport {
    pub pages_flushed: usize,
    pub generation: u64,
}
