//! Named roots and the typed containers they point at.
//!
//! The root table sits in each region's header page at
//! [`ROOT_TABLE_OFFSET`]. Entries are 64 bytes:
//!
//! ```text
//!  0  name, zero padded (48 bytes)
//! 48  name length u8
//! 49  type tag u8
//! 52  storage address u32
//! ```
//!
//! Containers keep all of their state in the space:
//!
//! * scalar cells hold the scalar's fixed-width encoding;
//! * blobs hold `(ptr, len)` of a canonical [`Value`] encoding;
//! * maps hold `(len, cap, data)` over an array of fixed-width entries sorted
//!   by key bytes;
//! * logs hold `(len, cap, data)` over an array of pointers to
//!   `[len u32][value bytes]` items.
//!
//! Scalar encodings compare bytewise in the same order as the values they
//! encode (integers are big-endian), so map order equals [`Value`] order.

use std::collections::BTreeMap;

use super::alloc::{alloc, free};
use super::{ByteMemory, DmaError, Region};
use crate::value::{Address, Value, U256};

pub(crate) const ROOT_TABLE_OFFSET: u32 = 128;
const OFF_ROOT_COUNT: u32 = 12;
const ENTRY_LEN: u32 = 64;
pub const MAX_ROOT_NAME: usize = 48;
pub const MAX_ROOTS: usize = ((super::PAGE_SIZE as u32 - ROOT_TABLE_OFFSET) / ENTRY_LEN) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarKind {
    U256,
    Address,
    Bool,
    /// Two addresses, shown as `[a, b]`.
    AddressPair,
}

impl ScalarKind {
    pub fn width(self) -> u32 {
        match self {
            ScalarKind::U256 => 32,
            ScalarKind::Address => 20,
            ScalarKind::Bool => 1,
            ScalarKind::AddressPair => 40,
        }
    }

    fn code(self) -> u8 {
        match self {
            ScalarKind::U256 => 0,
            ScalarKind::Address => 1,
            ScalarKind::Bool => 2,
            ScalarKind::AddressPair => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ScalarKind::U256,
            1 => ScalarKind::Address,
            2 => ScalarKind::Bool,
            3 => ScalarKind::AddressPair,
            _ => return None,
        })
    }

    pub fn encode(self, v: &Value) -> Result<Vec<u8>, DmaError> {
        let mismatch = || DmaError::TypeMismatch(format!("{v} is not a {self:?}"));
        match (self, v) {
            (ScalarKind::U256, Value::U256(n)) => Ok(n.to_big_endian().to_vec()),
            (ScalarKind::Address, Value::Address(a)) => Ok(a.0.to_vec()),
            (ScalarKind::Bool, Value::Bool(b)) => Ok(vec![*b as u8]),
            (ScalarKind::AddressPair, Value::List(items)) => match items.as_slice() {
                [Value::Address(a), Value::Address(b)] => {
                    let mut out = a.0.to_vec();
                    out.extend_from_slice(&b.0);
                    Ok(out)
                }
                _ => Err(mismatch()),
            },
            _ => Err(mismatch()),
        }
    }

    pub fn decode(self, b: &[u8]) -> Result<Value, DmaError> {
        debug_assert_eq!(b.len(), self.width() as usize);
        let addr = |b: &[u8]| Address(b.try_into().unwrap());
        Ok(match self {
            ScalarKind::U256 => Value::U256(U256::from_big_endian(b)),
            ScalarKind::Address => Value::Address(addr(b)),
            ScalarKind::Bool => match b[0] {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                x => return Err(DmaError::CorruptHeap(format!("bool cell holds {x}"))),
            },
            ScalarKind::AddressPair => Value::List(vec![
                Value::Address(addr(&b[..20])),
                Value::Address(addr(&b[20..])),
            ]),
        })
    }

    /// The zero value of the kind, used for fresh cells.
    pub fn zero(self) -> Value {
        match self {
            ScalarKind::U256 => Value::U256(U256::zero()),
            ScalarKind::Address => Value::Address(Address::ZERO),
            ScalarKind::Bool => Value::Bool(false),
            ScalarKind::AddressPair => Value::List(vec![
                Value::Address(Address::ZERO),
                Value::Address(Address::ZERO),
            ]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypeTag {
    /// A fixed-width scalar. Pairs are only valid as map keys.
    Cell(ScalarKind),
    /// Any value, stored as its canonical encoding.
    Blob,
    /// Append-only sequence of values.
    Log,
    Map(ScalarKind, ScalarKind),
}

impl TypeTag {
    pub fn code(self) -> u8 {
        match self {
            TypeTag::Cell(ScalarKind::U256) => 1,
            TypeTag::Cell(ScalarKind::Address) => 2,
            TypeTag::Cell(ScalarKind::Bool) => 3,
            TypeTag::Cell(ScalarKind::AddressPair) => 5,
            TypeTag::Blob => 4,
            TypeTag::Log => 6,
            TypeTag::Map(k, v) => 0x10 | k.code() << 2 | v.code(),
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => TypeTag::Cell(ScalarKind::U256),
            2 => TypeTag::Cell(ScalarKind::Address),
            3 => TypeTag::Cell(ScalarKind::Bool),
            5 => TypeTag::Cell(ScalarKind::AddressPair),
            4 => TypeTag::Blob,
            6 => TypeTag::Log,
            c if c & 0xF0 == 0x10 => TypeTag::Map(
                ScalarKind::from_code(c >> 2 & 3)?,
                ScalarKind::from_code(c & 3)?,
            ),
            _ => return None,
        })
    }

    fn storage_len(self) -> u32 {
        match self {
            TypeTag::Cell(k) => k.width(),
            TypeTag::Blob => 8,
            TypeTag::Log | TypeTag::Map(..) => 12,
        }
    }

    /// Value a root of this type holds when declared without an initializer.
    pub fn default_value(self) -> Value {
        match self {
            TypeTag::Cell(k) => k.zero(),
            TypeTag::Blob => Value::Bytes(Vec::new()),
            TypeTag::Log => Value::List(Vec::new()),
            TypeTag::Map(..) => Value::Map(BTreeMap::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootInfo {
    pub name: String,
    pub tag: TypeTag,
    pub addr: u32,
}

fn count_addr(region: Region) -> u32 {
    region.base() + OFF_ROOT_COUNT
}

fn entry_addr(region: Region, i: usize) -> u32 {
    region.base() + ROOT_TABLE_OFFSET + i as u32 * ENTRY_LEN
}

pub(crate) fn list_roots<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
) -> Result<Vec<RootInfo>, DmaError> {
    let count = mem.read_u32(count_addr(region))? as usize;
    if count > MAX_ROOTS {
        return Err(DmaError::CorruptHeap(format!("root count {count}")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let e = mem.read_vec(entry_addr(region, i), ENTRY_LEN as usize)?;
        let len = e[48] as usize;
        let name = std::str::from_utf8(&e[..len.min(MAX_ROOT_NAME)])
            .map_err(|_| DmaError::CorruptHeap(format!("root {i} name")))?
            .to_string();
        let tag = TypeTag::from_code(e[49])
            .ok_or_else(|| DmaError::CorruptHeap(format!("root {name} has tag {}", e[49])))?;
        let addr = u32::from_le_bytes(e[52..56].try_into().unwrap());
        out.push(RootInfo { name, tag, addr });
    }
    Ok(out)
}

pub fn root_names<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
) -> Result<Vec<String>, DmaError> {
    Ok(list_roots(mem, region)?
        .into_iter()
        .map(|r| r.name)
        .collect())
}

pub fn lookup_root<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
    name: &str,
) -> Result<RootInfo, DmaError> {
    list_roots(mem, region)?
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| DmaError::UnknownRoot(name.to_string()))
}

/// Allocates storage for a new root, records it in the table and stores
/// `init` in it.
pub fn define_root<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
    name: &str,
    tag: TypeTag,
    init: &Value,
) -> Result<RootInfo, DmaError> {
    if name.is_empty() || name.len() > MAX_ROOT_NAME {
        return Err(DmaError::BadAlloc(format!(
            "root name '{name}' must be 1..=48 bytes"
        )));
    }
    let roots = list_roots(mem, region)?;
    if roots.iter().any(|r| r.name == name) {
        return Err(DmaError::DuplicateRoot(name.to_string()));
    }
    if roots.len() >= MAX_ROOTS {
        return Err(DmaError::RootTableFull);
    }
    let addr = alloc(mem, region, tag.storage_len(), 8)?;
    let mut e = vec![0u8; ENTRY_LEN as usize];
    e[..name.len()].copy_from_slice(name.as_bytes());
    e[48] = name.len() as u8;
    e[49] = tag.code();
    e[52..56].copy_from_slice(&addr.to_le_bytes());
    mem.write(entry_addr(region, roots.len()), &e)?;
    mem.write_u32(count_addr(region), roots.len() as u32 + 1)?;
    let info = RootInfo {
        name: name.to_string(),
        tag,
        addr,
    };
    write_root_value(mem, &info, init)?;
    Ok(info)
}

/// The whole content of a root as a value: maps become [`Value::Map`], logs
/// become [`Value::List`].
pub fn read_root_value<M: ByteMemory + ?Sized>(
    mem: &mut M,
    root: &RootInfo,
) -> Result<Value, DmaError> {
    match root.tag {
        TypeTag::Cell(kind) => Cell::new(root.addr, kind).get(mem),
        TypeTag::Blob => BlobRef::new(root.addr).get(mem),
        TypeTag::Log => Ok(Value::List(LogVec::new(root.addr).items(mem)?)),
        TypeTag::Map(k, v) => Ok(Value::Map(
            FixedMap::new(root.addr, k, v)
                .entries(mem)?
                .into_iter()
                .collect(),
        )),
    }
}

/// Replaces the whole content of a root.
pub fn write_root_value<M: ByteMemory + ?Sized>(
    mem: &mut M,
    root: &RootInfo,
    value: &Value,
) -> Result<(), DmaError> {
    match root.tag {
        TypeTag::Cell(kind) => Cell::new(root.addr, kind).set(mem, value),
        TypeTag::Blob => BlobRef::new(root.addr).set(mem, value),
        TypeTag::Log => {
            let Value::List(items) = value else {
                return Err(DmaError::TypeMismatch(format!(
                    "log root needs a list, got {value}"
                )));
            };
            let log = LogVec::new(root.addr);
            log.clear(mem)?;
            for item in items {
                log.push(mem, item)?;
            }
            Ok(())
        }
        TypeTag::Map(k, v) => {
            let Value::Map(entries) = value else {
                return Err(DmaError::TypeMismatch(format!(
                    "map root needs a map, got {value}"
                )));
            };
            let map = FixedMap::new(root.addr, k, v);
            map.clear(mem)?;
            for (key, val) in entries {
                map.insert(mem, key, val)?;
            }
            Ok(())
        }
    }
}

fn region_of(addr: u32) -> Region {
    Region::of(addr)
}

fn read_desc<M: ByteMemory + ?Sized>(mem: &mut M, addr: u32) -> Result<[u32; 3], DmaError> {
    let b = mem.read_vec(addr, 12)?;
    let w = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap());
    Ok([w(0), w(1), w(2)])
}

fn write_desc<M: ByteMemory + ?Sized>(mem: &mut M, addr: u32, d: [u32; 3]) -> Result<(), DmaError> {
    let mut b = [0u8; 12];
    for (i, w) in d.iter().enumerate() {
        b[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
    }
    mem.write(addr, &b)
}

/// A fixed-width scalar stored in place.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub addr: u32,
    pub kind: ScalarKind,
}

impl Cell {
    pub fn new(addr: u32, kind: ScalarKind) -> Self {
        Cell { addr, kind }
    }

    pub fn get<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<Value, DmaError> {
        let b = mem.read_vec(self.addr, self.kind.width() as usize)?;
        self.kind.decode(&b)
    }

    pub fn set<M: ByteMemory + ?Sized>(&self, mem: &mut M, v: &Value) -> Result<(), DmaError> {
        let b = self.kind.encode(v)?;
        mem.write(self.addr, &b)
    }
}

/// An arbitrary value held as its canonical encoding in a heap block.
#[derive(Debug, Clone, Copy)]
pub struct BlobRef {
    pub addr: u32,
}

impl BlobRef {
    pub fn new(addr: u32) -> Self {
        BlobRef { addr }
    }

    pub fn get<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<Value, DmaError> {
        let ptr = mem.read_u32(self.addr)?;
        let len = mem.read_u32(self.addr + 4)?;
        if ptr == 0 {
            return Err(DmaError::CorruptHeap(format!(
                "blob at {:#010x} is unset",
                self.addr
            )));
        }
        let bytes = mem.read_vec(ptr, len as usize)?;
        Value::decode(&bytes).map_err(|e| DmaError::CorruptHeap(e.to_string()))
    }

    pub fn set<M: ByteMemory + ?Sized>(&self, mem: &mut M, v: &Value) -> Result<(), DmaError> {
        let bytes = v.encode();
        let region = region_of(self.addr);
        let old = mem.read_u32(self.addr)?;
        if old != 0 {
            free(mem, region, old)?;
        }
        let ptr = alloc(mem, region, bytes.len() as u32, 8)?;
        mem.write(ptr, &bytes)?;
        mem.write_u32(self.addr, ptr)?;
        mem.write_u32(self.addr + 4, bytes.len() as u32)
    }
}

/// Append-only list of values.
#[derive(Debug, Clone, Copy)]
pub struct LogVec {
    pub addr: u32,
}

impl LogVec {
    pub fn new(addr: u32) -> Self {
        LogVec { addr }
    }

    pub fn len<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<u32, DmaError> {
        mem.read_u32(self.addr)
    }

    pub fn get<M: ByteMemory + ?Sized>(
        &self,
        mem: &mut M,
        i: u32,
    ) -> Result<Option<Value>, DmaError> {
        let [len, _, data] = read_desc(mem, self.addr)?;
        if i >= len {
            return Ok(None);
        }
        let item = mem.read_u32(data + 4 * i)?;
        let n = mem.read_u32(item)?;
        let bytes = mem.read_vec(item + 4, n as usize)?;
        Value::decode(&bytes)
            .map(Some)
            .map_err(|e| DmaError::CorruptHeap(e.to_string()))
    }

    pub fn items<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<Vec<Value>, DmaError> {
        let len = self.len(mem)?;
        (0..len)
            .map(|i| Ok(self.get(mem, i)?.expect("index below len")))
            .collect()
    }

    pub fn push<M: ByteMemory + ?Sized>(&self, mem: &mut M, v: &Value) -> Result<(), DmaError> {
        let region = region_of(self.addr);
        let [len, cap, data] = read_desc(mem, self.addr)?;
        let bytes = v.encode();
        let item = alloc(mem, region, bytes.len() as u32 + 4, 8)?;
        mem.write_u32(item, bytes.len() as u32)?;
        mem.write(item + 4, &bytes)?;
        let (cap, data) = if len == cap {
            let new_cap = (cap * 2).max(4);
            let new_data = alloc(mem, region, new_cap * 4, 8)?;
            if len > 0 {
                let old = mem.read_vec(data, len as usize * 4)?;
                mem.write(new_data, &old)?;
                free(mem, region, data)?;
            }
            (new_cap, new_data)
        } else {
            (cap, data)
        };
        mem.write_u32(data + 4 * len, item)?;
        write_desc(mem, self.addr, [len + 1, cap, data])
    }

    pub fn clear<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<(), DmaError> {
        let region = region_of(self.addr);
        let [len, _, data] = read_desc(mem, self.addr)?;
        for i in 0..len {
            let item = mem.read_u32(data + 4 * i)?;
            free(mem, region, item)?;
        }
        if data != 0 {
            free(mem, region, data)?;
        }
        write_desc(mem, self.addr, [0, 0, 0])
    }
}

/// Sorted map from fixed-width keys to fixed-width values.
#[derive(Debug, Clone, Copy)]
pub struct FixedMap {
    pub addr: u32,
    pub key: ScalarKind,
    pub val: ScalarKind,
}

impl FixedMap {
    pub fn new(addr: u32, key: ScalarKind, val: ScalarKind) -> Self {
        FixedMap { addr, key, val }
    }

    fn width(&self) -> u32 {
        self.key.width() + self.val.width()
    }

    pub fn len<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<u32, DmaError> {
        mem.read_u32(self.addr)
    }

    /// `Ok(i)` if the key is at slot `i`, `Err(i)` for its insertion slot.
    fn search<M: ByteMemory + ?Sized>(
        &self,
        mem: &mut M,
        key: &[u8],
    ) -> Result<Result<u32, u32>, DmaError> {
        let [len, _, data] = read_desc(mem, self.addr)?;
        let (mut lo, mut hi) = (0u32, len);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let k = mem.read_vec(data + mid * self.width(), key.len())?;
            match k.as_slice().cmp(key) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Ok(Ok(mid)),
            }
        }
        Ok(Err(lo))
    }

    pub fn get<M: ByteMemory + ?Sized>(
        &self,
        mem: &mut M,
        key: &Value,
    ) -> Result<Option<Value>, DmaError> {
        let k = self.key.encode(key)?;
        match self.search(mem, &k)? {
            Ok(i) => {
                let data = mem.read_u32(self.addr + 8)?;
                let at = data + i * self.width() + self.key.width();
                let b = mem.read_vec(at, self.val.width() as usize)?;
                Ok(Some(self.val.decode(&b)?))
            }
            Err(_) => Ok(None),
        }
    }

    pub fn insert<M: ByteMemory + ?Sized>(
        &self,
        mem: &mut M,
        key: &Value,
        val: &Value,
    ) -> Result<(), DmaError> {
        let k = self.key.encode(key)?;
        let v = self.val.encode(val)?;
        let w = self.width();
        match self.search(mem, &k)? {
            Ok(i) => {
                let data = mem.read_u32(self.addr + 8)?;
                mem.write(data + i * w + self.key.width(), &v)
            }
            Err(i) => {
                let region = region_of(self.addr);
                let [len, cap, mut data] = read_desc(mem, self.addr)?;
                let mut cap = cap;
                if len == cap {
                    let new_cap = (cap * 2).max(4);
                    let new_data = alloc(mem, region, new_cap * w, 8)?;
                    if len > 0 {
                        let old = mem.read_vec(data, (len * w) as usize)?;
                        mem.write(new_data, &old)?;
                        free(mem, region, data)?;
                    }
                    cap = new_cap;
                    data = new_data;
                }
                if i < len {
                    let tail = mem.read_vec(data + i * w, ((len - i) * w) as usize)?;
                    mem.write(data + (i + 1) * w, &tail)?;
                }
                let mut entry = k;
                entry.extend_from_slice(&v);
                mem.write(data + i * w, &entry)?;
                write_desc(mem, self.addr, [len + 1, cap, data])
            }
        }
    }

    pub fn remove<M: ByteMemory + ?Sized>(
        &self,
        mem: &mut M,
        key: &Value,
    ) -> Result<bool, DmaError> {
        let k = self.key.encode(key)?;
        let Ok(i) = self.search(mem, &k)? else {
            return Ok(false);
        };
        let [len, cap, data] = read_desc(mem, self.addr)?;
        let w = self.width();
        if i + 1 < len {
            let tail = mem.read_vec(data + (i + 1) * w, ((len - i - 1) * w) as usize)?;
            mem.write(data + i * w, &tail)?;
        }
        mem.write(data + (len - 1) * w, &vec![0; w as usize])?;
        write_desc(mem, self.addr, [len - 1, cap, data])?;
        Ok(true)
    }

    pub fn entries<M: ByteMemory + ?Sized>(
        &self,
        mem: &mut M,
    ) -> Result<Vec<(Value, Value)>, DmaError> {
        let [len, _, data] = read_desc(mem, self.addr)?;
        let w = self.width();
        let raw = mem.read_vec(data, (len * w) as usize)?;
        raw.chunks(w as usize)
            .map(|c| {
                let (k, v) = c.split_at(self.key.width() as usize);
                Ok((self.key.decode(k)?, self.val.decode(v)?))
            })
            .collect()
    }

    pub fn clear<M: ByteMemory + ?Sized>(&self, mem: &mut M) -> Result<(), DmaError> {
        let [_, _, data] = read_desc(mem, self.addr)?;
        if data != 0 {
            free(mem, region_of(self.addr), data)?;
        }
        write_desc(mem, self.addr, [0, 0, 0])
    }
}
