//! In-space allocator: segregated power-of-two free lists plus a bump
//! frontier, all stored in the region's header page.
//!
//! Region header (offsets from the region base):
//!
//! ```text
//!   0  magic u32          4  layout version u32
//!   8  bump frontier u32  12 root count u32 (owned by the root table)
//!  16  free list heads, u32 x NUM_CLASSES
//! ```
//!
//! Each block is preceded by a 16-byte header `(state, class, tag, size)`
//! where `tag = addr ^ BLOCK_TAG_MASK`. Freed blocks link through their first
//! word. Because the metadata lives in the region, two replicas running the
//! same alloc/free sequence produce identical addresses and identical bytes.

use super::{ByteMemory, DmaError, Region, PAGE_SIZE};

pub const NUM_CLASSES: usize = 27;
const MIN_BLOCK: u32 = 16;
const MAX_BLOCK: u32 = MIN_BLOCK << (NUM_CLASSES - 1);
const BLOCK_HEADER: u32 = 16;

const REGION_MAGIC: u32 = 0x4752_514C;
const LAYOUT_VERSION: u32 = 1;
const OFF_MAGIC: u32 = 0;
const OFF_VERSION: u32 = 4;
const OFF_FRONTIER: u32 = 8;
const OFF_HEADS: u32 = 16;

const LIVE: u32 = 0x4556_494C;
const FREE: u32 = 0x4545_5246;
const BLOCK_TAG_MASK: u32 = 0xA5A5_A5A5;

fn heap_start(region: Region) -> u32 {
    region.base() + PAGE_SIZE as u32
}

fn head_addr(region: Region, class: usize) -> u32 {
    region.base() + OFF_HEADS + 4 * class as u32
}

pub(crate) fn init_region<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
) -> Result<(), DmaError> {
    let base = region.base();
    mem.write_u32(base + OFF_MAGIC, REGION_MAGIC)?;
    mem.write_u32(base + OFF_VERSION, LAYOUT_VERSION)?;
    mem.write_u32(base + OFF_FRONTIER, heap_start(region))
}

fn check_header<M: ByteMemory + ?Sized>(mem: &mut M, region: Region) -> Result<(), DmaError> {
    let base = region.base();
    if mem.read_u32(base + OFF_MAGIC)? != REGION_MAGIC
        || mem.read_u32(base + OFF_VERSION)? != LAYOUT_VERSION
    {
        return Err(DmaError::CorruptHeap(format!("{region:?} region header")));
    }
    Ok(())
}

fn class_for(size: u32) -> (usize, u32) {
    let block = size.next_power_of_two().max(MIN_BLOCK);
    let class = (block.trailing_zeros() - MIN_BLOCK.trailing_zeros()) as usize;
    (class, block)
}

pub fn alloc<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
    size: u32,
    align: u32,
) -> Result<u32, DmaError> {
    if size == 0 {
        return Err(DmaError::BadAlloc("size must be positive".into()));
    }
    if !align.is_power_of_two() {
        return Err(DmaError::BadAlloc(format!(
            "alignment {align} is not a power of two"
        )));
    }
    if size > MAX_BLOCK || align > MAX_BLOCK {
        return Err(DmaError::OutOfMemory { region, size });
    }
    check_header(mem, region)?;
    let (class, block) = class_for(size);
    let align = align.max(MIN_BLOCK);

    let head_at = head_addr(region, class);
    let head = mem.read_u32(head_at)?;
    if head != 0 && head % align == 0 {
        if mem.read_u32(head - BLOCK_HEADER)? != FREE {
            return Err(DmaError::CorruptHeap(format!(
                "free list entry {head:#010x}"
            )));
        }
        let next = mem.read_u32(head)?;
        mem.write_u32(head_at, next)?;
        write_block_header(mem, head, LIVE, class, size)?;
        mem.write_u32(head, 0)?;
        return Ok(head);
    }

    let frontier = read_frontier(mem, region)?;
    let data = (frontier + BLOCK_HEADER as u64).next_multiple_of(align as u64);
    let end = data + block as u64;
    if end > region.end() {
        return Err(DmaError::OutOfMemory { region, size });
    }
    let data = data as u32;
    write_block_header(mem, data, LIVE, class, size)?;
    // the instance region ends at 2^32, which wraps to 0 in the header word
    mem.write_u32(region.base() + OFF_FRONTIER, end as u32)?;
    Ok(data)
}

fn read_frontier<M: ByteMemory + ?Sized>(mem: &mut M, region: Region) -> Result<u64, DmaError> {
    match mem.read_u32(region.base() + OFF_FRONTIER)? {
        0 => Ok(region.end()),
        f => Ok(f as u64),
    }
}

fn write_block_header<M: ByteMemory + ?Sized>(
    mem: &mut M,
    addr: u32,
    state: u32,
    class: usize,
    size: u32,
) -> Result<(), DmaError> {
    let mut h = [0u8; BLOCK_HEADER as usize];
    h[0..4].copy_from_slice(&state.to_le_bytes());
    h[4..8].copy_from_slice(&(class as u32).to_le_bytes());
    h[8..12].copy_from_slice(&(addr ^ BLOCK_TAG_MASK).to_le_bytes());
    h[12..16].copy_from_slice(&size.to_le_bytes());
    mem.write(addr - BLOCK_HEADER, &h)
}

pub fn free<M: ByteMemory + ?Sized>(
    mem: &mut M,
    region: Region,
    addr: u32,
) -> Result<(), DmaError> {
    let bad = || DmaError::BadFree(addr);
    if Region::of(addr) != region
        || addr < heap_start(region) + BLOCK_HEADER
        || !addr.is_multiple_of(MIN_BLOCK)
    {
        return Err(bad());
    }
    check_header(mem, region)?;
    if addr as u64 >= read_frontier(mem, region)? {
        return Err(bad());
    }
    let h = mem.read_vec(addr - BLOCK_HEADER, BLOCK_HEADER as usize)?;
    let word = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap());
    let class = word(4) as usize;
    if word(0) != LIVE || word(8) != addr ^ BLOCK_TAG_MASK || class >= NUM_CLASSES {
        return Err(bad());
    }
    let head_at = head_addr(region, class);
    let head = mem.read_u32(head_at)?;
    write_block_header(mem, addr, FREE, class, word(12))?;
    mem.write_u32(addr, head)?;
    mem.write_u32(head_at, addr)
}

/// Requested size of a live block.
#[cfg(test)]
pub(crate) fn block_len<M: ByteMemory + ?Sized>(mem: &mut M, addr: u32) -> Result<u32, DmaError> {
    let h = mem.read_vec(addr - BLOCK_HEADER, BLOCK_HEADER as usize)?;
    if u32::from_le_bytes(h[0..4].try_into().unwrap()) != LIVE {
        return Err(DmaError::CorruptHeap(format!(
            "{addr:#010x} is not a live block"
        )));
    }
    Ok(u32::from_le_bytes(h[12..16].try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dma::{AccessMode, MemorySpace};
    use crate::ids::sid;
    use proptest::prelude::*;

    fn space() -> MemorySpace {
        let mut s = MemorySpace::new(sid("svc"));
        s.set_mode(AccessMode::Sequenced);
        s
    }

    #[test]
    fn blocks_are_disjoint_and_aligned() {
        let mut s = space();
        let a = s.alloc(Region::Network, 16, 8).unwrap();
        let b = s.alloc(Region::Network, 16, 8).unwrap();
        assert_eq!(a % 8, 0);
        assert_eq!(b % 8, 0);
        assert!(a + 16 <= b || b + 16 <= a);
        let c = s.alloc(Region::Network, 100, 4096).unwrap();
        assert_eq!(c % 4096, 0);
    }

    #[test]
    fn bad_requests() {
        let mut s = space();
        assert!(matches!(
            s.alloc(Region::Network, 0, 8),
            Err(DmaError::BadAlloc(_))
        ));
        assert!(matches!(
            s.alloc(Region::Network, 8, 3),
            Err(DmaError::BadAlloc(_))
        ));
        assert!(matches!(
            s.alloc(Region::Network, u32::MAX, 8),
            Err(DmaError::OutOfMemory { .. })
        ));
        assert!(matches!(
            s.free(Region::Network, 0x5000),
            Err(DmaError::BadFree(_))
        ));
        let a = s.alloc(Region::Network, 32, 8).unwrap();
        assert!(matches!(
            s.free(Region::Network, a + 16),
            Err(DmaError::BadFree(_))
        ));
        s.free(Region::Network, a).unwrap();
        assert!(matches!(
            s.free(Region::Network, a),
            Err(DmaError::BadFree(_))
        ));
        assert!(matches!(
            s.free(Region::Instance, a),
            Err(DmaError::BadFree(_))
        ));
    }

    #[test]
    fn region_exhaustion() {
        let mut s = space();
        let mut got = 0;
        loop {
            match s.alloc(Region::Network, 1 << 30, 16) {
                Ok(_) => got += 1,
                Err(DmaError::OutOfMemory { .. }) => break,
                Err(e) => panic!("{e}"),
            }
        }
        // two 1 GiB blocks cannot both fit after the header page
        assert_eq!(got, 1);
        assert!(s.alloc(Region::Network, 1 << 20, 16).is_ok());
    }

    #[test]
    fn freed_blocks_are_reused() {
        let mut s = space();
        let a = s.alloc(Region::Network, 24, 8).unwrap();
        s.free(Region::Network, a).unwrap();
        let b = s.alloc(Region::Network, 30, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(block_len(&mut s, b).unwrap(), 30);
    }

    #[test]
    fn instance_allocations_need_instance_mode() {
        let mut s = space();
        assert!(matches!(
            s.alloc(Region::Instance, 16, 8),
            Err(DmaError::RegionViolation { .. })
        ));
        s.set_mode(AccessMode::Instance);
        let a = s.alloc(Region::Instance, 16, 8).unwrap();
        assert_eq!(Region::of(a), Region::Instance);
        assert!(matches!(
            s.alloc(Region::Network, 16, 8),
            Err(DmaError::RegionViolation { .. })
        ));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u32, u32),
        Free(usize),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        proptest::collection::vec(
            prop_oneof![
                (1u32..5000, 0u32..7).prop_map(|(s, a)| Op::Alloc(s, 1 << a)),
                any::<usize>().prop_map(Op::Free),
            ],
            1..60,
        )
    }

    fn run(ops: &[Op]) -> (Vec<u32>, Vec<u8>, Vec<(u32, u32)>) {
        let mut s = space();
        let mut live: Vec<(u32, u32)> = Vec::new();
        let mut addrs = Vec::new();
        for op in ops {
            match op {
                Op::Alloc(size, align) => {
                    let a = s.alloc(Region::Network, *size, *align).unwrap();
                    assert_eq!(a % align, 0);
                    addrs.push(a);
                    live.push((a, *size));
                }
                Op::Free(i) if !live.is_empty() => {
                    let (a, _) = live.remove(i % live.len());
                    s.free(Region::Network, a).unwrap();
                }
                Op::Free(_) => {}
            }
        }
        (addrs, s.network_image(), live)
    }

    proptest! {
        #[test]
        fn allocator_is_deterministic_and_disjoint(ops in ops()) {
            let (a1, img1, live) = run(&ops);
            let (a2, img2, _) = run(&ops);
            prop_assert_eq!(a1, a2);
            prop_assert_eq!(img1, img2);
            let mut spans: Vec<(u32, u32)> = live.iter().map(|&(a, n)| (a, a + n)).collect();
            spans.sort();
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "overlap {:?}", w);
            }
        }
    }
}
