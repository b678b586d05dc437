use std::collections::HashMap;

/// First-touch virtual→physical page allocator.
///
/// Frames are handed out sequentially, or, with a shuffle seed, through a
/// seeded bijection on 32-bit frame numbers.
#[derive(Debug, Clone)]
pub struct PageMap {
    page_bits: u32,
    map: HashMap<(u16, u64), u64>,
    next_frame: u64,
    shuffle: Option<u64>,
}

impl PageMap {
    pub fn new(page_size: u64, shuffle: Option<u64>) -> Self {
        assert!(page_size.is_power_of_two(), "page size must be a power of two");
        PageMap {
            page_bits: page_size.trailing_zeros(),
            map: HashMap::new(),
            next_frame: 0,
            shuffle,
        }
    }

    pub fn translate(&mut self, vaddr: u64) -> u64 {
        self.translate_for(0, vaddr)
    }

    /// Translation in address space `asid`; spaces never share frames.
    pub fn translate_for(&mut self, asid: u16, vaddr: u64) -> u64 {
        let vpage = vaddr >> self.page_bits;
        let offset = vaddr & ((1u64 << self.page_bits) - 1);
        let frame = match self.map.get(&(asid, vpage)) {
            Some(f) => *f,
            None => {
                let n = self.next_frame;
                self.next_frame += 1;
                let f = match self.shuffle {
                    Some(seed) => permute32(n, seed) | (n & !0xFFFF_FFFF),
                    None => n,
                };
                self.map.insert((asid, vpage), f);
                f
            }
        };
        (frame << self.page_bits) | offset
    }

    pub fn mapped_pages(&self) -> usize {
        self.map.len()
    }
}

/// Bijection on the low 32 bits (xorshift-multiply rounds; each step is
/// invertible mod 2^32).
fn permute32(x: u64, seed: u64) -> u64 {
    let mut v = (x as u32) ^ (seed as u32);
    let k = ((seed >> 32) as u32) | 1;
    for _ in 0..3 {
        v ^= v >> 16;
        v = v.wrapping_mul(0x7feb_352d);
        v ^= v >> 15;
        v = v.wrapping_mul(k);
    }
    v as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn first_touch_is_stable() {
        let mut pm = PageMap::new(4096, None);
        let a = pm.translate(5 * 4096);
        assert_eq!(a >> 12, 0);
        assert_eq!(pm.translate(5 * 4096 + 8), a + 8);
    }

    #[test]
    fn offset_bits_preserved() {
        let mut pm = PageMap::new(4096, Some(99));
        assert_eq!(pm.translate(0x5123) & 0xfff, 0x123);
    }

    #[test]
    fn distinct_pages_distinct_frames() {
        for shuffle in [None, Some(7)] {
            let mut pm = PageMap::new(4096, shuffle);
            let frames: HashSet<u64> = (0..10_000u64).map(|p| pm.translate(p << 12) >> 12).collect();
            assert_eq!(frames.len(), 10_000);
        }
    }

    #[test]
    fn address_spaces_do_not_alias() {
        let mut pm = PageMap::new(4096, None);
        assert_ne!(pm.translate_for(0, 0x1000), pm.translate_for(1, 0x1000));
    }
}
