//! Named random sub-streams derived from one master seed.

/// SplitMix64 finaliser applied to `a ^ rotl(b)`; used to derive independent seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeds for the `data`, `init`, `noise` and `shuffle` streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        SeedStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> u64 {
        // FNV-1a of the name, then mixed with the master seed.
        let h = name
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        mix(self.master, h)
    }

    pub fn data(&self) -> u64 {
        self.stream("data")
    }

    pub fn init(&self) -> u64 {
        self.stream("init")
    }

    pub fn noise(&self) -> u64 {
        self.stream("noise")
    }

    pub fn shuffle(&self) -> u64 {
        self.stream("shuffle")
    }
}
