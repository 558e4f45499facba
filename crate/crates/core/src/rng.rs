//! Deterministic, splittable RNG for simulation.
//!
//! Every stochastic draw in the simulator is keyed by an explicit stream
//! path (global seed, round, client id, step, purpose), so clients can be
//! trained in parallel and still reproduce the single-threaded run bit for
//! bit. Substreams are derived by hashing the path words into a fresh
//! xorshift64* state. Not cryptographically secure.

/// Labels the purpose of a derived stream so unrelated draws never share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init,
    WidthSample,
    Participation,
    ClientAssign,
    Shuffle,
    Mask,
    Data,
    Experiment,
}

impl StreamId {
    fn word(self) -> u64 {
        match self {
            StreamId::Init => 0x01,
            StreamId::WidthSample => 0x02,
            StreamId::Participation => 0x03,
            StreamId::ClientAssign => 0x04,
            StreamId::Shuffle => 0x05,
            StreamId::Mask => 0x06,
            StreamId::Data => 0x07,
            StreamId::Experiment => 0x08,
        }
    }
}

/// Deterministic RNG with a single 64-bit state (xorshift64*).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

const SPLITMIX_GAMMA: u64 = 0x9E3779B97F4A7C15;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    /// A zero state would lock up xorshift, so it is remapped.
    pub fn new(seed: u64) -> Self {
        let s = splitmix64(seed);
        Rng {
            state: if s == 0 { SPLITMIX_GAMMA } else { s },
        }
    }

    /// Derive an independent substream from a path of key words.
    ///
    /// The path is absorbed with splitmix64 so that `(seed, round, client,
    /// step, purpose)` tuples map to well-separated states.
    pub fn substream(seed: u64, purpose: StreamId, path: &[u64]) -> Self {
        let mut acc = splitmix64(seed ^ purpose.word().wrapping_mul(SPLITMIX_GAMMA));
        for &w in path {
            acc = splitmix64(acc ^ w);
        }
        Rng {
            state: if acc == 0 { SPLITMIX_GAMMA } else { acc },
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Uses rejection to stay unbiased.
    pub fn gen_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform in [lo, hi).
    pub fn gen_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        // u must be in (0, 1] for the log.
        let u = 1.0 - self.next_f64();
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_index(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from [0, n) uniformly, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.gen_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
