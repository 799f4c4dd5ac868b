//! Counter-based random generator.
//!
//! Every draw is a pure function of (key, counter), so streams can be split
//! per sample, per epoch, or per purpose without sharing mutable state, and
//! the same seed produces the same bits on every platform. The mixer is the
//! SplitMix64 finalizer over a Weyl sequence.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ 0x6A09_E667_F3BC_C909),
            counter: 0,
        }
    }

    /// Independent substream for `label`. Deriving the same label twice gives
    /// the same stream; distinct labels give decorrelated streams.
    pub fn derive(&self, label: u64) -> CounterRng {
        CounterRng {
            key: mix64(self.key ^ mix64(label.wrapping_mul(GAMMA) ^ 0x1F83_D9AB_FB41_BD6B)),
            counter: 0,
        }
    }

    /// Substream named by a string label, for top-level purposes.
    pub fn derive_named(&self, label: &str) -> CounterRng {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.derive(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(GAMMA.wrapping_mul(self.counter)))
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in (0, 1], safe as a log argument.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below requires n > 0");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; draws two uniforms per call.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// Permutation of 0..n with no fixed points. Resamples on collision and
    /// falls back to a rotation if rejection keeps failing; requires n >= 2.
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        assert!(n >= 2, "derangement requires n >= 2");
        for _ in 0..128 {
            let mut p: Vec<usize> = (0..n).collect();
            self.shuffle(&mut p);
            if p.iter().enumerate().all(|(i, &pi)| i != pi) {
                return p;
            }
        }
        (0..n).map(|i| (i + 1) % n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = CounterRng::new(1112);
        let mut b = CounterRng::new(1112);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let root = CounterRng::new(7);
        let mut s1 = root.derive(3);
        let mut s1_again = root.derive(3);
        let mut s2 = root.derive(4);
        let x = s1.next_u64();
        assert_eq!(x, s1_again.next_u64());
        assert_ne!(x, s2.next_u64());
    }

    #[test]
    fn uniform_is_in_unit_interval_and_roughly_centered() {
        let mut rng = CounterRng::new(42);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean} far from 0.5");
    }

    #[test]
    fn next_below_covers_range_uniformly_enough() {
        let mut rng = CounterRng::new(9);
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            counts[rng.next_below(6)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (8_500..11_500).contains(&c),
                "bucket {i} count {c} out of range"
            );
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = CounterRng::new(5);
        let n = 50_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.next_normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = CounterRng::new(1);
        for n in [2usize, 3, 5, 17, 64] {
            let p = rng.derangement(n);
            let mut seen = vec![false; n];
            for (i, &pi) in p.iter().enumerate() {
                assert_ne!(i, pi, "fixed point at {i} for n={n}");
                seen[pi] = true;
            }
            assert!(seen.iter().all(|&s| s), "not a permutation for n={n}");
        }
    }
}
