//! Counter-based Gaussian noise.
//!
//! Every Gaussian increment is a pure function of `(seed, path, kind, step,
//! component)`. The generator is Philox4x32-10; each counter block yields four
//! 32-bit words, turned into two standard normals with the Box–Muller map.
//! Because nothing is carried between draws, paths can be generated in any
//! order (or on any number of workers) and come out bit-identical.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

#[inline(always)]
fn philox_round(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
    let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
    [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0]
}

/// The Philox4x32 bijection with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    ctr = philox_round(ctr, key);
    for _ in 1..10 {
        key[0] = key[0].wrapping_add(PHILOX_W0);
        key[1] = key[1].wrapping_add(PHILOX_W1);
        ctr = philox_round(ctr, key);
    }
    ctr
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Which Brownian motion a draw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Fast noise `B`.
    Fast = 0,
    /// Slow noise `W`.
    Slow = 1,
    /// Anything else (test samplers, empirical estimators).
    Aux = 2,
}

/// Identifies one independent path: the user seed plus a path index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub path: u64,
}

impl NoiseKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: 0 }
    }

    pub fn with_path(self, path: u64) -> Self {
        Self { path, ..self }
    }

    fn philox_key(&self) -> [u32; 2] {
        let k = splitmix64(self.seed ^ splitmix64(self.path.wrapping_add(0x5851_F42D_4C95_7F2D)));
        [k as u32, (k >> 32) as u32]
    }

    /// Standard normal number `component` of draw `step` in `stream`.
    pub fn normal(&self, stream: Stream, step: u64, component: usize) -> f64 {
        let mut pair = [0.0; 2];
        self.normal_pair(stream, step, (component / 2) as u32, &mut pair);
        pair[component % 2]
    }

    /// Fills `out` with independent standard normals for one step.
    pub fn fill_normals(&self, stream: Stream, step: u64, out: &mut [f64]) {
        let mut pair = [0.0; 2];
        for (block, chunk) in out.chunks_mut(2).enumerate() {
            self.normal_pair(stream, step, block as u32, &mut pair);
            chunk.copy_from_slice(&pair[..chunk.len()]);
        }
    }

    #[inline]
    fn normal_pair(&self, stream: Stream, step: u64, block: u32, out: &mut [f64; 2]) {
        let ctr = [step as u32, (step >> 32) as u32, block, stream as u32];
        let w = philox4x32_10(ctr, self.philox_key());
        let u1 = open_unit(w[0], w[1]);
        let u2 = open_unit(w[2], w[3]);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        out[0] = r * c;
        out[1] = r * s;
    }
}

/// 53-bit uniform on the open interval (0, 1).
#[inline]
fn open_unit(lo: u32, hi: u32) -> f64 {
    let bits = (((hi as u64) << 32) | lo as u64) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors of the reference Philox4x32-10 implementation.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn draws_are_order_independent() {
        let key = NoiseKey::new(7).with_path(3);
        let a = key.normal(Stream::Fast, 1000, 1);
        let _ = key.normal(Stream::Fast, 5, 0);
        assert_eq!(a.to_bits(), key.normal(Stream::Fast, 1000, 1).to_bits());
        let mut buf = [0.0; 3];
        key.fill_normals(Stream::Fast, 1000, &mut buf);
        assert_eq!(buf[1].to_bits(), a.to_bits());
    }

    #[test]
    fn streams_and_paths_differ() {
        let key = NoiseKey::new(1);
        let a = key.normal(Stream::Fast, 0, 0);
        assert_ne!(a, key.normal(Stream::Slow, 0, 0));
        assert_ne!(a, key.with_path(1).normal(Stream::Fast, 0, 0));
        assert_ne!(a, NoiseKey::new(2).normal(Stream::Fast, 0, 0));
    }

    #[test]
    fn first_two_moments() {
        let key = NoiseKey::new(2024);
        let n = 200_000u64;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        for step in 0..n / 2 {
            let mut buf = [0.0; 2];
            key.fill_normals(Stream::Aux, step, &mut buf);
            for x in buf {
                s1 += x;
                s2 += x * x;
                s4 += x * x * x * x;
            }
        }
        let nf = n as f64;
        // standard errors: mean 1/sqrt(n), variance sqrt(2/n), kurtosis sqrt(96/n)
        assert!((s1 / nf).abs() < 4.0 / nf.sqrt());
        assert!((s2 / nf - 1.0).abs() < 4.0 * (2.0 / nf).sqrt());
        assert!((s4 / nf - 3.0).abs() < 4.0 * (96.0 / nf).sqrt());
    }
}
