//! Seedable random streams and compound Poisson jump sampling.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed and
//! positioned on its own 64-bit stream id, so any path's randomness can
//! be derived directly from `(master_seed, path index)` without touching
//! other paths. This is what makes parallel batch simulation
//! bit-reproducible.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Poisson means above this use a guarded inversion loop; inversion is exact
/// but slow for large means, which never occur at model scale.
const MAX_POISSON_MEAN: f64 = 10.0;

const INV_2_POW_53: f64 = 1.0 / 9_007_199_254_740_992.0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream identified by `(master_seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    gen: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut gen = ChaCha8Rng::seed_from_u64(master_seed);
        gen.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            gen,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream for `index`. Depends only on this stream's identity, not
    /// on how many draws have already been taken from it.
    pub fn substream(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream_id.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ splitmix64(index));
        RngStream::new(self.master_seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.gen.next_u64()
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        ((self.gen.next_u64() >> 11) as f64 + 0.5) * INV_2_POW_53
    }

    /// Exponential draw with rate `rate` (mean `1/rate`), by inversion.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform_open().ln() / rate
    }

    /// Poisson draw with mean `mean` by sequential inversion of the CDF.
    pub fn poisson(&mut self, mean: f64) -> u32 {
        if mean <= 0.0 {
            return 0;
        }
        debug_assert!(mean <= MAX_POISSON_MEAN, "poisson mean {mean} too large for inversion");
        let u = self.uniform_open();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u32;
        while u > cdf && k < 1_000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k
    }

    /// Standard normal draw (Box-Muller, one variate per call).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Intensity and exponential size law of one jump source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpLaw {
    /// Jump arrivals per unit time.
    pub intensity: f64,
    /// Inverse mean jump size.
    pub rate: f64,
}

/// Jumps of one source over one time step. The count is the number of sizes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceJumps {
    pub sizes: SmallVec<[f64; 4]>,
}

impl SourceJumps {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

/// Jumps of both sources over one time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JumpSample {
    pub sources: [SourceJumps; 2],
}

impl JumpSample {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.iter().all(SourceJumps::is_empty)
    }
}

/// Compound Poisson increment of a single source over a span `dt`.
pub fn sample_jumps(intensity: f64, rate: f64, dt: f64, rng: &mut RngStream) -> Result<SourceJumps> {
    if !(intensity >= 0.0) || !intensity.is_finite() {
        return Err(Error::param("intensity", format!("must be finite and >= 0, got {intensity}")));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::param("rate", format!("must be finite and > 0, got {rate}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param("dt", format!("must be finite and > 0, got {dt}")));
    }
    let mean = intensity * dt;
    if mean > MAX_POISSON_MEAN {
        return Err(Error::param(
            "intensity",
            format!("intensity*dt = {mean} exceeds the inversion sampler limit {MAX_POISSON_MEAN}"),
        ));
    }
    Ok(sample_source_unchecked(intensity, rate, dt, rng))
}

pub(crate) fn sample_source_unchecked(intensity: f64, rate: f64, dt: f64, rng: &mut RngStream) -> SourceJumps {
    let n = rng.poisson(intensity * dt);
    let sizes = (0..n).map(|_| rng.exponential(rate)).collect();
    SourceJumps { sizes }
}

/// Jumps of both sources for one step, source 1 drawn first.
pub fn sample_pair(laws: &[JumpLaw; 2], dt: f64, rng: &mut RngStream) -> Result<JumpSample> {
    let first = sample_jumps(laws[0].intensity, laws[0].rate, dt, rng)?;
    let second = sample_jumps(laws[1].intensity, laws[1].rate, dt, rng)?;
    Ok(JumpSample {
        sources: [first, second],
    })
}

pub(crate) fn sample_pair_unchecked(laws: &[JumpLaw; 2], dt: f64, rng: &mut RngStream) -> JumpSample {
    let first = sample_source_unchecked(laws[0].intensity, laws[0].rate, dt, rng);
    let second = sample_source_unchecked(laws[1].intensity, laws[1].rate, dt, rng);
    JumpSample {
        sources: [first, second],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_intensity_never_jumps() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..10_000 {
            assert_eq!(sample_jumps(0.0, 0.5, 0.02, &mut rng).unwrap().count(), 0);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = RngStream::new(3, 0);
        assert!(sample_jumps(5.0, 0.0, 0.02, &mut rng).is_err());
        assert!(sample_jumps(5.0, -1.0, 0.02, &mut rng).is_err());
        assert!(sample_jumps(5.0, 0.5, 0.0, &mut rng).is_err());
        assert!(sample_jumps(-1.0, 0.5, 0.02, &mut rng).is_err());
        assert!(sample_jumps(f64::NAN, 0.5, 0.02, &mut rng).is_err());
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let master = RngStream::new(7, 0);
        let mut a = master.substream(0);
        let mut b = master.substream(0);
        let mut c = master.substream(1);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn substream_ignores_parent_consumption() {
        let mut master = RngStream::new(11, 4);
        let before = master.substream(9).next_u64();
        for _ in 0..100 {
            master.next_u64();
        }
        assert_eq!(before, master.substream(9).next_u64());
    }

    #[test]
    fn uniform_is_strictly_inside_unit_interval() {
        let mut rng = RngStream::new(1, 1);
        for _ in 0..100_000 {
            let u = rng.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn sizes_are_positive() {
        let mut rng = RngStream::new(5, 2);
        for _ in 0..20_000 {
            let s = sample_jumps(5.0, 0.5, 0.02, &mut rng).unwrap();
            assert!(s.sizes.iter().all(|&z| z > 0.0 && z.is_finite()));
        }
    }
}
