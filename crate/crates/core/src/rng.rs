//! Deterministic per-path noise streams.
//!
//! Each simulated path owns a `NoiseStream` keyed by `(seed, path_index)`.
//! Wiener increments, the auxiliary increments used by the epsilon-regularized
//! diffusion, and boundary-crossing uniforms each come from a separate ChaCha
//! stream, so consuming one kind never shifts another. This is what makes
//! common-random-number coupling and replay across thread counts exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct NoiseStream {
    pub seed: u64,
    pub path_index: u64,
    base: ChaCha8Rng,
    aux: ChaCha8Rng,
    crossing: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, path_index: u64) -> Self {
        let mk = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path_index.wrapping_mul(4).wrapping_add(k));
            rng
        };
        NoiseStream { seed, path_index, base: mk(0), aux: mk(1), crossing: mk(2) }
    }

    /// Next d1-dimensional Wiener increment with per-coordinate variance dt.
    pub fn next_dw(&mut self, sqrt_dt: f64, buf: &mut [f64]) {
        for v in buf.iter_mut() {
            let z: f64 = self.base.sample(StandardNormal);
            *v = z * sqrt_dt;
        }
    }

    /// Next d-dimensional auxiliary increment (independent Wiener process).
    pub fn next_aux(&mut self, sqrt_dt: f64, buf: &mut [f64]) {
        for v in buf.iter_mut() {
            let z: f64 = self.aux.sample(StandardNormal);
            *v = z * sqrt_dt;
        }
    }

    /// Uniform draw for the boundary-crossing test.
    pub fn next_crossing_u(&mut self) -> f64 {
        self.crossing.gen::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_replay() {
        let mut a = NoiseStream::new(42, 7);
        let mut b = NoiseStream::new(42, 7);
        let mut xa = [0.0; 3];
        let mut xb = [0.0; 3];
        for _ in 0..100 {
            a.next_dw(0.1, &mut xa);
            b.next_dw(0.1, &mut xb);
            assert_eq!(xa, xb);
        }
    }

    #[test]
    fn streams_do_not_alias() {
        // consuming aux draws must not shift the base stream
        let mut a = NoiseStream::new(1, 0);
        let mut b = NoiseStream::new(1, 0);
        let mut buf = [0.0; 2];
        let mut aux = [0.0; 2];
        b.next_aux(1.0, &mut aux);
        b.next_crossing_u();
        let mut xa = [0.0; 2];
        a.next_dw(1.0, &mut xa);
        b.next_dw(1.0, &mut buf);
        assert_eq!(xa, buf);
    }

    #[test]
    fn moments_within_four_sigma() {
        let n = 100_000;
        let dt = 0.25_f64;
        let mut s = NoiseStream::new(9, 3);
        let mut buf = [0.0; 1];
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            s.next_dw(dt.sqrt(), &mut buf);
            sum += buf[0];
            sumsq += buf[0] * buf[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (dt / n as f64).sqrt();
        let se_var = dt * (2.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean} vs 4se {}", 4.0 * se_mean);
        assert!((var - dt).abs() < 4.0 * se_var, "var {var} vs dt {dt}");
    }
}
