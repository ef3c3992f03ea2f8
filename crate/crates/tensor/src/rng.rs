use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic pseudo-random generator (splitmix64 core).
///
/// Hand-rolled so every seed reproduces bit-identical streams regardless of
/// dependency versions.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed.wrapping_add(0x9e3779b97f4a7c15),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-12);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fork an independent stream; deterministic in the parent state.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn normal_tensor<F: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::from_f64(self.normal() * std))
    }

    /// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier_uniform<F: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| F::from_f64(self.uniform_in(-a, a)))
    }
}
