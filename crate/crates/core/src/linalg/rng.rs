//! Seeded random streams with labeled children.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{LinalgError, Matrix, Result};

/// A reproducible random stream.
///
/// Children derived from `(seed, label)` are independent of the parent's
/// position, so parallel tasks can each take their own stream and the
/// results do not depend on scheduling.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha12Rng,
    draws: u64,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha12Rng::seed_from_u64(seed), draws: 0, spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.draws
    }

    pub fn child(&self, label: &str) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ fnv1a(label.as_bytes())))
    }

    pub fn child_indexed(&self, label: &str, index: u64) -> SeededRng {
        SeededRng::new(splitmix64(splitmix64(self.seed ^ fnv1a(label.as_bytes())) ^ index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.gen::<f64>()
    }

    /// Standard normal via the Box–Muller transform; draws come in pairs.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.inner.gen_range(0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        SeededRng::next_u64(self)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.draws += 1;
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An m×n matrix of i.i.d. standard normal entries.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Samples `count` distinct rows uniformly without replacement.
///
/// Rows come back in draw order alongside their indices in `a`.
pub fn sample_rows(rng: &mut SeededRng, a: &Matrix, count: usize) -> Result<(Matrix, Vec<usize>)> {
    let indices = sample_indices(rng, a.rows(), count)?;
    Ok((a.select_rows(&indices), indices))
}

/// Partial Fisher–Yates over `0..population`.
pub fn sample_indices(rng: &mut SeededRng, population: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > population {
        return Err(LinalgError::Contract(format!(
            "cannot sample {count} distinct rows from {population}"
        )));
    }
    let mut pool: Vec<usize> = (0..population).collect();
    for i in 0..count {
        let j = i + rng.below(population - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = gaussian_matrix(&mut SeededRng::new(42), 6, 5);
        let b = gaussian_matrix(&mut SeededRng::new(42), 6, 5);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(1);
        let g = gaussian_matrix(&mut rng, 100, 100);
        let n = g.len() as f64;
        let mean = g.sum() / n;
        let var = g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(var > 0.94 && var < 1.06, "variance {var}");
    }

    #[test]
    fn labeled_children_differ_and_repeat() {
        let root = SeededRng::new(9);
        let a = gaussian_matrix(&mut root.child("alpha"), 3, 3);
        let b = gaussian_matrix(&mut root.child("beta"), 3, 3);
        assert_ne!(a.as_slice(), b.as_slice());
        assert_eq!(a.as_slice(), gaussian_matrix(&mut root.child("alpha"), 3, 3).as_slice());
        assert_ne!(
            root.child_indexed("t", 0).next_u64(),
            root.child_indexed("t", 1).next_u64()
        );
    }

    #[test]
    fn full_sample_is_permutation() {
        let a = Matrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64);
        let (rows, mut idx) = sample_rows(&mut SeededRng::new(3), &a, 5).unwrap();
        assert_eq!(rows.rows(), 5);
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(rows.row(r), a.row(i));
        }
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_row_sample_repeats() {
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let (r1, i1) = sample_rows(&mut SeededRng::new(11), &a, 1).unwrap();
        let (r2, i2) = sample_rows(&mut SeededRng::new(11), &a, 1).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(r1, r2);
        assert!(r1.row(0) == [1.0, 1.0] || r1.row(0) == [2.0, 2.0]);
    }

    #[test]
    fn oversized_sample_rejected() {
        let a = Matrix::zeros(3, 2);
        assert!(sample_rows(&mut SeededRng::new(0), &a, 4).is_err());
        assert!(sample_rows(&mut SeededRng::new(0), &a, 0).is_err());
    }

    #[test]
    fn single_row_frequencies_are_uniform() {
        let mut rng = SeededRng::new(2024);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_indices(&mut rng, 4, 1).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((2350..=2650).contains(&c), "{counts:?}");
        }
    }
}
