use rand::Rng;

use crate::error::{ensure, Result};

/// Strictly decreasing step indices visited by a (possibly shortened)
/// reverse process, highest step first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSubsequence {
    steps: Vec<usize>,
}

/// Bounds `(lo, hi]` of the `j`-th of `m` contiguous parts of `[1, t]`,
/// counting from the bottom (`j = 1` holds the smallest steps).
pub fn part_bounds(t: usize, m: usize, j: usize) -> (usize, usize) {
    ((j - 1) * t / m, j * t / m)
}

impl StepSubsequence {
    pub fn new(steps: Vec<usize>, t: usize) -> Result<Self> {
        ensure!(!steps.is_empty(), "step subsequence is empty");
        ensure!(
            steps.iter().all(|&s| (1..=t).contains(&s)),
            "steps must lie in [1, {t}]"
        );
        ensure!(
            steps.windows(2).all(|w| w[0] > w[1]),
            "steps must be strictly decreasing"
        );
        Ok(Self { steps })
    }

    /// `T, T - 1, ..., 1`.
    pub fn full(t: usize) -> Result<Self> {
        ensure!(t >= 1, "T must be positive");
        Ok(Self {
            steps: (1..=t).rev().collect(),
        })
    }

    /// One uniform draw from each of `m` equal contiguous parts of `[1, t]`.
    pub fn sample<R: Rng + ?Sized>(t: usize, m: usize, rng: &mut R) -> Result<Self> {
        ensure!(m >= 1 && m <= t, "need 1 <= M <= T, got M={m}, T={t}");
        let steps = (1..=m)
            .rev()
            .map(|j| {
                let (lo, hi) = part_bounds(t, m, j);
                rng.random_range(lo + 1..=hi)
            })
            .collect();
        Ok(Self { steps })
    }

    /// Deterministic variant taking the top step of every part.
    pub fn evenly_spaced(t: usize, m: usize) -> Result<Self> {
        ensure!(m >= 1 && m <= t, "need 1 <= M <= T, got M={m}, T={t}");
        Ok(Self {
            steps: (1..=m).rev().map(|j| part_bounds(t, m, j).1).collect(),
        })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The step reached after visiting position `k` (0 after the last one).
    pub fn next_step(&self, k: usize) -> usize {
        self.steps.get(k + 1).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parts_cover_the_range() {
        let (t, m) = (100, 12);
        let mut prev = 0;
        for j in 1..=m {
            let (lo, hi) = part_bounds(t, m, j);
            assert_eq!(lo, prev);
            assert!(hi > lo);
            prev = hi;
        }
        assert_eq!(prev, t);
    }

    #[test]
    fn samples_respect_their_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = StepSubsequence::sample(100, 12, &mut rng).unwrap();
            assert_eq!(s.len(), 12);
            for (k, &step) in s.steps().iter().enumerate() {
                let (lo, hi) = part_bounds(100, 12, 12 - k);
                assert!(step > lo && step <= hi);
            }
            assert!(s.steps()[0] > 100 * 11 / 12);
        }
    }

    #[test]
    fn degenerate_and_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = StepSubsequence::sample(7, 7, &mut rng).unwrap();
        assert_eq!(s, StepSubsequence::full(7).unwrap());
        assert!(StepSubsequence::sample(5, 6, &mut rng).is_err());
        assert!(StepSubsequence::sample(5, 0, &mut rng).is_err());
        assert!(StepSubsequence::new(vec![3, 3], 5).is_err());
        assert!(StepSubsequence::new(vec![], 5).is_err());
        assert_eq!(StepSubsequence::evenly_spaced(100, 4).unwrap().steps(), &[100, 75, 50, 25]);
    }
}
