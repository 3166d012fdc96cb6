//! Streaming sample statistics with order-fixed merging.

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub n: f64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n / n;
        self.m2 += other.m2 + d * d * self.n * other.n / n;
        self.n = n;
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            (self.m2 / (self.n - 1.0) / self.n).max(0.0).sqrt()
        }
    }

    /// Builds moments from a count, sum and sum of squares.
    pub fn from_sums(n: f64, sum: f64, sumsq: f64) -> Self {
        if n == 0.0 {
            return Moments::default();
        }
        let mean = sum / n;
        Moments {
            n,
            mean,
            m2: (sumsq - sum * mean).max(0.0),
        }
    }
}

/// `|observed − expected| / σ`, with `σ = 0` treated as exact agreement
/// up to `1e-9`.
pub fn standardized(observed: f64, expected: f64, sigma: f64) -> f64 {
    let dev = (observed - expected).abs();
    if dev <= 1e-9 {
        0.0
    } else if sigma > 0.0 {
        dev / sigma
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 5.0 + 3.0).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.m2 - all.m2).abs() < 1e-9);
        let s: f64 = xs.iter().sum();
        let ss: f64 = xs.iter().map(|x| x * x).sum();
        let c = Moments::from_sums(100.0, s, ss);
        assert!((c.m2 - all.m2).abs() < 1e-8);
        assert!((c.stderr() - all.stderr()).abs() < 1e-12);
    }
}
