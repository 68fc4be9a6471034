//! Compensated summation. Budget rollups and probability masses are sums of
//! many small f64 terms; plain accumulation loses enough precision to make
//! 1e-12 audit tolerances meaningless.

/// Kahan-Babuska (Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancellation() {
        // 1 + 1e-16 repeated: naive summation never moves past 1.0.
        let mut acc = KahanSum::new();
        acc.add(1.0);
        for _ in 0..1_000_000 {
            acc.add(1e-16);
        }
        let got = acc.value();
        assert!((got - (1.0 + 1e-10)).abs() < 1e-13, "got {got}");
    }

    #[test]
    fn matches_exact_small_sum() {
        let acc: KahanSum = [0.25, 0.5, 0.125].into_iter().collect();
        assert_eq!(acc.value(), 0.875);
    }
}
