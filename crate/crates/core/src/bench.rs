//! Wall-clock summary statistics for the benchmark harnesses.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingStats {
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
}

impl TimingStats {
    /// Nearest-rank percentiles. Sorts `samples` in place.
    ///
    /// Zero-length samples are clamped to 1 ns so that a reported median is
    /// always positive.
    pub fn from_samples(samples: &mut [u64]) -> Self {
        assert!(!samples.is_empty(), "no timing samples");
        samples.sort_unstable();
        let pick = |q: f64| {
            let rank = ((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len());
            samples[rank - 1].max(1)
        };
        Self {
            median_ns: pick(0.5),
            p10_ns: pick(0.1),
            p90_ns: pick(0.9),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let mut s: Vec<u64> = (1..=10).rev().collect();
        let t = TimingStats::from_samples(&mut s);
        assert_eq!((t.p10_ns, t.median_ns, t.p90_ns), (1, 5, 9));
        let t = TimingStats::from_samples(&mut [0]);
        assert_eq!(t.median_ns, 1);
    }
}
