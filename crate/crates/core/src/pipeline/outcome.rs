//! Step-count samples, window sums with proration, and gap semantics.

use crate::sync::SensorSample;
use crate::time::Timestamp;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub start: Timestamp,
    pub end: Timestamp,
    pub steps: u32,
    /// Arrived in a tracker flush that carried backlog.
    pub recovered: bool,
}

/// One participant's samples from one stream, sorted by start.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    samples: Vec<Sample>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WindowOutcome {
    Observed { steps: u64, recovered: bool },
    /// No samples, but the tracker was evidently worn on both sides.
    TrueZero,
    /// No samples and no evidence either way.
    Gap,
}

impl SampleSet {
    pub fn new(mut samples: Vec<Sample>) -> Self {
        samples.sort_by_key(|s| (s.start, s.end));
        SampleSet { samples }
    }

    pub fn from_sensor(samples: impl IntoIterator<Item = SensorSample>) -> Self {
        Self::new(
            samples
                .into_iter()
                .map(|s| Sample {
                    start: s.start,
                    end: s.end,
                    steps: s.steps,
                    recovered: false,
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn overlapping(&self, start: Timestamp, end: Timestamp) -> impl Iterator<Item = &Sample> {
        // Samples never overlap each other within one stream, so ends are sorted too.
        let first = self.samples.partition_point(|s| s.end <= start);
        self.samples[first..].iter().take_while(move |s| s.start < end)
    }

    /// Any sample overlapping `[start, end)`.
    pub fn covers(&self, start: Timestamp, end: Timestamp) -> bool {
        self.overlapping(start, end).next().is_some()
    }

    /// Prorated sum over `[start, end)`: each sample contributes its steps
    /// times the fraction of its interval inside the window; the total is
    /// rounded half-up. `None` when nothing overlaps.
    pub fn prorated_sum(&self, start: Timestamp, end: Timestamp) -> Option<(u64, bool)> {
        let mut whole: u64 = 0;
        // Exact fractional remainder as num/den.
        let (mut num, mut den) = (0u128, 1u128);
        let mut any = false;
        let mut recovered = false;
        for s in self.overlapping(start, end) {
            any = true;
            recovered |= s.recovered;
            let len = s.end.0 - s.start.0;
            let overlap = s.end.0.min(end.0) - s.start.0.max(start.0);
            if overlap >= len || len <= 0 {
                whole += u64::from(s.steps);
            } else {
                let part = u128::from(s.steps) * overlap as u128;
                let len = len as u128;
                whole += (part / len) as u64;
                num = num * len + (part % len) * den;
                den *= len;
                let g = gcd(num, den);
                (num, den) = (num / g, den / g);
            }
        }
        any.then(|| (whole + ((2 * num + den) / (2 * den)) as u64, recovered))
    }

    /// Whether some sample ends within `wear_secs` before `start` and some
    /// sample starts within `wear_secs` after `end`.
    pub fn bracketed(&self, start: Timestamp, end: Timestamp, wear_secs: i64) -> bool {
        let i = self.samples.partition_point(|s| s.end <= start);
        let before = i > 0 && start.0 - self.samples[i - 1].end.0 <= wear_secs;
        let j = self.samples.partition_point(|s| s.start < end);
        let after = j < self.samples.len() && self.samples[j].start.0 - end.0 <= wear_secs;
        before && after
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Window semantics shared by proximal windows and next-day totals.
pub fn compute_window(samples: &SampleSet, start: Timestamp, end: Timestamp, wear_secs: i64) -> WindowOutcome {
    match samples.prorated_sum(start, end) {
        Some((steps, recovered)) => WindowOutcome::Observed { steps, recovered },
        None if samples.bracketed(start, end, wear_secs) => WindowOutcome::TrueZero,
        None => WindowOutcome::Gap,
    }
}

/// The 30-minute (or configured) window following `anchor`.
pub fn compute_proximal_window(samples: &SampleSet, anchor: Timestamp, minutes: u32, wear_secs: i64) -> WindowOutcome {
    compute_window(samples, anchor, anchor.plus_minutes(i64::from(minutes)), wear_secs)
}
