//! True step generation: a seeded idle/bout process plus treatment effects.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::scenario::BehaviorModel;
use crate::rng;
use crate::time::{Itinerary, Timestamp};

/// Two-state Markov chain over minutes. Sleeping minutes are idle with zero steps.
#[derive(Clone, Debug)]
pub struct BoutProcess {
    in_bout: bool,
    start_rate: f64,
    end_rate: f64,
    steps_lo: u32,
    steps_span: u32,
}

impl BoutProcess {
    /// `multiplier` scales the bout start rate (per-participant heterogeneity).
    pub fn new(model: &BehaviorModel, multiplier: f64) -> Self {
        let lo = (model.bout_steps_mean / 2.0).round() as u32;
        let hi = (model.bout_steps_mean * 1.5).round() as u32;
        BoutProcess {
            in_bout: false,
            start_rate: (model.bout_start_rate * multiplier).clamp(0.0, 1.0),
            end_rate: model.bout_end_rate,
            steps_lo: lo,
            steps_span: hi - lo + 1,
        }
    }

    pub fn next_minute(&mut self, rng: &mut impl RngCore, awake: bool) -> u32 {
        if !awake {
            self.in_bout = false;
            return 0;
        }
        let u = rng::unit(rng.next_u64());
        self.in_bout = if self.in_bout {
            u >= self.end_rate
        } else {
            u < self.start_rate
        };
        if self.in_bout {
            self.steps_lo + rng::bounded(rng.next_u64(), self.steps_span)
        } else {
            0
        }
    }
}

/// Lognormal per-participant multiplier with median 1.
pub fn participant_multiplier(model: &BehaviorModel, rng: &mut impl Rng) -> f64 {
    if model.heterogeneity_sigma == 0.0 {
        return 1.0;
    }
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    (model.heterogeneity_sigma * z).exp()
}

/// Per-minute true steps of one participant from `t0`, split into the
/// baseline process and treatment-effect additions.
#[derive(Clone, Debug)]
pub struct Activity {
    pub t0: Timestamp,
    baseline: Vec<u32>,
    effect: Vec<u32>,
}

impl Activity {
    pub fn generate(
        model: &BehaviorModel,
        itinerary: &Itinerary,
        t0: Timestamp,
        minutes: usize,
        multiplier: f64,
        rng: &mut impl RngCore,
    ) -> Self {
        let mut process = BoutProcess::new(model, multiplier);
        let day = 24 * 60;
        let baseline = (0..minutes)
            .map(|m| {
                let t = t0.plus_minutes(m as i64);
                let local = t.0 / 60 + i64::from(itinerary.offset_at(t));
                let wall = local.rem_euclid(day) as u16;
                process.next_minute(rng, model.is_awake(wall))
            })
            .collect();
        Activity {
            t0,
            baseline,
            effect: vec![0; minutes],
        }
    }

    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }

    /// Minute index containing `t`, if inside the simulated span.
    pub fn minute_of(&self, t: Timestamp) -> Option<usize> {
        let d = t.0 - self.t0.0;
        (d >= 0 && (d / 60) < self.len() as i64).then_some((d / 60) as usize)
    }

    pub fn minute_start(&self, m: usize) -> Timestamp {
        self.t0.plus_minutes(m as i64)
    }

    /// Spread `total` steps evenly over `count` minutes from `start`; earlier
    /// minutes absorb the remainder. Minutes past the simulated span are dropped
    /// and the amount actually applied is returned.
    pub fn add_effect(&mut self, start: usize, count: usize, total: u32) -> u32 {
        if count == 0 || total == 0 {
            return 0;
        }
        let q = total / count as u32;
        let r = (total % count as u32) as usize;
        let mut applied = 0;
        for i in 0..count {
            let Some(slot) = self.effect.get_mut(start + i) else { break };
            let add = q + u32::from(i < r);
            *slot += add;
            applied += add;
        }
        applied
    }

    pub fn steps(&self) -> impl Iterator<Item = u32> + '_ {
        self.baseline.iter().zip(&self.effect).map(|(b, e)| b + e)
    }

    pub fn into_steps(self) -> Vec<u32> {
        self.baseline.iter().zip(&self.effect).map(|(b, e)| b + e).collect()
    }
}

/// True step increment of one minute: baseline activity plus any active treatment effect.
pub fn behave(activity: &Activity, minute: usize) -> u32 {
    activity.baseline[minute] + activity.effect[minute]
}

/// Round a non-negative real to an integer whose expectation equals it.
pub fn randomized_round(x: f64, rng: &mut impl RngCore) -> u32 {
    let floor = x.floor();
    let frac = x - floor;
    floor as u32 + u32::from(rng::unit(rng.next_u64()) < frac)
}
