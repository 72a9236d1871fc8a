//! Non-learned signal controllers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sim::{served_movements, SimState, NUM_PHASES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Walks `cycle_plan` (seconds per phase) by clock.
    FixedTime { cycle_plan: Vec<u32> },
    /// Greedy pressure control. A phase is held until it has run for
    /// `min_green` seconds.
    MaxPressure {
        #[serde(default = "default_min_green")]
        min_green: u32,
    },
    Random,
    /// Each agent acts randomly with probability `epsilon`, otherwise
    /// follows MaxPressure.
    Mixture {
        epsilon: f64,
        #[serde(default = "default_min_green")]
        min_green: u32,
    },
}

pub const DEFAULT_MIN_GREEN: u32 = 15;

fn default_min_green() -> u32 {
    DEFAULT_MIN_GREEN
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::max_pressure()
    }
}

impl PolicySpec {
    pub fn max_pressure() -> Self {
        PolicySpec::MaxPressure {
            min_green: DEFAULT_MIN_GREEN,
        }
    }

    pub fn mixture(epsilon: f64) -> Self {
        PolicySpec::Mixture {
            epsilon,
            min_green: DEFAULT_MIN_GREEN,
        }
    }

    pub fn fixed_time_default() -> Self {
        PolicySpec::FixedTime {
            cycle_plan: vec![30; NUM_PHASES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::FixedTime { cycle_plan } => {
                if cycle_plan.is_empty() {
                    return Err(invalid("fixed-time plan is empty"));
                }
                if cycle_plan.contains(&0) {
                    return Err(invalid("fixed-time durations must be positive"));
                }
                if cycle_plan.len() > NUM_PHASES {
                    return Err(invalid(format!("plan has {} phases, at most {NUM_PHASES}", cycle_plan.len())));
                }
            }
            PolicySpec::Mixture { epsilon, .. } if !(0.0..=1.0).contains(epsilon) => {
                return Err(invalid(format!("epsilon {epsilon} outside [0, 1]")));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self {
            PolicySpec::FixedTime { .. } => "fixed_time".into(),
            PolicySpec::MaxPressure { .. } => "max_pressure".into(),
            PolicySpec::Random => "random".into(),
            PolicySpec::Mixture { epsilon, .. } => format!("mixture_{epsilon}"),
        }
    }
}

/// Pressure of every phase at intersection `i`: for each served movement,
/// its queue minus the total queue of the lane it feeds (zero at exits).
pub fn phase_pressures(state: &SimState, i: usize) -> [i64; NUM_PHASES] {
    let mut out = [0i64; NUM_PHASES];
    for (p, pressure) in out.iter_mut().enumerate() {
        for &(slot, m) in served_movements(p) {
            let up = state.movement_queue(i, slot, m) as i64;
            let down = state
                .downstream(i, slot, m)
                .map_or(0, |(j, s)| state.lane_queue(j, s) as i64);
            *pressure += up - down;
        }
    }
    out
}

/// Highest-pressure phase; ties go to the lowest index.
pub fn max_pressure_action(state: &SimState, i: usize) -> usize {
    let pressures = phase_pressures(state, i);
    let mut best = 0;
    for p in 1..NUM_PHASES {
        if pressures[p] > pressures[best] {
            best = p;
        }
    }
    best
}

/// [`max_pressure_action`] unless the current phase is younger than
/// `min_green` seconds, in which case the phase is kept.
pub fn max_pressure_with_hold(state: &SimState, i: usize, min_green: u32) -> usize {
    if state.phase_timers()[i] < min_green {
        state.phases()[i]
    } else {
        max_pressure_action(state, i)
    }
}

pub fn fixed_time_action(clock: u32, plan: &[u32]) -> Result<usize> {
    if plan.is_empty() {
        return Err(invalid("fixed-time plan is empty"));
    }
    let cycle: u32 = plan.iter().sum();
    if cycle == 0 {
        return Err(invalid("fixed-time plan has zero length"));
    }
    let mut t = clock % cycle;
    for (phase, &d) in plan.iter().enumerate() {
        if t < d {
            return Ok(phase);
        }
        t -= d;
    }
    unreachable!("clock mod cycle falls inside the plan")
}

/// Joint action for the current state.
pub fn sample_action<R: Rng + ?Sized>(spec: &PolicySpec, state: &SimState, rng: &mut R) -> Result<Vec<usize>> {
    let n = state.num_agents();
    Ok(match spec {
        PolicySpec::FixedTime { cycle_plan } => vec![fixed_time_action(state.clock(), cycle_plan)?; n],
        PolicySpec::MaxPressure { min_green } => (0..n).map(|i| max_pressure_with_hold(state, i, *min_green)).collect(),
        PolicySpec::Random => (0..n).map(|_| rng.random_range(0..NUM_PHASES)).collect(),
        PolicySpec::Mixture { epsilon, min_green } if *epsilon <= 0.0 => {
            return sample_action(&PolicySpec::MaxPressure { min_green: *min_green }, state, rng)
        }
        PolicySpec::Mixture { epsilon, .. } if *epsilon >= 1.0 => return sample_action(&PolicySpec::Random, state, rng),
        PolicySpec::Mixture { epsilon, min_green } => (0..n)
            .map(|i| {
                if rng.random::<f64>() < *epsilon {
                    rng.random_range(0..NUM_PHASES)
                } else {
                    max_pressure_with_hold(state, i, *min_green)
                }
            })
            .collect(),
    })
}
