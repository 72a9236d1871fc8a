//! Queue-based traffic simulator with one-second ticks.
//!
//! Vehicles enter on boundary lanes, travel the link for its free-flow time,
//! then join a movement queue (straight, left or right) at the downstream
//! intersection. Green movements discharge at the saturation rate; a
//! discharged vehicle either exits the network or starts traversing the next
//! link. Decisions happen every `decision_interval` ticks and a phase change
//! costs `yellow_time` ticks without discharge.
//!
//! Randomness is drawn from one generator per intersection, seeded from the
//! episode seed and the intersection id, so relabeling intersections
//! relabels the whole trajectory.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::topology::{RoadNetwork, APPROACHES};

pub const OBS_DIM: usize = 17;
pub const NUM_PHASES: usize = 4;
pub const MOVEMENTS: usize = 3;

pub const STRAIGHT: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;

/// Outgoing slot for a vehicle that arrived on `slot` and takes `movement`.
pub fn turn_slot(slot: usize, movement: usize) -> usize {
    match movement {
        STRAIGHT => (slot + 2) % APPROACHES,
        LEFT => (slot + 1) % APPROACHES,
        _ => (slot + 3) % APPROACHES,
    }
}

/// `(slot, movement)` pairs receiving green under each phase:
/// north-south through, north-south left, east-west through, east-west left.
pub fn served_movements(phase: usize) -> &'static [(usize, usize)] {
    const SERVED: [&[(usize, usize)]; NUM_PHASES] = [
        &[(0, STRAIGHT), (0, RIGHT), (2, STRAIGHT), (2, RIGHT)],
        &[(0, LEFT), (2, LEFT)],
        &[(1, STRAIGHT), (1, RIGHT), (3, STRAIGHT), (3, RIGHT)],
        &[(1, LEFT), (3, LEFT)],
    ];
    SERVED[phase]
}

fn serves(phase: usize, slot: usize, movement: usize) -> bool {
    served_movements(phase).contains(&(slot, movement))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandRegime {
    Low,
    Nominal,
    High,
}

impl DemandRegime {
    pub const ALL: [DemandRegime; 3] = [DemandRegime::Low, DemandRegime::Nominal, DemandRegime::High];

    /// Vehicles per hour per boundary lane.
    pub fn rate(self) -> f64 {
        match self {
            DemandRegime::Low => 200.0,
            DemandRegime::Nominal => 300.0,
            DemandRegime::High => 400.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    /// Vehicles per hour per boundary lane.
    pub arrival_rate: f64,
    pub regime: Option<DemandRegime>,
}

impl DemandProfile {
    pub fn regime(regime: DemandRegime) -> Self {
        Self {
            arrival_rate: regime.rate(),
            regime: Some(regime),
        }
    }

    pub fn nominal() -> Self {
        Self::regime(DemandRegime::Nominal)
    }

    pub fn rate(arrival_rate: f64) -> Self {
        Self {
            arrival_rate,
            regime: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(invalid(format!("arrival rate must be finite and >= 0, got {}", self.arrival_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Vehicles per second per lane under green.
    pub saturation: f64,
    /// Straight, left and right probabilities.
    pub turn_ratios: [f64; 3],
    /// Storage capacity of an internal lane, vehicles.
    pub lane_capacity: usize,
    pub decision_interval: u32,
    pub yellow_time: u32,
    pub horizon: u32,
    pub wait_normalizer: f64,
    pub timer_normalizer: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            saturation: 0.5,
            turn_ratios: [0.6, 0.2, 0.2],
            lane_capacity: 40,
            decision_interval: 5,
            yellow_time: 3,
            horizon: 3600,
            wait_normalizer: 300.0,
            timer_normalizer: 120.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.saturation > 0.0 && self.saturation.is_finite()) {
            return Err(invalid("saturation must be positive"));
        }
        let total: f64 = self.turn_ratios.iter().sum();
        if self.turn_ratios.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("turn ratios {:?} must be non-negative and sum to 1", self.turn_ratios)));
        }
        if self.lane_capacity == 0 || self.decision_interval == 0 || self.horizon == 0 {
            return Err(invalid("lane_capacity, decision_interval and horizon must be positive"));
        }
        if self.yellow_time > self.decision_interval {
            return Err(invalid("yellow_time cannot exceed decision_interval"));
        }
        if !(self.wait_normalizer > 0.0 && self.timer_normalizer > 0.0) {
            return Err(invalid("normalizers must be positive"));
        }
        Ok(())
    }

    pub fn decisions_per_episode(&self) -> usize {
        self.horizon.div_ceil(self.decision_interval) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Vehicle {
    entry: u32,
    /// Waiting seconds accumulated at earlier intersections.
    wait: u32,
    joined: u32,
}

#[derive(Clone, Debug, PartialEq)]
struct Lane {
    transit: VecDeque<(u32, Vehicle)>,
    queues: [VecDeque<Vehicle>; MOVEMENTS],
    credit: f64,
    wait_accum: u64,
    travel: u32,
    capacity: Option<usize>,
}

impl Lane {
    fn queued(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    fn occupancy(&self) -> usize {
        self.transit.len() + self.queued()
    }
}

/// One completed trip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripRecord {
    pub entry: u32,
    pub exit: u32,
    pub wait: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Average travel time, seconds; `None` without completed trips.
    pub att: Option<f64>,
    /// Average waiting time, seconds; `None` without completed trips.
    pub awt: Option<f64>,
    /// Completed trips per simulated hour.
    pub throughput: f64,
    pub completed: usize,
    pub injected: usize,
}

impl EpisodeMetrics {
    /// Metrics of `trips` completed within `clock` simulated seconds.
    pub fn from_trips(trips: &[TripRecord], clock: u32, injected: usize) -> Self {
        let completed = trips.len();
        let (att, awt) = if completed == 0 {
            (None, None)
        } else {
            let travel: u64 = trips.iter().map(|t| u64::from(t.exit - t.entry)).sum();
            let wait: u64 = trips.iter().map(|t| u64::from(t.wait)).sum();
            (
                Some(travel as f64 / completed as f64),
                Some(wait as f64 / completed as f64),
            )
        };
        let hours = f64::from(clock) / 3600.0;
        Self {
            att,
            awt,
            throughput: if clock == 0 { 0.0 } else { completed as f64 / hours },
            completed,
            injected,
        }
    }
}

/// Result of one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    /// Waiting seconds accrued at each intersection during the interval.
    pub interval_waits: Vec<u64>,
    pub discharged: usize,
}

/// Shared reward from per-intersection interval waits: `-(1/N) * sum`.
pub fn reward_from_waits(waits: &[f64]) -> f64 {
    if waits.is_empty() {
        return 0.0;
    }
    -waits.iter().sum::<f64>() / waits.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    network: Arc<RoadNetwork>,
    config: SimConfig,
    demand: DemandProfile,
    /// `lanes[i * 4 + slot]`.
    lanes: Vec<Lane>,
    /// Receiving lane index for `(i, slot, movement)`, `None` when exiting.
    routes: Vec<Option<usize>>,
    rngs: Vec<ChaCha8Rng>,
    poisson: Option<Poisson<f64>>,
    phase: Vec<usize>,
    phase_timer: Vec<u32>,
    yellow_remaining: Vec<u32>,
    clock: u32,
    trips: Vec<TripRecord>,
    injected: usize,
    /// Vehicles moved from `i` to `j`, row-major `N x N`.
    link_flows: Vec<u64>,
}

fn node_seed(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

impl SimState {
    pub fn reset(network: Arc<RoadNetwork>, demand: &DemandProfile, config: &SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        demand.validate()?;
        let n = network.num_intersections();
        let mut lanes = Vec::with_capacity(n * APPROACHES);
        for i in 0..n {
            for slot in 0..APPROACHES {
                let internal = network.upstream(i, slot).is_some();
                lanes.push(Lane {
                    transit: VecDeque::new(),
                    queues: Default::default(),
                    credit: 0.0,
                    wait_accum: 0,
                    travel: (network.lane_free_flow_time(i, slot).round() as u32).max(1),
                    capacity: internal.then_some(config.lane_capacity),
                });
            }
        }
        let mut routes = Vec::with_capacity(n * APPROACHES * MOVEMENTS);
        for i in 0..n {
            for slot in 0..APPROACHES {
                for m in 0..MOVEMENTS {
                    let out = turn_slot(slot, m);
                    routes.push(network.upstream(i, out).map(|j| {
                        let s = network.incoming_slot(i, j).expect("lane map is symmetric");
                        j * APPROACHES + s
                    }));
                }
            }
        }
        let rngs = network
            .ids()
            .iter()
            .map(|id| ChaCha8Rng::from_seed(node_seed(seed, id)))
            .collect();
        let per_tick = demand.arrival_rate / 3600.0;
        let poisson = if per_tick > 0.0 {
            Some(Poisson::new(per_tick).map_err(|e| invalid(format!("arrival rate: {e}")))?)
        } else {
            None
        };
        Ok(Self {
            network,
            config: config.clone(),
            demand: demand.clone(),
            lanes,
            routes,
            rngs,
            poisson,
            phase: vec![0; n],
            phase_timer: vec![0; n],
            yellow_remaining: vec![0; n],
            clock: 0,
            trips: Vec::new(),
            injected: 0,
            link_flows: vec![0; n * n],
        })
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.network
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn demand(&self) -> &DemandProfile {
        &self.demand
    }

    pub fn num_agents(&self) -> usize {
        self.phase.len()
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        self.clock >= self.config.horizon
    }

    pub fn phases(&self) -> &[usize] {
        &self.phase
    }

    pub fn phase_timers(&self) -> &[u32] {
        &self.phase_timer
    }

    pub fn yellow_remaining(&self) -> &[u32] {
        &self.yellow_remaining
    }

    pub fn trips(&self) -> &[TripRecord] {
        &self.trips
    }

    pub fn link_flows(&self) -> &[u64] {
        &self.link_flows
    }

    pub fn injected(&self) -> usize {
        self.injected
    }

    pub fn completed(&self) -> usize {
        self.trips.len()
    }

    pub fn in_transit(&self) -> usize {
        self.lanes.iter().map(|l| l.transit.len()).sum()
    }

    pub fn total_queued(&self) -> usize {
        self.lanes.iter().map(Lane::queued).sum()
    }

    pub fn lane_queue(&self, i: usize, slot: usize) -> usize {
        self.lanes[i * APPROACHES + slot].queued()
    }

    pub fn movement_queue(&self, i: usize, slot: usize, movement: usize) -> usize {
        self.lanes[i * APPROACHES + slot].queues[movement].len()
    }

    pub fn lane_occupancy(&self, i: usize, slot: usize) -> usize {
        self.lanes[i * APPROACHES + slot].occupancy()
    }

    /// Total waiting seconds accrued on lane `(i, slot)` so far.
    pub fn wait_accum(&self, i: usize, slot: usize) -> u64 {
        self.lanes[i * APPROACHES + slot].wait_accum
    }

    /// Receiving lane `(j, slot)` of movement `movement` from `(i, slot)`.
    pub fn downstream(&self, i: usize, slot: usize, movement: usize) -> Option<(usize, usize)> {
        self.routes[(i * APPROACHES + slot) * MOVEMENTS + movement].map(|l| (l / APPROACHES, l % APPROACHES))
    }

    /// Waiting seconds of every vehicle in the system, completed or not.
    pub fn total_wait_all_vehicles(&self) -> u64 {
        let done: u64 = self.trips.iter().map(|t| u64::from(t.wait)).sum();
        let mut live = 0u64;
        for lane in &self.lanes {
            live += lane.transit.iter().map(|(_, v)| u64::from(v.wait)).sum::<u64>();
            live += lane
                .queues
                .iter()
                .flatten()
                .map(|v| u64::from(v.wait + self.clock - v.joined))
                .sum::<u64>();
        }
        done + live
    }

    /// Places `count` vehicles directly into a movement queue, as if they
    /// had just arrived. Counts as injected.
    pub fn place_queued(&mut self, i: usize, slot: usize, movement: usize, count: usize) -> Result<()> {
        if i >= self.num_agents() || slot >= APPROACHES || movement >= MOVEMENTS {
            return Err(invalid(format!("no lane ({i}, {slot}, {movement})")));
        }
        let clock = self.clock;
        let q = &mut self.lanes[i * APPROACHES + slot].queues[movement];
        for _ in 0..count {
            q.push_back(Vehicle {
                entry: clock,
                wait: 0,
                joined: clock,
            });
        }
        self.injected += count;
        Ok(())
    }

    /// Sets the current phase without yellow, for constructing test states.
    pub fn force_phase(&mut self, i: usize, phase: usize) -> Result<()> {
        if phase >= NUM_PHASES || i >= self.num_agents() {
            return Err(invalid(format!("phase {phase} at intersection {i}")));
        }
        self.phase[i] = phase;
        Ok(())
    }

    /// Advances one decision interval under `actions`.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::State(format!("episode finished at clock {}", self.clock)));
        }
        if actions.len() != self.num_agents() {
            return Err(invalid(format!("{} actions for {} intersections", actions.len(), self.num_agents())));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= NUM_PHASES) {
            return Err(invalid(format!("action {bad} outside 0..{NUM_PHASES}")));
        }
        for (i, &a) in actions.iter().enumerate() {
            if a != self.phase[i] {
                self.phase[i] = a;
                self.phase_timer[i] = 0;
                self.yellow_remaining[i] = self.config.yellow_time;
            }
        }
        let n = self.num_agents();
        let mut interval_waits = vec![0u64; n];
        let mut discharged = 0;
        for _ in 0..self.config.decision_interval {
            if self.is_done() {
                break;
            }
            discharged += self.tick(&mut interval_waits);
        }
        let waits: Vec<f64> = interval_waits.iter().map(|&w| w as f64).collect();
        Ok(StepOutcome {
            reward: reward_from_waits(&waits),
            done: self.is_done(),
            interval_waits,
            discharged,
        })
    }

    fn tick(&mut self, interval_waits: &mut [u64]) -> usize {
        let c = self.clock;
        let n = self.num_agents();
        self.arrivals(c);
        self.transit_to_queues(c);

        let occupancy: Vec<usize> = self.lanes.iter().map(Lane::occupancy).collect();
        let mut added = vec![0usize; self.lanes.len()];
        let mut moves: Vec<(usize, u32, Vehicle)> = Vec::new();
        let mut discharged = 0;
        for i in 0..n {
            let green = self.yellow_remaining[i] == 0;
            let phase = self.phase[i];
            for slot in 0..APPROACHES {
                let li = i * APPROACHES + slot;
                let served = green && (0..MOVEMENTS).any(|m| serves(phase, slot, m));
                if !served {
                    self.lanes[li].credit = 0.0;
                    continue;
                }
                let sat = self.config.saturation;
                let lane = &mut self.lanes[li];
                lane.credit = (lane.credit + sat).min(sat.max(1.0));
                while self.lanes[li].credit >= 1.0 {
                    let mut pick: Option<(usize, u32)> = None;
                    for m in 0..MOVEMENTS {
                        if !serves(phase, slot, m) {
                            continue;
                        }
                        let Some(head) = self.lanes[li].queues[m].front() else {
                            continue;
                        };
                        if let Some(dst) = self.routes[li * MOVEMENTS + m] {
                            if let Some(cap) = self.lanes[dst].capacity {
                                if occupancy[dst] + added[dst] >= cap {
                                    continue;
                                }
                            }
                        }
                        if pick.is_none_or(|(_, j)| head.joined < j) {
                            pick = Some((m, head.joined));
                        }
                    }
                    let Some((m, _)) = pick else { break };
                    let lane = &mut self.lanes[li];
                    lane.credit -= 1.0;
                    let mut v = lane.queues[m].pop_front().expect("picked head exists");
                    v.wait += c - v.joined;
                    discharged += 1;
                    match self.routes[li * MOVEMENTS + m] {
                        None => self.trips.push(TripRecord {
                            entry: v.entry,
                            exit: c,
                            wait: v.wait,
                        }),
                        Some(dst) => {
                            added[dst] += 1;
                            let j = dst / APPROACHES;
                            self.link_flows[i * n + j] += 1;
                            v.joined = u32::MAX;
                            moves.push((dst, c + self.lanes[dst].travel, v));
                        }
                    }
                }
            }
        }
        for (dst, ready, v) in moves {
            self.lanes[dst].transit.push_back((ready, v));
        }

        for (li, lane) in self.lanes.iter_mut().enumerate() {
            let q = lane.queued() as u64;
            lane.wait_accum += q;
            interval_waits[li / APPROACHES] += q;
        }
        self.clock += 1;
        for i in 0..n {
            self.phase_timer[i] += 1;
            self.yellow_remaining[i] = self.yellow_remaining[i].saturating_sub(1);
        }
        discharged
    }

    fn arrivals(&mut self, c: u32) {
        let Some(poisson) = self.poisson else { return };
        for i in 0..self.num_agents() {
            for slot in 0..APPROACHES {
                if self.network.upstream(i, slot).is_some() {
                    continue;
                }
                let count = poisson.sample(&mut self.rngs[i]) as usize;
                let lane = &mut self.lanes[i * APPROACHES + slot];
                for _ in 0..count {
                    lane.transit.push_back((
                        c + lane.travel,
                        Vehicle {
                            entry: c,
                            wait: 0,
                            joined: u32::MAX,
                        },
                    ));
                }
                self.injected += count;
            }
        }
    }

    fn transit_to_queues(&mut self, c: u32) {
        let [p_straight, p_left, _] = self.config.turn_ratios;
        for i in 0..self.num_agents() {
            for slot in 0..APPROACHES {
                let li = i * APPROACHES + slot;
                while self.lanes[li].transit.front().is_some_and(|(ready, _)| *ready <= c) {
                    let (_, mut v) = self.lanes[li].transit.pop_front().expect("front checked");
                    let u: f64 = self.rngs[i].random();
                    let m = if u < p_straight {
                        STRAIGHT
                    } else if u < p_straight + p_left {
                        LEFT
                    } else {
                        RIGHT
                    };
                    v.joined = c;
                    self.lanes[li].queues[m].push_back(v);
                }
            }
        }
    }

    /// Per-agent observation vectors of length [`OBS_DIM`].
    pub fn observe(&self) -> Vec<[f64; OBS_DIM]> {
        let cap = self.config.lane_capacity as f64;
        (0..self.num_agents())
            .map(|i| {
                let mut o = [0.0; OBS_DIM];
                for slot in 0..APPROACHES {
                    let lane = &self.lanes[i * APPROACHES + slot];
                    let q = lane.queued();
                    o[slot] = q as f64 / cap;
                    if q > 0 {
                        let waited: u64 = lane
                            .queues
                            .iter()
                            .flatten()
                            .map(|v| u64::from(self.clock - v.joined))
                            .sum();
                        o[4 + slot] = waited as f64 / q as f64 / self.config.wait_normalizer;
                    }
                    o[13 + slot] = lane.occupancy() as f64 / cap;
                }
                o[8 + self.phase[i]] = 1.0;
                o[12] = f64::from(self.phase_timer[i]) / self.config.timer_normalizer;
                for x in &mut o {
                    *x = x.clamp(0.0, 1.0);
                }
                o
            })
            .collect()
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics::from_trips(&self.trips, self.clock, self.injected)
    }
}
