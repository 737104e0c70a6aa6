//! Digital-twin environment for uplink transmit-power allocation. Users
//! pick integer power levels on a grid; utility is logarithmic revenue of
//! Shannon rate minus a linear power cost; episodes adjust one user's level
//! by one step at a time, rewarded with the marginal utility, so any
//! episode's return telescopes to U(final) - U(initial).

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkScenario {
    pub num_base_stations: usize,
    pub num_users: usize,
    /// Linear power gain per (user, base station), row-major by user.
    pub channel_gain: Vec<Vec<f64>>,
    pub noise_power: f64,
    /// Power grid size: levels run 0..=power_levels.
    pub power_levels: u32,
    pub bandwidth: f64,
    pub revenue_weight: f64,
    pub cost_coeff: f64,
    /// Serving base station per user.
    pub association: Vec<usize>,
    pub rng_seed: u64,
}

impl NetworkScenario {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_base_stations == 0 {
            return Err(Error::Config("need at least one user and one base station".into()));
        }
        if self.power_levels == 0 {
            return Err(Error::Config("power_levels must be >= 1".into()));
        }
        if self.channel_gain.len() != self.num_users {
            return Err(Error::Config(format!(
                "channel_gain has {} rows for {} users",
                self.channel_gain.len(),
                self.num_users
            )));
        }
        for (i, row) in self.channel_gain.iter().enumerate() {
            if row.len() != self.num_base_stations {
                return Err(Error::Config(format!(
                    "channel_gain row {i} has {} entries for {} base stations",
                    row.len(),
                    self.num_base_stations
                )));
            }
            if let Some(j) = row.iter().position(|g| !(g.is_finite() && *g > 0.0)) {
                return Err(Error::Config(format!(
                    "channel_gain[{i}][{j}] must be strictly positive and finite"
                )));
            }
        }
        if !(self.noise_power.is_finite() && self.noise_power > 0.0) {
            return Err(Error::Config("noise_power must be strictly positive".into()));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::Config("bandwidth must be strictly positive".into()));
        }
        if !(self.revenue_weight.is_finite() && self.revenue_weight > 0.0) {
            return Err(Error::Config("revenue_weight must be strictly positive".into()));
        }
        if self.cost_coeff < 0.0 {
            return Err(Error::Config("cost_coeff must be nonnegative".into()));
        }
        if self.association.len() != self.num_users {
            return Err(Error::Config(format!(
                "association has {} entries for {} users",
                self.association.len(),
                self.num_users
            )));
        }
        if let Some(i) = self
            .association
            .iter()
            .position(|&j| j >= self.num_base_stations)
        {
            return Err(Error::Config(format!(
                "association[{i}] = {} out of range [0, {})",
                self.association[i], self.num_base_stations
            )));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let scn: NetworkScenario =
            toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerAllocation {
    pub levels: Vec<u32>,
}

impl PowerAllocation {
    pub fn zeros(num_users: usize) -> Self {
        Self {
            levels: vec![0; num_users],
        }
    }

    pub fn validate(&self, scn: &NetworkScenario) -> Result<()> {
        if self.levels.len() != scn.num_users {
            return Err(Error::Contract(format!(
                "allocation has {} entries for {} users",
                self.levels.len(),
                scn.num_users
            )));
        }
        if let Some(i) = self.levels.iter().position(|&p| p > scn.power_levels) {
            return Err(Error::Contract(format!(
                "allocation[{i}] = {} exceeds grid max {}",
                self.levels[i], scn.power_levels
            )));
        }
        Ok(())
    }
}

/// Single-user power adjustment. Action indices interleave users:
/// `2*user` raises, `2*user + 1` lowers, so the action space has size 2I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustAction {
    pub user: usize,
    pub delta: i32,
}

impl AdjustAction {
    pub fn from_index(index: usize, num_users: usize) -> Result<Self> {
        if index >= 2 * num_users {
            return Err(Error::Contract(format!(
                "action index {index} out of range for {num_users} users"
            )));
        }
        Ok(Self {
            user: index / 2,
            delta: if index.is_multiple_of(2) { 1 } else { -1 },
        })
    }

    pub fn to_index(self) -> usize {
        2 * self.user + usize::from(self.delta < 0)
    }

    pub fn validate(self, num_users: usize) -> Result<()> {
        if self.user >= num_users {
            return Err(Error::Contract(format!(
                "action user {} out of range [0, {num_users})",
                self.user
            )));
        }
        if self.delta != 1 && self.delta != -1 {
            return Err(Error::Contract(format!("action delta must be +1 or -1, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStep {
    pub state: PowerAllocation,
    pub action: AdjustAction,
    pub reward: f64,
    pub next_state: PowerAllocation,
    pub done: bool,
}

pub fn sinr(scn: &NetworkScenario, p: &PowerAllocation, i: usize) -> f64 {
    let cell = scn.association[i];
    let mut interference = 0.0;
    for k in 0..scn.num_users {
        if k != i {
            interference += p.levels[k] as f64 * scn.channel_gain[k][cell];
        }
    }
    p.levels[i] as f64 * scn.channel_gain[i][cell] / (scn.noise_power + interference)
}

pub fn rate(scn: &NetworkScenario, p: &PowerAllocation, i: usize) -> f64 {
    scn.bandwidth * sinr(scn, p, i).ln_1p() / std::f64::consts::LN_2
}

/// U(p) = sum_i [ a * ln(1 + R_i) - c * p_i ]. All-zero allocation gives 0.
pub fn utility(scn: &NetworkScenario, p: &PowerAllocation) -> f64 {
    let mut total = 0.0;
    for i in 0..scn.num_users {
        total += scn.revenue_weight * rate(scn, p, i).ln_1p()
            - scn.cost_coeff * p.levels[i] as f64;
    }
    total
}

/// Applies an action with clamping at the grid boundary; a clamped move is
/// a no-op and its reward is exactly 0.
pub fn apply_action(scn: &NetworkScenario, state: &PowerAllocation, action: AdjustAction) -> PowerAllocation {
    let mut next = state.clone();
    let cur = next.levels[action.user] as i64;
    let moved = (cur + action.delta as i64).clamp(0, scn.power_levels as i64);
    next.levels[action.user] = moved as u32;
    next
}

/// One transition evaluated from scratch. `done` is owned by the episode
/// runner; this free function always reports false.
pub fn step(scn: &NetworkScenario, state: &PowerAllocation, action: AdjustAction) -> Result<EnvStep> {
    state.validate(scn)?;
    action.validate(scn.num_users)?;
    let next = apply_action(scn, state, action);
    let reward = if next == *state {
        0.0
    } else {
        utility(scn, &next) - utility(scn, state)
    };
    Ok(EnvStep {
        state: state.clone(),
        action,
        reward,
        next_state: next,
        done: false,
    })
}

/// Lowest action index that maps `from` to `to`, if any. Clamp no-ops make
/// several actions share an effect; the lowest index is the canonical label.
pub fn canonical_action(scn: &NetworkScenario, from: &PowerAllocation, to: &PowerAllocation) -> Option<usize> {
    (0..2 * scn.num_users).find(|&a| {
        let act = AdjustAction::from_index(a, scn.num_users).expect("in range");
        apply_action(scn, from, act) == *to
    })
}

pub fn default_horizon(num_users: usize, power_levels: u32) -> usize {
    if num_users <= 2 {
        2 * power_levels as usize
    } else {
        (8 * num_users).min(128)
    }
}

/// Episodic wrapper owning the step budget. The current utility is cached
/// and carried forward so a replayed episode reproduces rewards bit-exactly.
#[derive(Debug, Clone)]
pub struct EpisodeRunner {
    pub scenario: NetworkScenario,
    pub state: PowerAllocation,
    pub horizon: usize,
    steps_taken: usize,
    utility_now: f64,
    utility_start: f64,
}

impl EpisodeRunner {
    pub fn new(scenario: NetworkScenario, initial: PowerAllocation, horizon: usize) -> Result<Self> {
        scenario.validate()?;
        initial.validate(&scenario)?;
        let u0 = utility(&scenario, &initial);
        Ok(Self {
            scenario,
            state: initial,
            horizon,
            steps_taken: 0,
            utility_now: u0,
            utility_start: u0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn done(&self) -> bool {
        self.steps_taken >= self.horizon
    }

    pub fn current_utility(&self) -> f64 {
        self.utility_now
    }

    pub fn initial_utility(&self) -> f64 {
        self.utility_start
    }

    pub fn step(&mut self, action: AdjustAction) -> Result<EnvStep> {
        if self.done() {
            return Err(Error::Contract("episode budget exhausted".into()));
        }
        action.validate(self.scenario.num_users)?;
        let next = apply_action(&self.scenario, &self.state, action);
        let (reward, u_next) = if next == self.state {
            (0.0, self.utility_now)
        } else {
            let u = utility(&self.scenario, &next);
            (u - self.utility_now, u)
        };
        self.steps_taken += 1;
        let step = EnvStep {
            state: std::mem::replace(&mut self.state, next.clone()),
            action,
            reward,
            next_state: next,
            done: self.steps_taken >= self.horizon,
        };
        self.utility_now = u_next;
        Ok(step)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioRanges {
    pub num_users: usize,
    pub num_base_stations: usize,
    /// Gains are drawn log-uniform from this closed interval.
    pub gain_low: f64,
    pub gain_high: f64,
    pub noise_power: f64,
    pub power_levels: u32,
    pub bandwidth: f64,
    pub revenue_weight: f64,
    pub cost_coeff: f64,
}

impl Default for ScenarioRanges {
    fn default() -> Self {
        Self {
            num_users: 2,
            num_base_stations: 1,
            gain_low: 0.1,
            gain_high: 10.0,
            noise_power: 1.0,
            power_levels: 40,
            bandwidth: 1.0,
            revenue_weight: 10.0,
            cost_coeff: 0.05,
        }
    }
}

/// Draws a scenario with log-uniform gains and round-robin association.
pub fn sample_scenario(ranges: &ScenarioRanges, seed: u64) -> Result<NetworkScenario> {
    if !(ranges.gain_low.is_finite() && ranges.gain_low > 0.0) || ranges.gain_low > ranges.gain_high
    {
        return Err(Error::Config(format!(
            "gain range [{}, {}] must be positive and nonempty",
            ranges.gain_low, ranges.gain_high
        )));
    }
    let mut rng = stream_rng(seed, "scenario");
    let draw_gain = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if ranges.gain_low == ranges.gain_high {
            ranges.gain_low
        } else {
            (rng.gen_range(ranges.gain_low.ln()..ranges.gain_high.ln())).exp()
        }
    };
    let channel_gain = (0..ranges.num_users)
        .map(|_| (0..ranges.num_base_stations).map(|_| draw_gain(&mut rng)).collect())
        .collect();
    let scn = NetworkScenario {
        num_base_stations: ranges.num_base_stations,
        num_users: ranges.num_users,
        channel_gain,
        noise_power: ranges.noise_power,
        power_levels: ranges.power_levels,
        bandwidth: ranges.bandwidth,
        revenue_weight: ranges.revenue_weight,
        cost_coeff: ranges.cost_coeff,
        association: (0..ranges.num_users).map(|i| i % ranges.num_base_stations).collect(),
        rng_seed: seed,
    };
    scn.validate()?;
    Ok(scn)
}
