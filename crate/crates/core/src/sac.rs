//! Discrete-action soft actor-critic. The policy is a softmax over the 2I
//! adjustment actions; twin critics with target copies regress toward the
//! entropy-augmented target, and all expectations over the action set are
//! closed-form sums, so no reparameterization is involved. Dones here are
//! step-budget exhaustions, not absorbing states, so targets bootstrap
//! through them.

use crate::env::{
    default_horizon, sample_scenario, AdjustAction, EpisodeRunner, NetworkScenario,
    PowerAllocation, ScenarioRanges,
};
use crate::error::{Error, Result};
use crate::features::{state_feature_dim, state_features};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::checkpoint;
use crate::nn::{softmax, Activation, MlpNetwork};
use crate::rng::stream_rng;
use crate::store::{ConditionLabel, LabelLayout, TrajStore, Trajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    /// Soft-update rate for the target critics.
    pub rho: f64,
    pub lr: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Target entropy is this fraction of ln(action count).
    pub target_entropy_scale: f64,
    pub initial_alpha: f64,
    /// Environment steps between gradient updates.
    pub update_every: usize,
    /// Replay fill required before updates start.
    pub warmup_transitions: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            gamma: 0.99,
            rho: 0.005,
            lr: 3e-4,
            lr_alpha: 3e-4,
            batch_size: 256,
            replay_capacity: 100_000,
            target_entropy_scale: 0.6,
            initial_alpha: 0.2,
            update_every: 1,
            warmup_transitions: 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Greedy,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug)]
pub struct TransitionBatch {
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub len: usize,
}

/// Fixed-capacity ring with uniform without-replacement batch sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    slots: Vec<Transition>,
    capacity: usize,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            next: 0,
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.slots.len() < self.capacity {
            self.slots.push(t);
        } else {
            self.slots[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Uniform without replacement via partial Fisher-Yates over indices.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<TransitionBatch> {
        if batch == 0 || batch > self.slots.len() {
            return Err(Error::Contract(format!(
                "batch {batch} from buffer of {}",
                self.slots.len()
            )));
        }
        let mut indices: Vec<usize> = (0..self.slots.len()).collect();
        let dim = self.slots[0].state.len();
        let mut out = TransitionBatch {
            states: Vec::with_capacity(batch * dim),
            actions: Vec::with_capacity(batch),
            rewards: Vec::with_capacity(batch),
            next_states: Vec::with_capacity(batch * dim),
            len: batch,
        };
        for k in 0..batch {
            let pick = rng.gen_range(k..indices.len());
            indices.swap(k, pick);
            let t = &self.slots[indices[k]];
            out.states.extend_from_slice(&t.state);
            out.actions.push(t.action);
            out.rewards.push(t.reward);
            out.next_states.extend_from_slice(&t.next_state);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SacLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: MlpNetwork,
    pub q1: MlpNetwork,
    pub q2: MlpNetwork,
    pub q1_target: MlpNetwork,
    pub q2_target: MlpNetwork,
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub config: SacConfig,
    opt_policy: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    num_actions: usize,
    state_dim: usize,
}

impl SacAgent {
    /// The policy's output layer starts zeroed, so the initial policy is
    /// exactly uniform over actions.
    pub fn new(state_dim: usize, num_actions: usize, config: SacConfig, seed: u64) -> Result<Self> {
        if num_actions < 2 {
            return Err(Error::Config("need at least two actions".into()));
        }
        let mut rng = stream_rng(seed, "sac-init");
        let mut policy = MlpNetwork::mlp(
            state_dim,
            &config.hidden,
            num_actions,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        policy.zero_last_layer();
        let q1 = MlpNetwork::mlp(
            state_dim,
            &config.hidden,
            num_actions,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let q2 = MlpNetwork::mlp(
            state_dim,
            &config.hidden,
            num_actions,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            opt_policy: Adam::new(&policy, adam, "sac policy"),
            opt_q1: Adam::new(&q1, adam, "sac critic 1"),
            opt_q2: Adam::new(&q2, adam, "sac critic 2"),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            log_alpha: config.initial_alpha.max(1e-8).ln(),
            target_entropy: config.target_entropy_scale * (num_actions as f64).ln(),
            policy,
            q1,
            q2,
            config,
            num_actions,
            state_dim,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_probabilities(&self, state: &[f64]) -> Vec<f64> {
        softmax(&self.policy.forward_one(state))
    }

    pub fn act<R: Rng>(&self, state: &[f64], mode: ActMode, rng: &mut R) -> usize {
        let logits = self.policy.forward_one(state);
        match mode {
            ActMode::Greedy => argmax_lowest(&logits),
            ActMode::Stochastic => {
                let probs = softmax(&logits);
                sample_categorical(&probs, rng)
            }
        }
    }

    /// Entropy-regularized targets y = r + gamma * E_{a'~pi}[min targetQ - alpha log pi].
    pub fn critic_targets(&self, batch: &TransitionBatch) -> Result<Vec<f64>> {
        let b = batch.len;
        let alpha = self.alpha();
        let logits_next = self.policy.forward(&batch.next_states, b);
        let q1n = self.q1_target.forward(&batch.next_states, b);
        let q2n = self.q2_target.forward(&batch.next_states, b);
        let a = self.num_actions;
        let mut targets = Vec::with_capacity(b);
        for i in 0..b {
            let row = &logits_next[i * a..(i + 1) * a];
            let probs = softmax(row);
            let mut v_next = 0.0;
            for j in 0..a {
                let qmin = q1n[i * a + j].min(q2n[i * a + j]);
                // softmax output is strictly positive, so ln is finite.
                v_next += probs[j] * (qmin - alpha * probs[j].ln());
            }
            let y = batch.rewards[i] + self.config.gamma * v_next;
            if !y.is_finite() {
                return Err(Error::Divergence(format!(
                    "sac critic target non-finite at batch row {i}: r={} v_next={v_next} alpha={alpha}",
                    batch.rewards[i]
                )));
            }
            targets.push(y);
        }
        Ok(targets)
    }

    pub fn update(&mut self, batch: &TransitionBatch) -> Result<SacLosses> {
        let b = batch.len;
        let a = self.num_actions;
        let targets = self.critic_targets(batch)?;

        let mut critic_losses = [0.0f64; 2];
        for (which, (net, opt)) in [(&mut self.q1, &mut self.opt_q1), (&mut self.q2, &mut self.opt_q2)]
            .into_iter()
            .enumerate()
        {
            let trace = net.forward_trace(&batch.states, b);
            let mut grad = vec![0.0; b * a];
            let mut loss = 0.0;
            for i in 0..b {
                let q = trace.output[i * a + batch.actions[i]];
                let err = q - targets[i];
                loss += err * err;
                grad[i * a + batch.actions[i]] = 2.0 * err / b as f64;
            }
            critic_losses[which] = loss / b as f64;
            let (grads, _) = net.backward(&trace, &grad);
            opt.step(net, &grads)?;
        }

        // Actor: L = E_s sum_a pi(a|s) (alpha log pi - min Q); the gradient
        // with respect to logit j is pi_j (g_j - sum_a pi_a g_a).
        let alpha = self.alpha();
        let trace = self.policy.forward_trace(&batch.states, b);
        let q1v = self.q1.forward(&batch.states, b);
        let q2v = self.q2.forward(&batch.states, b);
        let mut grad = vec![0.0; b * a];
        let mut actor_loss = 0.0;
        let mut entropy_sum = 0.0;
        for i in 0..b {
            let probs = softmax(&trace.output[i * a..(i + 1) * a]);
            let mut expected_g = 0.0;
            let mut entropy = 0.0;
            let mut g = vec![0.0; a];
            for j in 0..a {
                let logp = probs[j].ln();
                let qmin = q1v[i * a + j].min(q2v[i * a + j]);
                g[j] = alpha * logp - qmin;
                expected_g += probs[j] * g[j];
                entropy -= probs[j] * logp;
            }
            actor_loss += expected_g;
            entropy_sum += entropy;
            for j in 0..a {
                grad[i * a + j] = probs[j] * (g[j] - expected_g) / b as f64;
            }
        }
        actor_loss /= b as f64;
        let entropy = entropy_sum / b as f64;
        let (grads, _) = self.policy.backward(&trace, &grad);
        self.opt_policy.step(&mut self.policy, &grads)?;

        // Temperature chases the entropy target, parameterized in log space.
        self.log_alpha += self.config.lr_alpha * (self.target_entropy - entropy);
        if !self.log_alpha.is_finite() {
            return Err(Error::Divergence(format!(
                "sac temperature non-finite: entropy={entropy} target={}",
                self.target_entropy
            )));
        }

        soft_update(&mut self.q1_target, &self.q1, self.config.rho);
        soft_update(&mut self.q2_target, &self.q2, self.config.rho);

        Ok(SacLosses {
            critic1: critic_losses[0],
            critic2: critic_losses[1],
            actor: actor_loss,
            alpha: self.alpha(),
            entropy,
        })
    }

    /// Writes networks and metadata into a directory. Optimizer moments are
    /// not persisted; a reloaded agent acts identically but resumes training
    /// with fresh optimizer state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.policy, &dir.join("policy.ckpt"))?;
        checkpoint::save(&self.q1, &dir.join("q1.ckpt"))?;
        checkpoint::save(&self.q2, &dir.join("q2.ckpt"))?;
        checkpoint::save(&self.q1_target, &dir.join("q1_target.ckpt"))?;
        checkpoint::save(&self.q2_target, &dir.join("q2_target.ckpt"))?;
        let meta = SacMeta {
            config: self.config.clone(),
            state_dim: self.state_dim,
            num_actions: self.num_actions,
            log_alpha: self.log_alpha,
            target_entropy: self.target_entropy,
        };
        let text = toml::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("sac.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("sac.toml");
        let text = std::fs::read_to_string(&meta_path)?;
        let meta: SacMeta = toml::from_str(&text)
            .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;
        let policy = checkpoint::load(&dir.join("policy.ckpt"))?;
        let q1 = checkpoint::load(&dir.join("q1.ckpt"))?;
        let q2 = checkpoint::load(&dir.join("q2.ckpt"))?;
        let q1_target = checkpoint::load(&dir.join("q1_target.ckpt"))?;
        let q2_target = checkpoint::load(&dir.join("q2_target.ckpt"))?;
        for (name, net) in [("policy", &policy), ("q1", &q1), ("q2", &q2)] {
            if net.in_dim() != meta.state_dim || net.out_dim() != meta.num_actions {
                return Err(Error::format(
                    dir.display().to_string(),
                    format!(
                        "{name} network is {}->{}, metadata expects {}->{}",
                        net.in_dim(),
                        net.out_dim(),
                        meta.state_dim,
                        meta.num_actions
                    ),
                ));
            }
        }
        let adam = AdamConfig {
            lr: meta.config.lr,
            ..AdamConfig::default()
        };
        let opt_policy = Adam::new(&policy, adam, "policy");
        let opt_q1 = Adam::new(&q1, adam, "critic 1");
        let opt_q2 = Adam::new(&q2, adam, "critic 2");
        Ok(Self {
            policy,
            q1,
            q2,
            q1_target,
            q2_target,
            log_alpha: meta.log_alpha,
            target_entropy: meta.target_entropy,
            config: meta.config,
            opt_policy,
            opt_q1,
            opt_q2,
            num_actions: meta.num_actions,
            state_dim: meta.state_dim,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SacMeta {
    config: SacConfig,
    state_dim: usize,
    num_actions: usize,
    log_alpha: f64,
    target_entropy: f64,
}

pub fn soft_update(target: &mut MlpNetwork, source: &MlpNetwork, rho: f64) {
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        for (tw, sw) in t.weight.iter_mut().zip(&s.weight) {
            *tw = (1.0 - rho) * *tw + rho * *sw;
        }
        for (tb, sb) in t.bias.iter_mut().zip(&s.bias) {
            *tb = (1.0 - rho) * *tb + rho * *sb;
        }
    }
}

pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Where episode scenarios come from during training and collection.
#[derive(Debug, Clone)]
pub enum ScenarioSource {
    Fixed(Vec<NetworkScenario>),
    Sampled { ranges: ScenarioRanges, base_seed: u64 },
}

impl ScenarioSource {
    pub fn scenario_for_episode(&self, episode: u64) -> Result<NetworkScenario> {
        match self {
            ScenarioSource::Fixed(list) => {
                if list.is_empty() {
                    return Err(Error::Config("fixed scenario list is empty".into()));
                }
                Ok(list[(episode % list.len() as u64) as usize].clone())
            }
            ScenarioSource::Sampled { ranges, base_seed } => {
                sample_scenario(ranges, base_seed.wrapping_add(episode))
            }
        }
    }

    pub fn probe(&self) -> Result<NetworkScenario> {
        self.scenario_for_episode(0)
    }
}

/// A raw collected episode, before the dataset's label layout exists.
#[derive(Debug, Clone)]
pub struct CollectedEpisode {
    pub scenario: NetworkScenario,
    pub states: Vec<PowerAllocation>,
    pub actions: Vec<AdjustAction>,
    pub rewards: Vec<f64>,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub episodes: u64,
    pub env_interactions: u64,
    pub updates: u64,
    pub mean_eval_return: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacTrainConfig {
    pub episodes: u64,
    /// Defaults to the scenario-derived horizon when absent.
    pub horizon: Option<usize>,
    pub eval_every_episodes: u64,
    pub eval_episodes: u64,
    /// Extra greedy episodes recorded after training, mixed into the export.
    pub final_greedy_episodes: u64,
    /// Fraction of training episodes started from a uniform random
    /// allocation instead of zero, so collected windows cover mid-range
    /// states as well as cold starts.
    pub random_init_fraction: f64,
    pub seed: u64,
}

pub struct SacTrainOutput {
    pub agent: SacAgent,
    pub episodes: Vec<CollectedEpisode>,
    pub curve: Vec<CurvePoint>,
    pub env_interactions: u64,
    pub updates: u64,
}

/// Runs one episode from the zero allocation.
pub fn run_episode<R: Rng>(
    agent: &SacAgent,
    scn: &NetworkScenario,
    horizon: usize,
    mode: ActMode,
    rng: &mut R,
    on_step: impl FnMut(&NetworkScenario, &crate::env::EnvStep),
) -> Result<CollectedEpisode> {
    run_episode_from(
        agent,
        scn,
        PowerAllocation::zeros(scn.num_users),
        horizon,
        mode,
        rng,
        on_step,
    )
}

/// Runs one episode from a caller-chosen initial allocation.
pub fn run_episode_from<R: Rng>(
    agent: &SacAgent,
    scn: &NetworkScenario,
    initial: PowerAllocation,
    horizon: usize,
    mode: ActMode,
    rng: &mut R,
    mut on_step: impl FnMut(&NetworkScenario, &crate::env::EnvStep),
) -> Result<CollectedEpisode> {
    let mut runner = EpisodeRunner::new(scn.clone(), initial, horizon)?;
    let mut states = vec![runner.state.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    while !runner.done() {
        let feats = state_features(scn, &runner.state);
        let a = agent.act(&feats, mode, rng);
        let action = AdjustAction::from_index(a, scn.num_users)?;
        let step = runner.step(action)?;
        on_step(scn, &step);
        states.push(step.next_state.clone());
        actions.push(action);
        rewards.push(step.reward);
    }
    let ret = rewards.iter().sum();
    Ok(CollectedEpisode {
        scenario: scn.clone(),
        states,
        actions,
        rewards,
        ret,
    })
}

pub fn greedy_return(agent: &SacAgent, scn: &NetworkScenario, horizon: usize) -> Result<f64> {
    // Greedy rollouts are deterministic; the rng is never consulted.
    let mut rng = stream_rng(0, "greedy-unused");
    let ep = run_episode(agent, scn, horizon, ActMode::Greedy, &mut rng, |_, _| {})?;
    Ok(ep.ret)
}

/// Online training plus trajectory collection. Every training episode is
/// recorded; evaluation episodes are greedy and never enter the export.
pub fn train(
    config: &SacConfig,
    tcfg: &SacTrainConfig,
    source: &ScenarioSource,
    eval_scenarios: &[NetworkScenario],
) -> Result<SacTrainOutput> {
    let probe = source.probe()?;
    let state_dim = state_feature_dim(&probe);
    let num_actions = 2 * probe.num_users;
    let horizon = tcfg
        .horizon
        .unwrap_or_else(|| default_horizon(probe.num_users, probe.power_levels));
    if !(0.0..=1.0).contains(&tcfg.random_init_fraction) {
        return Err(Error::Config("random_init_fraction must lie in [0, 1]".into()));
    }
    let mut agent = SacAgent::new(state_dim, num_actions, config.clone(), tcfg.seed)?;
    let mut replay = ReplayBuffer::new(config.replay_capacity);
    let mut rng_act = stream_rng(tcfg.seed, "sac-act");
    let mut rng_batch = stream_rng(tcfg.seed, "sac-batch");
    let mut rng_init = stream_rng(tcfg.seed, "sac-init-state");

    let mut episodes = Vec::with_capacity(tcfg.episodes as usize);
    let mut curve = Vec::new();
    let mut interactions: u64 = 0;
    let mut updates: u64 = 0;

    for ep in 0..tcfg.episodes {
        let scn = source.scenario_for_episode(ep)?;
        if state_feature_dim(&scn) != state_dim || 2 * scn.num_users != num_actions {
            return Err(Error::Config(
                "scenario source mixes incompatible user/base-station counts".into(),
            ));
        }
        let initial = if tcfg.random_init_fraction > 0.0
            && rng_init.gen_range(0.0..1.0) < tcfg.random_init_fraction
        {
            PowerAllocation {
                levels: (0..scn.num_users)
                    .map(|_| rng_init.gen_range(0..=scn.power_levels))
                    .collect(),
            }
        } else {
            PowerAllocation::zeros(scn.num_users)
        };
        let mut pending: Vec<(Vec<f64>, usize, f64, Vec<f64>, bool)> = Vec::new();
        let recorded = run_episode_from(
            &agent,
            &scn,
            initial,
            horizon,
            ActMode::Stochastic,
            &mut rng_act,
            |scn, step| {
                pending.push((
                    state_features(scn, &step.state),
                    step.action.to_index(),
                    step.reward,
                    state_features(scn, &step.next_state),
                    step.done,
                ));
            },
        )?;
        for (state, action, reward, next_state, done) in pending {
            replay.push(Transition {
                state,
                action,
                reward,
                next_state,
                done,
            });
            interactions += 1;
            if replay.len() >= config.warmup_transitions.max(config.batch_size)
                && interactions % config.update_every as u64 == 0
            {
                let batch = replay.sample(config.batch_size, &mut rng_batch)?;
                agent.update(&batch)?;
                updates += 1;
            }
        }
        episodes.push(recorded);

        if (ep + 1) % tcfg.eval_every_episodes == 0 || ep + 1 == tcfg.episodes {
            let evals = if eval_scenarios.is_empty() {
                vec![scn.clone()]
            } else {
                eval_scenarios.to_vec()
            };
            let mut sum = 0.0;
            let mut n = 0u64;
            for escn in &evals {
                for _ in 0..tcfg.eval_episodes.max(1) {
                    sum += greedy_return(&agent, escn, horizon)?;
                    n += 1;
                }
            }
            curve.push(CurvePoint {
                episodes: ep + 1,
                env_interactions: interactions,
                updates,
                mean_eval_return: sum / n as f64,
            });
        }
    }

    // Greedy tail episodes seed the dataset's top return buckets.
    for k in 0..tcfg.final_greedy_episodes {
        let scn = source.scenario_for_episode(tcfg.episodes + k)?;
        let mut rng = stream_rng(tcfg.seed, "sac-greedy-tail");
        episodes.push(run_episode(
            &agent,
            &scn,
            horizon,
            ActMode::Greedy,
            &mut rng,
            |_, _| {},
        )?);
    }

    Ok(SacTrainOutput {
        agent,
        episodes,
        curve,
        env_interactions: interactions,
        updates,
    })
}

/// Builds the labeled dataset: decile edges come from the collected returns
/// themselves and are frozen into the header.
pub fn export_dataset(episodes: &[CollectedEpisode]) -> Result<TrajStore> {
    if episodes.is_empty() {
        return Err(Error::EmptySelection("no episodes to export".into()));
    }
    let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    let edges = LabelLayout::decile_edges(&returns)?;
    let mut counts: Vec<usize> = episodes.iter().map(|e| e.scenario.num_users).collect();
    counts.sort_unstable();
    counts.dedup();
    let layout = LabelLayout::new(edges, counts);
    let mut store = TrajStore::new(layout)?;
    for e in episodes {
        let label = ConditionLabel::build(store.layout(), &e.scenario, e.ret)?;
        store.append(Trajectory {
            scenario: e.scenario.clone(),
            states: e.states.clone(),
            actions: e.actions.clone(),
            rewards: e.rewards.clone(),
            ret: e.ret,
            label,
        })?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SacConfig {
        SacConfig {
            hidden: vec![32, 32],
            batch_size: 32,
            warmup_transitions: 32,
            replay_capacity: 10_000,
            ..SacConfig::default()
        }
    }

    #[test]
    fn initial_policy_is_exactly_uniform() {
        let agent = SacAgent::new(5, 4, tiny_config(), 1).unwrap();
        let probs = agent.action_probabilities(&[0.3, -0.2, 0.8, 0.0, -1.0]);
        for &p in &probs {
            assert!((p - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_act_takes_forced_argmax() {
        let mut agent = SacAgent::new(2, 4, tiny_config(), 2).unwrap();
        // Zero final weights plus a hand-set bias pins the logits.
        agent.policy.zero_last_layer();
        let last = agent.policy.layers.last_mut().unwrap();
        last.bias.copy_from_slice(&[3.0, 1.0, 1.0, 1.0]);
        let mut rng = stream_rng(0, "greedy");
        assert_eq!(agent.act(&[0.5, -0.5], ActMode::Greedy, &mut rng), 0);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_lowest(&[1.0, 2.0, 2.0, 0.0]), 1);
        assert_eq!(argmax_lowest(&[5.0, 5.0]), 0);
    }

    #[test]
    fn stochastic_sampling_matches_policy_distribution() {
        let mut agent = SacAgent::new(2, 4, tiny_config(), 3).unwrap();
        agent.policy.zero_last_layer();
        let last = agent.policy.layers.last_mut().unwrap();
        last.bias.copy_from_slice(&[0.0, 0.5, 1.0, -0.5]);
        let state = [0.1, 0.2];
        let probs = agent.action_probabilities(&state);
        let mut rng = stream_rng(4, "multinomial");
        let n = 100_000;
        let mut counts = [0u64; 4];
        for _ in 0..n {
            counts[agent.act(&state, ActMode::Stochastic, &mut rng)] += 1;
        }
        for j in 0..4 {
            let sigma = (n as f64 * probs[j] * (1.0 - probs[j])).sqrt();
            let dev = (counts[j] as f64 - n as f64 * probs[j]).abs();
            assert!(dev <= 3.0 * sigma, "action {j}: dev {dev} > 3 sigma {sigma}");
        }
    }

    #[test]
    fn discount_free_targets_equal_rewards() {
        let config = SacConfig {
            gamma: 0.0,
            ..tiny_config()
        };
        let agent = SacAgent::new(3, 4, config, 5).unwrap();
        let batch = TransitionBatch {
            states: vec![0.0; 2 * 3],
            actions: vec![0, 3],
            rewards: vec![1.25, -0.5],
            next_states: vec![0.1; 2 * 3],
            len: 2,
        };
        let targets = agent.critic_targets(&batch).unwrap();
        assert_eq!(targets, vec![1.25, -0.5]);
    }

    #[test]
    fn entropy_free_actor_gradient_points_at_argmax() {
        // With alpha = 0 and Q = (1,0,0,0) at a uniform policy, the logit
        // gradient must be negative for action 0 and positive elsewhere,
        // so a descent step moves mass toward the argmax.
        let probs = [0.25f64; 4];
        let q = [1.0, 0.0, 0.0, 0.0];
        let g: Vec<f64> = q.iter().map(|&qv| -qv).collect();
        let expected_g: f64 = probs.iter().zip(&g).map(|(p, gv)| p * gv).sum();
        let grads: Vec<f64> = (0..4).map(|j| probs[j] * (g[j] - expected_g)).collect();
        assert!(grads[0] < 0.0);
        for j in 1..4 {
            assert!(grads[j] > 0.0);
        }
    }

    fn bandit_batch(agent_rng: &mut rand_chacha::ChaCha8Rng, agent: &SacAgent, b: usize) -> TransitionBatch {
        // Single-state, two-action bandit: action 0 pays 1, action 1 pays 0.
        let mut batch = TransitionBatch {
            states: Vec::with_capacity(b),
            actions: Vec::with_capacity(b),
            rewards: Vec::with_capacity(b),
            next_states: Vec::with_capacity(b),
            len: b,
        };
        for _ in 0..b {
            let a = agent.act(&[0.0], ActMode::Stochastic, agent_rng);
            batch.states.push(0.0);
            batch.actions.push(a);
            batch.rewards.push(if a == 0 { 1.0 } else { 0.0 });
            batch.next_states.push(0.0);
        }
        batch
    }

    #[test]
    fn bandit_concentrates_on_the_paying_action() {
        let config = SacConfig {
            hidden: vec![16],
            gamma: 0.0,
            lr: 3e-3,
            lr_alpha: 3e-3,
            target_entropy_scale: 0.1 / (2.0f64).ln(),
            initial_alpha: 0.2,
            batch_size: 32,
            ..SacConfig::default()
        };
        let mut agent = SacAgent::new(1, 2, config, 6).unwrap();
        let mut rng = stream_rng(7, "bandit");
        let mut entropies = Vec::new();
        for _ in 0..2000 {
            let batch = bandit_batch(&mut rng, &agent, 32);
            let losses = agent.update(&batch).unwrap();
            entropies.push(losses.entropy);
        }
        let probs = agent.action_probabilities(&[0.0]);
        assert!(probs[0] >= 0.95, "pi(pay) = {}", probs[0]);

        // Entropy decreases across 100-update windows.
        let window_means: Vec<f64> = entropies
            .chunks(100)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let first = window_means.first().unwrap();
        let last = window_means.last().unwrap();
        assert!(last < first, "entropy did not fall: {first} -> {last}");
        let monotone_violations = window_means
            .windows(2)
            .filter(|w| w[1] > w[0] + 1e-3)
            .count();
        assert!(
            monotone_violations <= 2,
            "entropy window means rose {monotone_violations} times: {window_means:?}"
        );
    }

    #[test]
    fn replay_ring_overwrites_and_batches_without_replacement() {
        let mut buf = ReplayBuffer::new(4);
        for k in 0..6 {
            buf.push(Transition {
                state: vec![k as f64],
                action: 0,
                reward: k as f64,
                next_state: vec![0.0],
                done: false,
            });
        }
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.inserted(), 6);
        // Oldest two were overwritten: rewards present are 2..=5.
        let mut rng = stream_rng(8, "replay");
        let batch = buf.sample(4, &mut rng).unwrap();
        let mut rewards = batch.rewards.clone();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0, 5.0]);
        assert!(buf.sample(5, &mut rng).is_err());
    }

    #[test]
    fn collected_episodes_replay_and_export() {
        let source = ScenarioSource::Sampled {
            ranges: ScenarioRanges {
                num_users: 2,
                num_base_stations: 1,
                power_levels: 6,
                ..ScenarioRanges::default()
            },
            base_seed: 50,
        };
        let tcfg = SacTrainConfig {
            episodes: 8,
            horizon: Some(10),
            eval_every_episodes: 4,
            eval_episodes: 1,
            final_greedy_episodes: 2,
            random_init_fraction: 0.25,
            seed: 9,
        };
        let config = SacConfig {
            warmup_transitions: 16,
            batch_size: 16,
            hidden: vec![16],
            ..SacConfig::default()
        };
        let out = train(&config, &tcfg, &source, &[]).unwrap();
        assert_eq!(out.episodes.len(), 10);
        assert_eq!(out.env_interactions, 80);
        assert!(!out.curve.is_empty());
        let store = export_dataset(&out.episodes).unwrap();
        assert_eq!(store.len(), 10);
        for traj in store.iter() {
            traj.verify_replay().unwrap();
            assert_eq!(traj.states.len(), 11);
        }
    }

    #[test]
    fn save_load_round_trip_preserves_behavior() {
        let mut agent = SacAgent::new(6, 4, SacConfig {
            hidden: vec![12],
            ..SacConfig::default()
        }, 77)
        .unwrap();
        // A few updates so the networks are no longer at init.
        let mut rng = stream_rng(78, "roundtrip");
        let transitions: Vec<Transition> = (0..64)
            .map(|_| Transition {
                state: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: rng.gen_range(0..4),
                reward: rng.gen_range(-1.0..1.0),
                next_state: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                done: false,
            })
            .collect();
        let mut replay = ReplayBuffer::new(128);
        for t in transitions {
            replay.push(t);
        }
        for _ in 0..5 {
            let batch = replay.sample(32, &mut rng).unwrap();
            agent.update(&batch).unwrap();
        }
        let dir = std::env::temp_dir().join("sac-roundtrip-test");
        agent.save(&dir).unwrap();
        let back = SacAgent::load(&dir).unwrap();
        assert_eq!(back.log_alpha, agent.log_alpha);
        assert_eq!(back.target_entropy, agent.target_entropy);
        for _ in 0..20 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(
                agent.policy.forward_one(&s),
                back.policy.forward_one(&s)
            );
            assert_eq!(
                agent.act(&s, ActMode::Greedy, &mut rng),
                back.act(&s, ActMode::Greedy, &mut rng)
            );
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
