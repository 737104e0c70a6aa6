//! Discrete batch-constrained Q-learning, trained purely from a stored
//! dataset. A behavior-cloning head G estimates the data policy; actions
//! whose relative behavior probability G(a|s)/max G falls below tau are
//! excluded both from bootstrap targets and from the evaluation argmax, so
//! the learner never extrapolates onto actions the dataset never takes.

use crate::env::{AdjustAction, EpisodeRunner, NetworkScenario, PowerAllocation};
use crate::error::{Error, Result};
use crate::features::{state_feature_dim, state_features};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::checkpoint;
use crate::nn::{softmax, softmax_cross_entropy, Activation, MlpNetwork};
use crate::rng::stream_rng;
use crate::sac::soft_update;
use crate::store::{ConditionFilter, TrajStore};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BcqConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    /// Behavior-probability ratio threshold in (0, 1].
    pub tau: f64,
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BcqConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            gamma: 0.99,
            tau: 0.3,
            rho: 0.005,
            lr: 3e-4,
            batch_size: 256,
        }
    }
}

/// Flat transition table extracted from a store for offline training.
#[derive(Debug, Clone)]
pub struct OfflineTransitions {
    pub dim: usize,
    pub num_actions: usize,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub len: usize,
}

pub fn transitions_from_store(
    store: &TrajStore,
    filter: ConditionFilter,
) -> Result<OfflineTransitions> {
    let mut out: Option<OfflineTransitions> = None;
    for traj in store.iter().filter(|t| filter.matches(t)) {
        let scn = &traj.scenario;
        let dim = state_feature_dim(scn);
        let table = out.get_or_insert_with(|| OfflineTransitions {
            dim,
            num_actions: 2 * scn.num_users,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            len: 0,
        });
        if table.dim != dim || table.num_actions != 2 * scn.num_users {
            return Err(Error::Config(
                "selection mixes incompatible user/base-station counts".into(),
            ));
        }
        for (t, action) in traj.actions.iter().enumerate() {
            table.states.extend(state_features(scn, &traj.states[t]));
            table.actions.push(action.to_index());
            table.rewards.push(traj.rewards[t]);
            table
                .next_states
                .extend(state_features(scn, &traj.states[t + 1]));
            table.len += 1;
        }
    }
    out.ok_or_else(|| Error::EmptySelection(format!("no trajectories match {filter}")))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BcqLosses {
    pub q: f64,
    pub behavior: f64,
}

#[derive(Debug, Clone)]
pub struct BcqAgent {
    pub q: MlpNetwork,
    pub q_target: MlpNetwork,
    pub behavior: MlpNetwork,
    pub config: BcqConfig,
    opt_q: Adam,
    opt_g: Adam,
    num_actions: usize,
    state_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BcqMeta {
    config: BcqConfig,
    state_dim: usize,
    num_actions: usize,
}

impl BcqAgent {
    pub fn new(state_dim: usize, num_actions: usize, config: BcqConfig, seed: u64) -> Result<Self> {
        if !(config.tau > 0.0 && config.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1], got {}",
                config.tau
            )));
        }
        let mut rng = stream_rng(seed, "bcq-init");
        let q = MlpNetwork::mlp(
            state_dim,
            &config.hidden,
            num_actions,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let behavior = MlpNetwork::mlp(
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
            opt_q: Adam::new(&q, adam, "bcq q"),
            opt_g: Adam::new(&behavior, adam, "bcq behavior"),
            q_target: q.clone(),
            q,
            behavior,
            config,
            num_actions,
            state_dim,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Actions whose behavior-probability ratio clears tau.
    pub fn eligible_actions(&self, state: &[f64]) -> Vec<bool> {
        let probs = softmax(&self.behavior.forward_one(state));
        eligibility(&probs, self.config.tau)
    }

    /// Argmax of Q over the filtered action set, lowest index on ties. The
    /// behavior-mode action always survives the filter, and the chosen
    /// action's ratio is re-checked before returning.
    pub fn act(&self, state: &[f64]) -> usize {
        let probs = softmax(&self.behavior.forward_one(state));
        let keep = eligibility(&probs, self.config.tau);
        let q = self.q.forward_one(state);
        let mut best: Option<usize> = None;
        for a in 0..self.num_actions {
            if keep[a] && best.is_none_or(|b| q[a] > q[b]) {
                best = Some(a);
            }
        }
        let a = best.expect("behavior argmax is always eligible");
        let max_p = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            probs[a] / max_p >= self.config.tau,
            "filter soundness violated: ratio {} < tau {}",
            probs[a] / max_p,
            self.config.tau
        );
        a
    }

    /// Bootstrap targets: a* maximizes main-net Q over actions eligible at
    /// the next state; the target net evaluates it.
    pub fn targets(&self, batch: &BcqBatch) -> Result<Vec<f64>> {
        let b = batch.len;
        let a = self.num_actions;
        let g_next = self.behavior.forward(&batch.next_states, b);
        let q_next = self.q.forward(&batch.next_states, b);
        let qt_next = self.q_target.forward(&batch.next_states, b);
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let probs = softmax(&g_next[i * a..(i + 1) * a]);
            let keep = eligibility(&probs, self.config.tau);
            let mut star: Option<usize> = None;
            for j in 0..a {
                if keep[j] && star.is_none_or(|s| q_next[i * a + j] > q_next[i * a + s]) {
                    star = Some(j);
                }
            }
            let star = star.expect("behavior argmax is always eligible");
            let y = batch.rewards[i] + self.config.gamma * qt_next[i * a + star];
            if !y.is_finite() {
                return Err(Error::Divergence(format!(
                    "bcq target non-finite at batch row {i}: r={}",
                    batch.rewards[i]
                )));
            }
            out.push(y);
        }
        Ok(out)
    }

    pub fn update(&mut self, batch: &BcqBatch) -> Result<BcqLosses> {
        let b = batch.len;
        let a = self.num_actions;
        let targets = self.targets(batch)?;

        let trace = self.q.forward_trace(&batch.states, b);
        let mut grad = vec![0.0; b * a];
        let mut q_loss = 0.0;
        for i in 0..b {
            let q = trace.output[i * a + batch.actions[i]];
            let err = q - targets[i];
            q_loss += err * err;
            grad[i * a + batch.actions[i]] = 2.0 * err / b as f64;
        }
        q_loss /= b as f64;
        let (grads, _) = self.q.backward(&trace, &grad);
        self.opt_q.step(&mut self.q, &grads)?;

        let trace = self.behavior.forward_trace(&batch.states, b);
        let mut grad = vec![0.0; b * a];
        let mut g_loss = 0.0;
        for i in 0..b {
            let (loss, g) = softmax_cross_entropy(&trace.output[i * a..(i + 1) * a], batch.actions[i]);
            g_loss += loss;
            for j in 0..a {
                grad[i * a + j] = g[j] / b as f64;
            }
        }
        g_loss /= b as f64;
        let (grads, _) = self.behavior.backward(&trace, &grad);
        self.opt_g.step(&mut self.behavior, &grads)?;

        soft_update(&mut self.q_target, &self.q, self.config.rho);
        Ok(BcqLosses {
            q: q_loss,
            behavior: g_loss,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.q, &dir.join("q.ckpt"))?;
        checkpoint::save(&self.q_target, &dir.join("q_target.ckpt"))?;
        checkpoint::save(&self.behavior, &dir.join("behavior.ckpt"))?;
        let meta = BcqMeta {
            config: self.config.clone(),
            state_dim: self.state_dim,
            num_actions: self.num_actions,
        };
        let text = toml::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("bcq.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("bcq.toml");
        let text = std::fs::read_to_string(&meta_path)?;
        let meta: BcqMeta = toml::from_str(&text)
            .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;
        let q = checkpoint::load(&dir.join("q.ckpt"))?;
        let q_target = checkpoint::load(&dir.join("q_target.ckpt"))?;
        let behavior = checkpoint::load(&dir.join("behavior.ckpt"))?;
        let adam = AdamConfig {
            lr: meta.config.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            opt_q: Adam::new(&q, adam, "bcq q"),
            opt_g: Adam::new(&behavior, adam, "bcq behavior"),
            q,
            q_target,
            behavior,
            config: meta.config,
            num_actions: meta.num_actions,
            state_dim: meta.state_dim,
        })
    }
}

fn eligibility(probs: &[f64], tau: f64) -> Vec<bool> {
    let max_p = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    probs.iter().map(|&p| p / max_p >= tau).collect()
}

#[derive(Debug)]
pub struct BcqBatch {
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub len: usize,
}

impl OfflineTransitions {
    /// Uniform without-replacement batch by partial Fisher-Yates.
    pub fn sample_batch<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<BcqBatch> {
        if batch == 0 || batch > self.len {
            return Err(Error::Contract(format!(
                "batch {batch} from {} transitions",
                self.len
            )));
        }
        let mut indices: Vec<usize> = (0..self.len).collect();
        let mut out = BcqBatch {
            states: Vec::with_capacity(batch * self.dim),
            actions: Vec::with_capacity(batch),
            rewards: Vec::with_capacity(batch),
            next_states: Vec::with_capacity(batch * self.dim),
            len: batch,
        };
        for k in 0..batch {
            let pick = rng.gen_range(k..indices.len());
            indices.swap(k, pick);
            let i = indices[k];
            out.states
                .extend_from_slice(&self.states[i * self.dim..(i + 1) * self.dim]);
            out.actions.push(self.actions[i]);
            out.rewards.push(self.rewards[i]);
            out.next_states
                .extend_from_slice(&self.next_states[i * self.dim..(i + 1) * self.dim]);
        }
        Ok(out)
    }
}

/// Offline training from a store selection.
pub fn train(
    config: &BcqConfig,
    store: &TrajStore,
    filter: ConditionFilter,
    steps: u64,
    seed: u64,
) -> Result<(BcqAgent, Vec<BcqLosses>)> {
    let table = transitions_from_store(store, filter)?;
    let mut agent = BcqAgent::new(table.dim, table.num_actions, config.clone(), seed)?;
    let mut rng = stream_rng(seed, "bcq-batch");
    let batch_size = config.batch_size.min(table.len);
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = table.sample_batch(batch_size, &mut rng)?;
        losses.push(agent.update(&batch)?);
    }
    Ok((agent, losses))
}

pub fn greedy_return(agent: &BcqAgent, scn: &NetworkScenario, horizon: usize) -> Result<f64> {
    let mut runner = EpisodeRunner::new(
        scn.clone(),
        PowerAllocation::zeros(scn.num_users),
        horizon,
    )?;
    let mut total = 0.0;
    while !runner.done() {
        let feats = state_features(scn, &runner.state);
        let a = agent.act(&feats);
        let action = AdjustAction::from_index(a, scn.num_users)?;
        total += runner.step(action)?.reward;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_scenario, ScenarioRanges};
    use crate::sac::{export_dataset, run_episode, ActMode, SacAgent, SacConfig};

    fn pin_outputs(net: &mut MlpNetwork, values: &[f64]) {
        net.zero_last_layer();
        net.layers.last_mut().unwrap().bias.copy_from_slice(values);
    }

    fn hand_agent(q: &[f64], g_logits: &[f64], tau: f64) -> BcqAgent {
        let config = BcqConfig {
            hidden: vec![8],
            tau,
            ..BcqConfig::default()
        };
        let mut agent = BcqAgent::new(2, q.len(), config, 1).unwrap();
        pin_outputs(&mut agent.q, q);
        pin_outputs(&mut agent.behavior, g_logits);
        agent
    }

    #[test]
    fn uniform_behavior_keeps_all_actions() {
        let agent = hand_agent(&[5.0, 1.0], &[0.0, 0.0], 0.5);
        assert_eq!(agent.eligible_actions(&[0.0, 0.0]), vec![true, true]);
        assert_eq!(agent.act(&[0.0, 0.0]), 0);
    }

    #[test]
    fn filter_excludes_rare_action_despite_higher_q() {
        // G = (0.99, 0.01): ratio of action 1 is ~0.0101 < 0.5.
        let g_logits = [0.99f64.ln(), 0.01f64.ln()];
        let agent = hand_agent(&[1.0, 5.0], &g_logits, 0.5);
        assert_eq!(agent.eligible_actions(&[0.0, 0.0]), vec![true, false]);
        assert_eq!(agent.act(&[0.0, 0.0]), 0);
    }

    #[test]
    fn tau_one_degenerates_to_behavior_cloning() {
        // Q prefers action 2; behavior mode is action 1; tau = 1 keeps only
        // the mode.
        let g_logits = [0.0, 2.0, -1.0, 0.5];
        let agent = hand_agent(&[0.0, 0.0, 9.0, 0.0], &g_logits, 1.0);
        assert_eq!(agent.act(&[0.0, 0.0]), 1);
        assert_eq!(
            agent.eligible_actions(&[0.0, 0.0]),
            vec![false, true, false, false]
        );
    }

    #[test]
    fn tiny_tau_reduces_to_plain_q_learning_targets() {
        let config = BcqConfig {
            hidden: vec![8],
            tau: 1e-12,
            gamma: 0.9,
            ..BcqConfig::default()
        };
        let mut agent = BcqAgent::new(2, 3, config, 2).unwrap();
        pin_outputs(&mut agent.q, &[1.0, 7.0, 3.0]);
        pin_outputs(&mut agent.q_target, &[10.0, 20.0, 30.0]);
        pin_outputs(&mut agent.behavior, &[5.0, 0.0, 0.0]);
        let batch = BcqBatch {
            states: vec![0.0; 2],
            actions: vec![0],
            rewards: vec![2.0],
            next_states: vec![0.0; 2],
            len: 1,
        };
        // Unfiltered argmax of main Q is action 1; target net scores it 20.
        let y = agent.targets(&batch).unwrap();
        assert!((y[0] - (2.0 + 0.9 * 20.0)).abs() < 1e-12);
    }

    #[test]
    fn act_matches_independent_rule_reimplementation() {
        let ranges = ScenarioRanges {
            num_users: 2,
            num_base_stations: 1,
            power_levels: 6,
            ..ScenarioRanges::default()
        };
        let store = small_dataset(&ranges, 12, 8);
        let (agent, _) = train(&BcqConfig {
            hidden: vec![16],
            batch_size: 32,
            ..BcqConfig::default()
        }, &store, ConditionFilter::default(), 200, 3)
        .unwrap();
        let scn = sample_scenario(&ranges, 77).unwrap();
        let mut rng = stream_rng(5, "probe");
        for _ in 0..50 {
            let p = PowerAllocation {
                levels: (0..2).map(|_| rng.gen_range(0..=6)).collect(),
            };
            let feats = state_features(&scn, &p);
            let probs = softmax(&agent.behavior.forward_one(&feats));
            let maxp = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let q = agent.q.forward_one(&feats);
            let mut expect: Option<usize> = None;
            for a in 0..4 {
                if probs[a] / maxp >= agent.config.tau
                    && expect.is_none_or(|b| q[a] > q[b])
                {
                    expect = Some(a);
                }
            }
            assert_eq!(agent.act(&feats), expect.unwrap());
            // Determinism.
            assert_eq!(agent.act(&feats), agent.act(&feats));
        }
    }

    fn small_dataset(ranges: &ScenarioRanges, episodes: u64, horizon: usize) -> TrajStore {
        // Uniform-policy episodes: a freshly initialized agent acts uniformly.
        let scn = sample_scenario(ranges, 10).unwrap();
        let agent = SacAgent::new(
            state_feature_dim(&scn),
            2 * scn.num_users,
            SacConfig {
                hidden: vec![8],
                ..SacConfig::default()
            },
            0,
        )
        .unwrap();
        let mut rng = stream_rng(11, "bcq-data");
        let eps: Vec<_> = (0..episodes)
            .map(|_| {
                run_episode(&agent, &scn, horizon, ActMode::Stochastic, &mut rng, |_, _| {})
                    .unwrap()
            })
            .collect();
        export_dataset(&eps).unwrap()
    }

    #[test]
    fn losses_fall_on_a_skewed_bandit_dataset() {
        // One state, two actions, deterministic rewards; behavior 75/25.
        let config = BcqConfig {
            hidden: vec![16],
            gamma: 0.0,
            tau: 0.3,
            lr: 3e-3,
            batch_size: 32,
            ..BcqConfig::default()
        };
        let mut agent = BcqAgent::new(1, 2, config, 4).unwrap();
        let mut rng = stream_rng(6, "bandit-bcq");
        let mut first_window = (0.0, 0.0);
        let mut last_window = (0.0, 0.0);
        let rounds = 600;
        for round in 0..rounds {
            let mut batch = BcqBatch {
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                next_states: Vec::new(),
                len: 32,
            };
            for _ in 0..32 {
                let a = usize::from(rng.gen_range(0..4) == 0);
                batch.states.push(0.0);
                batch.actions.push(a);
                batch.rewards.push(if a == 0 { 1.0 } else { 0.0 });
                batch.next_states.push(0.0);
            }
            let losses = agent.update(&batch).unwrap();
            if round < 50 {
                first_window.0 += losses.q;
                first_window.1 += losses.behavior;
            }
            if round >= rounds - 50 {
                last_window.0 += losses.q;
                last_window.1 += losses.behavior;
            }
        }
        assert!(last_window.0 < first_window.0, "q loss did not fall");
        assert!(last_window.1 < first_window.1, "behavior loss did not fall");
        // Behavior net should have learned the 75/25 mix.
        let probs = softmax(&agent.behavior.forward_one(&[0.0]));
        assert!((probs[0] - 0.75).abs() < 0.1, "behavior probs {probs:?}");
    }

    #[test]
    fn save_load_round_trip_preserves_decisions() {
        let ranges = ScenarioRanges {
            num_users: 2,
            num_base_stations: 1,
            power_levels: 6,
            ..ScenarioRanges::default()
        };
        let store = small_dataset(&ranges, 6, 6);
        let (agent, _) = train(
            &BcqConfig {
                hidden: vec![8],
                batch_size: 16,
                ..BcqConfig::default()
            },
            &store,
            ConditionFilter::default(),
            50,
            7,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("bcq-test");
        agent.save(&dir).unwrap();
        let back = BcqAgent::load(&dir).unwrap();
        let scn = sample_scenario(&ranges, 10).unwrap();
        for levels in [[0, 0], [3, 2], [6, 6]] {
            let feats = state_features(
                &scn,
                &PowerAllocation {
                    levels: levels.to_vec(),
                },
            );
            assert_eq!(agent.act(&feats), back.act(&feats));
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
