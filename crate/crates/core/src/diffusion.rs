//! Conditional trajectory diffusion. The model diffuses over normalized
//! state-sequence windows only; actions are recovered afterwards by a
//! learned inverse-dynamics head on consecutive state pairs. Conditioning
//! is classifier-free: labels are dropped during training with probability
//! p_drop, and sampling blends conditional and null predictions with a
//! guidance weight. The first state slot is re-inpainted with the clean
//! initial state at every denoising step.

use crate::env::{
    canonical_action, AdjustAction, EpisodeRunner, NetworkScenario, PowerAllocation,
};
use crate::error::{Error, Result};
use crate::features::{env_summary_features, ENV_FEATURE_DIM};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::checkpoint;
use crate::nn::{sinusoidal_embedding, softmax_cross_entropy, Activation, MlpNetwork};
use crate::rng::{indexed_rng, stream_rng};
use crate::sac::{argmax_lowest, CollectedEpisode};
use crate::store::{ConditionFilter, LabelLayout, TrajStore, WindowRef};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub k_steps: usize,
    /// betas[k-1] is the step-k variance; alpha_bars[k] the cumulative
    /// product, with alpha_bars[0] = 1 exactly.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine cumulative schedule with the usual 0.008 offset; betas are
    /// clipped to 0.999 and alpha_bars rebuilt from the clipped alphas so
    /// the two arrays stay consistent.
    pub fn cosine(k_steps: usize) -> Result<Self> {
        if k_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let s = 0.008;
        let f = |t: f64| ((t / k_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2);
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(k_steps);
        let mut prev = 1.0;
        for k in 1..=k_steps {
            let bar = f(k as f64) / f0;
            let beta = (1.0 - bar / prev).clamp(1e-8, 0.999);
            betas.push(beta);
            prev = bar;
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let schedule = Self {
            k_steps,
            betas,
            alphas,
            alpha_bars,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != self.k_steps
            || self.alphas.len() != self.k_steps
            || self.alpha_bars.len() != self.k_steps + 1
        {
            return Err(Error::Contract("schedule array lengths are inconsistent".into()));
        }
        if self.alpha_bars[0] != 1.0 {
            return Err(Error::Contract("alpha_bar at step 0 must be exactly 1".into()));
        }
        if self.betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::Contract("betas must lie in (0, 1)".into()));
        }
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Contract("alpha_bar must be strictly decreasing".into()));
        }
        Ok(())
    }

    /// Posterior variance of the reverse step at k.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        (1.0 - self.alpha_bars[k - 1]) / (1.0 - self.alpha_bars[k]) * self.betas[k - 1]
    }
}

/// Closed-form marginal x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.
/// k = 0 is the identity by the alpha_bar[0] = 1 convention.
pub fn forward_noise<R: Rng>(
    schedule: &NoiseSchedule,
    x0: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k > schedule.k_steps {
        return Err(Error::Contract(format!(
            "diffusion step {k} out of range 0..={}",
            schedule.k_steps
        )));
    }
    if k == 0 {
        return Ok(x0.to_vec());
    }
    let scale = schedule.alpha_bars[k].sqrt();
    let sigma = (1.0 - schedule.alpha_bars[k]).sqrt();
    Ok(x0
        .iter()
        .map(|&v| {
            let eps: f64 = StandardNormal.sample(rng);
            scale * v + sigma * eps
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub k_steps: usize,
    /// States per window; a full-trajectory window is horizon + 1.
    pub window: usize,
    pub hidden: Vec<usize>,
    pub invdyn_hidden: Vec<usize>,
    pub p_drop: f64,
    pub guidance_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub step_embed_dim: usize,
    pub holdout_fraction: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            k_steps: 50,
            window: 9,
            hidden: vec![256, 256],
            invdyn_hidden: vec![128, 128],
            p_drop: 0.25,
            guidance_weight: 1.2,
            lr: 3e-4,
            batch_size: 128,
            step_embed_dim: 16,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DiffusionMeta {
    config: DiffusionConfig,
    layout: LabelLayout,
    num_users: usize,
}

#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: MlpNetwork,
    pub invdyn: MlpNetwork,
    pub config: DiffusionConfig,
    pub layout: LabelLayout,
    pub num_users: usize,
}

pub fn normalize_level(level: f64, power_levels: u32) -> f64 {
    level / power_levels as f64 * 2.0 - 1.0
}

pub fn denormalize_level(x: f64, power_levels: u32) -> f64 {
    (x + 1.0) / 2.0 * power_levels as f64
}

pub fn round_to_grid(x: f64, power_levels: u32) -> u32 {
    denormalize_level(x, power_levels)
        .round()
        .clamp(0.0, power_levels as f64) as u32
}

fn normalized_state(p: &PowerAllocation, power_levels: u32) -> Vec<f64> {
    p.levels
        .iter()
        .map(|&l| normalize_level(l as f64, power_levels))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratedPlan {
    /// Real-valued power levels per window slot, already denormalized; the
    /// first row is the exact integer initial state.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<AdjustAction>,
    /// Return of applying the decoded actions open-loop; the environment is
    /// deterministic, so this equals the realized value.
    pub predicted_return: f64,
}

#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    /// (k, x after the step's inpainting), from k = K down to 0.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub holdout_initial: f64,
    pub holdout_final: f64,
    pub curve: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvdynReport {
    pub steps: u64,
    pub final_loss: f64,
    pub accuracy: f64,
}

pub struct ExecutionOutcome {
    pub episode: CollectedEpisode,
    pub final_utility: f64,
}

impl DiffusionModel {
    pub fn new(
        layout: LabelLayout,
        num_users: usize,
        config: DiffusionConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.window < 2 {
            return Err(Error::Config("window must hold at least two states".into()));
        }
        if !(0.0..=1.0).contains(&config.p_drop) {
            return Err(Error::Config("p_drop must lie in [0, 1]".into()));
        }
        let schedule = NoiseSchedule::cosine(config.k_steps)?;
        let x_dim = config.window * num_users;
        let in_dim = x_dim + config.step_embed_dim + layout.width();
        let mut rng = stream_rng(seed, "diffusion-init");
        let mut denoiser = MlpNetwork::mlp(
            in_dim,
            &config.hidden,
            x_dim,
            Activation::Silu,
            Activation::Identity,
            &mut rng,
        )?;
        // Condition columns start at zero: an untrained (or never-trained,
        // at p_drop = 1) model predicts identically for any label.
        denoiser.zero_first_layer_columns(x_dim + config.step_embed_dim..in_dim);
        let invdyn = MlpNetwork::mlp(
            2 * num_users + ENV_FEATURE_DIM,
            &config.invdyn_hidden,
            2 * num_users,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self {
            schedule,
            denoiser,
            invdyn,
            config,
            layout,
            num_users,
        })
    }

    fn x_dim(&self) -> usize {
        self.config.window * self.num_users
    }

    fn denoiser_input(&self, x: &[f64], k: usize, y: Option<&[f64]>) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.denoiser.in_dim());
        input.extend_from_slice(x);
        input.extend(sinusoidal_embedding(k, self.config.step_embed_dim));
        match y {
            Some(label) => input.extend_from_slice(label),
            None => input.extend(std::iter::repeat_n(0.0, self.layout.width())),
        }
        input
    }

    /// Noise prediction; `None` is the null condition token.
    pub fn epsilon(&self, x: &[f64], k: usize, y: Option<&[f64]>) -> Vec<f64> {
        self.denoiser.forward_one(&self.denoiser_input(x, k, y))
    }

    /// Classifier-free guidance. The w = 0 and w = 1 cases return the
    /// unconditional and conditional predictions verbatim rather than
    /// through the blend, so those identities hold bitwise.
    pub fn guided_epsilon(&self, x: &[f64], k: usize, y: &[f64]) -> Vec<f64> {
        let w = self.config.guidance_weight;
        if w == 0.0 {
            return self.epsilon(x, k, None);
        }
        if w == 1.0 {
            return self.epsilon(x, k, Some(y));
        }
        let uncond = self.epsilon(x, k, None);
        let cond = self.epsilon(x, k, Some(y));
        uncond
            .iter()
            .zip(&cond)
            .map(|(u, c)| u + w * (c - u))
            .collect()
    }

    fn check_label(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.layout.width() {
            return Err(Error::Contract(format!(
                "label has width {}, layout expects {}",
                y.len(),
                self.layout.width()
            )));
        }
        Ok(())
    }

    /// Normalized x0 window for a window reference.
    fn window_x0(&self, store: &TrajStore, w: WindowRef) -> Vec<f64> {
        let traj = store.get(w.traj_index);
        let pmax = traj.scenario.power_levels;
        let mut out = Vec::with_capacity(self.x_dim());
        for t in w.start..w.start + self.config.window {
            out.extend(normalized_state(&traj.states[t], pmax));
        }
        out
    }

    /// Epsilon-matching training with condition dropout. Holdout windows
    /// are split off first and scored with frozen noise so the reported
    /// losses are comparable across evaluations.
    pub fn train(
        &mut self,
        store: &TrajStore,
        filter: ConditionFilter,
        steps: u64,
        seed: u64,
    ) -> Result<TrainReport> {
        let mut windows = store.eligible_windows(filter, self.config.window);
        if windows.is_empty() {
            return Err(Error::Unsatisfiable(format!(
                "{filter} with window {}",
                self.config.window
            )));
        }
        for w in &windows {
            let scn = &store.get(w.traj_index).scenario;
            if scn.num_users != self.num_users {
                return Err(Error::Config(
                    "selection mixes user counts; filter on one user count per model".into(),
                ));
            }
        }
        let mut rng = stream_rng(seed, "diffusion-train");
        // Deterministic shuffle, then split.
        for i in (1..windows.len()).rev() {
            windows.swap(i, rng.gen_range(0..=i));
        }
        let holdout_n = ((windows.len() as f64 * self.config.holdout_fraction) as usize)
            .min(windows.len() - 1);
        let (holdout, training) = windows.split_at(holdout_n);
        let labels: Vec<Vec<f64>> = (0..store.len())
            .map(|i| store.get(i).label.encode(&self.layout))
            .collect();

        let mut opt = Adam::new(
            &self.denoiser,
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            "denoiser",
        );
        let holdout_initial = self.holdout_loss(store, holdout, &labels, seed);
        let mut curve = Vec::new();
        let b = self.config.batch_size;
        let x_dim = self.x_dim();
        let in_dim = self.denoiser.in_dim();
        for step in 0..steps {
            let mut input = Vec::with_capacity(b * in_dim);
            let mut target = Vec::with_capacity(b * x_dim);
            for _ in 0..b {
                let w = training[rng.gen_range(0..training.len())];
                let x0 = self.window_x0(store, w);
                let k = rng.gen_range(1..=self.schedule.k_steps);
                let scale = self.schedule.alpha_bars[k].sqrt();
                let sigma = (1.0 - self.schedule.alpha_bars[k]).sqrt();
                let mut xk = Vec::with_capacity(x_dim);
                for &v in &x0 {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    xk.push(scale * v + sigma * eps);
                    target.push(eps);
                }
                let dropped = self.config.p_drop > 0.0 && rng.gen_range(0.0..1.0) < self.config.p_drop;
                let y = (!dropped).then_some(labels[w.traj_index].as_slice());
                input.extend(self.denoiser_input(&xk, k, y));
            }
            let trace = self.denoiser.forward_trace(&input, b);
            let mut grad = vec![0.0; b * x_dim];
            let mut loss = 0.0;
            let scale = 1.0 / (b * x_dim) as f64;
            for (i, g) in grad.iter_mut().enumerate() {
                let err = trace.output[i] - target[i];
                loss += err * err;
                *g = 2.0 * err * scale;
            }
            loss *= scale;
            let (grads, _) = self.denoiser.backward(&trace, &grad);
            opt.step(&mut self.denoiser, &grads)?;
            if step % 200 == 0 || step + 1 == steps {
                curve.push((step, loss));
            }
        }
        let holdout_final = self.holdout_loss(store, holdout, &labels, seed);
        Ok(TrainReport {
            steps,
            holdout_initial,
            holdout_final,
            curve,
        })
    }

    /// Mean epsilon loss over fixed (window, k, noise) triples.
    fn holdout_loss(
        &self,
        store: &TrajStore,
        holdout: &[WindowRef],
        labels: &[Vec<f64>],
        seed: u64,
    ) -> f64 {
        if holdout.is_empty() {
            return f64::NAN;
        }
        let x_dim = self.x_dim();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &w) in holdout.iter().enumerate() {
            let mut rng = indexed_rng(seed, "diffusion-holdout", i as u64);
            let x0 = self.window_x0(store, w);
            let k = 1 + i % self.schedule.k_steps;
            let scale = self.schedule.alpha_bars[k].sqrt();
            let sigma = (1.0 - self.schedule.alpha_bars[k]).sqrt();
            let mut xk = Vec::with_capacity(x_dim);
            let mut eps = Vec::with_capacity(x_dim);
            for &v in &x0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                xk.push(scale * v + sigma * e);
                eps.push(e);
            }
            let pred = self.epsilon(&xk, k, Some(&labels[w.traj_index]));
            total += pred
                .iter()
                .zip(&eps)
                .map(|(p, e)| (p - e) * (p - e))
                .sum::<f64>();
            count += x_dim;
        }
        total / count as f64
    }

    /// Inverse-dynamics training. Targets are canonical actions: the lowest
    /// action index reproducing each stored transition, which resolves
    /// clamp no-op ties deterministically.
    pub fn train_invdyn(
        &mut self,
        store: &TrajStore,
        filter: ConditionFilter,
        steps: u64,
        seed: u64,
    ) -> Result<InvdynReport> {
        let (inputs, targets) = self.invdyn_table(store, filter)?;
        let n = targets.len();
        let dim = self.invdyn.in_dim();
        let a_dim = self.invdyn.out_dim();
        let mut rng = stream_rng(seed, "invdyn-train");
        let mut opt = Adam::new(
            &self.invdyn,
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            "inverse dynamics",
        );
        let b = self.config.batch_size.min(n);
        let mut final_loss = f64::NAN;
        for _ in 0..steps {
            let mut input = Vec::with_capacity(b * dim);
            let mut batch_targets = Vec::with_capacity(b);
            for _ in 0..b {
                let i = rng.gen_range(0..n);
                input.extend_from_slice(&inputs[i * dim..(i + 1) * dim]);
                batch_targets.push(targets[i]);
            }
            let trace = self.invdyn.forward_trace(&input, b);
            let mut grad = vec![0.0; b * a_dim];
            let mut loss = 0.0;
            for i in 0..b {
                let (l, g) = softmax_cross_entropy(
                    &trace.output[i * a_dim..(i + 1) * a_dim],
                    batch_targets[i],
                );
                loss += l;
                for (j, gv) in g.iter().enumerate() {
                    grad[i * a_dim + j] = gv / b as f64;
                }
            }
            final_loss = loss / b as f64;
            let (grads, _) = self.invdyn.backward(&trace, &grad);
            opt.step(&mut self.invdyn, &grads)?;
        }
        let accuracy = self.invdyn_accuracy_on(&inputs, &targets);
        Ok(InvdynReport {
            steps,
            final_loss,
            accuracy,
        })
    }

    fn invdyn_table(
        &self,
        store: &TrajStore,
        filter: ConditionFilter,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for traj in store.iter().filter(|t| filter.matches(t)) {
            let scn = &traj.scenario;
            if scn.num_users != self.num_users {
                return Err(Error::Config(
                    "selection mixes user counts; filter on one user count per model".into(),
                ));
            }
            let env = env_summary_features(scn);
            for t in 0..traj.actions.len() {
                let a = canonical_action(scn, &traj.states[t], &traj.states[t + 1])
                    .expect("stored transitions are reachable by construction");
                inputs.extend(normalized_state(&traj.states[t], scn.power_levels));
                inputs.extend(normalized_state(&traj.states[t + 1], scn.power_levels));
                inputs.extend_from_slice(&env);
                targets.push(a);
            }
        }
        if targets.is_empty() {
            return Err(Error::Unsatisfiable(format!("{filter} for inverse dynamics")));
        }
        Ok((inputs, targets))
    }

    fn invdyn_accuracy_on(&self, inputs: &[f64], targets: &[usize]) -> f64 {
        let dim = self.invdyn.in_dim();
        let mut hits = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            let logits = self
                .invdyn
                .forward_one(&inputs[i * dim..(i + 1) * dim]);
            if argmax_lowest(&logits) == t {
                hits += 1;
            }
        }
        hits as f64 / targets.len() as f64
    }

    pub fn dataset_invdyn_accuracy(
        &self,
        store: &TrajStore,
        filter: ConditionFilter,
    ) -> Result<f64> {
        let (inputs, targets) = self.invdyn_table(store, filter)?;
        Ok(self.invdyn_accuracy_on(&inputs, &targets))
    }

    /// Predicts the action between two normalized states.
    pub fn decode_action(&self, s_from: &[f64], s_to: &[f64], env: &[f64]) -> usize {
        let mut input = Vec::with_capacity(self.invdyn.in_dim());
        input.extend_from_slice(s_from);
        input.extend_from_slice(s_to);
        input.extend_from_slice(env);
        argmax_lowest(&self.invdyn.forward_one(&input))
    }

    pub fn sample_plan(
        &self,
        scn: &NetworkScenario,
        initial: &PowerAllocation,
        y: &[f64],
        seed: u64,
    ) -> Result<GeneratedPlan> {
        Ok(self.sample_plan_traced(scn, initial, y, seed)?.0)
    }

    /// Ancestral sampling with first-slot inpainting; the trace holds x
    /// after each step for inspection and plotting.
    pub fn sample_plan_traced(
        &self,
        scn: &NetworkScenario,
        initial: &PowerAllocation,
        y: &[f64],
        seed: u64,
    ) -> Result<(GeneratedPlan, DenoiseTrace)> {
        self.check_label(y)?;
        if scn.num_users != self.num_users {
            return Err(Error::Contract(format!(
                "scenario has {} users, model expects {}",
                scn.num_users, self.num_users
            )));
        }
        initial.validate(scn)?;
        let x_dim = self.x_dim();
        let users = self.num_users;
        let clean_first = normalized_state(initial, scn.power_levels);
        let mut rng = stream_rng(seed, "diffusion-sample");
        let mut x: Vec<f64> = (0..x_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        x[..users].copy_from_slice(&clean_first);
        let mut snapshots = vec![(self.schedule.k_steps, x.clone())];
        for k in (1..=self.schedule.k_steps).rev() {
            let eps = self.guided_epsilon(&x, k, y);
            let alpha = self.schedule.alphas[k - 1];
            let beta = self.schedule.betas[k - 1];
            let bar = self.schedule.alpha_bars[k];
            let bar_prev = self.schedule.alpha_bars[k - 1];
            // Posterior mean over the predicted clean window, with the
            // prediction clamped to the data support [-1, 1]. Unclamped this
            // is algebraically the usual epsilon-form update; the clamp stops
            // prediction error from compounding into unbounded states.
            let c0 = bar_prev.sqrt() * beta / (1.0 - bar);
            let ck = alpha.sqrt() * (1.0 - bar_prev) / (1.0 - bar);
            let sigma = if k > 1 {
                self.schedule.posterior_variance(k).sqrt()
            } else {
                0.0
            };
            for i in 0..x_dim {
                let x0_hat =
                    ((x[i] - (1.0 - bar).sqrt() * eps[i]) / bar.sqrt()).clamp(-1.0, 1.0);
                let mean = c0 * x0_hat + ck * x[i];
                let z: f64 = if k > 1 { StandardNormal.sample(&mut rng) } else { 0.0 };
                x[i] = mean + sigma * z;
            }
            x[..users].copy_from_slice(&clean_first);
            snapshots.push((k - 1, x.clone()));
        }
        // Denormalize; the first row is the exact integer initial state.
        let mut states = Vec::with_capacity(self.config.window);
        for t in 0..self.config.window {
            let row = &x[t * users..(t + 1) * users];
            states.push(if t == 0 {
                initial.levels.iter().map(|&l| l as f64).collect()
            } else {
                row.iter()
                    .map(|&v| denormalize_level(v, scn.power_levels))
                    .collect()
            });
        }
        let env = env_summary_features(scn);
        let mut actions = Vec::with_capacity(self.config.window - 1);
        for t in 0..self.config.window - 1 {
            let from = &x[t * users..(t + 1) * users];
            let to = &x[(t + 1) * users..(t + 2) * users];
            let a = self.decode_action(from, to, &env);
            actions.push(AdjustAction::from_index(a, users)?);
        }
        let outcome = execute_open_loop(scn, initial, &actions)?;
        Ok((
            GeneratedPlan {
                states,
                actions,
                predicted_return: outcome.episode.ret,
            },
            DenoiseTrace { snapshots },
        ))
    }

    /// Model-predictive execution: sample, act `replan_every` steps from the
    /// realized state, repeat until the horizon is spent.
    pub fn execute_replan(
        &self,
        scn: &NetworkScenario,
        initial: &PowerAllocation,
        y: &[f64],
        horizon: usize,
        replan_every: usize,
        seed: u64,
    ) -> Result<ExecutionOutcome> {
        if replan_every == 0 {
            return Err(Error::Contract("replan interval must be positive".into()));
        }
        let mut runner = EpisodeRunner::new(scn.clone(), initial.clone(), horizon)?;
        let mut states = vec![runner.state.clone()];
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut round = 0u64;
        while !runner.done() {
            let plan = self.sample_plan(
                scn,
                &runner.state,
                y,
                seed.wrapping_add(round.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            )?;
            round += 1;
            let take = replan_every
                .min(plan.actions.len())
                .min(horizon - runner.steps_taken());
            if take == 0 {
                break;
            }
            for &a in plan.actions.iter().take(take) {
                let step = runner.step(a)?;
                states.push(step.next_state.clone());
                actions.push(a);
                rewards.push(step.reward);
            }
        }
        let ret = rewards.iter().sum();
        Ok(ExecutionOutcome {
            final_utility: runner.current_utility(),
            episode: CollectedEpisode {
                scenario: scn.clone(),
                states,
                actions,
                rewards,
                ret,
            },
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.denoiser, &dir.join("denoiser.ckpt"))?;
        checkpoint::save(&self.invdyn, &dir.join("invdyn.ckpt"))?;
        let meta = DiffusionMeta {
            config: self.config.clone(),
            layout: self.layout.clone(),
            num_users: self.num_users,
        };
        let text = toml::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("diffusion.toml"), text)?;
        Ok(())
    }

    /// The schedule is a pure function of the stored step count, so it is
    /// rebuilt rather than persisted.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("diffusion.toml");
        let text = std::fs::read_to_string(&meta_path)?;
        let meta: DiffusionMeta = toml::from_str(&text)
            .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;
        let schedule = NoiseSchedule::cosine(meta.config.k_steps)?;
        let denoiser = checkpoint::load(&dir.join("denoiser.ckpt"))?;
        let invdyn = checkpoint::load(&dir.join("invdyn.ckpt"))?;
        let x_dim = meta.config.window * meta.num_users;
        let expect_in = x_dim + meta.config.step_embed_dim + meta.layout.width();
        if denoiser.in_dim() != expect_in || denoiser.out_dim() != x_dim {
            return Err(Error::format(
                dir.display().to_string(),
                format!(
                    "denoiser is {}->{}, metadata expects {}->{}",
                    denoiser.in_dim(),
                    denoiser.out_dim(),
                    expect_in,
                    x_dim
                ),
            ));
        }
        Ok(Self {
            schedule,
            denoiser,
            invdyn,
            config: meta.config,
            layout: meta.layout,
            num_users: meta.num_users,
        })
    }
}

/// Applies decoded actions in order; an empty plan leaves the initial state
/// untouched, so the final utility is U(initial).
pub fn execute_open_loop(
    scn: &NetworkScenario,
    initial: &PowerAllocation,
    actions: &[AdjustAction],
) -> Result<ExecutionOutcome> {
    let mut runner = EpisodeRunner::new(scn.clone(), initial.clone(), actions.len())?;
    let mut states = vec![runner.state.clone()];
    let mut rewards = Vec::with_capacity(actions.len());
    for &a in actions {
        let step = runner.step(a)?;
        states.push(step.next_state.clone());
        rewards.push(step.reward);
    }
    let ret = rewards.iter().sum();
    Ok(ExecutionOutcome {
        final_utility: runner.current_utility(),
        episode: CollectedEpisode {
            scenario: scn.clone(),
            states,
            actions: actions.to_vec(),
            rewards,
            ret,
        },
    })
}
