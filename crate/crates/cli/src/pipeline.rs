//! Verb implementations. Every verb reads one config, writes its artifacts
//! into the run directory, and finishes by writing a manifest naming every
//! input and output with a content hash.

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use anyhow::{bail, Context, Result};
use diffalloc_core::diffusion::{execute_open_loop, DiffusionModel, GeneratedPlan};
use diffalloc_core::env::{
    default_horizon, utility, NetworkScenario, PowerAllocation,
};
use diffalloc_core::features::env_summary_features;
use diffalloc_core::oracle;
use diffalloc_core::rng::stream_rng;
use diffalloc_core::sac::{self, SacAgent, SacTrainConfig, ScenarioSource};
use diffalloc_core::store::{ConditionFilter, ConditionLabel, TrajStore};
use diffalloc_core::{bcq, diffusion};
use rand::Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub config_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn load(config_path: &Path, out_dir: &Path) -> Result<Self> {
        let config_text = std::fs::read_to_string(config_path)
            .with_context(|| format!("invalid config: cannot read {}", config_path.display()))?;
        let config = ExperimentConfig::from_str(&config_text)?;
        let config_dir = config_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            config,
            config_text,
            config_dir,
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn manifest(&self, verb: &str) -> Manifest {
        Manifest::new(verb, self.config.root_seed, &self.config_text)
    }

    fn scenario_inputs(&self, manifest: &mut Manifest) -> Result<()> {
        if !self.config.scenario.paths.is_empty() {
            let (_, files) = self.config.load_scenarios(&self.config_dir)?;
            for (label, path) in self.config.scenario.paths.iter().zip(&files) {
                manifest.add_input(label, path)?;
            }
        }
        Ok(())
    }

    fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.jsonl")
    }

    fn load_dataset(&self) -> Result<TrajStore> {
        let path = self.dataset_path();
        require(&path, "collect")?;
        Ok(TrajStore::load(&path)?)
    }
}

/// Derives a verb-level seed from the root seed. Every stochastic verb gets
/// its own named substream, so verbs never share randomness.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    stream_rng(root, name).gen()
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing prerequisite artifact: {}; run `{produced_by}` first",
            path.display()
        );
    }
    Ok(())
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Stage 1: online SAC training with trajectory collection. Writes the
/// labeled dataset, the agent, and the training curve.
pub fn cmd_collect(ctx: &RunContext) -> Result<Manifest> {
    let cfg = &ctx.config;
    let (scenarios, _) = cfg.load_scenarios(&ctx.config_dir)?;
    let c = &cfg.collect;
    let tcfg = SacTrainConfig {
        episodes: c.episodes,
        horizon: c.horizon,
        eval_every_episodes: c.eval_every,
        eval_episodes: c.eval_episodes,
        final_greedy_episodes: c.final_greedy,
        random_init_fraction: c.random_init_fraction,
        seed: sub_seed(cfg.root_seed, "collect"),
    };
    let source = ScenarioSource::Fixed(scenarios.clone());
    let out = sac::train(&c.sac, &tcfg, &source, &scenarios)?;

    let store = sac::export_dataset(&out.episodes)?;
    let dataset_path = ctx.dataset_path();
    store.save(&dataset_path)?;
    let sac_dir = ctx.out_dir.join("sac");
    out.agent.save(&sac_dir)?;
    let curve_path = ctx.out_dir.join("sac_training.csv");
    let rows: Vec<Vec<String>> = out
        .curve
        .iter()
        .map(|p| {
            vec![
                p.episodes.to_string(),
                p.env_interactions.to_string(),
                p.updates.to_string(),
                fmt_f(p.mean_eval_return),
            ]
        })
        .collect();
    write_csv(
        &curve_path,
        "episodes,env_interactions,updates,mean_eval_return",
        &rows,
    )?;

    let metrics = store.compute_metrics(ConditionFilter::default())?;
    let mut manifest = ctx.manifest("collect");
    ctx.scenario_inputs(&mut manifest)?;
    manifest.metric("env_interactions", out.env_interactions as f64);
    manifest.metric("updates", out.updates as f64);
    if let Some(last) = out.curve.last() {
        manifest.metric("final_eval_return", last.mean_eval_return);
    }
    manifest.metric("tq", metrics.tq);
    manifest.metric("saco", metrics.saco as f64);
    manifest.metric("trajectories", metrics.size as f64);
    manifest.add_output(&ctx.out_dir, &dataset_path)?;
    manifest.add_output(&ctx.out_dir, &curve_path)?;
    manifest.add_output_dir(&ctx.out_dir, &sac_dir)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Stage 2a: conditional diffusion training, one model per user-count
/// bucket present in the dataset.
pub fn cmd_train_diffusion(ctx: &RunContext) -> Result<Manifest> {
    let store = ctx.load_dataset()?;
    let cfg = &ctx.config;
    let section = &cfg.diffusion;
    let counts = store.layout().user_counts.clone();
    let mut manifest = ctx.manifest("train-diffusion");
    manifest.add_input("dataset.jsonl", &ctx.dataset_path())?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for &users in &counts {
        let filter = ConditionFilter {
            user_count: Some(users),
            return_bucket: None,
        };
        let mut model = DiffusionModel::new(
            store.layout().clone(),
            users,
            section.model.clone(),
            sub_seed(cfg.root_seed, "diffusion-init").wrapping_add(users as u64),
        )?;
        let report = model.train(
            &store,
            filter,
            section.steps,
            sub_seed(cfg.root_seed, "diffusion").wrapping_add(users as u64),
        )?;
        let invdyn = model.train_invdyn(
            &store,
            filter,
            section.invdyn_steps,
            sub_seed(cfg.root_seed, "invdyn").wrapping_add(users as u64),
        )?;
        let dir = ctx.out_dir.join(format!("diffusion/u{users}"));
        model.save(&dir)?;
        manifest.add_output_dir(&ctx.out_dir, &dir)?;
        for (step, loss) in &report.curve {
            rows.push(vec![users.to_string(), step.to_string(), fmt_f(*loss)]);
        }
        manifest.metric(&format!("holdout_initial_u{users}"), report.holdout_initial);
        manifest.metric(&format!("holdout_final_u{users}"), report.holdout_final);
        manifest.metric(&format!("invdyn_accuracy_u{users}"), invdyn.accuracy);
        manifest.metric(&format!("invdyn_loss_u{users}"), invdyn.final_loss);
    }
    let curve_path = ctx.out_dir.join("diffusion_training.csv");
    write_csv(&curve_path, "user_count,step,train_loss", &rows)?;
    manifest.add_output(&ctx.out_dir, &curve_path)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Stage 2b: offline BCQ baseline, one agent per user-count bucket.
pub fn cmd_train_bcq(ctx: &RunContext) -> Result<Manifest> {
    let store = ctx.load_dataset()?;
    let cfg = &ctx.config;
    let section = &cfg.bcq;
    let counts = store.layout().user_counts.clone();
    let mut manifest = ctx.manifest("train-bcq");
    manifest.add_input("dataset.jsonl", &ctx.dataset_path())?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for &users in &counts {
        let filter = ConditionFilter {
            user_count: Some(users),
            return_bucket: None,
        };
        let (agent, losses) = bcq::train(
            &section.model,
            &store,
            filter,
            section.steps,
            sub_seed(cfg.root_seed, "bcq").wrapping_add(users as u64),
        )?;
        let dir = ctx.out_dir.join(format!("bcq/u{users}"));
        agent.save(&dir)?;
        manifest.add_output_dir(&ctx.out_dir, &dir)?;
        for (step, l) in losses.iter().enumerate() {
            if step % 100 == 0 || step + 1 == losses.len() {
                rows.push(vec![
                    users.to_string(),
                    step.to_string(),
                    fmt_f(l.q),
                    fmt_f(l.behavior),
                ]);
            }
        }
        if let Some(last) = losses.last() {
            manifest.metric(&format!("q_loss_u{users}"), last.q);
            manifest.metric(&format!("behavior_loss_u{users}"), last.behavior);
        }
    }
    let curve_path = ctx.out_dir.join("bcq_training.csv");
    write_csv(&curve_path, "user_count,step,q_loss,behavior_loss", &rows)?;
    manifest.add_output(&ctx.out_dir, &curve_path)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Exact or local-search optimum per scenario.
pub fn cmd_oracle(ctx: &RunContext) -> Result<Manifest> {
    let (scenarios, _) = ctx.config.load_scenarios(&ctx.config_dir)?;
    let mut manifest = ctx.manifest("oracle");
    ctx.scenario_inputs(&mut manifest)?;
    let mut rows = Vec::new();
    for (i, scn) in scenarios.iter().enumerate() {
        let (algorithm, best, best_u) = oracle_best(scn)?;
        let levels = best
            .levels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        rows.push(vec![
            i.to_string(),
            scn.num_users.to_string(),
            algorithm.to_string(),
            fmt_f(best_u),
            levels,
        ]);
        manifest.metric(&format!("oracle_utility_s{i}"), best_u);
    }
    let path = ctx.out_dir.join("oracle.csv");
    write_csv(&path, "scenario_index,user_count,algorithm,utility,levels", &rows)?;
    manifest.add_output(&ctx.out_dir, &path)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

fn oracle_best(scn: &NetworkScenario) -> Result<(&'static str, PowerAllocation, f64)> {
    if oracle::grid_size(scn).is_some() {
        let (p, u) = oracle::exhaustive(scn)?;
        Ok(("exhaustive", p, u))
    } else {
        let (p, u) = oracle::coordinate_ascent(scn, &PowerAllocation::zeros(scn.num_users), 16)?;
        Ok(("coordinate_ascent", p, u))
    }
}

/// Dataset quality metrics.
pub fn cmd_stats(ctx: &RunContext) -> Result<Manifest> {
    let (label, path) = match &ctx.config.stats.dataset {
        Some(rel) => (rel.clone(), ctx.config_dir.join(rel)),
        None => ("dataset.jsonl".to_string(), ctx.dataset_path()),
    };
    require(&path, "collect")?;
    let store = TrajStore::load(&path)?;
    let m = store.compute_metrics(ConditionFilter::default())?;
    let transitions: usize = store.iter().map(|t| t.actions.len()).sum();
    let rows = vec![vec![
        m.size.to_string(),
        transitions.to_string(),
        fmt_f(m.tq),
        m.saco.to_string(),
    ]];
    let csv_path = ctx.out_dir.join("stats.csv");
    write_csv(&csv_path, "num_trajectories,num_transitions,tq,saco", &rows)?;
    let mut manifest = ctx.manifest("stats");
    manifest.add_input(&label, &path)?;
    manifest.metric("tq", m.tq);
    manifest.metric("saco", m.saco as f64);
    manifest.metric("num_trajectories", m.size as f64);
    manifest.metric("num_transitions", transitions as f64);
    manifest.add_output(&ctx.out_dir, &csv_path)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Builds the conditioning label asking for top-decile return on a
/// scenario, or for an explicit bucket.
pub fn condition_for(
    store: &TrajStore,
    scn: &NetworkScenario,
    bucket: Option<usize>,
) -> Result<Vec<f64>> {
    let layout = store.layout();
    let return_bucket = match bucket {
        Some(b) => {
            if b >= layout.return_bucket_count() {
                bail!(
                    "invalid config: return bucket {b} out of range 0..{}",
                    layout.return_bucket_count()
                );
            }
            b
        }
        None => layout.return_bucket_count() - 1,
    };
    let label = ConditionLabel {
        return_bucket,
        user_count_bucket: layout.bucket_of_user_count(scn.num_users)?,
        env_features: env_summary_features(scn),
        constraint_flags: vec![false; layout.constraint_flag_count],
    };
    Ok(label.encode(layout))
}

fn diffusion_dir(ctx: &RunContext, users: usize) -> PathBuf {
    ctx.out_dir.join(format!("diffusion/u{users}"))
}

fn bcq_dir(ctx: &RunContext, users: usize) -> PathBuf {
    ctx.out_dir.join(format!("bcq/u{users}"))
}

/// One aggregated evaluation row.
#[derive(Debug)]
struct MethodRow {
    method: &'static str,
    user_count: usize,
    returns: Vec<f64>,
}

impl MethodRow {
    fn best(&self) -> f64 {
        self.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
    fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }
}

/// Comparison tables: best returns per method, plus the interaction-count
/// convergence table. Methods are included when their artifacts exist;
/// the oracle column is included whenever the instance permits.
pub fn cmd_evaluate(ctx: &RunContext) -> Result<Manifest> {
    let cfg = &ctx.config;
    let (scenarios, _) = cfg.load_scenarios(&ctx.config_dir)?;
    let store = ctx.load_dataset()?;
    let mut manifest = ctx.manifest("evaluate");
    ctx.scenario_inputs(&mut manifest)?;
    manifest.add_input("dataset.jsonl", &ctx.dataset_path())?;

    let sac_dir = ctx.out_dir.join("sac");
    let sac_agent = if sac_dir.join("sac.toml").exists() {
        Some(SacAgent::load(&sac_dir)?)
    } else {
        None
    };
    let mut any_bcq = false;
    let mut any_diffusion = false;
    for scn in &scenarios {
        if bcq_dir(ctx, scn.num_users).join("bcq.toml").exists() {
            any_bcq = true;
        }
        if diffusion_dir(ctx, scn.num_users).join("diffusion.toml").exists() {
            any_diffusion = true;
        }
    }
    if sac_agent.is_none() && !any_bcq && !any_diffusion {
        bail!(
            "missing prerequisite artifact: no trained models under {}; \
             run `collect`, `train-bcq`, or `train-diffusion` first",
            ctx.out_dir.display()
        );
    }

    let mut rows: Vec<MethodRow> = Vec::new();
    let push = |rows: &mut Vec<MethodRow>, method: &'static str, users: usize, ret: f64| {
        match rows.iter_mut().find(|r| r.method == method && r.user_count == users) {
            Some(r) => r.returns.push(ret),
            None => rows.push(MethodRow {
                method,
                user_count: users,
                returns: vec![ret],
            }),
        }
    };

    let eval_seed = sub_seed(cfg.root_seed, "eval-diffusion");
    for (i, scn) in scenarios.iter().enumerate() {
        let users = scn.num_users;
        let horizon = cfg
            .evaluate
            .horizon
            .unwrap_or_else(|| default_horizon(users, scn.power_levels));
        let zeros = PowerAllocation::zeros(users);
        let base_u = utility(scn, &zeros);

        let (algorithm, _, best_u) = oracle_best(scn)?;
        let method = if algorithm == "exhaustive" {
            "oracle_exhaustive"
        } else {
            "oracle_ascent"
        };
        push(&mut rows, method, users, best_u - base_u);

        if let Some(agent) = &sac_agent {
            push(&mut rows, "sac", users, sac::greedy_return(agent, scn, horizon)?);
        }
        let bdir = bcq_dir(ctx, users);
        if bdir.join("bcq.toml").exists() {
            let agent = bcq::BcqAgent::load(&bdir)?;
            push(&mut rows, "bcq", users, bcq::greedy_return(&agent, scn, horizon)?);
            manifest.add_input(
                &format!("bcq/u{users}"),
                &bdir.join("bcq.toml"),
            )?;
        }
        let ddir = diffusion_dir(ctx, users);
        if ddir.join("diffusion.toml").exists() {
            let model = DiffusionModel::load(&ddir)?;
            let y = condition_for(&store, scn, None)?;
            for j in 0..cfg.evaluate.plan_samples {
                let seed = eval_seed
                    .wrapping_add((i * cfg.evaluate.plan_samples + j) as u64);
                let ret = if cfg.evaluate.replan_every > 0 {
                    model
                        .execute_replan(scn, &zeros, &y, horizon, cfg.evaluate.replan_every, seed)?
                        .episode
                        .ret
                } else {
                    let plan = model.sample_plan(scn, &zeros, &y, seed)?;
                    let take = plan.actions.len().min(horizon);
                    execute_open_loop(scn, &zeros, &plan.actions[..take])?.episode.ret
                };
                push(&mut rows, "diffusion", users, ret);
            }
            manifest.add_input(
                &format!("diffusion/u{users}"),
                &ddir.join("diffusion.toml"),
            )?;
        }
    }

    let method_order = ["oracle_exhaustive", "oracle_ascent", "sac", "bcq", "diffusion"];
    rows.sort_by_key(|r| {
        (
            method_order.iter().position(|m| *m == r.method).unwrap_or(usize::MAX),
            r.user_count,
        )
    });
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.user_count.to_string(),
                fmt_f(r.best()),
                fmt_f(r.mean()),
                r.returns.len().to_string(),
            ]
        })
        .collect();
    let eval_path = ctx.out_dir.join("evaluation.csv");
    write_csv(
        &eval_path,
        "method,user_count,best_return,mean_return,evals",
        &table,
    )?;

    // Convergence table: interactions needed per method. Offline methods
    // consume the fixed dataset only.
    let transitions: usize = store.iter().map(|t| t.actions.len()).sum();
    let mut conv: Vec<Vec<String>> = Vec::new();
    if sac_agent.is_some() {
        let curve_path = ctx.out_dir.join("sac_training.csv");
        require(&curve_path, "collect")?;
        manifest.add_input("sac_training.csv", &curve_path)?;
        let (to_best, total) = sac_curve_interactions(&curve_path)?;
        let best = rows
            .iter()
            .filter(|r| r.method == "sac")
            .map(|r| r.best())
            .fold(f64::NEG_INFINITY, f64::max);
        conv.push(vec![
            "sac".into(),
            "0".into(),
            to_best.to_string(),
            total.to_string(),
            fmt_f(best),
        ]);
    }
    for method in ["bcq", "diffusion"] {
        let present = rows.iter().any(|r| r.method == method);
        if present {
            let best = rows
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.best())
                .fold(f64::NEG_INFINITY, f64::max);
            conv.push(vec![
                method.into(),
                transitions.to_string(),
                "0".into(),
                "0".into(),
                fmt_f(best),
            ]);
        }
    }
    let conv_path = ctx.out_dir.join("convergence.csv");
    write_csv(
        &conv_path,
        "method,dataset_transitions,env_interactions_to_best,total_env_interactions,best_return",
        &conv,
    )?;

    manifest.add_output(&ctx.out_dir, &eval_path)?;
    manifest.add_output(&ctx.out_dir, &conv_path)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Reads the SAC curve and returns (interactions to reach 99% of the best
/// curve value, total interactions).
fn sac_curve_interactions(path: &Path) -> Result<(u64, u64)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut points: Vec<(u64, f64)> = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("malformed training curve row in {}: {line}", path.display());
        }
        points.push((
            fields[1].parse().context("env_interactions column")?,
            fields[3].parse().context("mean_eval_return column")?,
        ));
    }
    if points.is_empty() {
        bail!("training curve {} has no rows", path.display());
    }
    let best = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let threshold = if best >= 0.0 { 0.99 * best } else { best };
    // Sustained attainment: the first evaluation from which the curve never
    // again drops below the threshold. A transient early spike that later
    // collapses does not count as having converged.
    let last_below = points.iter().rposition(|p| p.1 < threshold);
    let idx = last_below.map_or(0, |i| i + 1).min(points.len() - 1);
    Ok((points[idx].0, points.last().unwrap().0))
}

/// Executed-plan walk plus the 2-user utility surface.
pub fn cmd_trace(ctx: &RunContext) -> Result<Manifest> {
    let cfg = &ctx.config;
    let (scenarios, _) = cfg.load_scenarios(&ctx.config_dir)?;
    let scn = &scenarios[0];
    let store = ctx.load_dataset()?;
    let ddir = diffusion_dir(ctx, scn.num_users);
    require(&ddir.join("diffusion.toml"), "train-diffusion")?;
    let model = DiffusionModel::load(&ddir)?;
    let y = condition_for(&store, scn, cfg.trace.return_bucket)?;
    let zeros = PowerAllocation::zeros(scn.num_users);
    let seed = sub_seed(cfg.root_seed, "trace").wrapping_add(cfg.trace.seed_index);
    let horizon = default_horizon(scn.num_users, scn.power_levels);
    let out = if cfg.evaluate.replan_every > 0 {
        model.execute_replan(scn, &zeros, &y, horizon, cfg.evaluate.replan_every, seed)?
    } else {
        let plan = model.sample_plan(scn, &zeros, &y, seed)?;
        let take = plan.actions.len().min(horizon);
        execute_open_loop(scn, &zeros, &plan.actions[..take])?
    };

    let mut header = String::from("step,utility");
    for i in 0..scn.num_users {
        write!(header, ",p{i}").unwrap();
    }
    let mut rows = Vec::new();
    let mut run_u = utility(scn, &out.episode.states[0]);
    for (t, state) in out.episode.states.iter().enumerate() {
        if t > 0 {
            run_u += out.episode.rewards[t - 1];
        }
        let mut row = vec![t.to_string(), fmt_f(run_u)];
        row.extend(state.levels.iter().map(|l| l.to_string()));
        rows.push(row);
    }
    let trace_path = ctx.out_dir.join("trace.csv");
    write_csv(&trace_path, &header, &rows)?;

    let mut manifest = ctx.manifest("trace");
    ctx.scenario_inputs(&mut manifest)?;
    manifest.add_input("dataset.jsonl", &ctx.dataset_path())?;
    manifest.add_input(
        &format!("diffusion/u{}", scn.num_users),
        &ddir.join("diffusion.toml"),
    )?;
    manifest.metric("final_utility", out.final_utility);
    manifest.metric("return", out.episode.ret);
    manifest.add_output(&ctx.out_dir, &trace_path)?;

    if scn.num_users == 2 {
        let stride = cfg.trace.surface_stride.max(1);
        let mut srows = Vec::new();
        let mut p = PowerAllocation::zeros(2);
        let mut a = 0u32;
        while a <= scn.power_levels {
            let mut b = 0u32;
            while b <= scn.power_levels {
                p.levels[0] = a;
                p.levels[1] = b;
                srows.push(vec![a.to_string(), b.to_string(), fmt_f(utility(scn, &p))]);
                b += stride;
            }
            a += stride;
        }
        let surface_path = ctx.out_dir.join("utility_surface.csv");
        write_csv(&surface_path, "p0,p1,utility", &srows)?;
        manifest.add_output(&ctx.out_dir, &surface_path)?;
    }
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Emits generated plans as line-delimited records plus the denoising
/// trace of the first plan.
pub fn cmd_sample(ctx: &RunContext) -> Result<Manifest> {
    let cfg = &ctx.config;
    let (scenarios, _) = cfg.load_scenarios(&ctx.config_dir)?;
    let scn = &scenarios[0];
    let store = ctx.load_dataset()?;
    let ddir = diffusion_dir(ctx, scn.num_users);
    require(&ddir.join("diffusion.toml"), "train-diffusion")?;
    let model = DiffusionModel::load(&ddir)?;
    let y = condition_for(&store, scn, cfg.sample.return_bucket)?;
    let zeros = PowerAllocation::zeros(scn.num_users);
    let base = sub_seed(cfg.root_seed, "sample");

    let mut lines = String::new();
    let mut first_trace = None;
    let mut manifest = ctx.manifest("sample");
    for j in 0..cfg.sample.count.max(1) {
        let seed = base.wrapping_add(j as u64);
        let (plan, trace) = model.sample_plan_traced(scn, &zeros, &y, seed)?;
        if j == 0 {
            first_trace = Some(trace);
        }
        manifest.metric(&format!("predicted_return_{j}"), plan.predicted_return);
        lines.push_str(&plan_record(&plan, seed)?);
        lines.push('\n');
    }
    let plan_path = ctx.out_dir.join("plan.jsonl");
    std::fs::write(&plan_path, lines)?;

    let trace = first_trace.unwrap();
    let users = scn.num_users;
    let window = model.config.window;
    let mut header = String::from("k");
    for t in 0..window {
        for u in 0..users {
            write!(header, ",t{t}_u{u}").unwrap();
        }
    }
    let rows: Vec<Vec<String>> = trace
        .snapshots
        .iter()
        .map(|(k, x)| {
            let mut row = vec![k.to_string()];
            row.extend(
                x.iter()
                    .map(|&v| fmt_f(diffusion::denormalize_level(v, scn.power_levels))),
            );
            row
        })
        .collect();
    let trace_path = ctx.out_dir.join("denoise_trace.csv");
    write_csv(&trace_path, &header, &rows)?;

    ctx.scenario_inputs(&mut manifest)?;
    manifest.add_input("dataset.jsonl", &ctx.dataset_path())?;
    manifest.add_input(
        &format!("diffusion/u{users}"),
        &ddir.join("diffusion.toml"),
    )?;
    manifest.add_output(&ctx.out_dir, &plan_path)?;
    manifest.add_output(&ctx.out_dir, &trace_path)?;
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

fn plan_record(plan: &GeneratedPlan, seed: u64) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Record<'a> {
        seed: u64,
        #[serde(flatten)]
        plan: &'a GeneratedPlan,
    }
    Ok(serde_json::to_string(&Record { seed, plan })?)
}
