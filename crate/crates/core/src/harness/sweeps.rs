use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::atvc::{AtvcModel, CommTopology, Fusion};
use crate::baselines::{PolicyKind, Selection};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::trainer::{evaluate, EvalReport};

pub const EVAL_HEADER: &str = "policy,episodes,mean_reward,reward_se,drop_rate,comm_ratio";
pub const DELTA_T_HEADER: &str = "policy,delta_t,episodes,mean_reward,reward_se,drop_rate,comm_ratio";
pub const AGENTS_HEADER: &str = "policy,agents,servers,arrival_rate,utilization,episodes,mean_reward,reward_se,drop_rate,comm_ratio";
pub const HEATMAP_HEADER: &str = "b1,b2,p_queue2";

pub fn eval_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.policy, r.stats.episodes, r.mean_reward, r.reward_std_error, r.drop_rate, r.comm_ratio
    )
}

/// Shared evaluation settings of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings<'a> {
    pub model: Option<&'a AtvcModel>,
    pub episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
}

fn needs_model(policies: &[PolicyKind], model: Option<&AtvcModel>) -> Result<()> {
    if model.is_none() {
        if let Some(p) = policies.iter().find(|p| p.is_learned()) {
            return Err(Error::Contract(format!("policy {p} needs a checkpoint")));
        }
    }
    Ok(())
}

/// Every policy on the same environment and episode seeds.
pub fn evaluate_policies(env: &EnvConfig, policies: &[PolicyKind], s: EvalSettings<'_>) -> Result<Vec<EvalReport>> {
    needs_model(policies, s.model)?;
    policies
        .par_iter()
        .map(|&p| evaluate(p, s.model, env, s.episodes, s.seed, s.deterministic))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTRow {
    pub delta_t: f64,
    pub report: EvalReport,
}

impl DeltaTRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{}",
            r.policy, self.delta_t, r.stats.episodes, r.mean_reward, r.reward_std_error, r.drop_rate, r.comm_ratio
        )
    }
}

/// Each policy at each synchronization interval, rows ordered by policy
/// then by `values` as given.
pub fn sweep_delta_t(
    base: &EnvConfig,
    values: &[f64],
    policies: &[PolicyKind],
    s: EvalSettings<'_>,
) -> Result<Vec<DeltaTRow>> {
    needs_model(policies, s.model)?;
    let cells: Vec<(PolicyKind, f64)> = policies
        .iter()
        .flat_map(|&p| values.iter().map(move |&v| (p, v)))
        .collect();
    cells
        .par_iter()
        .map(|&(p, v)| {
            let env = EnvConfig {
                delta_t: v,
                ..base.clone()
            };
            let report = evaluate(p, s.model, &env, s.episodes, s.seed, s.deterministic)?;
            Ok(DeltaTRow { delta_t: v, report })
        })
        .collect()
}

/// Network with `m` schedulers and `m` servers on the ring map, arrival
/// rate chosen so that utilization stays at `utilization`.
pub fn scaled_env(base: &EnvConfig, m: usize, utilization: f64) -> EnvConfig {
    EnvConfig {
        schedulers: m,
        servers: m,
        arrival_rate: utilization * m as f64 * base.service_rate / m as f64,
        access_map: None,
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentsRow {
    pub env: EnvConfig,
    pub report: EvalReport,
}

impl AgentsRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            self.env.schedulers,
            self.env.servers,
            self.env.arrival_rate,
            self.env.utilization(),
            r.stats.episodes,
            r.mean_reward,
            r.reward_std_error,
            r.drop_rate,
            r.comm_ratio
        )
    }
}

/// Each policy at each agent count without retraining.
pub fn sweep_agents(
    base: &EnvConfig,
    counts: &[usize],
    policies: &[PolicyKind],
    s: EvalSettings<'_>,
) -> Result<Vec<AgentsRow>> {
    needs_model(policies, s.model)?;
    let utilization = 0.9;
    let cells: Vec<(PolicyKind, usize)> = policies
        .iter()
        .flat_map(|&p| counts.iter().map(move |&m| (p, m)))
        .collect();
    cells
        .par_iter()
        .map(|&(p, m)| {
            let env = scaled_env(base, m, utilization);
            let report = evaluate(p, s.model, &env, s.episodes, s.seed, s.deterministic)?;
            Ok(AgentsRow { env, report })
        })
        .collect()
}

/// `grid[b1][b2]`: mean fraction scheduler 0 sends to its second queue when
/// it truly sees `(b1, b2)`. Queues it cannot see are drawn uniformly from
/// `0..=B` per sample; nothing is stale.
pub fn heatmap(model: &AtvcModel, env: &EnvConfig, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if env.choices != 2 || model.config.choices != 2 {
        return Err(Error::Unsupported(format!(
            "heatmap needs two choices per scheduler, got {}",
            env.choices
        )));
    }
    if model.config.buffer != env.buffer {
        return Err(Error::Compatibility(format!(
            "model buffer {} vs environment buffer {}",
            model.config.buffer, env.buffer
        )));
    }
    let access = env.resolved_access_map();
    let topology = CommTopology::new(&access);
    let b = env.buffer;
    let cells: Vec<(usize, usize)> = (0..=b).flat_map(|b1| (0..=b).map(move |b2| (b1, b2))).collect();
    let values = cells
        .par_iter()
        .map(|&(b1, b2)| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::trainer::derive_seed(seed, &[b1 as u64, b2 as u64]));
            let frames: Vec<Vec<Vec<usize>>> = (0..samples)
                .map(|_| {
                    let mut lengths: Vec<usize> = (0..env.servers).map(|_| rng.random_range(0..=b)).collect();
                    lengths[access[0][0]] = b1;
                    lengths[access[0][1]] = b2;
                    access.iter().map(|row| row.iter().map(|&q| lengths[q]).collect()).collect()
                })
                .collect();
            let batch = model.pair_batch(&topology, &frames)?;
            let mut g = Graph::new();
            let (vars, _, _) = model.forward_batch(&mut g, &batch, Fusion::Execute(Selection::Threshold), None, &mut rng)?;
            let actions = model.sample_actions(&mut g, vars.z, &mut rng)?;
            let m = env.schedulers;
            let total: f64 = (0..samples).map(|k| actions[k * m].fractions[1]).sum();
            Ok(total / samples as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.chunks(b + 1).map(<[f64]>::to_vec).collect())
}
