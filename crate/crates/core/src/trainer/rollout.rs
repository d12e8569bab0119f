//! Lockstep simulation of many episodes under one policy, with optional
//! recording of everything the PPO update needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atvc::{AtvcModel, CommTopology, Fusion};
use crate::baselines::{jsq_action, random_action, PolicyKind, Selection};
use crate::env::{AllocationAction, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::Graph;

/// Mixes a base seed with stream tags (splitmix64 finalizer per tag).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = x.wrapping_add(t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// What chooses the actions.
#[derive(Clone, Copy)]
pub enum Driver<'a> {
    Jsq,
    Random,
    Learned {
        model: &'a AtvcModel,
        fusion: Fusion,
        /// Use the action mean instead of sampling.
        deterministic: bool,
    },
}

impl<'a> Driver<'a> {
    /// Execution-time driver for `kind`; learned kinds need a model.
    pub fn for_policy(kind: PolicyKind, model: Option<&'a AtvcModel>, deterministic: bool) -> Result<Self> {
        match kind {
            PolicyKind::Jsq => Ok(Driver::Jsq),
            PolicyKind::Random => Ok(Driver::Random),
            _ => {
                let model = model.ok_or_else(|| Error::Contract(format!("policy {kind} needs a trained model")))?;
                let selection = kind.selection().expect("learned kind");
                Ok(Driver::Learned {
                    model,
                    fusion: Fusion::Execute(selection),
                    deterministic,
                })
            }
        }
    }
}

/// Totals over a set of simulated episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub epochs: usize,
    pub drops: u64,
    pub arrivals: u64,
    /// Non-self candidate messages fused.
    pub comm_selected: u64,
    /// Non-self candidate messages available.
    pub comm_candidates: u64,
    /// Dropped jobs of each episode.
    pub episode_drops: Vec<u64>,
}

impl EpisodeStats {
    /// Mean episode reward (minus dropped jobs per episode).
    pub fn mean_reward(&self) -> f64 {
        -(self.drops as f64) / self.episodes.max(1) as f64
    }

    /// Dropped over arrived jobs.
    pub fn drop_rate(&self) -> f64 {
        if self.arrivals == 0 {
            0.0
        } else {
            self.drops as f64 / self.arrivals as f64
        }
    }

    pub fn comm_ratio(&self) -> f64 {
        if self.comm_candidates == 0 {
            0.0
        } else {
            self.comm_selected as f64 / self.comm_candidates as f64
        }
    }

    /// Standard error of the per-episode reward.
    pub fn reward_std_error(&self) -> f64 {
        let n = self.episode_drops.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.episode_drops.iter().sum::<u64>() as f64 / n as f64;
        let var = self
            .episode_drops
            .iter()
            .map(|&d| (d as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        (var / n as f64).sqrt()
    }

    pub fn merge(&mut self, other: &EpisodeStats) {
        self.episodes += other.episodes;
        self.epochs += other.epochs;
        self.drops += other.drops;
        self.arrivals += other.arrivals;
        self.comm_selected += other.comm_selected;
        self.comm_candidates += other.comm_candidates;
        self.episode_drops.extend(&other.episode_drops);
    }
}

/// Recorded joint steps. Frame `f = episode * episode_len + t`; scheduler
/// row `r = f * M + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedulers: usize,
    pub choices: usize,
    pub latent_dim: usize,
    pub episodes: usize,
    pub episode_len: usize,
    /// Possibly stale readings per frame and scheduler.
    pub observed: Vec<Vec<Vec<usize>>>,
    /// True accessible lengths per frame and scheduler (decoder targets).
    pub truth: Vec<Vec<Vec<usize>>>,
    /// Shared reward per frame.
    pub rewards: Vec<f64>,
    /// Reparameterization noise per row, `latent_dim` each.
    pub noise: Vec<f64>,
    /// Sampled raw logits per row, `choices` each.
    pub actions: Vec<f64>,
    /// Action-head mean per row at collection time.
    pub old_mean: Vec<f64>,
    pub old_log_std: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.observed.len()
    }

    pub fn rows(&self) -> usize {
        self.frames() * self.schedulers
    }

    /// `(frame, scheduler)` of a row.
    pub fn locate(&self, row: usize) -> (usize, usize) {
        (row / self.schedulers, row % self.schedulers)
    }
}

/// Runs `episodes` episodes in lockstep. Episode `e` uses the environment
/// seed `derive_seed(seed, [e])`; the policy draws from `derive_seed(seed,
/// [u64::MAX])`. Recording requires a learned driver and also evaluates the
/// value head.
pub fn simulate(
    driver: Driver<'_>,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    record: bool,
) -> Result<(EpisodeStats, Option<Trajectory>)> {
    env_config.validate()?;
    let m = env_config.schedulers;
    let d = env_config.choices;
    let t_max = env_config.episode_len;
    let mut envs = (0..episodes)
        .map(|e| {
            Env::new(EnvConfig {
                seed: derive_seed(seed, &[e as u64]),
                ..env_config.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    let topology = CommTopology::new(envs.first().map_or(&[][..], |e| e.access_map()));

    let learned = match driver {
        Driver::Learned { model, .. } => {
            if model.config.choices != d || model.config.buffer != env_config.buffer {
                return Err(Error::Compatibility(format!(
                    "model built for d={} B={}, environment has d={d} B={}",
                    model.config.choices, model.config.buffer, env_config.buffer
                )));
            }
            Some(model)
        }
        _ => None,
    };
    if record && learned.is_none() {
        return Err(Error::Contract("only learned policies can be recorded".into()));
    }
    let mut traj = learned.filter(|_| record).map(|model| {
        let frames = episodes * t_max;
        Trajectory {
            schedulers: m,
            choices: d,
            latent_dim: model.config.latent_dim,
            episodes,
            episode_len: t_max,
            observed: vec![Vec::new(); frames],
            truth: vec![Vec::new(); frames],
            rewards: vec![0.0; frames],
            noise: vec![0.0; frames * m * model.config.latent_dim],
            actions: vec![0.0; frames * m * d],
            old_mean: vec![0.0; frames * m * d],
            old_log_std: model.params.value(model.log_std_param()).data().to_vec(),
            log_probs: vec![0.0; frames * m],
            values: vec![0.0; frames * m],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    });

    let mut stats = EpisodeStats {
        episodes,
        epochs: episodes * t_max,
        episode_drops: vec![0; episodes],
        ..EpisodeStats::default()
    };
    let mut g = Graph::new();
    for t in 0..t_max {
        let observed: Vec<Vec<Vec<usize>>> = envs
            .iter_mut()
            .map(|env| env.observe_all().iter().map(|o| o.lengths()).collect())
            .collect();
        let actions: Vec<Vec<AllocationAction>> = match driver {
            Driver::Jsq => envs
                .iter()
                .map(|env| (0..m).map(|i| jsq_action(i, &env.true_accessible(i))).collect())
                .collect(),
            Driver::Random => (0..episodes)
                .map(|_| (0..m).map(|i| random_action(i, d)).collect())
                .collect(),
            Driver::Learned {
                model,
                fusion,
                deterministic,
            } => {
                g.clear();
                let batch = model.pair_batch(&topology, &observed)?;
                let (vars, eps, mask) = model.forward_batch(&mut g, &batch, fusion, None, &mut rng)?;
                let alphas = g.value(vars.alpha).data().to_vec();
                let threshold = model.config.threshold;
                for (p, &owner) in batch.segment.iter().enumerate() {
                    if batch.own_rows[owner] == p {
                        continue;
                    }
                    stats.comm_candidates += 1;
                    let kept = match fusion {
                        Fusion::Soft => alphas[p] > threshold,
                        Fusion::Execute(Selection::Threshold | Selection::All | Selection::OwnOnly) => mask[p],
                    };
                    stats.comm_selected += u64::from(kept);
                }
                let mut samples = model.sample_actions(&mut g, vars.z, &mut rng)?;
                if deterministic {
                    for s in &mut samples {
                        s.raw_logits = s.mean.clone();
                        s.fractions = crate::math::softmax(&s.mean);
                    }
                }
                if let Some(traj) = traj.as_mut() {
                    let values = model.value_graph(&mut g, vars.z)?;
                    let values = g.value(values).data();
                    let l = traj.latent_dim;
                    for e in 0..episodes {
                        let f = e * t_max + t;
                        for i in 0..m {
                            let (src, dst) = (e * m + i, f * m + i);
                            traj.noise[dst * l..(dst + 1) * l].copy_from_slice(&eps.data()[src * l..(src + 1) * l]);
                            traj.actions[dst * d..(dst + 1) * d].copy_from_slice(&samples[src].raw_logits);
                            traj.old_mean[dst * d..(dst + 1) * d].copy_from_slice(&samples[src].mean);
                            traj.log_probs[dst] = samples[src].log_prob;
                            traj.values[dst] = values[src];
                        }
                    }
                }
                let mut it = samples.into_iter();
                (0..episodes)
                    .map(|_| {
                        (0..m)
                            .map(|i| {
                                let s = it.next().expect("one sample per row");
                                AllocationAction {
                                    scheduler_id: i,
                                    raw_logits: s.raw_logits,
                                    fractions: s.fractions,
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        for (e, (env, acts)) in envs.iter_mut().zip(&actions).enumerate() {
            if let Some(traj) = traj.as_mut() {
                let f = e * t_max + t;
                traj.truth[f] = (0..m).map(|i| env.true_accessible(i)).collect();
            }
            let out = env.step(acts)?;
            let drops = out.total_drops();
            stats.drops += drops;
            stats.arrivals += out.total_arrivals();
            stats.episode_drops[e] += drops;
            if let Some(traj) = traj.as_mut() {
                traj.rewards[e * t_max + t] = out.reward;
            }
        }
        if let Some(traj) = traj.as_mut() {
            for (e, obs) in observed.into_iter().enumerate() {
                traj.observed[e * t_max + t] = obs;
            }
        }
    }
    Ok((stats, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atvc::ModelConfig;

    fn small_env() -> EnvConfig {
        EnvConfig {
            episode_len: 20,
            ..EnvConfig::table1()
        }
    }

    #[test]
    fn derived_seeds_differ_per_tag() {
        let a = derive_seed(1, &[0]);
        assert_ne!(a, derive_seed(1, &[1]));
        assert_ne!(a, derive_seed(2, &[0]));
        assert_eq!(a, derive_seed(1, &[0]));
    }

    #[test]
    fn simulation_is_reproducible() {
        let env = small_env();
        let a = simulate(Driver::Jsq, &env, 4, 9, false).unwrap().0;
        let b = simulate(Driver::Jsq, &env, 4, 9, false).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.epochs, 80);
        assert_eq!(a.episode_drops.iter().sum::<u64>(), a.drops);
    }

    #[test]
    fn recording_fills_every_row() {
        let env = small_env();
        let model = AtvcModel::new(ModelConfig::default()).unwrap();
        let driver = Driver::Learned {
            model: &model,
            fusion: Fusion::Soft,
            deterministic: false,
        };
        let (stats, traj) = simulate(driver, &env, 3, 5, true).unwrap();
        let traj = traj.unwrap();
        assert_eq!(traj.frames(), 60);
        assert_eq!(traj.rows(), 180);
        assert_eq!(traj.actions.len(), 360);
        assert!(traj.truth.iter().all(|f| f.len() == 3));
        let total: f64 = traj.rewards.iter().sum();
        assert_eq!(-total as u64, stats.drops);
        assert!(traj.log_probs.iter().all(|v| v.is_finite()));
        // three candidates per owner, two of them foreign
        assert_eq!(stats.comm_candidates, 60 * 3 * 2);
    }

    #[test]
    fn recording_needs_a_model() {
        assert!(simulate(Driver::Random, &small_env(), 1, 0, true).is_err());
    }

    #[test]
    fn model_must_match_environment() {
        let model = AtvcModel::new(ModelConfig {
            buffer: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let driver = Driver::Learned {
            model: &model,
            fusion: Fusion::Soft,
            deterministic: false,
        };
        assert!(matches!(
            simulate(driver, &small_env(), 1, 0, false),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn own_only_never_communicates_and_full_always_does() {
        let model = AtvcModel::new(ModelConfig::default()).unwrap();
        for (sel, want) in [(Selection::OwnOnly, 0.0), (Selection::All, 1.0)] {
            let driver = Driver::Learned {
                model: &model,
                fusion: Fusion::Execute(sel),
                deterministic: true,
            };
            let stats = simulate(driver, &small_env(), 2, 3, false).unwrap().0;
            assert_eq!(stats.comm_ratio(), want);
        }
    }
}
