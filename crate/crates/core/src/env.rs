//! Discrete-time simulator of schedulers dispatching batched Poisson arrivals
//! into finite-buffer queues they can only partially (and sometimes stalely)
//! observe.
//!
//! One call to [`Env::step`] is one decision epoch of length `delta_t`:
//!
//! 1. every scheduler dispatches the jobs it accumulated since the previous
//!    epoch, split across its accessible queues by a multinomial draw with
//!    the action's fractions;
//! 2. jobs reaching a full buffer are dropped (arrivals from all schedulers
//!    are pooled before the drop rule);
//! 3. each server completes `min(length, Poisson(service_rate * delta_t))`
//!    jobs;
//! 4. the next batch of arrivals is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax;

/// Static description of a queueing network instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of schedulers (agents).
    pub schedulers: usize,
    /// Number of servers, each with its own queue.
    pub servers: usize,
    /// Queues reachable by each scheduler.
    pub choices: usize,
    /// Poisson arrival rate per scheduler, jobs per unit time.
    pub arrival_rate: f64,
    /// Exponential service rate per server, jobs per unit time.
    pub service_rate: f64,
    /// Buffer capacity per queue.
    pub buffer: usize,
    /// Synchronization interval between decision epochs.
    pub delta_t: f64,
    /// Decision epochs per episode.
    pub episode_len: usize,
    /// Probability that an observed queue length is one epoch old.
    pub p_stale: f64,
    /// Queue indices reachable by each scheduler. `None` selects the ring map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_map: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub seed: u64,
}

impl EnvConfig {
    /// Three schedulers, three servers, two choices, 90% utilization, B = 5.
    pub fn table1() -> Self {
        EnvConfig {
            schedulers: 3,
            servers: 3,
            choices: 2,
            arrival_rate: 0.9,
            service_rate: 1.0,
            buffer: 5,
            delta_t: 1.0,
            episode_len: 100,
            p_stale: 0.5,
            access_map: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedulers == 0 {
            return Err(Error::config("schedulers", "must be at least 1"));
        }
        if self.servers == 0 {
            return Err(Error::config("servers", "must be at least 1"));
        }
        if self.choices == 0 || self.choices > self.servers {
            return Err(Error::config(
                "choices",
                format!("need 1 <= d <= S, got d={} S={}", self.choices, self.servers),
            ));
        }
        if self.buffer == 0 {
            return Err(Error::config("buffer", "must be at least 1"));
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return Err(Error::config("arrival_rate", "must be finite and non-negative"));
        }
        if !(self.service_rate.is_finite() && self.service_rate > 0.0) {
            return Err(Error::config("service_rate", "must be finite and positive"));
        }
        if !(self.delta_t.is_finite() && self.delta_t > 0.0) {
            return Err(Error::config("delta_t", "must be finite and positive"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_stale) {
            return Err(Error::config("p_stale", "must lie in [0, 1]"));
        }
        if let Some(map) = &self.access_map {
            validate_access_map(map, self.schedulers, self.servers, self.choices)?;
        }
        Ok(())
    }

    /// The access map in effect: the configured one, or the ring map.
    pub fn resolved_access_map(&self) -> Vec<Vec<usize>> {
        self.access_map
            .clone()
            .unwrap_or_else(|| default_access_map(self.schedulers, self.servers, self.choices))
    }

    /// Offered load `M * eta / (S * beta)`.
    pub fn utilization(&self) -> f64 {
        self.schedulers as f64 * self.arrival_rate / (self.servers as f64 * self.service_rate)
    }
}

fn validate_access_map(map: &[Vec<usize>], m: usize, s: usize, d: usize) -> Result<()> {
    if map.len() != m {
        return Err(Error::config(
            "access_map",
            format!("expected {m} rows, got {}", map.len()),
        ));
    }
    for (i, row) in map.iter().enumerate() {
        if row.len() != d {
            return Err(Error::config(
                "access_map",
                format!("row {i} has {} entries, expected {d}", row.len()),
            ));
        }
        for (k, &q) in row.iter().enumerate() {
            if q >= s {
                return Err(Error::config(
                    "access_map",
                    format!("row {i} references queue {q} but S={s}"),
                ));
            }
            if row[..k].contains(&q) {
                return Err(Error::config(
                    "access_map",
                    format!("row {i} repeats queue {q}"),
                ));
            }
        }
    }
    Ok(())
}

/// Ring assignment: scheduler `i` reaches queues `(i + k) mod S` for `k < d`.
pub fn default_access_map(schedulers: usize, servers: usize, choices: usize) -> Vec<Vec<usize>> {
    (0..schedulers)
        .map(|i| (0..choices).map(|k| (i + k) % servers).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueNetworkState {
    pub lengths: Vec<usize>,
    pub prev_lengths: Vec<usize>,
    pub epoch: usize,
}

/// What one scheduler sees of its accessible queues. Entries may be one
/// epoch old; nothing marks which ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub scheduler_id: usize,
    /// `(queue_index, observed_length)` in access-map order.
    pub entries: Vec<(usize, usize)>,
    /// Jobs waiting at the scheduler for the coming dispatch.
    pub arrival_count: u64,
}

impl Observation {
    pub fn lengths(&self) -> Vec<usize> {
        self.entries.iter().map(|&(_, l)| l).collect()
    }
}

/// A scheduler's allocation over its accessible queues.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationAction {
    pub scheduler_id: usize,
    pub raw_logits: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl AllocationAction {
    pub fn from_logits(scheduler_id: usize, raw_logits: Vec<f64>) -> Self {
        let fractions = softmax(&raw_logits);
        AllocationAction {
            scheduler_id,
            raw_logits,
            fractions,
        }
    }

    /// Builds the action whose softmax is `fractions` (zero mass maps to `-inf`).
    pub fn from_fractions(scheduler_id: usize, fractions: Vec<f64>) -> Self {
        let raw_logits = fractions.iter().map(|f| f.ln()).collect();
        AllocationAction {
            scheduler_id,
            raw_logits,
            fractions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Jobs dropped at each queue this epoch.
    pub drops: Vec<u64>,
    /// Jobs served by each server this epoch.
    pub departures: Vec<u64>,
    /// Jobs dispatched to each queue this epoch (before drops).
    pub incoming: Vec<u64>,
    /// Jobs each scheduler dispatched this epoch.
    pub arrivals: Vec<u64>,
    /// Shared reward, minus one per dropped job.
    pub reward: f64,
}

impl StepOutcome {
    pub fn total_drops(&self) -> u64 {
        self.drops.iter().sum()
    }

    pub fn total_arrivals(&self) -> u64 {
        self.arrivals.iter().sum()
    }
}

pub struct Env {
    config: EnvConfig,
    access: Vec<Vec<usize>>,
    state: QueueNetworkState,
    pending: Vec<u64>,
    arrivals: Option<Poisson<f64>>,
    service: Poisson<f64>,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let access = config.resolved_access_map();
        let arrival_mean = config.arrival_rate * config.delta_t;
        let arrivals = if arrival_mean > 0.0 {
            Some(Poisson::new(arrival_mean).map_err(|e| Error::config("arrival_rate", e.to_string()))?)
        } else {
            None
        };
        let service = Poisson::new(config.service_rate * config.delta_t)
            .map_err(|e| Error::config("service_rate", e.to_string()))?;
        let mut env = Env {
            state: QueueNetworkState {
                lengths: vec![0; config.servers],
                prev_lengths: vec![0; config.servers],
                epoch: 0,
            },
            pending: vec![0; config.schedulers],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            access,
            arrivals,
            service,
            config,
        };
        env.pending = env.sample_arrivals();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn access_map(&self) -> &[Vec<usize>] {
        &self.access
    }

    pub fn state(&self) -> &QueueNetworkState {
        &self.state
    }

    /// Jobs each scheduler will dispatch at the next step.
    pub fn pending_arrivals(&self) -> &[u64] {
        &self.pending
    }

    /// Empties all queues and restarts the epoch counter. The RNG stream
    /// continues, so consecutive episodes differ.
    pub fn reset(&mut self) {
        self.state.lengths.fill(0);
        self.state.prev_lengths.fill(0);
        self.state.epoch = 0;
        self.pending = self.sample_arrivals();
    }

    /// Overwrites the queue state. Both histories are set to `lengths`.
    pub fn set_lengths(&mut self, lengths: &[usize]) -> Result<()> {
        if lengths.len() != self.config.servers || lengths.iter().any(|&l| l > self.config.buffer) {
            return Err(Error::Contract(format!(
                "lengths {lengths:?} incompatible with S={} B={}",
                self.config.servers, self.config.buffer
            )));
        }
        self.state.lengths.copy_from_slice(lengths);
        self.state.prev_lengths.copy_from_slice(lengths);
        Ok(())
    }

    /// One Poisson(eta * delta_t) draw per scheduler.
    pub fn sample_arrivals(&mut self) -> Vec<u64> {
        match &self.arrivals {
            Some(dist) => (0..self.config.schedulers)
                .map(|_| dist.sample(&mut self.rng) as u64)
                .collect(),
            None => vec![0; self.config.schedulers],
        }
    }

    pub fn observe(&mut self, scheduler_id: usize) -> Result<Observation> {
        if scheduler_id >= self.config.schedulers {
            return Err(Error::UnknownScheduler {
                id: scheduler_id,
                count: self.config.schedulers,
            });
        }
        let p_stale = self.config.p_stale;
        let entries = self.access[scheduler_id]
            .iter()
            .map(|&q| {
                let stale = self.rng.random_bool(p_stale);
                let len = if stale {
                    self.state.prev_lengths[q]
                } else {
                    self.state.lengths[q]
                };
                (q, len)
            })
            .collect();
        Ok(Observation {
            scheduler_id,
            entries,
            arrival_count: self.pending[scheduler_id],
        })
    }

    pub fn observe_all(&mut self) -> Vec<Observation> {
        (0..self.config.schedulers)
            .map(|i| self.observe(i).expect("index in range"))
            .collect()
    }

    /// True lengths of the queues a scheduler can reach, in access-map order.
    pub fn true_accessible(&self, scheduler_id: usize) -> Vec<usize> {
        self.access[scheduler_id]
            .iter()
            .map(|&q| self.state.lengths[q])
            .collect()
    }

    fn check_actions(&self, actions: &[AllocationAction]) -> Result<()> {
        if actions.len() != self.config.schedulers {
            return Err(Error::Contract(format!(
                "expected {} actions, got {}",
                self.config.schedulers,
                actions.len()
            )));
        }
        for (i, a) in actions.iter().enumerate() {
            if a.scheduler_id != i {
                return Err(Error::Contract(format!(
                    "action {i} carries scheduler_id {}",
                    a.scheduler_id
                )));
            }
            if a.fractions.len() != self.config.choices {
                return Err(Error::Contract(format!(
                    "action {i} has {} fractions, expected {}",
                    a.fractions.len(),
                    self.config.choices
                )));
            }
            let sum: f64 = a.fractions.iter().sum();
            if a.fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "action {i} fractions {:?} are not on the simplex",
                    a.fractions
                )));
            }
        }
        Ok(())
    }

    pub fn step(&mut self, actions: &[AllocationAction]) -> Result<StepOutcome> {
        self.check_actions(actions)?;
        let s = self.config.servers;
        let buffer = self.config.buffer as u64;

        let arrivals = std::mem::take(&mut self.pending);
        let mut incoming = vec![0u64; s];
        for (i, action) in actions.iter().enumerate() {
            let split = multinomial(&mut self.rng, arrivals[i], &action.fractions);
            for (k, n) in split.into_iter().enumerate() {
                incoming[self.access[i][k]] += n;
            }
        }

        self.state.prev_lengths.copy_from_slice(&self.state.lengths);
        let mut drops = vec![0u64; s];
        let mut departures = vec![0u64; s];
        for j in 0..s {
            let offered = self.state.lengths[j] as u64 + incoming[j];
            drops[j] = offered.saturating_sub(buffer);
            let admitted = offered.min(buffer);
            let served = (self.service.sample(&mut self.rng) as u64).min(admitted);
            departures[j] = served;
            self.state.lengths[j] = (admitted - served) as usize;
        }

        self.state.epoch += 1;
        self.pending = self.sample_arrivals();
        let reward = -(drops.iter().sum::<u64>() as f64);
        Ok(StepOutcome {
            drops,
            departures,
            incoming,
            arrivals,
            reward,
        })
    }
}

/// Splits `n` jobs by `fractions` using a chain of conditional binomials.
pub fn multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, fractions: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; fractions.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (k, &f) in fractions.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == fractions.len() {
            out[k] = left;
            break;
        }
        let p = if mass > 0.0 { (f / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = if p >= 1.0 {
            left
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(left, p).expect("p in (0,1)").sample(rng)
        };
        out[k] = x;
        left -= x;
        mass -= f;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(env: &Env) -> Vec<AllocationAction> {
        let d = env.config().choices;
        (0..env.config().schedulers)
            .map(|i| AllocationAction::from_fractions(i, vec![1.0 / d as f64; d]))
            .collect()
    }

    #[test]
    fn table1_env_starts_empty() {
        let env = Env::new(EnvConfig::table1()).unwrap();
        assert_eq!(env.state().lengths, vec![0, 0, 0]);
        assert_eq!(env.state().epoch, 0);
    }

    #[test]
    fn rejects_more_choices_than_servers() {
        let cfg = EnvConfig {
            choices: 4,
            ..EnvConfig::table1()
        };
        match Env::new(cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "choices"),
            other => panic!("expected config error, got {:?}", other.err()),
        }
    }

    #[test]
    fn rejects_malformed_access_map() {
        let cfg = EnvConfig {
            access_map: Some(vec![vec![0, 0], vec![1, 2], vec![2, 0]]),
            ..EnvConfig::table1()
        };
        assert!(matches!(Env::new(cfg), Err(Error::Config { ref field, .. }) if field == "access_map"));
        let cfg = EnvConfig {
            access_map: Some(vec![vec![0, 3], vec![1, 2], vec![2, 0]]),
            ..EnvConfig::table1()
        };
        assert!(Env::new(cfg).is_err());
        let cfg = EnvConfig {
            buffer: 0,
            ..EnvConfig::table1()
        };
        assert!(matches!(Env::new(cfg), Err(Error::Config { ref field, .. }) if field == "buffer"));
    }

    #[test]
    fn ring_access_map() {
        assert_eq!(default_access_map(3, 3, 2), vec![vec![0, 1], vec![1, 2], vec![2, 0]]);
        assert_eq!(default_access_map(1, 1, 1), vec![vec![0]]);
        assert_eq!(default_access_map(2, 4, 2), vec![vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn arrival_moments_match_poisson() {
        let mut env = Env::new(EnvConfig {
            schedulers: 1,
            servers: 1,
            choices: 1,
            seed: 7,
            ..EnvConfig::table1()
        })
        .unwrap();
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| env.sample_arrivals()[0] as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (0.9f64 / n as f64).sqrt();
        assert!((mean - 0.9).abs() < 3.0 * se, "mean {mean}");
        assert!((var - 0.9).abs() < 0.01, "var {var}");
    }

    #[test]
    fn vanishing_rate_yields_no_arrivals() {
        let mut env = Env::new(EnvConfig {
            arrival_rate: 1e-12,
            ..EnvConfig::table1()
        })
        .unwrap();
        for _ in 0..1000 {
            assert_eq!(env.sample_arrivals(), vec![0, 0, 0]);
        }
    }

    #[test]
    fn degenerate_staleness() {
        let mut env = Env::new(EnvConfig {
            p_stale: 0.0,
            ..EnvConfig::table1()
        })
        .unwrap();
        // epoch 0: zeros regardless
        assert!(env.observe(0).unwrap().lengths().iter().all(|&l| l == 0));
        let actions = uniform(&env);
        for _ in 0..20 {
            env.step(&actions).unwrap();
            let truth = env.true_accessible(1);
            assert_eq!(env.observe(1).unwrap().lengths(), truth);
        }

        let mut env = Env::new(EnvConfig {
            p_stale: 1.0,
            ..EnvConfig::table1()
        })
        .unwrap();
        let actions = uniform(&env);
        for _ in 0..20 {
            env.step(&actions).unwrap();
            let prev: Vec<usize> = env.access_map()[2]
                .iter()
                .map(|&q| env.state().prev_lengths[q])
                .collect();
            assert_eq!(env.observe(2).unwrap().lengths(), prev);
        }
    }

    #[test]
    fn observe_rejects_unknown_scheduler() {
        let mut env = Env::new(EnvConfig::table1()).unwrap();
        assert!(matches!(env.observe(3), Err(Error::UnknownScheduler { id: 3, count: 3 })));
    }

    #[test]
    fn drop_rule_arithmetic() {
        // one scheduler, one queue at 4, three jobs arriving, B = 5
        let mut env = Env::new(EnvConfig {
            schedulers: 1,
            servers: 1,
            choices: 1,
            service_rate: 1e-12,
            ..EnvConfig::table1()
        })
        .unwrap();
        env.set_lengths(&[4]).unwrap();
        env.pending = vec![3];
        let out = env.step(&[AllocationAction::from_fractions(0, vec![1.0])]).unwrap();
        assert_eq!(out.drops, vec![2]);
        assert_eq!(out.reward, -2.0);
        assert_eq!(env.state().lengths, vec![5]);
    }

    #[test]
    fn empty_queue_without_arrivals_stays_empty() {
        let mut env = Env::new(EnvConfig {
            arrival_rate: 0.0,
            ..EnvConfig::table1()
        })
        .unwrap();
        let actions = uniform(&env);
        let out = env.step(&actions).unwrap();
        assert_eq!(out.departures, vec![0, 0, 0]);
        assert_eq!(env.state().lengths, vec![0, 0, 0]);
    }

    #[test]
    fn malformed_actions_are_rejected() {
        let mut env = Env::new(EnvConfig::table1()).unwrap();
        let mut actions = uniform(&env);
        actions.pop();
        assert!(matches!(env.step(&actions), Err(Error::Contract(_))));
        let mut actions = uniform(&env);
        actions[1].fractions = vec![0.7, 0.7];
        assert!(matches!(env.step(&actions), Err(Error::Contract(_))));
    }

    #[test]
    fn multinomial_split_is_close_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000u64;
        let split = multinomial(&mut rng, n, &[0.5, 0.5]);
        assert_eq!(split.iter().sum::<u64>(), n);
        let sd = (n as f64 * 0.25).sqrt();
        assert!((split[0] as f64 - n as f64 / 2.0).abs() < 3.0 * sd);
    }
}
