//! Proximal policy optimization of the shared agent with an adaptive KL
//! penalty, plus policy evaluation.

mod loss;
mod rollout;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{compute_advantages, gae, minibatch_loss, LossTerms};
pub use rollout::{derive_seed, simulate, Driver, EpisodeStats, Trajectory};

use crate::atvc::{AtvcModel, CommTopology, Fusion, ModelConfig};
use crate::baselines::PolicyKind;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Adam, Graph, Tensor};

pub const METRICS_HEADER: &str = "iteration,mean_reward,drop_rate,comm_ratio,policy_loss,value_loss,vae_loss,kl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Environment steps collected per iteration.
    pub train_batch_size: usize,
    /// Scheduler rows per gradient step.
    pub minibatch_size: usize,
    pub epochs_per_batch: usize,
    pub lr: f64,
    /// Below one on purpose: undiscounted returns over a 100-step episode
    /// bury the effect of a single allocation under arrival noise.
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip_param: f64,
    pub vf_clip_param: f64,
    pub vf_loss_coeff: f64,
    pub kl_coeff: f64,
    pub kl_target: f64,
    pub vae_coeff: f64,
    /// Weight of the prior KL inside the VAE loss. At one the latent
    /// collapses onto the prior and carries almost no queue information.
    pub beta_kl: f64,
    pub entropy_coeff: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            train_batch_size: 4000,
            minibatch_size: 128,
            epochs_per_batch: 8,
            lr: 5e-5,
            discount: 0.5,
            gae_lambda: 1.0,
            clip_param: 0.3,
            vf_clip_param: 10.0,
            vf_loss_coeff: 0.5,
            kl_coeff: 0.2,
            kl_target: 0.01,
            vae_coeff: 0.1,
            beta_kl: 0.01,
            entropy_coeff: 0.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ppo.train_batch_size", self.train_batch_size),
            ("ppo.minibatch_size", self.minibatch_size),
            ("ppo.epochs_per_batch", self.epochs_per_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("ppo.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::config("ppo.discount", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("ppo.gae_lambda", "must lie in [0, 1]"));
        }
        if !(self.clip_param > 0.0 && self.clip_param < 1.0) {
            return Err(Error::config("ppo.clip_param", "must lie in (0, 1)"));
        }
        let non_negative = [
            ("ppo.vf_clip_param", self.vf_clip_param),
            ("ppo.vf_loss_coeff", self.vf_loss_coeff),
            ("ppo.kl_coeff", self.kl_coeff),
            ("ppo.kl_target", self.kl_target),
            ("ppo.vae_coeff", self.vae_coeff),
            ("ppo.beta_kl", self.beta_kl),
            ("ppo.entropy_coeff", self.entropy_coeff),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub drop_rate: f64,
    pub comm_ratio: f64,
    pub losses: LossTerms,
    pub kl_coeff: f64,
}

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_reward,
            self.drop_rate,
            self.comm_ratio,
            self.losses.policy,
            self.losses.value,
            self.losses.vae,
            self.losses.kl
        )
    }
}

/// Training state: shared model, optimizer moments, KL coefficient.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: AtvcModel,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub topology: CommTopology,
    pub kl_coeff: f64,
    /// Completed iterations.
    pub iteration: usize,
    pub seed: u64,
}

impl Trainer {
    pub fn new(env: EnvConfig, ppo: PpoConfig, mut model: ModelConfig, seed: u64) -> Result<Self> {
        env.validate()?;
        ppo.validate()?;
        model.choices = env.choices;
        model.buffer = env.buffer;
        model.seed = derive_seed(seed, &[0x6d6f_6465_6c]);
        let model = AtvcModel::new(model)?;
        let topology = CommTopology::new(&env.resolved_access_map());
        Ok(Trainer {
            model,
            kl_coeff: ppo.kl_coeff,
            env,
            ppo,
            topology,
            iteration: 0,
            seed,
        })
    }

    fn episodes_per_iteration(&self) -> usize {
        self.ppo.train_batch_size.div_ceil(self.env.episode_len)
    }

    /// Rollouts of the current policy for the next iteration, with
    /// advantages filled in.
    pub fn collect(&self) -> Result<(EpisodeStats, Trajectory)> {
        let driver = Driver::Learned {
            model: &self.model,
            fusion: Fusion::Soft,
            deterministic: false,
        };
        let seed = derive_seed(self.seed, &[self.iteration as u64, 1]);
        let (stats, traj) = simulate(driver, &self.env, self.episodes_per_iteration(), seed, true)?;
        let mut traj = traj.expect("recorded");
        compute_advantages(&mut traj, self.ppo.discount, self.ppo.gae_lambda);
        Ok((stats, traj))
    }

    /// Minibatch epochs over `traj`; returns the mean loss terms of the
    /// final epoch.
    pub fn update(&mut self, traj: &Trajectory) -> Result<LossTerms> {
        let opt = Adam::new(self.ppo.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.iteration as u64, 2]));
        let mut order: Vec<usize> = (0..traj.rows()).collect();
        let mut g = Graph::new();
        let mut last = LossTerms::default();
        let mut epoch_kl = 0.0;
        for _ in 0..self.ppo.epochs_per_batch {
            order.shuffle(&mut rng);
            let mut epoch = LossTerms::default();
            for chunk in order.chunks(self.ppo.minibatch_size) {
                g.clear();
                let (loss, terms) =
                    minibatch_loss(&mut g, &self.model, &self.topology, traj, chunk, self.kl_coeff, &self.ppo)?;
                if !terms.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at iteration {}: {terms:?}",
                        self.iteration
                    )));
                }
                g.backward(loss, &mut self.model.params)?;
                self.model.params.adam_step(&opt);
                epoch.add_scaled(&terms, chunk.len() as f64 / order.len() as f64);
            }
            epoch_kl = epoch.kl;
            last = epoch;
        }
        if epoch_kl > 2.0 * self.ppo.kl_target {
            self.kl_coeff *= 2.0;
        } else if epoch_kl < 0.5 * self.ppo.kl_target {
            self.kl_coeff *= 0.5;
        }
        if self.model.params.ids().any(|id| !self.model.params.value(id).is_finite()) {
            return Err(Error::Numeric(format!("parameters diverged at iteration {}", self.iteration)));
        }
        Ok(last)
    }

    /// Collect, update, advance the iteration counter.
    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let (stats, traj) = self.collect()?;
        let losses = self.update(&traj)?;
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: self.iteration,
            mean_reward: stats.mean_reward(),
            drop_rate: stats.drop_rate(),
            comm_ratio: stats.comm_ratio(),
            losses,
            kl_coeff: self.kl_coeff,
        })
    }

    /// Model, optimizer and trainer state.
    pub fn to_arrays(&self) -> Vec<(String, Tensor)> {
        let mut arrays = self.model.to_arrays(true);
        arrays.push(("trainer.iteration".into(), Tensor::scalar(self.iteration as f64)));
        arrays.push(("trainer.kl_coeff".into(), Tensor::scalar(self.kl_coeff)));
        arrays
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_arrays())
    }

    /// Restores a trainer saved with [`Trainer::save`]; continuing it
    /// reproduces an uninterrupted run.
    pub fn resume(path: &Path, env: EnvConfig, ppo: PpoConfig, seed: u64) -> Result<Self> {
        let arrays = checkpoint::load(path)?;
        let model = AtvcModel::from_arrays(&arrays)?;
        if model.config.choices != env.choices || model.config.buffer != env.buffer {
            return Err(Error::Compatibility(format!(
                "checkpoint built for d={} B={}, config has d={} B={}",
                model.config.choices, model.config.buffer, env.choices, env.buffer
            )));
        }
        let scalar = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.item())
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks {name}")))
        };
        let iteration = scalar("trainer.iteration")? as usize;
        let kl_coeff = scalar("trainer.kl_coeff")?;
        env.validate()?;
        ppo.validate()?;
        let topology = CommTopology::new(&env.resolved_access_map());
        Ok(Trainer {
            model,
            env,
            ppo,
            topology,
            kl_coeff,
            iteration,
            seed,
        })
    }
}

/// Where training writes its outputs.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

impl TrainOutput {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutput {
            metrics: dir.join("metrics.csv"),
            checkpoints: dir.join("checkpoints"),
        }
    }
}

/// Runs iterations until `iterations` are complete, appending one metrics
/// row per iteration and saving a checkpoint every `checkpoint_every`
/// iterations (0 disables) plus `last.ckpt` and `model.ckpt` at the end.
/// `on_iteration` sees every row as it is produced.
pub fn train(
    trainer: &mut Trainer,
    iterations: usize,
    checkpoint_every: usize,
    out: Option<&TrainOutput>,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<Vec<IterationMetrics>> {
    let mut csv = match out {
        Some(out) => {
            fs::create_dir_all(&out.checkpoints)?;
            let fresh = trainer.iteration == 0 || !out.metrics.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&out.metrics)?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{METRICS_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };
    let mut history = Vec::new();
    while trainer.iteration < iterations {
        let metrics = trainer.iterate()?;
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", metrics.csv_row())?;
            w.flush()?;
        }
        if let Some(out) = out {
            if checkpoint_every > 0 && trainer.iteration % checkpoint_every == 0 {
                trainer.save(&out.checkpoints.join(format!("iter_{:05}.ckpt", trainer.iteration)))?;
            }
        }
        on_iteration(&metrics);
        history.push(metrics);
    }
    if let Some(out) = out {
        trainer.save(&out.checkpoints.join("last.ckpt"))?;
        trainer.model.save(&out.checkpoints.join("model.ckpt"))?;
    }
    Ok(history)
}

/// Execution-time performance of a policy over `episodes` episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: PolicyKind,
    pub mean_reward: f64,
    pub reward_std_error: f64,
    pub drop_rate: f64,
    pub comm_ratio: f64,
    pub stats: EpisodeStats,
}

pub fn evaluate(
    kind: PolicyKind,
    model: Option<&AtvcModel>,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<EvalReport> {
    let driver = Driver::for_policy(kind, model, deterministic)?;
    let (stats, _) = simulate(driver, env, episodes, seed, false)?;
    Ok(EvalReport {
        policy: kind,
        mean_reward: stats.mean_reward(),
        reward_std_error: stats.reward_std_error(),
        drop_rate: stats.drop_rate(),
        comm_ratio: stats.comm_ratio(),
        stats,
    })
}

/// Fraction of accessible-queue lengths the decoder recovers (argmax of
/// the logits decoded from the fused belief mean, thresholded fusion).
pub fn decoder_accuracy(model: &AtvcModel, env: &EnvConfig, episodes: usize, seed: u64) -> Result<f64> {
    let driver = Driver::Learned {
        model,
        fusion: Fusion::Soft,
        deterministic: true,
    };
    let (_, traj) = simulate(driver, env, episodes, seed, true)?;
    let traj = traj.expect("recorded");
    let topology = CommTopology::new(&env.resolved_access_map());
    let b1 = model.config.buffer + 1;
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in traj.observed.chunks(512).enumerate() {
        let (k, frames) = chunk;
        let batch = model.pair_batch(&topology, frames)?;
        let mut g = Graph::new();
        let execute = Fusion::Execute(crate::baselines::Selection::Threshold);
        let (vars, _, _) = model.forward_batch(&mut g, &batch, execute, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        let logits = model.decode_graph(&mut g, vars.fused_mu)?;
        let logits = g.value(logits);
        for r in 0..batch.owners {
            let (f, i) = (k * 512 + r / traj.schedulers, r % traj.schedulers);
            for (q, &len) in traj.truth[f][i].iter().enumerate() {
                let block = &logits.row_slice(r)[q * b1..(q + 1) * b1];
                let argmax = block
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                hits += usize::from(argmax == len);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Writes `rows` under `header` as CSV.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}
