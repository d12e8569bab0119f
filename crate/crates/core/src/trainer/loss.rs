//! PPO objective terms on the autodiff tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rollout::Trajectory;
use super::PpoConfig;
use crate::atvc::{AtvcModel, CommTopology, Fusion};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Generalized advantage estimates and value targets of one episode.
pub fn gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + discount * next - values[t];
        running = delta + discount * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Fills advantages (normalized over the whole batch) and value targets.
pub fn compute_advantages(traj: &mut Trajectory, discount: f64, lambda: f64) {
    let (m, t_max) = (traj.schedulers, traj.episode_len);
    let rows = traj.rows();
    traj.advantages = vec![0.0; rows];
    traj.returns = vec![0.0; rows];
    for e in 0..traj.episodes {
        let frames = e * t_max..(e + 1) * t_max;
        let rewards = &traj.rewards[frames.clone()];
        for i in 0..m {
            let values: Vec<f64> = frames.clone().map(|f| traj.values[f * m + i]).collect();
            let (adv, ret) = gae(rewards, &values, discount, lambda);
            for (k, f) in frames.clone().enumerate() {
                traj.advantages[f * m + i] = adv[k];
                traj.returns[f * m + i] = ret[k];
            }
        }
    }
    let mean = crate::math::mean(&traj.advantages);
    let var = traj.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / rows.max(1) as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for a in &mut traj.advantages {
        *a = (*a - mean) * scale;
    }
}

/// Scalar values of the loss terms of one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub policy: f64,
    pub kl: f64,
    pub value: f64,
    pub vae: f64,
    pub entropy: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.total, self.policy, self.kl, self.value, self.vae, self.entropy]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossTerms, w: f64) {
        self.total += w * other.total;
        self.policy += w * other.policy;
        self.kl += w * other.kl;
        self.value += w * other.value;
        self.vae += w * other.vae;
        self.entropy += w * other.entropy;
    }
}

fn gather(src: &[f64], rows: &[usize], width: usize) -> Result<Tensor> {
    let data = rows
        .iter()
        .flat_map(|&r| src[r * width..(r + 1) * width].iter().copied())
        .collect();
    Tensor::new(rows.len(), width, data)
}

/// Full objective on the trajectory rows `rows`, recomputing the latent
/// with the stored noise so gradients reach encoder and attention.
pub fn minibatch_loss(
    g: &mut Graph,
    model: &AtvcModel,
    topology: &CommTopology,
    traj: &Trajectory,
    rows: &[usize],
    kl_coeff: f64,
    cfg: &PpoConfig,
) -> Result<(Var, LossTerms)> {
    if traj.advantages.len() != traj.rows() {
        return Err(Error::Contract("advantages have not been computed".into()));
    }
    let d = traj.choices;
    let l = traj.latent_dim;
    let buffer = model.config.buffer;
    let n = rows.len();
    let owners: Vec<(usize, usize)> = rows.iter().map(|&r| traj.locate(r)).collect();
    let batch = model.pair_batch_for(topology, &traj.observed, &owners)?;
    let noise = gather(&traj.noise, rows, l)?;
    let (vars, _, _) = model.forward_batch(g, &batch, Fusion::Soft, Some(noise), &mut ChaCha8Rng::seed_from_u64(0))?;

    // policy surrogate
    let mean = model.policy_mean_graph(g, vars.z)?;
    let log_std = model.log_std_graph(g);
    let actions = g.constant(gather(&traj.actions, rows, d)?);
    let diff = g.sub(actions, mean)?;
    let neg_log_std = g.neg(log_std);
    let inv_std = g.exp(neg_log_std);
    let scaled = g.mul(diff, inv_std)?;
    let sq = g.square(scaled);
    let half = g.scale(sq, -0.5);
    let per_dim = g.sub(half, log_std)?;
    let per_dim = g.add_scalar(per_dim, -0.5 * LOG_2PI);
    let log_prob = g.sum_cols(per_dim);
    let old_log_prob = g.constant(gather(&traj.log_probs, rows, 1)?);
    let log_ratio = g.sub(log_prob, old_log_prob)?;
    let ratio = g.exp(log_ratio);
    let adv = g.constant(gather(&traj.advantages, rows, 1)?);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_param, 1.0 + cfg.clip_param);
    let s2 = g.mul(clipped, adv)?;
    let surrogate = g.minimum(s1, s2)?;
    let surrogate = g.mean(surrogate);
    let policy = g.neg(surrogate);

    // KL(old || new) between diagonal Gaussians
    let old_mean = g.constant(gather(&traj.old_mean, rows, d)?);
    let old_log_std = g.constant(Tensor::row(&traj.old_log_std));
    let mean_gap = g.sub(old_mean, mean)?;
    let mean_gap = g.square(mean_gap);
    let old_var = g.scale(old_log_std, 2.0);
    let old_var = g.exp(old_var);
    let num = g.add(mean_gap, old_var)?;
    let two_log_std = g.scale(log_std, 2.0);
    let new_var = g.exp(two_log_std);
    let new_var2 = g.scale(new_var, 2.0);
    let frac = g.div(num, new_var2)?;
    let log_gap = g.sub(log_std, old_log_std)?;
    let kl = g.add(frac, log_gap)?;
    let kl = g.add_scalar(kl, -0.5);
    let kl = g.sum_cols(kl);
    let kl = g.mean(kl);

    // clipped value loss
    let value = model.value_graph(g, vars.z)?;
    let targets = g.constant(gather(&traj.returns, rows, 1)?);
    let old_value = g.constant(gather(&traj.values, rows, 1)?);
    let err = g.sub(value, targets)?;
    let v1 = g.square(err);
    let step = g.sub(value, old_value)?;
    let step = g.clamp(step, -cfg.vf_clip_param, cfg.vf_clip_param);
    let v_clipped = g.add(old_value, step)?;
    let err2 = g.sub(v_clipped, targets)?;
    let v2 = g.square(err2);
    let vloss = g.maximum(v1, v2)?;
    let vloss = g.mean(vloss);

    // decoder cross-entropy plus KL of the fused belief to the prior
    let logits = model.decode_graph(g, vars.z)?;
    let logits = g.reshape(logits, n * d, buffer + 1)?;
    let logp = g.log_softmax_rows(logits);
    let mut onehot = Tensor::zeros(n * d, buffer + 1);
    for (k, &(f, i)) in owners.iter().enumerate() {
        for (q, &len) in traj.truth[f][i].iter().enumerate() {
            onehot.data_mut()[(k * d + q) * (buffer + 1) + len] = 1.0;
        }
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(logp, onehot)?;
    let ce = g.sum(picked);
    let ce = g.scale(ce, -1.0 / n as f64);
    let mu_sq = g.square(vars.fused_mu);
    let log_var = g.log(vars.fused_var);
    let prior_kl = g.add(vars.fused_var, mu_sq)?;
    let prior_kl = g.sub(prior_kl, log_var)?;
    let prior_kl = g.add_scalar(prior_kl, -1.0);
    let prior_kl = g.sum(prior_kl);
    let prior_kl = g.scale(prior_kl, 0.5 / n as f64);
    let prior_kl_w = g.scale(prior_kl, cfg.beta_kl);
    let vae = g.add(ce, prior_kl_w)?;

    let entropy = g.sum(log_std);
    let entropy = g.add_scalar(entropy, d as f64 * 0.5 * (1.0 + LOG_2PI));

    let kl_term = g.scale(kl, kl_coeff);
    let v_term = g.scale(vloss, cfg.vf_loss_coeff);
    let vae_term = g.scale(vae, cfg.vae_coeff);
    let ent_term = g.scale(entropy, -cfg.entropy_coeff);
    let mut total = g.add(policy, kl_term)?;
    for t in [v_term, vae_term, ent_term] {
        total = g.add(total, t)?;
    }
    let terms = LossTerms {
        total: g.value(total).item(),
        policy: g.value(policy).item(),
        kl: g.value(kl).item(),
        value: g.value(vloss).item(),
        vae: g.value(vae).item(),
        entropy: g.value(entropy).item(),
    };
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undiscounted_unit_lambda_gives_returns_to_go() {
        let (adv, ret) = gae(&[-1.0, 0.0, -2.0], &[0.5, 0.25, -1.0], 1.0, 1.0);
        assert_eq!(ret, vec![-3.0, -2.0, -2.0]);
        assert_eq!(adv, vec![-3.5, -2.25, -1.0]);
    }

    #[test]
    fn zero_lambda_is_one_step_td() {
        let (adv, _) = gae(&[1.0, 1.0], &[0.5, 2.0], 0.9, 0.0);
        assert!((adv[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-12);
        assert!((adv[1] - (1.0 - 2.0)).abs() < 1e-12);
    }
}
