//! The communicating agent: an encoder that turns observations into
//! diagonal-Gaussian messages, an attention scorer that weighs the messages
//! of a scheduler's communication group, a weighted product-of-experts that
//! fuses them with a standard-normal prior, and action / value / decoder
//! heads fed by a latent sampled from the fused belief.
//!
//! Message variances are stored as variances: a message `N(mu, var)` has
//! precision `1 / var` per dimension.
//!
//! Messages are written in the receiver's frame: when scheduler `j` talks to
//! scheduler `i`, it encodes its readings of `i`'s accessible queues, slot by
//! slot in `i`'s access order, marking queues it cannot see as unknown. A
//! scheduler's message to itself is its plain observation.

use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::Selection;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Graph, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

pub const VAR_MIN: f64 = 1e-4;
pub const VAR_MAX: f64 = 1e4;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Accessible queues per scheduler. Taken from the environment.
    #[serde(skip)]
    pub choices: usize,
    /// Buffer capacity; observations live in `0..=buffer`. Taken from the
    /// environment.
    #[serde(skip)]
    pub buffer: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub attention_dim: usize,
    /// Execution-time attention threshold.
    pub threshold: f64,
    /// Initial value of the action log-std.
    pub init_log_std: f64,
    /// Weight initialization seed. Derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            choices: 2,
            buffer: 5,
            latent_dim: 16,
            encoder_hidden: vec![64, 64],
            head_hidden: 64,
            attention_dim: 16,
            threshold: 0.3,
            init_log_std: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.choices == 0 {
            return Err(Error::config("model.choices", "must be at least 1"));
        }
        if self.buffer == 0 {
            return Err(Error::config("model.buffer", "must be at least 1"));
        }
        self.validate_layers()
    }

    /// Checks the user-settable fields only.
    pub fn validate_layers(&self) -> Result<()> {
        if self.latent_dim == 0 || self.attention_dim == 0 || self.head_hidden == 0 {
            return Err(Error::config("model", "layer sizes must be positive"));
        }
        if self.encoder_hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("model.encoder_hidden", "layer sizes must be positive"));
        }
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return Err(Error::config("model.threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// One-hot width per queue slot: lengths `0..=B` plus "unknown".
    pub fn slot_width(&self) -> usize {
        self.buffer + 2
    }

    pub fn input_dim(&self) -> usize {
        self.choices * self.slot_width()
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMessage {
    pub sender_id: usize,
    pub mu: Vec<f64>,
    /// Per-dimension variance.
    pub sigma: Vec<f64>,
}

impl GaussianMessage {
    /// `sender_id u32 | L u32 | mu (L x f64) | sigma (L x f64)`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 * self.mu.len());
        out.extend_from_slice(&(self.sender_id as u32).to_le_bytes());
        out.extend_from_slice(&(self.mu.len() as u32).to_le_bytes());
        for v in self.mu.iter().chain(&self.sigma) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut head = [0u8; 8];
        bytes.read_exact(&mut head)?;
        let sender_id = u32::from_le_bytes(head[..4].try_into().expect("4 bytes")) as usize;
        let len = u32::from_le_bytes(head[4..].try_into().expect("4 bytes")) as usize;
        let mu = checkpoint::read_f64s(&mut bytes, len)?;
        let sigma = checkpoint::read_f64s(&mut bytes, len)?;
        if !bytes.is_empty() {
            return Err(Error::Format("trailing bytes after message".into()));
        }
        Ok(GaussianMessage { sender_id, mu, sigma })
    }
}

/// Schedulers that share at least one accessible queue with `owner`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGroup {
    pub owner_id: usize,
    /// Sorted, includes the owner.
    pub candidate_ids: Vec<usize>,
}

/// One directed message slot: what `sender` tells `owner`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub owner: usize,
    pub sender: usize,
    /// For each of the owner's queue slots, the sender's slot reading the
    /// same queue, if any.
    pub slots: Vec<Option<usize>>,
}

/// Communication structure derived from an access map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommTopology {
    pub groups: Vec<CommGroup>,
    /// Grouped by owner, owners ascending, candidates ascending.
    pub pairs: Vec<Pair>,
    /// Index into `pairs` of each owner's message to itself.
    pub own_pair: Vec<usize>,
}

impl CommTopology {
    pub fn new(access_map: &[Vec<usize>]) -> Self {
        let mut groups = Vec::new();
        let mut pairs = Vec::new();
        let mut own_pair = Vec::new();
        for (owner, mine) in access_map.iter().enumerate() {
            let candidate_ids: Vec<usize> = access_map
                .iter()
                .enumerate()
                .filter(|(_, theirs)| theirs.iter().any(|q| mine.contains(q)))
                .map(|(j, _)| j)
                .collect();
            for &sender in &candidate_ids {
                if sender == owner {
                    own_pair.push(pairs.len());
                }
                let slots = mine
                    .iter()
                    .map(|q| access_map[sender].iter().position(|s| s == q))
                    .collect();
                pairs.push(Pair { owner, sender, slots });
            }
            groups.push(CommGroup {
                owner_id: owner,
                candidate_ids,
            });
        }
        CommTopology {
            groups,
            pairs,
            own_pair,
        }
    }

    pub fn schedulers(&self) -> usize {
        self.groups.len()
    }

    /// Indices into `pairs` of the messages `owner` receives.
    pub fn pairs_of(&self, owner: usize) -> std::ops::Range<usize> {
        let start: usize = self.groups[..owner].iter().map(|g| g.candidate_ids.len()).sum();
        start..start + self.groups[owner].candidate_ids.len()
    }
}

/// Fused belief of one scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBelief {
    pub mu: Vec<f64>,
    /// Per-dimension variance.
    pub sigma: Vec<f64>,
    pub selected_mask: Vec<bool>,
    pub alphas: Vec<f64>,
}

/// Keeps messages whose weight exceeds `gamma`; the owner's own message at
/// `owner_pos` is always kept.
pub fn select_messages(alphas: &[f64], gamma: f64, owner_pos: usize) -> Vec<bool> {
    alphas
        .iter()
        .enumerate()
        .map(|(k, &a)| k == owner_pos || a > gamma)
        .collect()
}

/// Weighted product of Gaussian experts on the tape, per segment:
/// precision `sum_i w_i / var_i (+ 1)`, mean `sum_i w_i mu_i / var_i` over
/// that precision. Returns `(mu, var)` with one row per segment.
pub fn weighted_poe_graph(
    g: &mut Graph,
    mu: Var,
    var: Var,
    weights: Var,
    segment: Rc<[usize]>,
    segments: usize,
    include_prior: bool,
) -> Result<(Var, Var)> {
    let precision = g.div(weights, var)?;
    let weighted_mu = g.mul(precision, mu)?;
    let num = g.segment_sum(weighted_mu, segment.clone(), segments)?;
    let mut den = g.segment_sum(precision, segment, segments)?;
    if include_prior {
        den = g.add_scalar(den, 1.0);
    }
    if g.value(den).data().iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Contract("fused precision must be positive".into()));
    }
    let fused_mu = g.div(num, den)?;
    let ones = g.constant(Tensor::scalar(1.0));
    let fused_var = g.div(ones, den)?;
    Ok((fused_mu, fused_var))
}

/// Closed-form weighted product of experts for one scheduler.
pub fn weighted_poe(messages: &[GaussianMessage], alphas: &[f64], include_prior: bool) -> Result<FusedBelief> {
    if messages.len() != alphas.len() {
        return Err(Error::Contract("one weight per message required".into()));
    }
    if alphas.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::Contract("weights must be non-negative".into()));
    }
    let latent = messages.first().map_or(0, |m| m.mu.len());
    if messages.iter().any(|m| m.mu.len() != latent || m.sigma.len() != latent) {
        return Err(Error::Contract("messages disagree on latent size".into()));
    }
    if messages.iter().flat_map(|m| &m.sigma).any(|&s| !(s > 0.0)) {
        return Err(Error::Contract("message variances must be positive".into()));
    }
    if messages.is_empty() && !include_prior {
        return Err(Error::Contract("nothing to fuse".into()));
    }
    let n = messages.len();
    let mut g = Graph::new();
    let mu = g.constant(Tensor::new(n, latent, messages.iter().flat_map(|m| m.mu.clone()).collect())?);
    let var = g.constant(Tensor::new(n, latent, messages.iter().flat_map(|m| m.sigma.clone()).collect())?);
    let w = g.constant(Tensor::col(alphas));
    let (fm, fv) = weighted_poe_graph(&mut g, mu, var, w, vec![0; n].into(), 1, include_prior)?;
    Ok(FusedBelief {
        mu: g.value(fm).data().to_vec(),
        sigma: g.value(fv).data().to_vec(),
        selected_mask: alphas.iter().map(|&a| a > 0.0).collect(),
        alphas: alphas.to_vec(),
    })
}

/// Fuses only the messages selected by the attention threshold, keeping
/// their unnormalized weights.
pub fn threshold_fuse(messages: &[GaussianMessage], alphas: &[f64], gamma: f64, owner_pos: usize) -> Result<FusedBelief> {
    let mask = select_messages(alphas, gamma, owner_pos);
    let weights: Vec<f64> = alphas.iter().zip(&mask).map(|(&a, &k)| if k { a } else { 0.0 }).collect();
    let mut fused = weighted_poe(messages, &weights, true)?;
    fused.selected_mask = mask;
    fused.alphas = alphas.to_vec();
    Ok(fused)
}

/// Sampled continuous action of one scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub raw_logits: Vec<f64>,
    pub fractions: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Diagonal-Gaussian log density.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}

/// Shared network weights of every scheduler.
#[derive(Debug, Clone)]
pub struct AtvcModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Mlp,
    attention_proj: Linear,
    attention_context: ParamId,
    policy: Mlp,
    log_std: ParamId,
    value: Mlp,
    decoder: Mlp,
}

/// Tape handles produced by one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub pair_mu: Var,
    pub pair_var: Var,
    pub alpha: Var,
    pub fused_mu: Var,
    pub fused_var: Var,
    pub z: Var,
}

/// Encoder inputs and segment layout for a batch of owner rows.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub owners: usize,
    pub inputs: Tensor,
    /// Owner row of every pair row.
    pub segment: Rc<[usize]>,
    /// Pair row of each owner row's own message.
    pub own_rows: Vec<usize>,
}

/// How candidate messages are weighted in the fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    /// Attention weights for every candidate (training).
    Soft,
    /// Execution-time selection.
    Execute(Selection),
}

impl AtvcModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let l = config.latent_dim;
        let mut sizes = vec![config.input_dim()];
        sizes.extend(&config.encoder_hidden);
        sizes.push(2 * l);
        let encoder = Mlp::new(&mut params, "encoder", &sizes, 1.0, &mut rng)?;
        let attention_proj = Linear::new(&mut params, "attention.proj", 2 * l, config.attention_dim, 1.0, &mut rng)?;
        let attention_context =
            params.insert_glorot("attention.context", config.attention_dim, 1, 1.0, &mut rng)?;
        let h = config.head_hidden;
        let policy = Mlp::new(&mut params, "policy", &[l, h, config.choices], 0.01, &mut rng)?;
        let log_std = params.insert("policy.log_std", Tensor::full(1, config.choices, config.init_log_std))?;
        let value = Mlp::new(&mut params, "value", &[l, h, 1], 1.0, &mut rng)?;
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            &[l, h, config.choices * (config.buffer + 1)],
            1.0,
            &mut rng,
        )?;
        Ok(AtvcModel {
            config,
            params,
            encoder,
            attention_proj,
            attention_context,
            policy,
            log_std,
            value,
            decoder,
        })
    }

    /// Parameter name prefixes of the five trainable components.
    pub const GROUPS: [&'static str; 5] = ["encoder", "attention", "policy", "value", "decoder"];

    pub fn attention_context(&self) -> ParamId {
        self.attention_context
    }

    pub fn log_std_param(&self) -> ParamId {
        self.log_std
    }

    /// One-hot encoding of a message input: one slot per owner queue,
    /// `None` meaning the sender cannot see that queue.
    pub fn encoder_input(&self, readings: &[Option<usize>], out: &mut Vec<f64>) -> Result<()> {
        if readings.len() != self.config.choices {
            return Err(Error::Contract(format!(
                "expected {} readings, got {}",
                self.config.choices,
                readings.len()
            )));
        }
        let w = self.config.slot_width();
        let start = out.len();
        out.resize(start + readings.len() * w, 0.0);
        for (k, r) in readings.iter().enumerate() {
            let idx = match r {
                Some(l) if *l <= self.config.buffer => *l,
                Some(l) => {
                    return Err(Error::Contract(format!(
                        "observed length {l} exceeds buffer {}",
                        self.config.buffer
                    )))
                }
                None => self.config.buffer + 1,
            };
            out[start + k * w + idx] = 1.0;
        }
        Ok(())
    }

    /// Builds encoder inputs for every scheduler of every frame (joint step).
    /// `observed[f][j]` are scheduler `j`'s readings (access order) at frame `f`.
    pub fn pair_batch(&self, topology: &CommTopology, observed: &[Vec<Vec<usize>>]) -> Result<PairBatch> {
        let m = topology.schedulers();
        let rows: Vec<(usize, usize)> = (0..observed.len()).flat_map(|f| (0..m).map(move |i| (f, i))).collect();
        self.pair_batch_for(topology, observed, &rows)
    }

    /// Encoder inputs for selected `(frame, owner)` rows; owner row `k` of
    /// the batch is `rows[k]`.
    pub fn pair_batch_for(
        &self,
        topology: &CommTopology,
        observed: &[Vec<Vec<usize>>],
        rows: &[(usize, usize)],
    ) -> Result<PairBatch> {
        let m = topology.schedulers();
        let mut inputs = Vec::new();
        let mut segment = Vec::new();
        let mut own_rows = Vec::with_capacity(rows.len());
        let mut readings = Vec::with_capacity(self.config.choices);
        for (k, &(f, owner)) in rows.iter().enumerate() {
            let frame = observed
                .get(f)
                .ok_or_else(|| Error::Contract(format!("frame {f} out of range")))?;
            if frame.len() != m || owner >= m {
                return Err(Error::Contract(format!("frame has {} observations, expected {m}", frame.len())));
            }
            for p in topology.pairs_of(owner) {
                let pair = &topology.pairs[p];
                if p == topology.own_pair[owner] {
                    own_rows.push(segment.len());
                }
                readings.clear();
                readings.extend(pair.slots.iter().map(|s| s.map(|q| frame[pair.sender][q])));
                self.encoder_input(&readings, &mut inputs)?;
                segment.push(k);
            }
        }
        let n = segment.len();
        Ok(PairBatch {
            owners: rows.len(),
            inputs: Tensor::new(n, self.config.input_dim(), inputs)?,
            segment: segment.into(),
            own_rows,
        })
    }

    /// Encoder on the tape: `[n, input] -> (mu [n, L], var [n, L])`.
    pub fn encode_graph(&self, g: &mut Graph, inputs: Var) -> Result<(Var, Var)> {
        let l = self.config.latent_dim;
        let out = self.encoder.forward(g, &self.params, inputs)?;
        let mu = g.slice_cols(out, 0, l)?;
        let raw = g.slice_cols(out, l, 2 * l)?;
        let var = g.exp(raw);
        let var = g.clamp(var, VAR_MIN, VAR_MAX);
        Ok((mu, var))
    }

    /// Attention logits `u_i . u_g` with `u_i = tanh(W [mu_i, var_i] + b)`.
    pub fn attention_scores(&self, g: &mut Graph, mu: Var, var: Var) -> Result<Var> {
        let cat = g.concat_cols(&[mu, var])?;
        let u = self.attention_proj.forward(g, &self.params, cat)?;
        let u = g.tanh(u);
        let ctx = g.param(&self.params, self.attention_context);
        g.matmul(u, ctx)
    }

    pub fn attention_graph(&self, g: &mut Graph, mu: Var, var: Var, segment: Rc<[usize]>, segments: usize) -> Result<Var> {
        let scores = self.attention_scores(g, mu, var)?;
        g.segment_softmax(scores, segment, segments)
    }

    pub fn policy_mean_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.policy.forward(g, &self.params, z)
    }

    pub fn log_std_graph(&self, g: &mut Graph) -> Var {
        g.param(&self.params, self.log_std)
    }

    pub fn value_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.value.forward(g, &self.params, z)
    }

    /// Decoder logits `[n, d * (B + 1)]`, one block of `B + 1` per queue.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.decoder.forward(g, &self.params, z)
    }

    /// Encoder, attention, fusion and the latent sample for a batch.
    /// `noise` supplies the reparameterization noise; otherwise it is drawn.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &PairBatch,
        fusion: Fusion,
        noise: Option<Tensor>,
        rng: &mut R,
    ) -> Result<(ForwardVars, Tensor, Vec<bool>)> {
        let inputs = g.constant(batch.inputs.clone());
        let (pair_mu, pair_var) = self.encode_graph(g, inputs)?;
        let owners = batch.owners;
        let alpha = self.attention_graph(g, pair_mu, pair_var, batch.segment.clone(), owners)?;
        let (weights, mask) = match fusion {
            Fusion::Soft => (alpha, vec![true; batch.segment.len()]),
            Fusion::Execute(sel) => {
                let mask = self.execution_mask(g.value(alpha).data(), batch, sel);
                let alphas = g.value(alpha).data();
                let w: Vec<f64> = match sel {
                    Selection::OwnOnly => mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                    _ => alphas.iter().zip(&mask).map(|(&a, &k)| if k { a } else { 0.0 }).collect(),
                };
                (g.constant(Tensor::col(&w)), mask)
            }
        };
        let (fused_mu, fused_var) =
            weighted_poe_graph(g, pair_mu, pair_var, weights, batch.segment.clone(), owners, true)?;
        let std = g.sqrt(fused_var);
        let (z, eps) = match noise {
            Some(eps) => (g.reparam_with_noise(fused_mu, std, eps.clone())?, eps),
            None => g.reparam_sample(fused_mu, std, rng)?,
        };
        Ok((
            ForwardVars {
                pair_mu,
                pair_var,
                alpha,
                fused_mu,
                fused_var,
                z,
            },
            eps,
            mask,
        ))
    }

    fn execution_mask(&self, alphas: &[f64], batch: &PairBatch, sel: Selection) -> Vec<bool> {
        let mut own = vec![false; alphas.len()];
        for &r in &batch.own_rows {
            own[r] = true;
        }
        match sel {
            Selection::All => vec![true; alphas.len()],
            Selection::OwnOnly => own,
            Selection::Threshold => alphas
                .iter()
                .zip(&own)
                .map(|(&a, &o)| o || a > self.config.threshold)
                .collect(),
        }
    }

    /// Samples raw logits from the action head for every row of `z`.
    pub fn sample_actions<R: Rng + ?Sized>(&self, g: &mut Graph, z: Var, rng: &mut R) -> Result<Vec<ActionSample>> {
        let mean = self.policy_mean_graph(g, z)?;
        let log_std = self.params.value(self.log_std).data().to_vec();
        let mean = g.value(mean);
        let d = self.config.choices;
        Ok((0..mean.rows())
            .map(|r| {
                let m = mean.row_slice(r).to_vec();
                let raw: Vec<f64> = m
                    .iter()
                    .zip(&log_std)
                    .map(|(mu, ls)| mu + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let log_prob = gaussian_log_density(&raw, &m, &log_std);
                debug_assert_eq!(raw.len(), d);
                ActionSample {
                    fractions: crate::math::softmax(&raw),
                    raw_logits: raw,
                    log_prob,
                    mean: m,
                    log_std: log_std.clone(),
                }
            })
            .collect())
    }

    /// Message a scheduler emits about its own accessible queues.
    pub fn encode(&self, observation: &Observation) -> Result<GaussianMessage> {
        let readings: Vec<Option<usize>> = observation.entries.iter().map(|&(_, l)| Some(l)).collect();
        let mut input = Vec::new();
        self.encoder_input(&readings, &mut input)?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(1, self.config.input_dim(), input)?);
        let (mu, var) = self.encode_graph(&mut g, x)?;
        Ok(GaussianMessage {
            sender_id: observation.scheduler_id,
            mu: g.value(mu).data().to_vec(),
            sigma: g.value(var).data().to_vec(),
        })
    }

    /// Attention weights over one communication group.
    pub fn attention_weights(&self, messages: &[GaussianMessage]) -> Result<Vec<f64>> {
        if messages.is_empty() {
            return Err(Error::Contract("attention needs at least one message".into()));
        }
        let n = messages.len();
        let l = self.config.latent_dim;
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(n, l, messages.iter().flat_map(|m| m.mu.clone()).collect())?);
        let var = g.constant(Tensor::new(n, l, messages.iter().flat_map(|m| m.sigma.clone()).collect())?);
        let alpha = self.attention_graph(&mut g, mu, var, vec![0; n].into(), 1)?;
        Ok(g.value(alpha).data().to_vec())
    }

    pub fn act<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<ActionSample> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z));
        Ok(self.sample_actions(&mut g, zv, rng)?.remove(0))
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z));
        let v = self.value_graph(&mut g, zv)?;
        Ok(g.value(v).item())
    }

    /// Per-queue logits over lengths `0..=B`, one vector per accessible queue.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z));
        let logits = self.decode_graph(&mut g, zv)?;
        Ok(g.value(logits)
            .data()
            .chunks(self.config.buffer + 1)
            .map(<[f64]>::to_vec)
            .collect())
    }

    fn meta_arrays(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let hidden: Vec<f64> = c.encoder_hidden.iter().map(|&h| h as f64).collect();
        vec![
            ("meta.choices".into(), Tensor::scalar(c.choices as f64)),
            ("meta.buffer".into(), Tensor::scalar(c.buffer as f64)),
            ("meta.latent_dim".into(), Tensor::scalar(c.latent_dim as f64)),
            ("meta.encoder_hidden".into(), Tensor::row(&hidden)),
            ("meta.head_hidden".into(), Tensor::scalar(c.head_hidden as f64)),
            ("meta.attention_dim".into(), Tensor::scalar(c.attention_dim as f64)),
            ("meta.threshold".into(), Tensor::scalar(c.threshold)),
            ("meta.init_log_std".into(), Tensor::scalar(c.init_log_std)),
            // two exact halves; an f64 cannot hold every u64
            ("meta.seed".into(), Tensor::row(&[(c.seed >> 32) as f64, (c.seed & 0xffff_ffff) as f64])),
        ]
    }

    /// Model metadata, parameters and (optionally) extra named arrays.
    pub fn to_arrays(&self, with_optimizer: bool) -> Vec<(String, Tensor)> {
        let mut arrays = self.meta_arrays();
        arrays.extend(self.params.to_arrays(with_optimizer));
        arrays
    }

    pub fn from_arrays(arrays: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks {name}")))
        };
        let scalar = |name: &str| -> Result<f64> { Ok(get(name)?.item()) };
        let config = ModelConfig {
            choices: scalar("meta.choices")? as usize,
            buffer: scalar("meta.buffer")? as usize,
            latent_dim: scalar("meta.latent_dim")? as usize,
            encoder_hidden: get("meta.encoder_hidden")?.data().iter().map(|&h| h as usize).collect(),
            head_hidden: scalar("meta.head_hidden")? as usize,
            attention_dim: scalar("meta.attention_dim")? as usize,
            threshold: scalar("meta.threshold")?,
            init_log_std: scalar("meta.init_log_std")?,
            seed: match get("meta.seed")?.data() {
                &[hi, lo] => ((hi as u64) << 32) | lo as u64,
                _ => return Err(Error::Compatibility("meta.seed must hold two halves".into())),
            },
        };
        let mut model = AtvcModel::new(config)?;
        model.params.load_arrays(arrays)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_arrays(false))
    }

    pub fn load(path: &Path) -> Result<Self> {
        AtvcModel::from_arrays(&checkpoint::load(path)?)
    }
}
